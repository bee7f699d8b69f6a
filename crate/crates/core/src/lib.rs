pub mod alarms;
pub mod apps;
pub mod bus;
pub mod devices;
pub mod logger;
pub mod metrics;
pub mod patient;
pub mod scenario;
pub mod serve;
pub mod sim;
pub mod supervisor;
