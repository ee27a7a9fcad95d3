pub mod rdcss_model;
pub mod history;
pub mod linearizability;
pub mod monitors;
pub mod workload;
pub mod report;
pub mod gate;
pub mod inspect;
pub mod suite;
