pub mod bridge;
pub mod capability;
pub mod episode;
pub mod policy;
pub mod query;
pub mod report;
pub mod rng;
pub mod sim;
pub mod storage;
pub mod stress;
pub mod taskgen;
