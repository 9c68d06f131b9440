//! Simulator of a cache-footprint-aware scheduler that uses compiler-placed
//! loop beacons to predict each process's cache misses and to detect co-resident
//! cache attacks from counter deviations.

pub mod beacon;
pub mod harness;
pub mod machine;
pub mod model;
pub mod scheduler;
pub mod workload;
