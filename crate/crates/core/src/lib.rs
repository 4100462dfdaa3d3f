pub mod euler;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod par;
pub mod rewards;
pub mod rng;
pub mod surrogate;
pub mod ttc;
