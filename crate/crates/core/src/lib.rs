pub mod certify;
pub mod engine;
pub mod graph;
pub mod harness;
pub mod linalg;
pub mod objectives;
pub mod resilience;
