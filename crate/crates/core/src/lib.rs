pub mod corpus;
pub mod evalkit;
pub mod mixture;
pub mod model;
pub mod nnkernel;
pub mod run;
pub mod tasksynth;
