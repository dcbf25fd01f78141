pub mod tensor;
pub mod corpus;
pub mod distillation;
pub mod encoders;
pub mod masking;
pub mod objectives;
pub mod params;
pub mod audit;
pub mod checkpoint;
pub mod cli;
pub mod error;
pub mod evaluation;
pub mod trainer;
