//! Architecture search for convolutional networks with a (1+1) evolutionary
//! algorithm whose mutations carry trained weights over to the offspring.

pub mod data;
pub mod evolution;
pub mod experiments;
pub mod fitness;
pub mod genome;
pub mod mutation;
pub mod tensor;
