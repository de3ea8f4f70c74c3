pub mod linalg;
pub mod problem;
pub mod grid;
pub mod kernel;
pub mod solver;
pub mod iteration;
pub mod stability;
pub mod experiment;
