pub mod model;
pub mod term;
pub mod vcgen;
pub mod solver;
pub mod safety;
