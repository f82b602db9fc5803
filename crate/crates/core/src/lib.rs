pub mod autodiff;
pub mod data;
pub mod eval;
pub mod experiment;
pub mod losses;
pub mod nn;
pub mod train;
