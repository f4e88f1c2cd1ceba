pub mod ablate;
pub mod eval;
pub mod gen;
pub mod gradcheck;
pub mod train;
