pub mod ablate;
pub mod eval;
pub mod score;
pub mod scree;
pub mod simulate;
pub mod train;
