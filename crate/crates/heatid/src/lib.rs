//! Identification of a spacewise reaction coefficient and heat source in a
//! parabolic equation from one final-time temperature measurement.

pub mod grid;
pub mod linalg;
pub mod operators;
pub mod pde;
pub mod phantom;
pub mod regularizer;
