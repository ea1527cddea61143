//! Numerical lab for the Fefferman–Phong–Shen maximal function, the Agmon
//! distance it induces, and Green's functions of magnetic Schrödinger
//! operators on uniform three-dimensional grids.

pub mod agmon;
pub mod error;
pub mod grid;
pub mod io;
pub mod par;
pub mod potential;
pub mod schrodinger;
pub mod sparse;
pub mod stats;
pub mod verify;
pub mod weights;

pub use error::{Error, Result};
pub use grid::{BoxRegion, ComplexField, Grid, Point, ScalarField, VectorField};
