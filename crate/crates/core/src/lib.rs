pub mod ansatz;
pub mod error;
pub mod exact;
pub mod hamiltonian;
pub mod lattice;
pub mod linalg;
pub mod noise;
pub mod observables;
pub mod sampler;
pub mod state;
pub mod tdvp;

pub use error::{Error, Result};
