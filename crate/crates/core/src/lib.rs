//! Decoherence of a Rydberg impurity qubit immersed in a Bose-Einstein
//! condensate.
//!
//! The crate covers the whole chain from electron orbitals to observables:
//!
//! * [`orbitals`]: Rydberg radial wavefunctions and density multipoles.
//! * [`bath`]: Bogoliubov dispersion, spin-boson couplings, spectral density,
//!   analytic coherence r(t), decoherence time and bath correlation C(τ).
//! * [`expfit`]: C(τ) as a sum of damped complex exponentials.
//! * [`stochastic`]: complex Gaussian noise with correlation C(τ).
//! * [`hops`]: nonlinear hierarchy of pure states for the driven qubit.
//! * [`gpe`]: two-branch Gross-Pitaevskii evolution, overlap coherence and
//!   column-density imaging.
//! * [`pipeline`]: run stages writing tables and a checksummed manifest.
//!
//! Numerical kernels in [`numeric`] are generic over [`numeric::Scalar`]; the
//! physics layers use the concrete [`Real`] and [`Complex`] aliases.

pub mod bath;
pub mod error;
pub mod expfit;
pub mod gpe;
pub mod hops;
pub mod io;
pub mod numeric;
pub mod orbitals;
pub mod params;
pub mod pipeline;
pub mod stochastic;

pub use error::{Error, Result};

/// Working real type of the physics layers.
pub type Real = f64;
/// Working complex type of the physics layers.
pub type Complex = num_complex::Complex<Real>;
