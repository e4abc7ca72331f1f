//! Solvers for coupled image/motion least-squares problems.
//!
//! The problems handled here have the separable form
//!
//! ```text
//! min_{x in Cx, w in Cw}  1/2 ||K T(w) x - d||^2 + alpha/2 ||L x||^2
//! ```
//!
//! where `x` is an image (real or complex), `w` stacks rigid motion
//! parameters for each data frame, `T(w)` resamples the image under the
//! frame motions and `K` is a block-diagonal imaging operator.
//!
//! Three methods are provided in [`solvers`]:
//!
//! * **LAP** (linearize and project): projected Gauss-Newton on the joint
//!   problem where the motion block of each linearized system is eliminated
//!   with an orthogonal projector and the remaining image system is solved
//!   iteratively (LSQR with Tikhonov stacking, or a hybrid Golub-Kahan
//!   method that picks the Tikhonov parameter per Krylov step).
//! * **VarPro**: Gauss-Newton on the reduced motion problem, solving the
//!   image problem to fixed accuracy inside every function evaluation.
//! * **BCD**: alternating single projected Gauss-Newton steps in the image
//!   and the motion.
//!
//! Complex vectors are stored interleaved (`re, im, re, im, ...`) and every
//! operator works with the real inner product `Re(a^H b)`, so all solver
//! mathematics is real.

pub mod error;
pub mod experiment;
pub mod geometry;
pub mod krylov;
pub mod linops;
pub mod models;
pub mod rng;
pub mod solvers;
pub mod vecops;

pub use error::{Error, Result};
