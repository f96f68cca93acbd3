//! Generative modeling of discrete joint distributions by e-geodesic flow
//! matching on the assignment manifold.
//!
//! A joint distribution of `n` variables with `c` categories each is
//! represented as a mixture of factorizing distributions: a learned flow on
//! the assignment manifold pushes a Gaussian reference measure towards the
//! vertices, and each vertex is a hard configuration.
//!
//! * [`geometry`]: Fisher-Rao maps on the simplex and the assignment manifold.
//! * [`meta_simplex`]: dense joints, the product embedding and marginals.
//! * [`field`]: the parametrized fitness function and its optimizer.
//! * [`flow_matching`]: the conditional flow-matching objective and trainer.
//! * [`integrate`]: tangent-space integration and sampling.
//! * [`likelihood`]: importance-sampling lower bounds on log-likelihoods.
//! * [`io`], [`targets`], [`commands`]: file formats, toy targets and the CLI verbs.

pub mod commands;
pub mod error;
pub mod field;
pub mod flow_matching;
pub mod geometry;
pub mod integrate;
pub mod io;
pub mod likelihood;
pub mod meta_simplex;
pub mod targets;

pub use error::{Error, Result};
pub use field::{FieldKind, FieldParams, FieldSpec};
pub use geometry::{AssignmentState, Dims, TangentMatrix};
pub use meta_simplex::{Configuration, JointDistribution};
