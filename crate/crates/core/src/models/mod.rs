//! Concrete models and the affine toolkit.

pub mod affine;
pub mod heston;
pub mod poisson;
pub mod sird;
pub mod var_garch;

pub use affine::{solve_affine_eigen, AffineAr1, AffineEigen, AffineSpec};
pub use heston::{build_heston, Heston, HestonParams};
pub use sird::{build_sird, DiffusionBasis, Sird, SirdParams, SirdState};
pub use var_garch::{build_var_garch, VarGarch, VarGarchParams, VarGarchState};
pub use poisson::{solve_poisson, PoissonProblem, PoissonSolution, RegimeAr1, RegimePoisson};
