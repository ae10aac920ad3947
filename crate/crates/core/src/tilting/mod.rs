//! The second-moment objective `G(theta, eta)` of the duo-tilted estimator,
//! its gradients, and the special link functions.

mod link;
mod objective;
mod special;

pub use link::{LinkFunction, LinkKind};
pub use objective::{
    evaluate_objective, grad_second_moment, second_moment_estimate, ObjectiveEstimate, ObjectiveOptions,
    ObjectiveSample, SecondMoment,
};
pub use special::{make_classical_link, make_lan_link, ClassicalLink, StateVector};
