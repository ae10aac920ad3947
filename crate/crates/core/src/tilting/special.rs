use super::{LinkFunction, LinkKind};
use crate::error::Result;
use crate::models::affine::{solve_affine_eigen, AffineEigen, AffineSpec};

/// Latent states that are points of `R^p`.
pub trait StateVector {
    fn coords(&self) -> &[f64];
}

impl StateVector for f64 {
    fn coords(&self) -> &[f64] {
        std::slice::from_ref(self)
    }
}

impl StateVector for Vec<f64> {
    fn coords(&self) -> &[f64] {
        self
    }
}

/// `k(x, x', eta) = eta' k~(x, x')` with `k~(x, x') = dpsi/dtheta(x, x', 0) + g(x')`.
pub fn make_lan_link<S, D, G>(dim: usize, dpsi_at_zero: D, g: G) -> LinkFunction<S>
where
    S: 'static,
    D: Fn(&S, &S, &mut [f64]) + Send + Sync + 'static,
    G: Fn(&S, &mut [f64]) + Send + Sync + 'static,
{
    LinkFunction::linear(LinkKind::LinearGeneral, dim, move |x: &S, y: &S, out: &mut [f64]| {
        dpsi_at_zero(x, y, out);
        let mut gb = [0.0; 16];
        let gb = &mut gb[..dim];
        g(y, gb);
        for (o, v) in out.iter_mut().zip(gb.iter()) {
            *o += v;
        }
    })
}

/// The classical exponential tilt of an affine model, expressed in the duo
/// family: `k = eta' x'` with `eta = A(theta) + D0(theta)`.
#[derive(Debug, Clone)]
pub struct ClassicalLink<S> {
    pub link: LinkFunction<S>,
    pub eigen: AffineEigen,
}

impl<S: StateVector> ClassicalLink<S> {
    /// `log r(x, theta) = A(theta)'x`.
    pub fn log_eigenfunction(&self, x: &S) -> f64 {
        self.eigen.a.iter().zip(x.coords()).map(|(a, v)| a * v).sum()
    }
}

pub fn make_classical_link<S, A>(spec: &A, theta: &[f64]) -> Result<ClassicalLink<S>>
where
    S: StateVector + 'static,
    A: AffineSpec + ?Sized,
{
    let eigen = solve_affine_eigen(spec, theta)?;
    let p = spec.state_dim();
    let link = LinkFunction::linear(LinkKind::LinearInState, p, |_: &S, y: &S, out: &mut [f64]| {
        out.copy_from_slice(y.coords());
    });
    Ok(ClassicalLink { link, eigen })
}
