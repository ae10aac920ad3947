use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkKind {
    /// `k = eta' x'`
    LinearInState,
    /// `k = eta' k~(x, x')`
    LinearGeneral,
    /// `k = psi(x, x', eta) + log r(x', eta)`; not linear in `eta`.
    ClassicalEmbedding,
    /// `k = eta' B(x)' x'`
    DiffusionBasis,
}

impl LinkKind {
    pub fn is_linear(self) -> bool {
        !matches!(self, LinkKind::ClassicalEmbedding)
    }
}

type EvalFn<S> = dyn Fn(&S, &S, &[f64]) -> f64 + Send + Sync;
type VecFn<S> = dyn Fn(&S, &S, &[f64], &mut [f64]) + Send + Sync;
type FeatureFn<S> = dyn Fn(&S, &S, &mut [f64]) + Send + Sync;

/// A link function `k(x, x', eta)` with its gradient in `eta`.
pub struct LinkFunction<S> {
    kind: LinkKind,
    dim: usize,
    eval: Arc<EvalFn<S>>,
    grad: Arc<VecFn<S>>,
    hess: Option<Arc<VecFn<S>>>,
}

impl<S> Clone for LinkFunction<S> {
    fn clone(&self) -> Self {
        Self {
            kind: self.kind,
            dim: self.dim,
            eval: Arc::clone(&self.eval),
            grad: Arc::clone(&self.grad),
            hess: self.hess.clone(),
        }
    }
}

impl<S> fmt::Debug for LinkFunction<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LinkFunction")
            .field("kind", &self.kind)
            .field("dim", &self.dim)
            .finish()
    }
}

impl<S: 'static> LinkFunction<S> {
    /// `k = eta' feature(x, x')`; `feature` writes `dim` values.
    pub fn linear<F>(kind: LinkKind, dim: usize, feature: F) -> Self
    where
        F: Fn(&S, &S, &mut [f64]) + Send + Sync + 'static,
    {
        assert!(kind.is_linear(), "linear constructor with non-linear kind");
        let feature: Arc<FeatureFn<S>> = Arc::new(feature);
        let f1 = Arc::clone(&feature);
        let eval = move |x: &S, y: &S, eta: &[f64]| {
            let mut buf = [0.0; 16];
            if eta.len() <= buf.len() {
                let b = &mut buf[..eta.len()];
                f1(x, y, b);
                b.iter().zip(eta).map(|(a, e)| a * e).sum()
            } else {
                let mut b = vec![0.0; eta.len()];
                f1(x, y, &mut b);
                b.iter().zip(eta).map(|(a, e)| a * e).sum()
            }
        };
        let grad = move |x: &S, y: &S, _eta: &[f64], out: &mut [f64]| feature(x, y, out);
        Self {
            kind,
            dim,
            eval: Arc::new(eval),
            grad: Arc::new(grad),
            hess: None,
        }
    }

    /// A link that is not linear in `eta`; `hess` writes the row-major
    /// Hessian of `k` in `eta`.
    pub fn nonlinear<E, G, H>(kind: LinkKind, dim: usize, eval: E, grad: G, hess: H) -> Self
    where
        E: Fn(&S, &S, &[f64]) -> f64 + Send + Sync + 'static,
        G: Fn(&S, &S, &[f64], &mut [f64]) + Send + Sync + 'static,
        H: Fn(&S, &S, &[f64], &mut [f64]) + Send + Sync + 'static,
    {
        Self {
            kind,
            dim,
            eval: Arc::new(eval),
            grad: Arc::new(grad),
            hess: Some(Arc::new(hess)),
        }
    }
}

impl<S> LinkFunction<S> {
    pub fn kind(&self) -> LinkKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_linear(&self) -> bool {
        self.hess.is_none()
    }

    #[inline]
    pub fn k(&self, x: &S, next: &S, eta: &[f64]) -> f64 {
        (self.eval)(x, next, eta)
    }

    #[inline]
    pub fn grad(&self, x: &S, next: &S, eta: &[f64], out: &mut [f64]) {
        (self.grad)(x, next, eta, out)
    }

    /// Row-major Hessian of `k`; zero for linear links.
    pub fn hess(&self, x: &S, next: &S, eta: &[f64], out: &mut [f64]) {
        match &self.hess {
            Some(h) => h(x, next, eta, out),
            None => out.iter_mut().for_each(|v| *v = 0.0),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn linear_links_are_linear(
            a in -3.0..3.0f64, b in -3.0..3.0f64,
            e1 in proptest::collection::vec(-2.0..2.0f64, 3),
            e2 in proptest::collection::vec(-2.0..2.0f64, 3),
            x in -5.0..5.0f64, y in -5.0..5.0f64,
        ) {
            let link = LinkFunction::<f64>::linear(LinkKind::LinearGeneral, 3, |x, y, out| {
                out[0] = *y;
                out[1] = x * y;
                out[2] = x.sin();
            });
            let mix: Vec<f64> = e1.iter().zip(&e2).map(|(u, v)| a * u + b * v).collect();
            let lhs = link.k(&x, &y, &mix);
            let rhs = a * link.k(&x, &y, &e1) + b * link.k(&x, &y, &e2);
            prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs()));
            prop_assert_eq!(link.k(&x, &y, &[0.0; 3]), 0.0);
        }
    }
}
