//! Condition number of the empirical neural tangent kernel `Θ = J Jᵀ`.

use nalgebra::DMatrix;

use super::linalg::symmetric_eigenvalues;
use super::DEGENERATE_SCORE;
use crate::error::{Error, Result};
use crate::space::Network;
use crate::tensor::{Graph, NodeId, ParamStore, Scalar, Tensor};

/// `λ_min ≤ NTK_SINGULAR_EPS · λ_max` marks Θ as singular.
pub const NTK_SINGULAR_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NtkScore {
    /// `-λ_max/λ_min`, or the sentinel when degenerate.
    pub score: f64,
    pub condition: f64,
    pub degenerate: bool,
}

/// Jacobian of every logit w.r.t. every parameter of `params`, one reverse
/// sweep per logit. Rows are sample-major (`i·C + k`), columns follow the
/// parameter store order.
pub fn logit_jacobian<T: Scalar>(graph: &Graph<T>, logits: NodeId, params: &ParamStore<T>) -> Result<DMatrix<f64>> {
    let lv = graph.value(logits);
    let &[n, c] = lv.shape() else {
        return Err(Error::shape(graph.path(logits), "logits must be [N, C]"));
    };
    let offsets: Vec<usize> = params
        .groups()
        .iter()
        .scan(0, |acc, g| {
            let o = *acc;
            *acc += g.value.len();
            Some(o)
        })
        .collect();
    let total = params.scalar_count();
    let mut jac = DMatrix::zeros(n * c, total);
    for row in 0..n * c {
        let mut seed = Tensor::zeros(&[n, c]);
        seed.data_mut()[row] = T::one();
        let grads = graph.backward_seeded(logits, seed)?;
        for (p, &off) in offsets.iter().enumerate() {
            if let Some(g) = grads.param(p) {
                for (j, v) in g.data().iter().enumerate() {
                    let v = v.as_f64();
                    if !v.is_finite() {
                        return Err(Error::NonFinite {
                            path: params.get(p).name.clone(),
                        });
                    }
                    jac[(row, off + j)] = v;
                }
            }
        }
    }
    Ok(jac)
}

/// Condition number of `J Jᵀ`.
pub fn ntk_from_jacobian(jac: &DMatrix<f64>) -> NtkScore {
    let theta = jac * jac.transpose();
    let ev = symmetric_eigenvalues(&theta);
    let (lo, hi) = (ev[0], ev[ev.len() - 1]);
    if !(hi > 0.0) || lo <= NTK_SINGULAR_EPS * hi || !lo.is_finite() || !hi.is_finite() {
        return NtkScore {
            score: DEGENERATE_SCORE,
            condition: f64::INFINITY,
            degenerate: true,
        };
    }
    let condition = hi / lo;
    NtkScore {
        score: -condition,
        condition,
        degenerate: false,
    }
}

/// NTK score of a freshly initialized network on `batch`.
pub fn metric_ntk<T: Scalar>(net: &Network<T>, batch: &Tensor<T>) -> Result<NtkScore> {
    let mut g = Graph::new();
    let out = net.forward(&mut g, batch)?;
    let jac = logit_jacobian(&g, out.logits, net.params())?;
    Ok(ntk_from_jacobian(&jac))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ParamRole;

    /// `y = w·x` through the tape, returning the Jacobian rows for `xs`.
    fn linear_model_jacobian(w: &[f64], xs: &[&[f64]]) -> DMatrix<f64> {
        let d = w.len();
        let mut store = ParamStore::new();
        store.insert("w", Tensor::new(vec![1, d], w.to_vec()).unwrap(), ParamRole::PredictionWeight);
        store.insert("b", Tensor::zeros(&[1]), ParamRole::PredictionBias);
        let mut g = Graph::new();
        let data: Vec<f64> = xs.iter().flat_map(|x| x.iter().copied()).collect();
        let x = g.input(Tensor::new(vec![xs.len(), d], data).unwrap(), "x");
        let wn = g.param(&store, 0);
        let bn = g.param(&store, 1);
        let y = g.linear(x, wn, bn, "y").unwrap();
        logit_jacobian(&g, y, &store).unwrap()
    }

    #[test]
    fn single_logit_has_unit_condition() {
        let jac = linear_model_jacobian(&[0.3, -0.7], &[&[1.0, 2.0]]);
        let r = ntk_from_jacobian(&jac);
        assert!(!r.degenerate);
        assert_eq!(r.score, -1.0);
    }

    #[test]
    fn linear_model_matches_closed_form() {
        let (x1, x2) = ([1.0, 2.0, -0.5], [0.5, -1.0, 3.0]);
        let jac = linear_model_jacobian(&[0.1, 0.2, 0.3], &[&x1, &x2]);
        // bias column contributes 1 to every entry: append it to x
        let a = x1.iter().map(|v| v * v).sum::<f64>() + 1.0;
        let d = x2.iter().map(|v| v * v).sum::<f64>() + 1.0;
        let b = x1.iter().zip(&x2).map(|(p, q)| p * q).sum::<f64>() + 1.0;
        let tr = a + d;
        let disc = ((a - d) * (a - d) + 4.0 * b * b).sqrt();
        let cond = (tr + disc) / (tr - disc);
        let r = ntk_from_jacobian(&jac);
        assert!((r.condition - cond).abs() < 1e-8 * cond);
    }

    #[test]
    fn rank_deficient_kernel_is_degenerate() {
        let jac = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]);
        assert!(ntk_from_jacobian(&jac).degenerate);
    }
}
