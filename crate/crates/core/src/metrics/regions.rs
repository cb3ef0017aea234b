//! Linear-region proxies from ReLU on/off patterns.

use std::collections::HashSet;

use nalgebra::DMatrix;

use super::linalg::symmetric_eigenvalues;
use super::DEGENERATE_SCORE;
use crate::error::{Error, Result};
use crate::space::Network;
use crate::tensor::{Graph, Scalar, Tensor};

/// Per-sample binary codes: bit `u` of sample `i` is set iff ReLU unit `u`
/// fired for that sample. Units are ordered by tap, then by position.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ActivationCodes {
    pub codes: Vec<Vec<u64>>,
    pub n_units: usize,
}

impl ActivationCodes {
    /// Collects the codes recorded by the graph's activation taps.
    pub fn from_graph<T: Scalar>(graph: &Graph<T>) -> Result<Self> {
        let taps = graph.activation_taps();
        let n = match taps.first() {
            Some(&t) => graph.value(t).shape()[0],
            None => return Ok(ActivationCodes { codes: Vec::new(), n_units: 0 }),
        };
        let n_units: usize = taps
            .iter()
            .map(|&t| graph.value(t).len() / n)
            .sum();
        let words = n_units.div_ceil(64);
        let mut codes = vec![vec![0u64; words]; n];
        let mut base = 0;
        for &t in taps {
            let v = graph.value(t);
            if v.shape()[0] != n {
                return Err(Error::shape(graph.path(t), "activation tap with a different batch size"));
            }
            let per = v.len() / n;
            for (i, code) in codes.iter_mut().enumerate() {
                for (j, &x) in v.data()[i * per..(i + 1) * per].iter().enumerate() {
                    if x > T::zero() {
                        let bit = base + j;
                        code[bit / 64] |= 1u64 << (bit % 64);
                    }
                }
            }
            base += per;
        }
        Ok(ActivationCodes { codes, n_units })
    }

    pub fn batch_size(&self) -> usize {
        self.codes.len()
    }

    pub fn hamming(&self, i: usize, j: usize) -> usize {
        self.codes[i]
            .iter()
            .zip(&self.codes[j])
            .map(|(a, b)| (a ^ b).count_ones() as usize)
            .sum()
    }

    /// `K_ij = N_A − d_H(c_i, c_j)`.
    pub fn kernel(&self) -> DMatrix<f64> {
        let n = self.batch_size();
        let mut k = DMatrix::zeros(n, n);
        for i in 0..n {
            k[(i, i)] = self.n_units as f64;
            for j in i + 1..n {
                let v = (self.n_units - self.hamming(i, j)) as f64;
                k[(i, j)] = v;
                k[(j, i)] = v;
            }
        }
        k
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Lr1 {
    pub score: f64,
    pub degenerate: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Lr2 {
    /// `Σ ln λ_i`, or the sentinel when `K` is singular.
    pub score: f64,
    pub degenerate: bool,
}

/// Number of distinct activation patterns in the batch.
pub fn lr1_from_codes(codes: &ActivationCodes) -> Lr1 {
    if codes.n_units == 0 {
        return Lr1 { score: 1.0, degenerate: true };
    }
    let distinct: HashSet<&Vec<u64>> = codes.codes.iter().collect();
    Lr1 {
        score: distinct.len() as f64,
        degenerate: false,
    }
}

/// Eigenvalue threshold relative to `N_A` below which `K` counts as singular.
pub const LR2_SINGULAR_EPS: f64 = 1e-9;

/// Log-determinant of the Hamming kernel. Codes are sorted first, so the
/// score does not depend on sample order.
pub fn lr2_from_codes(codes: &ActivationCodes) -> Lr2 {
    let degenerate = Lr2 {
        score: DEGENERATE_SCORE,
        degenerate: true,
    };
    if codes.n_units == 0 || codes.batch_size() == 0 {
        return degenerate;
    }
    let mut sorted = codes.codes.clone();
    sorted.sort_unstable();
    // a repeated code gives two equal kernel rows
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return degenerate;
    }
    let canonical = ActivationCodes {
        codes: sorted,
        n_units: codes.n_units,
    };
    let ev = symmetric_eigenvalues(&canonical.kernel());
    let floor = LR2_SINGULAR_EPS * codes.n_units as f64;
    if ev.iter().any(|&l| l <= floor) {
        return degenerate;
    }
    Lr2 {
        score: ev.iter().map(|l| l.ln()).sum(),
        degenerate: false,
    }
}

fn codes_at_init<T: Scalar>(net: &Network<T>, batch: &Tensor<T>) -> Result<ActivationCodes> {
    let mut g = Graph::new();
    net.forward(&mut g, batch)?;
    ActivationCodes::from_graph(&g)
}

pub fn metric_lr1<T: Scalar>(net: &Network<T>, batch: &Tensor<T>) -> Result<Lr1> {
    check_batch(batch)?;
    Ok(lr1_from_codes(&codes_at_init(net, batch)?))
}

pub fn metric_lr2<T: Scalar>(net: &Network<T>, batch: &Tensor<T>) -> Result<Lr2> {
    check_batch(batch)?;
    Ok(lr2_from_codes(&codes_at_init(net, batch)?))
}

fn check_batch<T: Scalar>(batch: &Tensor<T>) -> Result<()> {
    if batch.shape()[0] < 2 {
        return Err(Error::InsufficientData("linear-region metrics need at least 2 samples".into()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn codes(bits: &[&[bool]]) -> ActivationCodes {
        let n_units = bits[0].len();
        let codes = bits
            .iter()
            .map(|b| {
                let mut w = vec![0u64; n_units.div_ceil(64)];
                for (i, &on) in b.iter().enumerate() {
                    if on {
                        w[i / 64] |= 1 << (i % 64);
                    }
                }
                w
            })
            .collect();
        ActivationCodes { codes, n_units }
    }

    #[test]
    fn identical_codes_are_singular() {
        let c = codes(&[&[true, false, true], &[true, false, true]]);
        assert_eq!(c.kernel(), DMatrix::from_element(2, 2, 3.0));
        let r = lr2_from_codes(&c);
        assert!(r.degenerate);
        assert_eq!(r.score, DEGENERATE_SCORE);
        assert_eq!(lr1_from_codes(&c).score, 1.0);
    }

    #[test]
    fn complementary_codes_give_diagonal_kernel() {
        let c = codes(&[&[true, false, true, true], &[false, true, false, false]]);
        assert_eq!(c.kernel(), DMatrix::from_diagonal_element(2, 2, 4.0));
        let r = lr2_from_codes(&c);
        assert!(!r.degenerate);
        assert!((r.score - 2.0 * 4f64.ln()).abs() < 1e-12);
        assert_eq!(lr1_from_codes(&c).score, 2.0);
    }

    #[test]
    fn no_units_is_degenerate() {
        let c = ActivationCodes { codes: vec![vec![], vec![]], n_units: 0 };
        assert_eq!(lr1_from_codes(&c), Lr1 { score: 1.0, degenerate: true });
        assert!(lr2_from_codes(&c).degenerate);
    }
}
