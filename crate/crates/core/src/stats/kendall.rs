//! Kendall's tau-b in O(n log n) (Knight's merge-sort algorithm).

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pair counts behind one tau-b value. All counts are over the `n(n-1)/2`
/// unordered pairs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KendallTau {
    /// `None` when either vector is constant.
    pub tau: Option<f64>,
    pub n: usize,
    /// Pairs tied in `x`.
    pub ties_x: u64,
    /// Pairs tied in `y`.
    pub ties_y: u64,
    /// Pairs tied in both.
    pub ties_xy: u64,
    pub discordant: u64,
}

/// Tau-b of two equally long score vectors. NaN entries are rejected.
pub fn kendall(x: &[f64], y: &[f64]) -> Result<KendallTau> {
    if x.len() != y.len() {
        return Err(Error::Contract(format!(
            "kendall tau needs equal lengths, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    let n = x.len();
    if n < 2 {
        return Err(Error::InsufficientData("kendall tau needs at least 2 observations".into()));
    }
    if x.iter().chain(y).any(|v| v.is_nan()) {
        return Err(Error::Contract("kendall tau of NaN scores".into()));
    }

    let mut pairs: Vec<(f64, f64)> = x.iter().copied().zip(y.iter().copied()).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));

    let ties_x = tied_pairs(pairs.iter().map(|p| p.0));
    let ties_xy = {
        let mut total = 0u64;
        let mut run = 1u64;
        for w in pairs.windows(2) {
            if w[0].0 == w[1].0 && w[0].1 == w[1].1 {
                run += 1;
            } else {
                total += run * (run - 1) / 2;
                run = 1;
            }
        }
        total + run * (run - 1) / 2
    };

    let mut ys: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let mut buf = ys.clone();
    let discordant = merge_count(&mut ys, &mut buf);
    let ties_y = tied_pairs(ys.iter().copied());

    let n0 = (n as u64) * (n as u64 - 1) / 2;
    let tau = if ties_x == n0 || ties_y == n0 {
        None
    } else {
        // C - D = n0 - n1 - n2 + n3 - 2D, exact in i128
        let num = n0 as i128 - ties_x as i128 - ties_y as i128 + ties_xy as i128 - 2 * discordant as i128;
        let den = (((n0 - ties_x) as u128 * (n0 - ties_y) as u128) as f64).sqrt();
        Some((num as f64 / den).clamp(-1.0, 1.0))
    };
    Ok(KendallTau {
        tau,
        n,
        ties_x,
        ties_y,
        ties_xy,
        discordant,
    })
}

/// Shorthand for `kendall(x, y)?.tau`.
pub fn kendall_tau(x: &[f64], y: &[f64]) -> Result<Option<f64>> {
    Ok(kendall(x, y)?.tau)
}

/// Sum of `t(t-1)/2` over runs of equal values in a sorted sequence.
fn tied_pairs(sorted: impl Iterator<Item = f64>) -> u64 {
    let mut total = 0u64;
    let mut run = 0u64;
    let mut prev: Option<f64> = None;
    for v in sorted {
        if prev == Some(v) {
            run += 1;
        } else {
            total += run * run.saturating_sub(1) / 2;
            run = 1;
        }
        prev = Some(v);
    }
    total + run * run.saturating_sub(1) / 2
}

/// Stable merge sort counting strictly inverted pairs.
fn merge_count(v: &mut [f64], buf: &mut [f64]) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut swaps = merge_count(&mut v[..mid], &mut buf[..mid]) + merge_count(&mut v[mid..], &mut buf[mid..]);
    let (mut i, mut j, mut k) = (0, mid, 0);
    while i < mid && j < n {
        if v[j].total_cmp(&v[i]) == Ordering::Less {
            buf[k] = v[j];
            swaps += (mid - i) as u64;
            j += 1;
        } else {
            buf[k] = v[i];
            i += 1;
        }
        k += 1;
    }
    buf[k..k + mid - i].copy_from_slice(&v[i..mid]);
    k += mid - i;
    buf[k..].copy_from_slice(&v[j..]);
    v.copy_from_slice(&buf[..n]);
    swaps
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_examples() {
        assert_eq!(kendall_tau(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), Some(1.0));
        assert_eq!(kendall_tau(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), Some(-1.0));
        let t = kendall_tau(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]).unwrap().unwrap();
        assert!((t - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn constant_vector_is_undefined() {
        let k = kendall(&[2.0, 2.0, 2.0], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(k.tau, None);
        assert_eq!(k.ties_x, 3);
    }

    #[test]
    fn bad_inputs() {
        assert!(kendall(&[1.0], &[1.0]).is_err());
        assert!(kendall(&[1.0, 2.0], &[1.0]).is_err());
        assert!(kendall(&[1.0, f64::NAN], &[1.0, 2.0]).is_err());
    }
}
