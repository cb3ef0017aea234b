use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::MetricKind;
use crate::stats::average_ranks;

/// Per-metric ranks and their sum over a set of candidates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankTable {
    /// Candidate labels in input order (genotype text or pruning move).
    pub candidates: Vec<String>,
    pub metrics: Vec<MetricKind>,
    /// `scores[i][m]`; rows of excluded candidates are kept as given.
    pub scores: Vec<Vec<f64>>,
    /// `ranks[i][m]`, higher is better; `None` for excluded candidates.
    pub ranks: Vec<Option<Vec<f64>>>,
    pub aggregate: Vec<Option<f64>>,
    pub selected: usize,
}

impl RankTable {
    pub fn selected_label(&self) -> &str {
        &self.candidates[self.selected]
    }

    pub fn excluded(&self) -> impl Iterator<Item = usize> + '_ {
        self.ranks.iter().enumerate().filter(|(_, r)| r.is_none()).map(|(i, _)| i)
    }
}

/// Sums per-metric ranks and picks the argmax. Candidates with a NaN score
/// are excluded; aggregate ties go to the lexicographically smallest label.
pub fn aggregate_ranks(candidates: &[String], metrics: &[MetricKind], scores: &[Vec<f64>]) -> Result<RankTable> {
    if candidates.len() != scores.len() {
        return Err(Error::Contract(format!(
            "{} candidates but {} score rows",
            candidates.len(),
            scores.len()
        )));
    }
    if metrics.is_empty() {
        return Err(Error::Config("metric set must not be empty".into()));
    }
    if let Some(row) = scores.iter().find(|r| r.len() != metrics.len()) {
        return Err(Error::Contract(format!(
            "score row of length {} for {} metrics",
            row.len(),
            metrics.len()
        )));
    }
    let kept: Vec<usize> = (0..scores.len())
        .filter(|&i| {
            let ok = scores[i].iter().all(|s| !s.is_nan());
            if !ok {
                log::warn!("candidate {} has a NaN score and is excluded", candidates[i]);
            }
            ok
        })
        .collect();
    if kept.is_empty() {
        return Err(Error::Degenerate("no candidate has a usable score".into()));
    }

    let mut ranks: Vec<Option<Vec<f64>>> = vec![None; scores.len()];
    for &i in &kept {
        ranks[i] = Some(Vec::with_capacity(metrics.len()));
    }
    for m in 0..metrics.len() {
        let column: Vec<f64> = kept.iter().map(|&i| scores[i][m]).collect();
        for (&i, r) in kept.iter().zip(average_ranks(&column)) {
            ranks[i].as_mut().expect("kept").push(r);
        }
    }
    let aggregate: Vec<Option<f64>> = ranks.iter().map(|r| r.as_ref().map(|r| r.iter().sum())).collect();
    let selected = kept
        .iter()
        .copied()
        .max_by(|&a, &b| {
            let (ra, rb) = (aggregate[a].expect("kept"), aggregate[b].expect("kept"));
            ra.total_cmp(&rb).then_with(|| candidates[b].cmp(&candidates[a]))
        })
        .expect("non-empty");
    Ok(RankTable {
        candidates: candidates.to_vec(),
        metrics: metrics.to_vec(),
        scores: scores.to_vec(),
        ranks,
        aggregate,
        selected,
    })
}
