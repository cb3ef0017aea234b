//! Rank correlation, same-#Param groups and ground-truth tables.

mod kendall;
mod oracle;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

pub use kendall::{kendall, kendall_tau, KendallTau};
pub use oracle::{oracle_train, OracleConfig, OracleResult};

use crate::error::{Error, Result};
use crate::metrics::{MetricKind, MetricVector};
use crate::space::{count_params, enumerate_space, CellGenotype, MacroConfig};

/// 1-based ranks where a higher value gets a higher rank; ties share the
/// mean of the ranks they span.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum GroundTruthSource {
    Imported { path: PathBuf },
    Oracle { config: OracleConfig, seed: u64, dataset: String },
}

/// Accuracy in percent per genotype.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthTable {
    pub accuracy: BTreeMap<CellGenotype, f64>,
    /// Genotypes whose oracle training diverged (accuracy recorded as 0).
    pub diverged: Vec<CellGenotype>,
    pub source: GroundTruthSource,
}

#[derive(Serialize, Deserialize)]
struct GroundTruthRow {
    genotype: String,
    accuracy: f64,
}

impl GroundTruthTable {
    pub fn insert(&mut self, g: CellGenotype, accuracy: f64) -> Result<()> {
        if !(0.0..=100.0).contains(&accuracy) {
            return Err(Error::Config(format!("accuracy {accuracy} of {g} outside [0, 100]")));
        }
        self.accuracy.insert(g, accuracy);
        Ok(())
    }

    pub fn get(&self, g: &CellGenotype) -> Option<f64> {
        self.accuracy.get(g).copied()
    }

    /// Reads `genotype,accuracy` CSV.
    pub fn read_csv<R: Read>(input: R, path: impl Into<PathBuf>) -> Result<Self> {
        let mut table = GroundTruthTable {
            accuracy: BTreeMap::new(),
            diverged: Vec::new(),
            source: GroundTruthSource::Imported { path: path.into() },
        };
        for row in csv::Reader::from_reader(input).deserialize::<GroundTruthRow>() {
            let row = row?;
            table.insert(row.genotype.parse()?, row.accuracy)?;
        }
        Ok(table)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["genotype", "accuracy"])?;
        for (g, a) in &self.accuracy {
            w.write_record([g.to_string(), format!("{a}")])?;
        }
        w.flush().map_err(|e| Error::io("ground truth csv", e))?;
        Ok(())
    }
}

/// Genotypes sharing one exact #Param value.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCountGroup {
    pub param_count: usize,
    pub genotypes: Vec<CellGenotype>,
}

/// Partition of the whole space by #Param, ascending.
pub fn group_by_param(macro_cfg: &MacroConfig) -> Vec<ParamCountGroup> {
    let mut map: BTreeMap<usize, Vec<CellGenotype>> = BTreeMap::new();
    for g in enumerate_space(macro_cfg, None) {
        map.entry(count_params(&g, macro_cfg)).or_default().push(g);
    }
    map.into_iter()
        .map(|(param_count, genotypes)| ParamCountGroup { param_count, genotypes })
        .collect()
}

/// Column name used for ground truth in correlation reports.
pub const ACCURACY: &str = "accuracy";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationEntry {
    pub a: String,
    pub b: String,
    #[serde(flatten)]
    pub kendall: KendallTau,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub columns: Vec<String>,
    pub entries: Vec<CorrelationEntry>,
}

#[derive(Serialize)]
struct CorrelationRow<'a> {
    a: &'a str,
    b: &'a str,
    tau: Option<f64>,
    n: usize,
    ties_a: u64,
    ties_b: u64,
}

impl CorrelationReport {
    pub fn tau(&self, a: &str, b: &str) -> Option<f64> {
        self.entries
            .iter()
            .find(|e| (e.a == a && e.b == b) || (e.a == b && e.b == a))
            .and_then(|e| e.kendall.tau)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for e in &self.entries {
            w.serialize(CorrelationRow {
                a: &e.a,
                b: &e.b,
                tau: e.kendall.tau,
                n: e.kendall.n,
                ties_a: e.kendall.ties_x,
                ties_b: e.kendall.ties_y,
            })?;
        }
        if self.entries.is_empty() {
            w.write_record(["a", "b", "tau", "n", "ties_a", "ties_b"])?;
        }
        w.flush().map_err(|e| Error::io("correlation csv", e))?;
        Ok(())
    }

    /// Lower-triangular τ matrix; `-` marks an undefined value.
    pub fn to_table(&self) -> String {
        let width = self.columns.iter().map(String::len).max().unwrap_or(0).max(6);
        let mut s = format!("{:width$}", "");
        for c in &self.columns {
            let _ = write!(s, "  {c:>width$}");
        }
        s.push('\n');
        for (i, r) in self.columns.iter().enumerate() {
            let _ = write!(s, "{r:width$}");
            for c in &self.columns[..=i] {
                let cell = if r == c {
                    "1.000".to_string()
                } else {
                    self.tau(r, c).map_or("-".into(), |t| format!("{t:.3}"))
                };
                let _ = write!(s, "  {cell:>width$}");
            }
            s.push('\n');
        }
        s
    }
}

/// Kendall τ between every pair of the requested metrics and, when given,
/// the ground truth. Candidates lacking a value for either side of a pair are
/// left out of that pair.
pub fn correlation_study(
    rows: &[MetricVector],
    metrics: &[MetricKind],
    ground_truth: Option<&GroundTruthTable>,
) -> Result<CorrelationReport> {
    let mut columns: Vec<(String, Vec<Option<f64>>)> = metrics
        .iter()
        .map(|&k| {
            let v = rows.iter().map(|r| r.score(k).filter(|s| !s.is_nan())).collect();
            (k.name().to_string(), v)
        })
        .collect();
    if let Some(gt) = ground_truth {
        columns.push((ACCURACY.into(), rows.iter().map(|r| gt.get(&r.genotype)).collect()));
    }
    let mut entries = Vec::new();
    for i in 0..columns.len() {
        for j in i + 1..columns.len() {
            let (x, y): (Vec<f64>, Vec<f64>) = columns[i]
                .1
                .iter()
                .zip(&columns[j].1)
                .filter_map(|(a, b)| Some(((*a)?, (*b)?)))
                .unzip();
            let kendall = if x.len() < 2 {
                KendallTau {
                    tau: None,
                    n: x.len(),
                    ties_x: 0,
                    ties_y: 0,
                    ties_xy: 0,
                    discordant: 0,
                }
            } else {
                kendall(&x, &y)?
            };
            entries.push(CorrelationEntry {
                a: columns[i].0.clone(),
                b: columns[j].0.clone(),
                kendall,
            });
        }
    }
    Ok(CorrelationReport {
        columns: columns.into_iter().map(|c| c.0).collect(),
        entries,
    })
}
