//! Metric-driven search: rank aggregation, random sampling and supernet
//! pruning.

mod ranks;

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use ranks::{aggregate_ranks, RankTable};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::metrics::{evaluate_candidate, measure_state, EvalContext, Measurement, MetricSet, MetricVector, ScoreConfig};
use crate::seed;
use crate::space::{prune_operator, CellGenotype, CellOp, MacroConfig, SupernetState};
use crate::stats::GroundTruthTable;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PruneMode {
    /// Remove the single best-ranked operator per round.
    OnePerRound,
    /// Remove the best-ranked operator of every edge per round.
    #[default]
    OnePerEdgePerRound,
}

impl fmt::Display for PruneMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PruneMode::OnePerRound => "one-per-round",
            PruneMode::OnePerEdgePerRound => "one-per-edge-per-round",
        })
    }
}

impl FromStr for PruneMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "one-per-round" => Ok(PruneMode::OnePerRound),
            "one-per-edge-per-round" => Ok(PruneMode::OnePerEdgePerRound),
            other => Err(Error::Config(format!("unknown prune mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    /// Candidates per random-search repeat.
    pub n: usize,
    pub metrics: MetricSet,
    pub repeats: usize,
    /// Short-training iterations for pruning candidates.
    pub supernet_iterations: usize,
    pub prune_mode: PruneMode,
    /// Operators the supernet starts with on every edge.
    pub prune_ops: Vec<CellOp>,
    /// Scoring settings; its metric set is replaced by `metrics`.
    pub score: ScoreConfig,
    pub seed: u64,
    /// Worker threads for candidate evaluation.
    pub jobs: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            n: 100,
            metrics: "angle,loss".parse().expect("valid metric set"),
            repeats: 5,
            supernet_iterations: 100,
            prune_mode: PruneMode::default(),
            prune_ops: CellOp::ALL.to_vec(),
            score: ScoreConfig::default(),
            seed: 0,
            jobs: 1,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::Config("search needs N >= 2 candidates".into()));
        }
        if self.repeats == 0 {
            return Err(Error::Config("repeats must be >= 1".into()));
        }
        if self.supernet_iterations == 0 {
            return Err(Error::Config("supernet iterations must be >= 1".into()));
        }
        self.score.train.validate()
    }

    fn score_config(&self) -> ScoreConfig {
        ScoreConfig {
            metrics: self.metrics.clone(),
            ..self.score.clone()
        }
    }
}

/// Maps `f` over `items` on `jobs` threads; results keep input order.
pub(crate) fn par_map<I: Sync, R: Send>(jobs: usize, items: &[I], f: impl Fn(usize, &I) -> R + Sync) -> Result<Vec<R>> {
    if jobs <= 1 {
        return Ok(items.iter().enumerate().map(|(i, x)| f(i, x)).collect());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(|| items.par_iter().enumerate().map(|(i, x)| f(i, x)).collect()))
}

fn score_row(m: &Measurement, metrics: &MetricSet) -> Vec<f64> {
    metrics.iter().map(|k| m.score(k).unwrap_or(f64::NAN)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepeatOutcome {
    pub repeat: usize,
    pub seed: u64,
    pub selected: CellGenotype,
    pub rows: Vec<MetricVector>,
    pub table: RankTable,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RandomSearchResult {
    pub metrics: MetricSet,
    pub repeats: Vec<RepeatOutcome>,
}

impl RandomSearchResult {
    pub fn selections(&self) -> Vec<CellGenotype> {
        self.repeats.iter().map(|r| r.selected).collect()
    }

    /// One row per repeat: `repeat,seed,genotype,param_count,aggregate_rank,accuracy`.
    pub fn write_selections_csv<W: Write>(&self, gt: Option<&GroundTruthTable>, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["repeat", "seed", "genotype", "param_count", "aggregate_rank", "accuracy"])?;
        for r in &self.repeats {
            let row = &r.rows[r.table.selected];
            w.write_record([
                r.repeat.to_string(),
                r.seed.to_string(),
                r.selected.to_string(),
                row.scores.param_count.to_string(),
                r.table.aggregate[r.table.selected].map_or(String::new(), |a| a.to_string()),
                gt.and_then(|g| g.get(&r.selected)).map_or(String::new(), |a| a.to_string()),
            ])?;
        }
        w.flush().map_err(|e| Error::io("selections csv", e))?;
        Ok(())
    }
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return Some((mean, 0.0));
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Some((mean, var.sqrt()))
}

/// Samples `cfg.n` genotypes from `space` per repeat, scores them and keeps
/// the one with the highest aggregated rank.
pub fn random_search(
    space: &[CellGenotype],
    macro_cfg: &MacroConfig,
    dataset: &LabeledDataset,
    cfg: &SearchConfig,
) -> Result<RandomSearchResult> {
    cfg.validate()?;
    if space.len() < cfg.n {
        return Err(Error::Config(format!(
            "cannot sample {} candidates from a space of {}",
            cfg.n,
            space.len()
        )));
    }
    let score_cfg = cfg.score_config();
    let metrics: Vec<_> = cfg.metrics.iter().collect();
    let mut repeats = Vec::with_capacity(cfg.repeats);
    for r in 0..cfg.repeats {
        let start = Instant::now();
        let repeat_seed = seed::derive_indexed(cfg.seed, "repeat", r as u64);
        let picks = sample(&mut seed::rng(seed::derive(repeat_seed, "sample")), space.len(), cfg.n);
        let candidates: Vec<CellGenotype> = picks.iter().map(|i| space[i]).collect();
        let ctx = EvalContext::prepare(dataset, &score_cfg, repeat_seed)?;
        let rows = par_map(cfg.jobs, &candidates, |i, g| {
            let mut c = score_cfg.clone();
            c.train.seed = seed::derive_indexed(repeat_seed, "train", i as u64);
            evaluate_candidate(g, macro_cfg, &ctx, &c, seed::derive_indexed(repeat_seed, "init", i as u64))
        })?
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        let labels: Vec<String> = candidates.iter().map(ToString::to_string).collect();
        let scores: Vec<Vec<f64>> = rows.iter().map(|m| score_row(&m.scores, &cfg.metrics)).collect();
        let table = aggregate_ranks(&labels, &metrics, &scores)?;
        let selected = candidates[table.selected];
        log::info!("repeat {r}: selected {selected}");
        repeats.push(RepeatOutcome {
            repeat: r,
            seed: repeat_seed,
            selected,
            rows,
            table,
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    Ok(RandomSearchResult {
        metrics: cfg.metrics.clone(),
        repeats,
    })
}

/// One evaluated removal in a pruning round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneTraceRow {
    pub round: usize,
    pub edge: usize,
    pub op: String,
    /// Supernet mask after this removal.
    pub candidate_state: String,
    pub param_count: usize,
    pub lr1: Option<f64>,
    pub lr2: Option<f64>,
    pub ntk_score: Option<f64>,
    pub theta_pred: Option<f64>,
    pub loss_score: Option<f64>,
    pub diverged: bool,
    pub aggregate_rank: Option<f64>,
    pub removed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneOutcome {
    pub genotype: CellGenotype,
    pub rounds: usize,
    pub trace: Vec<PruneTraceRow>,
    pub tables: Vec<RankTable>,
}

impl PruneOutcome {
    pub fn write_trace_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for row in &self.trace {
            w.serialize(row)?;
        }
        w.flush().map_err(|e| Error::io("prune trace csv", e))?;
        Ok(())
    }
}

/// Prunes a supernet down to one operator per edge. Each round evaluates
/// every legal removal from a shared per-round initialization.
pub fn prune_search(macro_cfg: &MacroConfig, dataset: &LabeledDataset, cfg: &SearchConfig) -> Result<PruneOutcome> {
    cfg.validate()?;
    let mut score_cfg = cfg.score_config();
    score_cfg.train.iterations = cfg.supernet_iterations;
    let metrics: Vec<_> = cfg.metrics.iter().collect();
    let mut state = SupernetState::with_ops(&cfg.prune_ops)?;
    let mut trace = Vec::new();
    let mut tables = Vec::new();
    let mut round = 0;

    while !state.is_fully_pruned() {
        let round_seed = seed::derive_indexed(cfg.seed, "round", round as u64);
        let ctx = EvalContext::prepare(dataset, &score_cfg, round_seed)?;
        let mut round_cfg = score_cfg.clone();
        round_cfg.train.seed = seed::derive(round_seed, "train");
        let init_seed = seed::derive(round_seed, "init");

        let moves = state.removable();
        let states = moves
            .iter()
            .map(|&(e, op)| prune_operator(&state, e, op))
            .collect::<Result<Vec<_>>>()?;
        let measured = par_map(cfg.jobs, &states, |_, s| {
            measure_state(s, macro_cfg, &ctx, &round_cfg, init_seed).map_err(|e| e.in_candidate(s.to_string()))
        })?
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        let labels: Vec<String> = moves.iter().map(|(e, op)| format!("edge{e}:{}", op.name())).collect();
        let scores: Vec<Vec<f64>> = measured.iter().map(|m| score_row(m, &cfg.metrics)).collect();
        let table = aggregate_ranks(&labels, &metrics, &scores)?;

        let chosen: Vec<usize> = match cfg.prune_mode {
            PruneMode::OnePerRound => vec![table.selected],
            PruneMode::OnePerEdgePerRound => {
                let mut picks = Vec::new();
                for edge in 0..crate::space::NUM_EDGES {
                    let best = (0..moves.len())
                        .filter(|&i| moves[i].0 == edge)
                        .filter_map(|i| table.aggregate[i].map(|a| (i, a)))
                        .max_by(|a, b| a.1.total_cmp(&b.1).then_with(|| labels[b.0].cmp(&labels[a.0])));
                    if let Some((i, _)) = best {
                        picks.push(i);
                    }
                }
                picks
            }
        };
        if chosen.is_empty() {
            return Err(Error::Degenerate(format!("pruning round {round} has no usable removal")));
        }
        for &i in &chosen {
            let (e, op) = moves[i];
            state = prune_operator(&state, e, op)?;
        }
        for (i, m) in measured.iter().enumerate() {
            trace.push(PruneTraceRow {
                round,
                edge: moves[i].0,
                op: moves[i].1.name().to_string(),
                candidate_state: states[i].to_string(),
                param_count: m.param_count,
                lr1: m.lr1,
                lr2: m.lr2,
                ntk_score: m.ntk_score,
                theta_pred: m.theta_pred,
                loss_score: m.loss_score,
                diverged: m.flags.diverged,
                aggregate_rank: table.aggregate[i],
                removed: chosen.contains(&i),
            });
        }
        log::info!("prune round {round}: state {state}");
        tables.push(table);
        round += 1;
    }
    let genotype = state
        .to_genotype()
        .ok_or_else(|| Error::State("pruned supernet is not a genotype".into()))?;
    Ok(PruneOutcome {
        genotype,
        rounds: round,
        trace,
        tables,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_dataset, SynthSpec};
    use crate::space::{all_genotypes, count_params};

    fn tiny() -> (MacroConfig, LabeledDataset) {
        let m = MacroConfig {
            stem_channels: 4,
            input_resolution: 8,
            ..MacroConfig::default()
        };
        (m, synth_dataset(&SynthSpec::new(10, 4, 8, 3)).unwrap())
    }

    #[test]
    fn param_search_picks_the_largest_candidate() {
        let (m, ds) = tiny();
        let space: Vec<_> = all_genotypes().collect();
        let cfg = SearchConfig {
            n: 40,
            repeats: 2,
            metrics: "param".parse().unwrap(),
            ..Default::default()
        };
        let res = random_search(&space, &m, &ds, &cfg).unwrap();
        for r in &res.repeats {
            let max = r.rows.iter().map(|v| v.scores.param_count).max().unwrap();
            assert_eq!(count_params(&r.selected, &m), max);
        }
    }

    #[test]
    fn full_space_param_search_selects_all_conv3x3() {
        let (m, ds) = tiny();
        let space: Vec<_> = all_genotypes().collect();
        let cfg = SearchConfig {
            n: space.len(),
            repeats: 1,
            metrics: "param".parse().unwrap(),
            ..Default::default()
        };
        let res = random_search(&space, &m, &ds, &cfg).unwrap();
        assert_eq!(res.repeats[0].selected, CellGenotype::uniform(CellOp::Conv3x3));
    }

    #[test]
    fn param_pruning_keeps_conv3x3() {
        let (m, ds) = tiny();
        for mode in [PruneMode::OnePerRound, PruneMode::OnePerEdgePerRound] {
            let cfg = SearchConfig {
                metrics: "param".parse().unwrap(),
                prune_mode: mode,
                ..Default::default()
            };
            let out = prune_search(&m, &ds, &cfg).unwrap();
            // removing the smallest operator leaves the largest supernet
            assert_eq!(out.genotype, CellGenotype::uniform(CellOp::Conv3x3));
            let expected = if mode == PruneMode::OnePerRound { 24 } else { 4 };
            assert_eq!(out.rounds, expected);
            assert_eq!(out.trace.iter().filter(|r| r.removed).count(), 24);
        }
    }

    #[test]
    fn config_validation() {
        let cfg = SearchConfig { n: 1, ..Default::default() };
        assert!(cfg.validate().is_err());
        assert_eq!("one-per-round".parse::<PruneMode>().unwrap(), PruneMode::OnePerRound);
        assert!("sometimes".parse::<PruneMode>().is_err());
    }
}
