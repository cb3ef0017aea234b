//! Proxy metrics. Every stored score is oriented so that a higher value
//! predicts a better network:
//!
//! | field        | stored value              |
//! |--------------|---------------------------|
//! | `param_count`| #Param                    |
//! | `lr1`        | distinct activation codes |
//! | `lr2`        | `ln det K`                |
//! | `ntk_score`  | `-cond(Θ)`                |
//! | angle score  | `-θ_pred`                 |
//! | `theta_feat` | `θ_feat` (raw)            |
//! | `loss_score` | `-final training loss`    |
//!
//! Singular kernels yield [`DEGENERATE_SCORE`] together with a flag.

mod angle;
mod linalg;
mod ntk;
mod regions;

use std::collections::BTreeSet;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use angle::{angle, metric_angle_feat, metric_angle_pred, metric_loss, theta_pred};
pub use linalg::symmetric_eigenvalues;
pub use ntk::{logit_jacobian, metric_ntk, ntk_from_jacobian, NtkScore, NTK_SINGULAR_EPS};
pub use regions::{
    lr1_from_codes, lr2_from_codes, metric_lr1, metric_lr2, ActivationCodes, Lr1, Lr2, LR2_SINGULAR_EPS,
};

use crate::data::{sample_proxy, LabeledDataset, ProxyDataset};
use crate::error::{Error, Result};
use crate::seed;
use crate::space::{count_params, count_state_params, CellGenotype, MacroConfig, Network, SupernetState};
use crate::tensor::{Graph, Tensor};
use crate::trainer::{short_train, TrainConfig};

/// Minimal score assigned to singular kernels.
pub const DEGENERATE_SCORE: f64 = f64::MIN;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Angle,
    Loss,
    Param,
    Lr1,
    Lr2,
    Ntk,
    AngleFeat,
}

impl MetricKind {
    pub const ALL: [MetricKind; 7] = [
        MetricKind::Angle,
        MetricKind::Loss,
        MetricKind::Param,
        MetricKind::Lr1,
        MetricKind::Lr2,
        MetricKind::Ntk,
        MetricKind::AngleFeat,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MetricKind::Angle => "angle",
            MetricKind::Loss => "loss",
            MetricKind::Param => "param",
            MetricKind::Lr1 => "lr1",
            MetricKind::Lr2 => "lr2",
            MetricKind::Ntk => "ntk",
            MetricKind::AngleFeat => "angle_feat",
        }
    }

    fn label(self) -> &'static str {
        match self {
            MetricKind::Angle => "Angle",
            MetricKind::Loss => "Loss",
            MetricKind::Param => "#Param",
            MetricKind::Lr1 => "LR1",
            MetricKind::Lr2 => "LR2",
            MetricKind::Ntk => "NTK",
            MetricKind::AngleFeat => "AngleFeat",
        }
    }

    pub fn needs_training(self) -> bool {
        matches!(self, MetricKind::Angle | MetricKind::Loss | MetricKind::AngleFeat)
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MetricKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        MetricKind::ALL
            .into_iter()
            .find(|k| k.name() == s || (s == "#param" && *k == MetricKind::Param))
            .ok_or_else(|| Error::Config(format!("unknown metric `{s}`")))
    }
}

/// Non-empty ordered set of metrics.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub struct MetricSet(BTreeSet<MetricKind>);

impl MetricSet {
    pub fn new(kinds: impl IntoIterator<Item = MetricKind>) -> Result<Self> {
        let set: BTreeSet<_> = kinds.into_iter().collect();
        if set.is_empty() {
            return Err(Error::Config("metric set must not be empty".into()));
        }
        Ok(MetricSet(set))
    }

    pub fn all() -> Self {
        MetricSet(MetricKind::ALL.into_iter().collect())
    }

    pub fn contains(&self, k: MetricKind) -> bool {
        self.0.contains(&k)
    }

    pub fn iter(&self) -> impl Iterator<Item = MetricKind> + '_ {
        self.0.iter().copied()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn needs_training(&self) -> bool {
        self.iter().any(MetricKind::needs_training)
    }

    /// Row label in result tables: `AngleLoss`, `AngleLoss+#Param`, `LR2`, ...
    pub fn label(&self) -> String {
        let angle_loss = self.contains(MetricKind::Angle) && self.contains(MetricKind::Loss);
        let mut parts = Vec::new();
        if angle_loss {
            parts.push("AngleLoss".to_string());
        }
        for k in self.iter() {
            if angle_loss && matches!(k, MetricKind::Angle | MetricKind::Loss) {
                continue;
            }
            parts.push(k.label().to_string());
        }
        parts.join("+")
    }
}

impl fmt::Display for MetricSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<_> = self.iter().map(MetricKind::name).collect();
        f.write_str(&names.join(","))
    }
}

impl FromStr for MetricSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.trim().eq_ignore_ascii_case("all") {
            return Ok(MetricSet::all());
        }
        MetricSet::new(
            s.split([',', '+'])
                .filter(|p| !p.trim().is_empty())
                .map(str::parse)
                .collect::<Result<Vec<_>>>()?,
        )
    }
}

impl From<MetricSet> for String {
    fn from(m: MetricSet) -> String {
        m.to_string()
    }
}

impl TryFrom<String> for MetricSet {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

/// Everything that controls how one network is scored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreConfig {
    pub metrics: MetricSet,
    pub train: TrainConfig,
    pub proxy_classes: usize,
    pub proxy_per_class: usize,
    /// Samples for LR1/LR2.
    pub region_batch: usize,
    /// Samples for the NTK Jacobian (`n·C` reverse sweeps).
    pub ntk_batch: usize,
    /// NTK scores averaged over this many initializations.
    pub ntk_repeats: usize,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        ScoreConfig {
            metrics: MetricSet::all(),
            train: TrainConfig::default(),
            proxy_classes: 10,
            proxy_per_class: 10,
            region_batch: 64,
            ntk_batch: 8,
            ntk_repeats: 1,
        }
    }
}

/// Seeds of every stochastic choice behind one [`MetricVector`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalSeeds {
    pub init: u64,
    pub proxy: u64,
    pub batch: u64,
    pub train: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DegenerateFlags {
    pub lr1: bool,
    pub lr2: bool,
    pub ntk: bool,
    pub angle: bool,
    pub diverged: bool,
}

impl DegenerateFlags {
    pub fn any(&self) -> bool {
        self.lr1 || self.lr2 || self.ntk || self.angle || self.diverged
    }

    fn encode(&self) -> String {
        let mut v = Vec::new();
        for (on, name) in [
            (self.lr1, "lr1"),
            (self.lr2, "lr2"),
            (self.ntk, "ntk"),
            (self.angle, "angle"),
            (self.diverged, "diverged"),
        ] {
            if on {
                v.push(name);
            }
        }
        v.join(";")
    }

    fn decode(s: &str) -> Result<Self> {
        let mut f = DegenerateFlags::default();
        for part in s.split(';').filter(|p| !p.is_empty()) {
            match part {
                "lr1" => f.lr1 = true,
                "lr2" => f.lr2 = true,
                "ntk" => f.ntk = true,
                "angle" => f.angle = true,
                "diverged" => f.diverged = true,
                other => return Err(Error::Config(format!("unknown degenerate flag `{other}`"))),
            }
        }
        Ok(f)
    }
}

/// Scores of one network. Metrics that were not requested are `None`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub param_count: usize,
    pub lr1: Option<f64>,
    pub lr2: Option<f64>,
    pub ntk_score: Option<f64>,
    /// Raw prediction-layer angle in radians.
    pub theta_pred: Option<f64>,
    /// Raw feature-layer angle in radians.
    pub theta_feat: Option<f64>,
    pub loss_score: Option<f64>,
    pub flags: DegenerateFlags,
    #[serde(skip)]
    pub loss_curve: Vec<f64>,
}

impl Measurement {
    /// Oriented score of `kind`; training metrics of a diverged run are `-∞`.
    pub fn score(&self, kind: MetricKind) -> Option<f64> {
        if self.flags.diverged && kind.needs_training() {
            return Some(f64::NEG_INFINITY);
        }
        match kind {
            MetricKind::Param => Some(self.param_count as f64),
            MetricKind::Angle => self.theta_pred.map(|t| -t),
            MetricKind::Loss => self.loss_score,
            MetricKind::AngleFeat => self.theta_feat,
            MetricKind::Lr1 => self.lr1,
            MetricKind::Lr2 => self.lr2,
            MetricKind::Ntk => self.ntk_score,
        }
    }
}

/// All proxy scores of one genotype together with the seeds behind them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricVector {
    pub genotype: CellGenotype,
    #[serde(flatten)]
    pub scores: Measurement,
    pub seeds: EvalSeeds,
}

impl MetricVector {
    pub fn score(&self, kind: MetricKind) -> Option<f64> {
        self.scores.score(kind)
    }
}

/// Flat CSV form of [`MetricVector`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub genotype: String,
    pub param_count: usize,
    pub lr1: Option<f64>,
    pub lr2: Option<f64>,
    pub ntk_score: Option<f64>,
    pub theta_pred: Option<f64>,
    pub theta_feat: Option<f64>,
    pub angle_score: Option<f64>,
    pub loss_score: Option<f64>,
    pub degenerate: String,
    pub seed_init: u64,
    pub seed_proxy: u64,
    pub seed_batch: u64,
    pub seed_train: u64,
}

impl From<&MetricVector> for MetricRow {
    fn from(m: &MetricVector) -> Self {
        let genotype = m.genotype;
        let seeds = &m.seeds;
        let m = &m.scores;
        MetricRow {
            genotype: genotype.to_string(),
            param_count: m.param_count,
            lr1: m.lr1,
            lr2: m.lr2,
            ntk_score: m.ntk_score,
            theta_pred: m.theta_pred,
            theta_feat: m.theta_feat,
            angle_score: m.theta_pred.map(|t| -t),
            loss_score: m.loss_score,
            degenerate: m.flags.encode(),
            seed_init: seeds.init,
            seed_proxy: seeds.proxy,
            seed_batch: seeds.batch,
            seed_train: seeds.train,
        }
    }
}

impl TryFrom<MetricRow> for MetricVector {
    type Error = Error;

    fn try_from(r: MetricRow) -> Result<Self> {
        Ok(MetricVector {
            genotype: r.genotype.parse()?,
            scores: Measurement {
                param_count: r.param_count,
                lr1: r.lr1,
                lr2: r.lr2,
                ntk_score: r.ntk_score,
                theta_pred: r.theta_pred,
                theta_feat: r.theta_feat,
                loss_score: r.loss_score,
                flags: DegenerateFlags::decode(&r.degenerate)?,
                loss_curve: Vec::new(),
            },
            seeds: EvalSeeds {
                init: r.seed_init,
                proxy: r.seed_proxy,
                batch: r.seed_batch,
                train: r.seed_train,
            },
        })
    }
}

pub fn write_metric_csv<W: Write>(rows: &[MetricVector], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(MetricRow::from(r))?;
    }
    if rows.is_empty() {
        w.write_record(metric_csv_header())?;
    }
    w.flush().map_err(|e| Error::io("metric csv", e))?;
    Ok(())
}

fn metric_csv_header() -> [&'static str; 14] {
    [
        "genotype",
        "param_count",
        "lr1",
        "lr2",
        "ntk_score",
        "theta_pred",
        "theta_feat",
        "angle_score",
        "loss_score",
        "degenerate",
        "seed_init",
        "seed_proxy",
        "seed_batch",
        "seed_train",
    ]
}

pub fn read_metric_csv<R: Read>(input: R) -> Result<Vec<MetricVector>> {
    let mut r = csv::Reader::from_reader(input);
    r.deserialize::<MetricRow>()
        .map(|row| MetricVector::try_from(row?))
        .collect()
}

/// Data shared by every candidate of one experiment: the proxy set and the
/// fixed batches for training-free metrics. Parts the metric set does not
/// use are left empty.
#[derive(Clone, Debug)]
pub struct EvalContext {
    pub proxy: Option<ProxyDataset>,
    pub region_batch: Option<Tensor<f32>>,
    pub ntk_batch: Option<Tensor<f64>>,
    pub proxy_seed: u64,
    pub batch_seed: u64,
}

impl EvalContext {
    pub fn prepare(dataset: &LabeledDataset, cfg: &ScoreConfig, seed: u64) -> Result<Self> {
        let proxy_seed = seed::derive(seed, "proxy");
        let batch_seed = seed::derive(seed, "metric-batch");
        let m = &cfg.metrics;
        let proxy = if m.needs_training() {
            Some(sample_proxy(dataset, cfg.proxy_classes, cfg.proxy_per_class, proxy_seed)?)
        } else {
            None
        };
        let regions = m.contains(MetricKind::Lr1) || m.contains(MetricKind::Lr2);
        let ntk = m.contains(MetricKind::Ntk);
        let mut n = 0;
        if regions {
            n = cfg.region_batch;
        }
        if ntk {
            n = n.max(cfg.ntk_batch);
        }
        let batch = if n > 0 {
            Some(dataset.random_batch(n, batch_seed)?)
        } else {
            None
        };
        // both metrics read a prefix of the same random draw
        let prefix = |k: usize| {
            batch
                .as_ref()
                .filter(|_| k > 0)
                .map(|b| b.select_batch(&(0..k).collect::<Vec<_>>()))
        };
        let region_batch = if regions { prefix(cfg.region_batch) } else { None };
        let ntk_batch = if ntk { prefix(cfg.ntk_batch).map(|b| b.cast()) } else { None };
        Ok(EvalContext {
            proxy,
            region_batch,
            ntk_batch,
            proxy_seed,
            batch_seed,
        })
    }
}

/// Scores `genotype` with networks initialized from `init_seed`.
pub fn evaluate_candidate(
    genotype: &CellGenotype,
    macro_cfg: &MacroConfig,
    ctx: &EvalContext,
    cfg: &ScoreConfig,
    init_seed: u64,
) -> Result<MetricVector> {
    let scores = measure_state(&SupernetState::from_genotype(genotype), macro_cfg, ctx, cfg, init_seed)
        .map_err(|e| e.in_candidate(genotype.to_string()))?;
    Ok(MetricVector {
        genotype: *genotype,
        scores,
        seeds: EvalSeeds {
            init: init_seed,
            proxy: ctx.proxy_seed,
            batch: ctx.batch_seed,
            train: cfg.train.seed,
        },
    })
}

/// Scores the network (or supernet) realising `state`.
pub fn measure_state(
    state: &SupernetState,
    macro_cfg: &MacroConfig,
    ctx: &EvalContext,
    cfg: &ScoreConfig,
    init_seed: u64,
) -> Result<Measurement> {
    let m = &cfg.metrics;
    let mut mv = Measurement::default();
    let regions = m.contains(MetricKind::Lr1) || m.contains(MetricKind::Lr2);
    let build32 = || Network::<f32>::with_state(state.clone(), macro_cfg, init_seed, cfg.train.init);
    mv.param_count = count_state_params(state, macro_cfg);

    if regions {
        let batch = ctx
            .region_batch
            .as_ref()
            .filter(|b| b.shape()[0] >= 2)
            .ok_or_else(|| Error::InsufficientData("region batch needs >= 2 samples".into()))?;
        let net = build32()?;
        let mut g = Graph::new();
        net.forward(&mut g, batch)?;
        let codes = ActivationCodes::from_graph(&g)?;
        if m.contains(MetricKind::Lr1) {
            let r = lr1_from_codes(&codes);
            mv.lr1 = Some(r.score);
            mv.flags.lr1 = r.degenerate;
        }
        if m.contains(MetricKind::Lr2) {
            let r = lr2_from_codes(&codes);
            mv.lr2 = Some(r.score);
            mv.flags.lr2 = r.degenerate;
        }
    }
    if m.contains(MetricKind::Ntk) {
        let repeats = cfg.ntk_repeats.max(1);
        let mut total = 0.0;
        for r in 0..repeats {
            let s = if r == 0 {
                init_seed
            } else {
                seed::derive_indexed(init_seed, "ntk-repeat", r as u64)
            };
            let net64 = Network::<f64>::with_state(state.clone(), macro_cfg, s, cfg.train.init)?;
            let batch = ctx
                .ntk_batch
                .as_ref()
                .ok_or_else(|| Error::InsufficientData("NTK batch is empty".into()))?;
            let res = metric_ntk(&net64, batch)?;
            mv.flags.ntk |= res.degenerate;
            total += res.score;
        }
        mv.ntk_score = Some(if mv.flags.ntk {
            DEGENERATE_SCORE
        } else {
            total / repeats as f64
        });
    }
    if m.needs_training() {
        let proxy = ctx
            .proxy
            .as_ref()
            .ok_or_else(|| Error::State("evaluation context has no proxy set".into()))?;
        let mut net = build32()?;
        match short_train(&mut net, proxy, &cfg.train) {
            Ok(snap) => {
                mv.loss_score = Some(metric_loss(&snap));
                let (tp, tf) = (theta_pred(&snap), metric_angle_feat(&snap));
                mv.flags.angle = tp.is_err() || tf.is_err();
                mv.theta_pred = tp.ok();
                mv.theta_feat = tf.ok();
                mv.loss_curve = snap.loss_curve;
            }
            Err(Error::Diverged { iteration }) => {
                log::warn!("{state}: short training diverged at iteration {iteration}");
                mv.flags.diverged = true;
            }
            Err(e) => return Err(e),
        }
    }
    Ok(mv)
}

/// Builds, measures and short-trains one network; every seed derives from `seed`.
pub fn score_network(
    genotype: &CellGenotype,
    macro_cfg: &MacroConfig,
    dataset: &LabeledDataset,
    cfg: &ScoreConfig,
    seed: u64,
) -> Result<MetricVector> {
    let ctx = EvalContext::prepare(dataset, cfg, seed)?;
    let mut cfg = cfg.clone();
    cfg.train.seed = seed::derive(seed, "train");
    evaluate_candidate(genotype, macro_cfg, &ctx, &cfg, seed::derive(seed, "init"))
}

/// #Param score; no data or initialization involved.
pub fn metric_param(genotype: &CellGenotype, macro_cfg: &MacroConfig) -> usize {
    count_params(genotype, macro_cfg)
}
