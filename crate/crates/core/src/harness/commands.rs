use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use super::{slug, Experiment, RunManifest};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::metrics::{
    evaluate_candidate, score_network, write_metric_csv, EvalContext, MetricKind, MetricSet, MetricVector,
    ScoreConfig,
};
use crate::search::{mean_std, par_map, prune_search, random_search, PruneOutcome, SearchConfig};
use crate::seed;
use crate::space::{all_genotypes, count_params, CellGenotype, MacroConfig};
use crate::stats::{
    correlation_study, group_by_param, kendall, oracle_train, CorrelationReport, GroundTruthSource,
    GroundTruthTable, OracleConfig,
};
use crate::tensor::InitScheme;

/// Where accuracies for correlation come from.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GroundTruthSpec {
    #[default]
    None,
    Csv { path: PathBuf },
    Oracle { config: OracleConfig },
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

fn resolve_ground_truth(
    spec: &GroundTruthSpec,
    genotypes: &[CellGenotype],
    macro_cfg: &MacroConfig,
    ds: &LabeledDataset,
    exp: &Experiment,
) -> Result<Option<GroundTruthTable>> {
    match spec {
        GroundTruthSpec::None => Ok(None),
        GroundTruthSpec::Csv { path } => {
            let f = File::open(path).map_err(|e| Error::io(path, e))?;
            GroundTruthTable::read_csv(f, path.clone()).map(Some)
        }
        GroundTruthSpec::Oracle { config } => {
            let oracle_seed = seed::derive(exp.seed, "oracle");
            let mut unique = genotypes.to_vec();
            unique.sort();
            unique.dedup();
            // each genotype's oracle seed depends only on its text, not on sampling order
            let results = par_map(exp.jobs, &unique, |_, g| {
                oracle_train(g, macro_cfg, ds, config, seed::derive(oracle_seed, &g.to_string()))
                    .map_err(|e| e.in_candidate(g.to_string()))
            })?;
            let mut table = GroundTruthTable {
                accuracy: Default::default(),
                diverged: Vec::new(),
                source: GroundTruthSource::Oracle {
                    config: config.clone(),
                    seed: oracle_seed,
                    dataset: ds.identity(),
                },
            };
            for (g, r) in unique.iter().zip(results) {
                let r = r?;
                if r.diverged {
                    table.diverged.push(*g);
                }
                table.insert(*g, r.accuracy)?;
            }
            Ok(Some(table))
        }
    }
}

/// Scores `genotypes` against one shared evaluation context. Candidate `i`
/// gets init/train seeds from `stream` and its index.
fn score_all(
    genotypes: &[CellGenotype],
    macro_cfg: &MacroConfig,
    ds: &LabeledDataset,
    cfg: &ScoreConfig,
    stream: u64,
    jobs: usize,
) -> Result<Vec<MetricVector>> {
    let ctx = EvalContext::prepare(ds, cfg, stream)?;
    par_map(jobs, genotypes, |i, g| {
        let mut c = cfg.clone();
        c.train.seed = seed::derive_indexed(stream, "train", i as u64);
        evaluate_candidate(g, macro_cfg, &ctx, &c, seed::derive_indexed(stream, "init", i as u64))
    })?
    .into_iter()
    .collect()
}

fn sample_space(n: usize, seed: u64) -> Result<Vec<CellGenotype>> {
    let space: Vec<CellGenotype> = all_genotypes().collect();
    if n < 2 || n > space.len() {
        return Err(Error::Config(format!("sample size must be in 2..={}", space.len())));
    }
    Ok(sample(&mut seed::rng(seed), space.len(), n)
        .iter()
        .map(|i| space[i])
        .collect())
}

fn write_metrics(path: PathBuf, rows: &[MetricVector], manifest: &mut RunManifest) -> Result<()> {
    write_metric_csv(rows, create(&path)?)?;
    manifest.outputs.push(path);
    Ok(())
}

/// `score`: one genotype, every requested metric.
pub fn score(exp: &Experiment, genotype: &CellGenotype) -> Result<MetricVector> {
    exp.ensure_out()?;
    let (ds, macro_cfg) = exp.load()?;
    let mut manifest = RunManifest::start("score", exp, exp.seed)?;
    let mv = score_network(genotype, &macro_cfg, &ds, &exp.score, exp.seed)?;
    manifest.seed("init", mv.seeds.init);
    manifest.seed("proxy", mv.seeds.proxy);
    manifest.seed("metric-batch", mv.seeds.batch);
    manifest.seed("train", mv.seeds.train);
    write_metrics(exp.path("metrics.csv"), std::slice::from_ref(&mv), &mut manifest)?;
    if !mv.scores.loss_curve.is_empty() {
        let path = exp.path("loss_curve.csv");
        let mut w = csv::Writer::from_writer(create(&path)?);
        w.write_record(["iteration", "loss"])?;
        for (i, l) in mv.scores.loss_curve.iter().enumerate() {
            w.write_record([i.to_string(), l.to_string()])?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        manifest.outputs.push(path);
    }
    manifest.record_degenerate(std::slice::from_ref(&mv));
    manifest.result = serde_json::to_value(&mv)?;
    manifest.finish(&exp.path("manifest.json"))?;
    Ok(mv)
}

/// One line of the random-search summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub metric_set: String,
    pub metrics: String,
    pub n: usize,
    pub repeats: usize,
    pub mean_accuracy: Option<f64>,
    pub std_accuracy: Option<f64>,
    pub mean_param_count: f64,
}

/// `random-search`: every metric set searches the same per-repeat samples.
/// Writes `summary.csv` (deterministic), `timing.csv` (wall clock) and one
/// directory per metric set.
pub fn random_search_cmd(
    exp: &Experiment,
    search: &SearchConfig,
    metric_sets: &[MetricSet],
    gt: &GroundTruthSpec,
) -> Result<Vec<SummaryRow>> {
    if metric_sets.is_empty() {
        return Err(Error::Config("at least one metric set is required".into()));
    }
    exp.ensure_out()?;
    let (ds, macro_cfg) = exp.load()?;
    let space: Vec<CellGenotype> = all_genotypes().collect();
    let mut manifest = RunManifest::start("random-search", &(exp, search, metric_sets, gt), exp.seed)?;
    let mut summary = Vec::new();
    let mut timing = Vec::new();
    for set in metric_sets {
        let cfg = SearchConfig {
            metrics: set.clone(),
            score: exp.score.clone(),
            seed: exp.seed,
            jobs: exp.jobs,
            ..search.clone()
        };
        let res = random_search(&space, &macro_cfg, &ds, &cfg)?;
        let truth = resolve_ground_truth(gt, &res.selections(), &macro_cfg, &ds, exp)?;
        let dir = exp.out.join(slug(&set.to_string()));
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let sel_path = dir.join("selections.csv");
        res.write_selections_csv(truth.as_ref(), create(&sel_path)?)?;
        manifest.outputs.push(sel_path);
        for rep in &res.repeats {
            let mut rm = RunManifest::start("random-search-repeat", &cfg, exp.seed)?;
            rm.seed("repeat", rep.seed);
            let cand = dir.join(format!("repeat{}_candidates.csv", rep.repeat));
            write_metrics(cand, &rep.rows, &mut rm)?;
            rm.record_degenerate(&rep.rows);
            rm.result = serde_json::json!({
                "selected": rep.selected.to_string(),
                "rank_table": rep.table,
                "search_seconds": rep.seconds,
            });
            rm.wall_clock_seconds = rep.seconds;
            let mpath = dir.join(format!("repeat{}_manifest.json", rep.repeat));
            manifest.outputs.extend(rm.outputs.clone());
            manifest.degenerate_events.extend(rm.degenerate_events.clone());
            manifest.seed(format!("{}/repeat{}", set, rep.repeat), rep.seed);
            rm.finish(&mpath)?;
            manifest.outputs.push(mpath);
            timing.push((set.label(), rep.repeat, rep.seconds));
        }
        let accs: Vec<f64> = truth
            .as_ref()
            .map(|t| res.selections().iter().filter_map(|g| t.get(g)).collect())
            .unwrap_or_default();
        let (mean, std) = mean_std(&accs).unzip();
        let params: Vec<f64> = res
            .selections()
            .iter()
            .map(|g| count_params(g, &macro_cfg) as f64)
            .collect();
        summary.push(SummaryRow {
            metric_set: set.label(),
            metrics: set.to_string(),
            n: cfg.n,
            repeats: cfg.repeats,
            mean_accuracy: mean,
            std_accuracy: std,
            mean_param_count: mean_std(&params).map_or(0.0, |m| m.0),
        });
    }
    let path = exp.path("summary.csv");
    let mut w = csv::Writer::from_writer(create(&path)?);
    for row in &summary {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    manifest.outputs.push(path);
    let path = exp.path("timing.csv");
    let mut w = csv::Writer::from_writer(create(&path)?);
    w.write_record(["metric_set", "repeat", "search_seconds"])?;
    for (label, r, s) in &timing {
        w.write_record([label.clone(), r.to_string(), format!("{s:.3}")])?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    manifest.outputs.push(path);
    manifest.result = serde_json::to_value(&summary)?;
    manifest.finish(&exp.path("manifest.json"))?;
    Ok(summary)
}

/// `prune-search`: writes `trace.csv` and the selected genotype.
pub fn prune_search_cmd(exp: &Experiment, search: &SearchConfig) -> Result<PruneOutcome> {
    exp.ensure_out()?;
    let (ds, macro_cfg) = exp.load()?;
    let cfg = SearchConfig {
        score: exp.score.clone(),
        seed: exp.seed,
        jobs: exp.jobs,
        ..search.clone()
    };
    let mut manifest = RunManifest::start("prune-search", &(exp, &cfg), exp.seed)?;
    let out = prune_search(&macro_cfg, &ds, &cfg)?;
    for r in 0..out.rounds {
        manifest.seed(format!("round{r}"), seed::derive_indexed(exp.seed, "round", r as u64));
    }
    for row in out.trace.iter().filter(|r| r.diverged) {
        manifest
            .degenerate_events
            .push(format!("round {} edge{}:{}: short training diverged", row.round, row.edge, row.op));
    }
    let path = exp.path("trace.csv");
    out.write_trace_csv(create(&path)?)?;
    manifest.outputs.push(path);
    let path = exp.path("selected.txt");
    std::fs::write(&path, format!("{}\n", out.genotype)).map_err(|e| Error::io(&path, e))?;
    manifest.outputs.push(path);
    manifest.result = serde_json::json!({
        "genotype": out.genotype.to_string(),
        "arch": out.genotype.arch_str(),
        "rounds": out.rounds,
        "rank_tables": out.tables,
    });
    manifest.finish(&exp.path("manifest.json"))?;
    Ok(out)
}

fn with_param(metrics: &MetricSet) -> Vec<MetricKind> {
    let mut kinds: Vec<MetricKind> = metrics.iter().collect();
    if !kinds.contains(&MetricKind::Param) {
        kinds.push(MetricKind::Param);
    }
    kinds
}

fn write_report(exp: &Experiment, report: &CorrelationReport, manifest: &mut RunManifest) -> Result<()> {
    let path = exp.path("correlation.csv");
    report.write_csv(create(&path)?)?;
    manifest.outputs.push(path);
    let path = exp.path("correlation.json");
    std::fs::write(&path, serde_json::to_string_pretty(report)? + "\n").map_err(|e| Error::io(&path, e))?;
    manifest.outputs.push(path);
    let path = exp.path("correlation.txt");
    std::fs::write(&path, report.to_table()).map_err(|e| Error::io(&path, e))?;
    manifest.outputs.push(path);
    Ok(())
}

fn write_ground_truth(exp: &Experiment, gt: &GroundTruthTable, manifest: &mut RunManifest) -> Result<()> {
    let path = exp.path("ground_truth.csv");
    gt.write_csv(create(&path)?)?;
    manifest.outputs.push(path);
    for g in &gt.diverged {
        manifest.degenerate_events.push(format!("{g}: oracle training diverged"));
    }
    Ok(())
}

/// `correlate`: Kendall τ between metrics, #Param and (optionally) accuracy
/// over a uniform sample of the space.
pub fn correlate(
    exp: &Experiment,
    sample_size: usize,
    metrics: &MetricSet,
    gt: &GroundTruthSpec,
) -> Result<CorrelationReport> {
    exp.ensure_out()?;
    let (ds, macro_cfg) = exp.load()?;
    let mut manifest = RunManifest::start("correlate", &(exp, sample_size, metrics, gt), exp.seed)?;
    let sample_seed = seed::derive(exp.seed, "sample");
    let stream = seed::derive(exp.seed, "score");
    manifest.seed("sample", sample_seed);
    manifest.seed("score", stream);
    let genotypes = sample_space(sample_size, sample_seed)?;
    let cfg = ScoreConfig {
        metrics: metrics.clone(),
        ..exp.score.clone()
    };
    let rows = score_all(&genotypes, &macro_cfg, &ds, &cfg, stream, exp.jobs)?;
    manifest.record_degenerate(&rows);
    write_metrics(exp.path("metrics.csv"), &rows, &mut manifest)?;
    let truth = resolve_ground_truth(gt, &genotypes, &macro_cfg, &ds, exp)?;
    if let Some(t) = &truth {
        write_ground_truth(exp, t, &mut manifest)?;
    }
    let report = correlation_study(&rows, &with_param(metrics), truth.as_ref())?;
    write_report(exp, &report, &mut manifest)?;
    manifest.result = serde_json::to_value(&report)?;
    manifest.finish(&exp.path("manifest.json"))?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupTauRow {
    pub group: usize,
    pub param_count: usize,
    pub group_size: usize,
    pub metric: String,
    pub n: usize,
    pub tau: Option<f64>,
}

/// `group-study`: networks sharing one #Param value, sampled from the
/// `groups` largest groups; τ of every metric against accuracy within
/// each group.
pub fn group_study(
    exp: &Experiment,
    groups: usize,
    per_group: usize,
    metrics: &MetricSet,
    gt: &GroundTruthSpec,
) -> Result<Vec<GroupTauRow>> {
    if groups == 0 || per_group < 2 {
        return Err(Error::Config("group study needs >= 1 group and >= 2 networks per group".into()));
    }
    exp.ensure_out()?;
    let (ds, macro_cfg) = exp.load()?;
    let mut manifest = RunManifest::start("group-study", &(exp, groups, per_group, metrics, gt), exp.seed)?;
    let mut all = group_by_param(&macro_cfg);
    all.sort_by(|a, b| b.genotypes.len().cmp(&a.genotypes.len()).then(a.param_count.cmp(&b.param_count)));
    all.truncate(groups);
    all.sort_by_key(|g| g.param_count);
    let cfg = ScoreConfig {
        metrics: metrics.clone(),
        ..exp.score.clone()
    };
    let mut out = Vec::new();
    for (gi, group) in all.iter().enumerate() {
        let gseed = seed::derive_indexed(exp.seed, "group", gi as u64);
        manifest.seed(format!("group{gi}"), gseed);
        let k = per_group.min(group.genotypes.len());
        let picks: Vec<CellGenotype> = sample(&mut seed::rng(seed::derive(gseed, "sample")), group.genotypes.len(), k)
            .iter()
            .map(|i| group.genotypes[i])
            .collect();
        let rows = score_all(&picks, &macro_cfg, &ds, &cfg, seed::derive(gseed, "score"), exp.jobs)?;
        manifest.record_degenerate(&rows);
        write_metrics(exp.path(&format!("group{gi}_metrics.csv")), &rows, &mut manifest)?;
        let truth = resolve_ground_truth(gt, &picks, &macro_cfg, &ds, exp)?;
        if let Some(t) = &truth {
            let path = exp.path(&format!("group{gi}_ground_truth.csv"));
            t.write_csv(create(&path)?)?;
            manifest.outputs.push(path);
            for kind in metrics.iter() {
                let (x, y): (Vec<f64>, Vec<f64>) = rows
                    .iter()
                    .filter_map(|r| Some((r.score(kind).filter(|s| !s.is_nan())?, t.get(&r.genotype)?)))
                    .unzip();
                let tau = if x.len() >= 2 { kendall(&x, &y)?.tau } else { None };
                out.push(GroupTauRow {
                    group: gi,
                    param_count: group.param_count,
                    group_size: group.genotypes.len(),
                    metric: kind.name().into(),
                    n: x.len(),
                    tau,
                });
            }
        }
    }
    let path = exp.path("group_tau.csv");
    let mut w = csv::Writer::from_writer(create(&path)?);
    if out.is_empty() {
        w.write_record(["group", "param_count", "group_size", "metric", "n", "tau"])?;
    }
    for row in &out {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    manifest.outputs.push(path);
    manifest.result = serde_json::to_value(&out)?;
    manifest.finish(&exp.path("manifest.json"))?;
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    Iterations,
    Classes,
    Images,
    Init,
}

impl FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "iterations" => Ok(SweepParam::Iterations),
            "classes" => Ok(SweepParam::Classes),
            "images" => Ok(SweepParam::Images),
            "init" => Ok(SweepParam::Init),
            other => Err(Error::Config(format!(
                "unknown sweep parameter `{other}` (iterations|classes|images|init)"
            ))),
        }
    }
}

impl SweepParam {
    fn name(self) -> &'static str {
        match self {
            SweepParam::Iterations => "iterations",
            SweepParam::Classes => "classes",
            SweepParam::Images => "images",
            SweepParam::Init => "init",
        }
    }

    fn apply(self, cfg: &mut ScoreConfig, value: &str) -> Result<()> {
        let int = || {
            value
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("sweep {} needs integers, got `{value}`", self.name())))
        };
        match self {
            SweepParam::Iterations => cfg.train.iterations = int()?,
            SweepParam::Classes => cfg.proxy_classes = int()?,
            SweepParam::Images => cfg.proxy_per_class = int()?,
            SweepParam::Init => cfg.train.init = value.parse::<InitScheme>()?,
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub param: String,
    pub value: String,
    pub metric: String,
    /// `accuracy` when ground truth is available, else `param`.
    pub reference: String,
    pub n: usize,
    pub tau: Option<f64>,
}

/// `sweep`: re-scores one fixed sample under each value of a short-training
/// setting and reports τ of every metric against the reference.
pub fn sweep(
    exp: &Experiment,
    param: SweepParam,
    values: &[String],
    sample_size: usize,
    metrics: &MetricSet,
    gt: &GroundTruthSpec,
) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    exp.ensure_out()?;
    let (ds, macro_cfg) = exp.load()?;
    let mut manifest = RunManifest::start("sweep", &(exp, param, values, sample_size, metrics, gt), exp.seed)?;
    let sample_seed = seed::derive(exp.seed, "sample");
    let stream = seed::derive(exp.seed, "score");
    manifest.seed("sample", sample_seed);
    manifest.seed("score", stream);
    let genotypes = sample_space(sample_size, sample_seed)?;
    let truth = resolve_ground_truth(gt, &genotypes, &macro_cfg, &ds, exp)?;
    if let Some(t) = &truth {
        write_ground_truth(exp, t, &mut manifest)?;
    }
    let mut out = Vec::new();
    for value in values {
        let mut cfg = ScoreConfig {
            metrics: metrics.clone(),
            ..exp.score.clone()
        };
        param.apply(&mut cfg, value)?;
        cfg.train.validate()?;
        let rows = score_all(&genotypes, &macro_cfg, &ds, &cfg, stream, exp.jobs)?;
        manifest.record_degenerate(&rows);
        write_metrics(
            exp.path(&format!("sweep_{}_{}_metrics.csv", param.name(), slug(value))),
            &rows,
            &mut manifest,
        )?;
        for kind in metrics.iter().filter(|&k| k != MetricKind::Param || truth.is_some()) {
            let reference = |r: &MetricVector| match &truth {
                Some(t) => t.get(&r.genotype),
                None => Some(r.scores.param_count as f64),
            };
            let (x, y): (Vec<f64>, Vec<f64>) = rows
                .iter()
                .filter_map(|r| Some((r.score(kind).filter(|s| !s.is_nan())?, reference(r)?)))
                .unzip();
            let tau = if x.len() >= 2 { kendall(&x, &y)?.tau } else { None };
            out.push(SweepRow {
                param: param.name().into(),
                value: value.clone(),
                metric: kind.name().into(),
                reference: if truth.is_some() { "accuracy" } else { "param" }.into(),
                n: x.len(),
                tau,
            });
        }
    }
    let path = exp.path("sweep.csv");
    let mut w = csv::Writer::from_writer(create(&path)?);
    for row in &out {
        w.serialize(row)?;
    }
    if out.is_empty() {
        w.write_record(["param", "value", "metric", "reference", "n", "tau"])?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    manifest.outputs.push(path);
    manifest.result = serde_json::to_value(&out)?;
    manifest.finish(&exp.path("manifest.json"))?;
    Ok(out)
}

/// `enumerate`: the whole space with #Param under the macro config.
pub fn enumerate(macro_cfg: &MacroConfig, path: &Path) -> Result<usize> {
    macro_cfg.validate()?;
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(["genotype", "param_count"])?;
    let mut n = 0;
    for g in all_genotypes() {
        w.write_record([g.to_string(), count_params(&g, macro_cfg).to_string()])?;
        n += 1;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(n)
}
