mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, CommandFactory, Parser, Subcommand};
use nasproxy::harness::{self, DatasetSpec, Experiment, GroundTruthSpec, SweepParam};
use nasproxy::metrics::{MetricSet, ScoreConfig};
use nasproxy::search::{PruneMode, SearchConfig};
use nasproxy::space::{CellGenotype, CellOp, MacroConfig};
use nasproxy::stats::OracleConfig;
use nasproxy::tensor::InitScheme;
use nasproxy::trainer::TrainConfig;

/// Architecture-ranking proxy metrics on a cell search space.
#[derive(Parser, Debug)]
#[command(
    name = "nasproxy",
    version,
    about,
    after_help = "Any long flag can also come from `--config FILE` (one `key = value` per line). Flags on the command line win."
)]
struct Cli {
    /// Log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// `synth[:classes=..,per_class=..,resolution=..,seed=..]` or `cifar:FILE[,FILE..]`.
    #[arg(long, default_value = "synth")]
    dataset: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Worker threads for candidate evaluation.
    #[arg(long, default_value_t = 1)]
    jobs: usize,

    #[arg(long, default_value_t = 16)]
    stem_channels: usize,
    #[arg(long, default_value_t = 1)]
    cells_per_stage: usize,

    /// Short-training iterations.
    #[arg(long, default_value_t = 50)]
    iterations: usize,
    #[arg(long, default_value_t = 0.2)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 5e-4)]
    weight_decay: f64,
    /// kaiming_uniform, kaiming_normal or xavier_uniform.
    #[arg(long, default_value = "kaiming_uniform")]
    init: String,
    /// Mini-batch size for short training (full proxy set when absent).
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    include_pred_bias: bool,
    #[arg(long)]
    exclude_bn_from_feat: bool,

    #[arg(long, default_value_t = 10)]
    proxy_classes: usize,
    #[arg(long, default_value_t = 10)]
    proxy_per_class: usize,
    /// Samples for the linear-region metrics.
    #[arg(long, default_value_t = 64)]
    region_batch: usize,
    /// Samples for the NTK Jacobian.
    #[arg(long, default_value_t = 8)]
    ntk_batch: usize,
    #[arg(long, default_value_t = 1)]
    ntk_repeats: usize,
}

#[derive(Args, Debug, Clone)]
struct Truth {
    /// CSV with `genotype,accuracy` columns.
    #[arg(long, conflicts_with = "oracle_epochs")]
    ground_truth: Option<PathBuf>,
    /// Train every needed genotype for this many epochs and use its held-out accuracy.
    #[arg(long)]
    oracle_epochs: Option<usize>,
    #[arg(long, default_value_t = 32)]
    oracle_batch: usize,
    #[arg(long, default_value_t = 0.05)]
    oracle_lr: f64,
    #[arg(long, default_value_t = 10)]
    holdout_per_class: usize,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Score one genotype.
    Score {
        #[arg(long)]
        genotype: String,
        #[arg(long, default_value = "all")]
        metrics: String,
        #[command(flatten)]
        common: Common,
    },
    /// Random search; repeat `--metrics` to compare metric sets on the same samples.
    RandomSearch {
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long, default_values_t = ["angle,loss".to_string(), "angle,loss,param".to_string()])]
        metrics: Vec<String>,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[command(flatten)]
        truth: Truth,
        #[command(flatten)]
        common: Common,
    },
    /// Prune a supernet down to one operator per edge.
    PruneSearch {
        #[arg(long, default_value = "angle,loss")]
        metrics: String,
        #[arg(long, default_value_t = 100)]
        supernet_iters: usize,
        /// one-per-round or one-per-edge-per-round.
        #[arg(long, default_value = "one-per-edge-per-round")]
        mode: String,
        /// Operators the supernet starts with (ids or names).
        #[arg(long, default_value = "0,1,2,3,4")]
        ops: String,
        #[command(flatten)]
        common: Common,
    },
    /// Kendall tau between metrics, #Param and accuracy.
    Correlate {
        #[arg(long, default_value_t = 100)]
        sample: usize,
        #[arg(long, default_value = "all")]
        metrics: String,
        #[command(flatten)]
        truth: Truth,
        #[command(flatten)]
        common: Common,
    },
    /// Metric quality inside same-#Param groups.
    GroupStudy {
        #[arg(long, default_value_t = 3)]
        groups: usize,
        #[arg(long, default_value_t = 100)]
        n_per_group: usize,
        #[arg(long, default_value = "angle,loss")]
        metrics: String,
        #[command(flatten)]
        truth: Truth,
        #[command(flatten)]
        common: Common,
    },
    /// Re-score a fixed sample under different short-training settings.
    Sweep {
        /// iterations, classes, images or init.
        #[arg(long)]
        param: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long, default_value_t = 50)]
        sample: usize,
        #[arg(long, default_value = "angle,loss")]
        metrics: String,
        #[command(flatten)]
        truth: Truth,
        #[command(flatten)]
        common: Common,
    },
    /// Write every genotype with its #Param as CSV.
    Enumerate {
        #[arg(long, default_value_t = 16)]
        stem_channels: usize,
        #[arg(long, default_value_t = 1)]
        cells_per_stage: usize,
        #[arg(long, default_value_t = 10)]
        classes: usize,
        #[arg(long, default_value = "space.csv")]
        out: PathBuf,
    },
}

impl Common {
    fn experiment(&self) -> nasproxy::Result<Experiment> {
        let train = TrainConfig {
            iterations: self.iterations,
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            init: self.init.parse::<InitScheme>()?,
            seed: 0,
            batch_size: self.batch_size,
            include_pred_bias: self.include_pred_bias,
            include_bn_in_feat: !self.exclude_bn_from_feat,
        };
        train.validate()?;
        Ok(Experiment {
            dataset: self.dataset.parse::<DatasetSpec>()?,
            macro_cfg: MacroConfig {
                stem_channels: self.stem_channels,
                cells_per_stage: self.cells_per_stage,
                ..MacroConfig::default()
            },
            score: ScoreConfig {
                metrics: MetricSet::all(),
                train,
                proxy_classes: self.proxy_classes,
                proxy_per_class: self.proxy_per_class,
                region_batch: self.region_batch,
                ntk_batch: self.ntk_batch,
                ntk_repeats: self.ntk_repeats,
            },
            seed: self.seed,
            jobs: self.jobs.max(1),
            out: self.out.clone(),
        })
    }
}

impl Truth {
    fn spec(&self) -> GroundTruthSpec {
        match (&self.ground_truth, self.oracle_epochs) {
            (Some(path), _) => GroundTruthSpec::Csv { path: path.clone() },
            (None, Some(epochs)) => GroundTruthSpec::Oracle {
                config: OracleConfig {
                    epochs,
                    batch_size: self.oracle_batch,
                    lr: self.oracle_lr,
                    holdout_per_class: self.holdout_per_class,
                    ..OracleConfig::default()
                },
            },
            (None, None) => GroundTruthSpec::None,
        }
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        None => "-".into(),
        Some(x) if x == f64::MIN => "degenerate".into(),
        Some(x) => format!("{x:.6}"),
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Score {
            genotype,
            metrics,
            common,
        } => {
            let genotype: CellGenotype = genotype.parse()?;
            let mut exp = common.experiment()?;
            exp.score.metrics = metrics.parse()?;
            let mv = harness::score(&exp, &genotype)?;
            let s = &mv.scores;
            println!("genotype    {}", mv.genotype);
            println!("param_count {}", s.param_count);
            println!("lr1         {}", fmt_opt(s.lr1));
            println!("lr2         {}", fmt_opt(s.lr2));
            println!("ntk_score   {}", fmt_opt(s.ntk_score));
            println!("theta_pred  {}", fmt_opt(s.theta_pred));
            println!("theta_feat  {}", fmt_opt(s.theta_feat));
            println!("loss_score  {}", fmt_opt(s.loss_score));
            println!("wrote {}", exp.out.display());
        }
        Command::RandomSearch {
            n,
            metrics,
            repeats,
            truth,
            common,
        } => {
            let exp = common.experiment()?;
            let sets = metrics
                .iter()
                .map(|m| m.parse::<MetricSet>())
                .collect::<nasproxy::Result<Vec<_>>>()?;
            let search = SearchConfig {
                n,
                repeats,
                ..SearchConfig::default()
            };
            let start = std::time::Instant::now();
            let rows = harness::random_search_cmd(&exp, &search, &sets, &truth.spec())?;
            println!("{:<24} {:>10} {:>10} {:>12}", "metric set", "mean", "std", "mean #Param");
            for r in &rows {
                println!(
                    "{:<24} {:>10} {:>10} {:>12.0}",
                    r.metric_set,
                    fmt_opt(r.mean_accuracy),
                    fmt_opt(r.std_accuracy),
                    r.mean_param_count
                );
            }
            println!("search seconds {:.1}; wrote {}", start.elapsed().as_secs_f64(), exp.out.display());
        }
        Command::PruneSearch {
            metrics,
            supernet_iters,
            mode,
            ops,
            common,
        } => {
            let exp = common.experiment()?;
            let prune_ops = ops
                .split(',')
                .map(str::parse::<CellOp>)
                .collect::<nasproxy::Result<Vec<_>>>()?;
            let search = SearchConfig {
                metrics: metrics.parse()?,
                supernet_iterations: supernet_iters,
                prune_mode: mode.parse::<PruneMode>()?,
                prune_ops,
                ..SearchConfig::default()
            };
            let out = harness::prune_search_cmd(&exp, &search)?;
            println!("selected {} after {} rounds", out.genotype, out.rounds);
            println!("{}", out.genotype.arch_str());
        }
        Command::Correlate {
            sample,
            metrics,
            truth,
            common,
        } => {
            let exp = common.experiment()?;
            let report = harness::correlate(&exp, sample, &metrics.parse()?, &truth.spec())?;
            print!("{}", report.to_table());
        }
        Command::GroupStudy {
            groups,
            n_per_group,
            metrics,
            truth,
            common,
        } => {
            let exp = common.experiment()?;
            let rows = harness::group_study(&exp, groups, n_per_group, &metrics.parse()?, &truth.spec())?;
            for r in &rows {
                println!(
                    "group {} (#Param {}, {} networks): {} tau {}",
                    r.group,
                    r.param_count,
                    r.n,
                    r.metric,
                    fmt_opt(r.tau)
                );
            }
            println!("wrote {}", exp.out.display());
        }
        Command::Sweep {
            param,
            values,
            sample,
            metrics,
            truth,
            common,
        } => {
            let exp = common.experiment()?;
            let param: SweepParam = param.parse()?;
            let rows = harness::sweep(&exp, param, &values, sample, &metrics.parse()?, &truth.spec())?;
            for r in &rows {
                println!(
                    "{}={:<16} {:<10} tau vs {} {}",
                    r.param,
                    r.value,
                    r.metric,
                    r.reference,
                    fmt_opt(r.tau)
                );
            }
        }
        Command::Enumerate {
            stem_channels,
            cells_per_stage,
            classes,
            out,
        } => {
            let m = MacroConfig {
                stem_channels,
                cells_per_stage,
                num_classes: classes,
                ..MacroConfig::default()
            };
            let n = harness::enumerate(&m, &out).with_context(|| format!("enumerating into {}", out.display()))?;
            println!("wrote {n} genotypes to {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let names: Vec<String> = Cli::command()
        .get_subcommands()
        .map(|c| c.get_name().to_string())
        .collect();
    let names: Vec<&str> = names.iter().map(String::as_str).collect();
    let args = match config::merge(std::env::args_os().collect(), &names) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let cli = Cli::parse_from(args);
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e
                .chain()
                .find_map(|c| c.downcast_ref::<nasproxy::Error>())
                .map_or(1, nasproxy::Error::exit_code);
            ExitCode::from(code as u8)
        }
    }
}
