//! Desk-scale ground truth: train a genotype on a dataset split and report
//! held-out top-1 accuracy.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::seed;
use crate::space::{CellGenotype, MacroConfig, Network};
use crate::tensor::{Graph, InitScheme, Sgd, Tensor};
use crate::trainer::loss_and_grads;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub init: InitScheme,
    pub holdout_per_class: usize,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            epochs: 2,
            batch_size: 32,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            init: InitScheme::KaimingUniform,
            holdout_per_class: 10,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    /// Percent in `[0, 100]`; 0 when training diverged.
    pub accuracy: f64,
    pub diverged: bool,
}

/// Trains `genotype` from scratch for `cfg.epochs` passes over the training
/// split. All randomness derives from `seed`.
pub fn oracle_train(
    genotype: &CellGenotype,
    macro_cfg: &MacroConfig,
    dataset: &LabeledDataset,
    cfg: &OracleConfig,
    seed: u64,
) -> Result<OracleResult> {
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::Config("oracle epochs and batch size must be >= 1".into()));
    }
    let (train, held) = dataset.split_holdout(cfg.holdout_per_class, seed::derive(seed, "holdout"))?;
    let mut net = Network::<f32>::build_with_init(genotype, macro_cfg, seed::derive(seed, "init"), cfg.init)?;
    let mut opt = Sgd::new(cfg.lr, cfg.momentum, cfg.weight_decay);
    let mut rng = seed::rng(seed::derive(seed, "epochs"));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let diverged = OracleResult {
        accuracy: 0.0,
        diverged: true,
    };

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            // a single-sample batch has no BN variance
            if chunk.len() < 2 {
                continue;
            }
            let labels: Vec<usize> = chunk.iter().map(|&i| train.labels[i]).collect();
            let step = loss_and_grads(&mut net, &train.images.select_batch(chunk), &labels)
                .and_then(|loss| {
                    if loss.is_finite() {
                        opt.step(net.params_mut())
                    } else {
                        Err(Error::Diverged { iteration: epoch })
                    }
                });
            match step {
                Ok(()) => {}
                Err(Error::NonFinite { .. } | Error::Diverged { .. }) => {
                    log::warn!("{genotype}: oracle training diverged in epoch {epoch}");
                    return Ok(diverged);
                }
                Err(e) => return Err(e),
            }
        }
    }

    let correct = count_correct(&net, &held.images, &held.labels, cfg.batch_size.max(2))?;
    match correct {
        Some(c) => Ok(OracleResult {
            accuracy: 100.0 * c as f64 / held.len() as f64,
            diverged: false,
        }),
        None => Ok(diverged),
    }
}

/// Top-1 hits; BN normalizes with each evaluation batch's statistics.
fn count_correct(net: &Network<f32>, images: &Tensor<f32>, labels: &[usize], batch: usize) -> Result<Option<usize>> {
    let idx: Vec<usize> = (0..labels.len()).collect();
    let mut correct = 0;
    for chunk in idx.chunks(batch) {
        let mut g = Graph::new();
        let out = net.forward(&mut g, &images.select_batch(chunk))?;
        let logits = g.value(out.logits);
        if !logits.all_finite() {
            return Ok(None);
        }
        let c = logits.shape()[1];
        for (row, &i) in logits.data().chunks(c).zip(chunk) {
            let pred = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
                .map(|(k, _)| k)
                .unwrap_or(0);
            correct += usize::from(pred == labels[i]);
        }
    }
    Ok(Some(correct))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_dataset, SynthSpec};
    use crate::space::CellOp;

    #[test]
    fn zero_features_score_chance_or_zero() {
        let ds = synth_dataset(&SynthSpec::new(4, 12, 8, 1)).unwrap();
        let m = MacroConfig {
            stem_channels: 4,
            num_classes: 4,
            input_resolution: 8,
            ..MacroConfig::default()
        };
        let cfg = OracleConfig {
            epochs: 1,
            holdout_per_class: 2,
            ..Default::default()
        };
        let g = CellGenotype::uniform(CellOp::Zeroize);
        let a = oracle_train(&g, &m, &ds, &cfg, 9).unwrap();
        let b = oracle_train(&g, &m, &ds, &cfg, 9).unwrap();
        assert_eq!(a, b);
        assert!(!a.diverged);
        assert!((0.0..=100.0).contains(&a.accuracy));
    }
}
