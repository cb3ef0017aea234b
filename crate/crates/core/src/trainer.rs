//! Short training on a proxy set: snapshot the initial weights, run `m`
//! SGD iterations, snapshot again and re-evaluate the loss.

use std::io::Write;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::ProxyDataset;
use crate::error::{Error, Result};
use crate::seed;
use crate::space::Network;
use crate::tensor::{Graph, InitScheme, ParamRole, ParamStore, Sgd};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub init: InitScheme,
    /// Drives mini-batch order (unused in full-batch mode).
    pub seed: u64,
    /// `None` trains on the whole proxy set every iteration.
    pub batch_size: Option<usize>,
    /// Append the classifier bias to the prediction-layer vectors.
    pub include_pred_bias: bool,
    /// Keep BN affine parameters in the feature-layer vectors.
    pub include_bn_in_feat: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 50,
            lr: 0.2,
            momentum: 0.9,
            weight_decay: 5e-4,
            init: InitScheme::KaimingUniform,
            seed: 0,
            batch_size: None,
            include_pred_bias: false,
            include_bn_in_feat: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be >= 1".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("learning rate must be > 0".into()));
        }
        if self.batch_size == Some(0) {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Weights before and after short training, plus the loss trajectory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightSnapshot {
    pub pred_weight_0: Vec<f64>,
    pub pred_weight_t: Vec<f64>,
    pub feat_0: Vec<f64>,
    pub feat_t: Vec<f64>,
    /// Loss on the full proxy set after the last update.
    pub final_loss: f64,
    /// Pre-update loss of every iteration's batch.
    pub loss_curve: Vec<f64>,
}

impl WeightSnapshot {
    pub fn write_loss_curve_csv<W: Write>(&self, label: &str, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["network", "iteration", "loss"])?;
        for (i, l) in self.loss_curve.iter().enumerate() {
            w.write_record([label, &i.to_string(), &format!("{l:.9}")])?;
        }
        w.flush().map_err(|e| Error::io("loss curve", e))?;
        Ok(())
    }
}

fn prediction_vector(params: &ParamStore<f32>, cfg: &TrainConfig) -> Vec<f64> {
    let mut v = params.flatten_role(ParamRole::PredictionWeight);
    if cfg.include_pred_bias {
        v.extend(params.flatten_role(ParamRole::PredictionBias));
    }
    v
}

fn feature_vector(params: &ParamStore<f32>, cfg: &TrainConfig) -> Vec<f64> {
    params
        .groups()
        .iter()
        .filter(|g| g.role == ParamRole::Feature)
        .filter(|g| cfg.include_bn_in_feat || !g.name.contains(".bn."))
        .flat_map(|g| g.value.data().iter().map(|&v| v as f64))
        .collect()
}

pub(crate) fn loss_and_grads(net: &mut Network<f32>, images: &crate::tensor::Tensor<f32>, labels: &[usize]) -> Result<f64> {
    let mut g = Graph::new();
    let out = net.forward(&mut g, images)?;
    let loss = g.cross_entropy(out.logits, labels, "loss")?;
    let value = g.value(loss).data()[0] as f64;
    let grads = g.backward(loss)?;
    let params = net.params_mut();
    params.zero_grad();
    grads.accumulate_into(params);
    Ok(value)
}

/// Proxy-set loss without touching gradients.
pub fn evaluate_loss(net: &Network<f32>, proxy: &ProxyDataset) -> Result<f64> {
    let mut g = Graph::new();
    let out = net.forward(&mut g, &proxy.images)?;
    let loss = g.cross_entropy(out.logits, &proxy.labels, "loss")?;
    Ok(g.value(loss).data()[0] as f64)
}

/// Runs `cfg.iterations` SGD steps on `proxy`. The network must be freshly
/// initialized; its initial weights are captured before the first step.
pub fn short_train(net: &mut Network<f32>, proxy: &ProxyDataset, cfg: &TrainConfig) -> Result<WeightSnapshot> {
    cfg.validate()?;
    if proxy.is_empty() {
        return Err(Error::InsufficientData("empty proxy dataset".into()));
    }
    let pred_weight_0 = prediction_vector(net.params(), cfg);
    let feat_0 = feature_vector(net.params(), cfg);
    let mut opt = Sgd::new(cfg.lr, cfg.momentum, cfg.weight_decay);
    let mut loss_curve = Vec::with_capacity(cfg.iterations);

    let n = proxy.len();
    let batch = cfg.batch_size.map_or(n, |b| b.min(n));
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = seed::rng(seed::derive(cfg.seed, "minibatch"));
    let mut cursor = n;

    for it in 0..cfg.iterations {
        let diverged = |e: Error| match e {
            Error::NonFinite { .. } => Error::Diverged { iteration: it },
            other => other,
        };
        let loss = if batch == n {
            loss_and_grads(net, &proxy.images, &proxy.labels).map_err(diverged)?
        } else {
            if cursor + batch > n {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let idx = &order[cursor..cursor + batch];
            cursor += batch;
            let labels: Vec<usize> = idx.iter().map(|&i| proxy.labels[i]).collect();
            loss_and_grads(net, &proxy.images.select_batch(idx), &labels).map_err(diverged)?
        };
        if !loss.is_finite() {
            return Err(Error::Diverged { iteration: it });
        }
        loss_curve.push(loss);
        opt.step(net.params_mut()).map_err(diverged)?;
    }

    let final_loss = evaluate_loss(net, proxy).map_err(|e| match e {
        Error::NonFinite { .. } => Error::Diverged {
            iteration: cfg.iterations,
        },
        other => other,
    })?;
    if !final_loss.is_finite() {
        return Err(Error::Diverged {
            iteration: cfg.iterations,
        });
    }
    Ok(WeightSnapshot {
        pred_weight_0,
        pred_weight_t: prediction_vector(net.params(), cfg),
        feat_0,
        feat_t: feature_vector(net.params(), cfg),
        final_loss,
        loss_curve,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{sample_proxy, synth_dataset, SynthSpec};
    use crate::space::{CellGenotype, CellOp, MacroConfig};

    fn setup(res: usize) -> (MacroConfig, ProxyDataset) {
        let ds = synth_dataset(&SynthSpec::new(10, 20, res, 4)).unwrap();
        let proxy = sample_proxy(&ds, 10, 10, 1).unwrap();
        let m = MacroConfig {
            stem_channels: 8,
            input_resolution: res,
            ..MacroConfig::default()
        };
        (m, proxy)
    }

    #[test]
    fn zero_iterations_rejected() {
        let (m, proxy) = setup(8);
        let mut net = Network::build(&CellGenotype::uniform(CellOp::Conv3x3), &m, 0).unwrap();
        let cfg = TrainConfig { iterations: 0, ..Default::default() };
        assert!(matches!(short_train(&mut net, &proxy, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn one_iteration_is_one_step() {
        let (m, proxy) = setup(8);
        let g = CellGenotype::uniform(CellOp::Conv1x1);
        let mut net = Network::build(&g, &m, 0).unwrap();
        let cfg = TrainConfig { iterations: 1, ..Default::default() };
        let snap = short_train(&mut net, &proxy, &cfg).unwrap();
        assert_eq!(snap.loss_curve.len(), 1);

        // reproduce the single step by hand
        let mut manual = Network::<f32>::build(&g, &m, 0).unwrap();
        loss_and_grads(&mut manual, &proxy.images, &proxy.labels).unwrap();
        Sgd::new(cfg.lr, cfg.momentum, cfg.weight_decay)
            .step(manual.params_mut())
            .unwrap();
        assert_eq!(manual.params().flatten_values(), net.params().flatten_values());
    }

    #[test]
    fn zero_feature_network_keeps_uniform_loss() {
        let (m, proxy) = setup(8);
        let mut net = Network::build(&CellGenotype::uniform(CellOp::Zeroize), &m, 3).unwrap();
        let snap = short_train(&mut net, &proxy, &TrainConfig::default()).unwrap();
        let ln10 = 10f64.ln();
        assert!(snap.loss_curve.iter().all(|l| (l - ln10).abs() < 1e-3));
        assert!((snap.final_loss - ln10).abs() < 1e-3);
        // only weight decay acts on the classifier: w_t is a positive multiple of w_0
        let ratio = snap.pred_weight_t[0] / snap.pred_weight_0[0];
        assert!(ratio > 0.0 && ratio < 1.0);
        for (a, b) in snap.pred_weight_0.iter().zip(&snap.pred_weight_t) {
            assert!((b - ratio * a).abs() < 1e-6 * a.abs().max(1e-3));
        }
    }

    #[test]
    fn zero_features_without_decay_leave_classifier_unchanged() {
        let (m, proxy) = setup(8);
        let mut net = Network::build(&CellGenotype::uniform(CellOp::Zeroize), &m, 3).unwrap();
        let cfg = TrainConfig { weight_decay: 0.0, iterations: 10, ..Default::default() };
        let snap = short_train(&mut net, &proxy, &cfg).unwrap();
        assert_eq!(snap.pred_weight_0, snap.pred_weight_t);
    }

    #[test]
    fn minibatch_mode_is_deterministic() {
        let (m, proxy) = setup(8);
        let g: CellGenotype = "3|1|2|0|3|4".parse().unwrap();
        let cfg = TrainConfig { iterations: 6, batch_size: Some(32), seed: 5, ..Default::default() };
        let mut a = Network::build(&g, &m, 1).unwrap();
        let mut b = Network::build(&g, &m, 1).unwrap();
        let sa = short_train(&mut a, &proxy, &cfg).unwrap();
        let sb = short_train(&mut b, &proxy, &cfg).unwrap();
        assert_eq!(sa, sb);
    }

    #[test]
    fn excessive_learning_rate_reports_divergence() {
        let (m, proxy) = setup(8);
        let mut net = Network::build(&CellGenotype::uniform(CellOp::Conv3x3), &m, 0).unwrap();
        let cfg = TrainConfig { lr: 1e30, iterations: 20, ..Default::default() };
        match short_train(&mut net, &proxy, &cfg) {
            Err(Error::Diverged { iteration }) => assert!(iteration <= 20),
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
