use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::seed;

/// What a parameter group contributes to: the feature extractor or the
/// final classifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamRole {
    Feature,
    PredictionWeight,
    PredictionBias,
}

/// Weight initialization for conv and linear weights. BN gamma starts at 1,
/// beta and biases at 0 under every scheme.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    #[default]
    KaimingUniform,
    KaimingNormal,
    XavierUniform,
}

impl fmt::Display for InitScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InitScheme::KaimingUniform => "kaiming_uniform",
            InitScheme::KaimingNormal => "kaiming_normal",
            InitScheme::XavierUniform => "xavier_uniform",
        })
    }
}

impl FromStr for InitScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "kaiming_uniform" => Ok(InitScheme::KaimingUniform),
            "kaiming_normal" => Ok(InitScheme::KaimingNormal),
            "xavier_uniform" => Ok(InitScheme::XavierUniform),
            other => Err(Error::Config(format!("unknown init scheme `{other}`"))),
        }
    }
}

/// Draws a weight tensor with the given fan-in/fan-out. Values are drawn in
/// 64-bit and cast, so f32 and f64 networks share one initialization.
pub fn init_tensor<T: Scalar>(
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
    scheme: InitScheme,
    seed: u64,
) -> Tensor<T> {
    let mut rng = seed::rng(seed);
    let n: usize = shape.iter().product();
    let data = match scheme {
        InitScheme::KaimingUniform => {
            let bound = (6.0 / fan_in as f64).sqrt();
            (0..n)
                .map(|_| T::from_f64_lossy(rng.random_range(-bound..bound)))
                .collect()
        }
        InitScheme::KaimingNormal => {
            let std = (2.0 / fan_in as f64).sqrt();
            (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    T::from_f64_lossy(z * std)
                })
                .collect()
        }
        InitScheme::XavierUniform => {
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            (0..n)
                .map(|_| T::from_f64_lossy(rng.random_range(-bound..bound)))
                .collect()
        }
    };
    Tensor::new(shape.to_vec(), data).expect("init shape")
}

#[derive(Clone, Debug)]
pub struct ParamGroup<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub role: ParamRole,
}

/// Named, ordered parameter groups of one network.
#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    groups: Vec<ParamGroup<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            groups: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Registers a group and returns its index. Names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>, role: ParamRole) -> usize {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter `{name}`");
        if role == ParamRole::PredictionWeight {
            assert!(
                self.groups.iter().all(|g| g.role != ParamRole::PredictionWeight),
                "second prediction weight `{name}`"
            );
        }
        let grad = Tensor::zeros(value.shape());
        let id = self.groups.len();
        self.index.insert(name.clone(), id);
        self.groups.push(ParamGroup {
            name,
            value,
            grad,
            role,
        });
        id
    }

    pub fn groups(&self) -> &[ParamGroup<T>] {
        &self.groups
    }

    pub fn groups_mut(&mut self) -> &mut [ParamGroup<T>] {
        &mut self.groups
    }

    pub fn get(&self, id: usize) -> &ParamGroup<T> {
        &self.groups[id]
    }

    pub fn get_mut(&mut self, id: usize) -> &mut ParamGroup<T> {
        &mut self.groups[id]
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn scalar_count(&self) -> usize {
        self.groups.iter().map(|g| g.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.groups {
            g.grad.data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
    }

    /// The unique prediction-layer weight group.
    pub fn prediction_weight(&self) -> Option<&ParamGroup<T>> {
        self.groups
            .iter()
            .find(|g| g.role == ParamRole::PredictionWeight)
    }

    /// Concatenated values of every group with `role`, in registration order.
    pub fn flatten_role(&self, role: ParamRole) -> Vec<f64> {
        self.groups
            .iter()
            .filter(|g| g.role == role)
            .flat_map(|g| g.value.data().iter().map(|v| v.as_f64()))
            .collect()
    }

    pub fn flatten_values(&self) -> Vec<f64> {
        self.groups
            .iter()
            .flat_map(|g| g.value.data().iter().map(|v| v.as_f64()))
            .collect()
    }

    pub fn flatten_grads(&self) -> Vec<f64> {
        self.groups
            .iter()
            .flat_map(|g| g.grad.data().iter().map(|v| v.as_f64()))
            .collect()
    }
}
