use super::genotype::{CellGenotype, CellOp, EDGE_NODES, NUM_EDGES};
use super::supernet::SupernetState;
use super::{MacroConfig, BN_EPS};
use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::{init_tensor, Graph, InitScheme, NodeId, ParamRole, ParamStore, Scalar, Tensor};

/// ReLU (optional) → Conv → BN.
#[derive(Clone, Debug)]
struct ConvBn {
    conv: usize,
    gamma: usize,
    beta: usize,
    stride: usize,
    padding: usize,
    relu_first: bool,
    path: String,
}

struct Builder<'a, T> {
    store: &'a mut ParamStore<T>,
    seed: u64,
    init: InitScheme,
}

impl<T: Scalar> Builder<'_, T> {
    /// Each group is drawn from its own stream keyed by name, so the same
    /// name gets the same initial values in every network built from `seed`.
    fn weight(&mut self, name: String, shape: &[usize], fan_in: usize, fan_out: usize, role: ParamRole) -> usize {
        let value = init_tensor(shape, fan_in, fan_out, self.init, seed::derive(self.seed, &name));
        self.store.insert(name, value, role)
    }

    fn bn(&mut self, prefix: &str, c: usize) -> (usize, usize) {
        let g = self
            .store
            .insert(format!("{prefix}.bn.gamma"), Tensor::full(&[c], T::one()), ParamRole::Feature);
        let b = self
            .store
            .insert(format!("{prefix}.bn.beta"), Tensor::zeros(&[c]), ParamRole::Feature);
        (g, b)
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_bn(&mut self, path: String, cin: usize, cout: usize, k: usize, stride: usize, relu_first: bool) -> ConvBn {
        let conv = self.weight(
            format!("{path}.conv.weight"),
            &[cout, cin, k, k],
            cin * k * k,
            cout * k * k,
            ParamRole::Feature,
        );
        let (gamma, beta) = self.bn(&path, cout);
        ConvBn {
            conv,
            gamma,
            beta,
            stride,
            padding: k / 2,
            relu_first,
            path,
        }
    }
}

impl ConvBn {
    fn forward<T: Scalar>(&self, params: &ParamStore<T>, g: &mut Graph<T>, x: NodeId) -> Result<NodeId> {
        let x = if self.relu_first {
            g.relu(x, &format!("{}.relu", self.path))?
        } else {
            x
        };
        let w = g.param(params, self.conv);
        let y = g.conv2d(x, w, self.stride, self.padding, &format!("{}.conv", self.path))?;
        let gamma = g.param(params, self.gamma);
        let beta = g.param(params, self.beta);
        g.batchnorm(y, gamma, beta, BN_EPS, &format!("{}.bn", self.path))
    }
}

#[derive(Clone, Debug)]
struct Candidate {
    op: CellOp,
    conv: Option<ConvBn>,
}

#[derive(Clone, Debug)]
struct Cell {
    path: String,
    edges: Vec<Vec<Candidate>>,
}

#[derive(Clone, Debug)]
struct Reduction {
    path: String,
    a: ConvBn,
    b: ConvBn,
    shortcut: usize,
}

/// Pre-classifier features and logits of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    pub features: NodeId,
    pub logits: NodeId,
}

/// An instantiated network over the cell space. A plain network has one
/// candidate per edge; a supernet carries several, gated by its
/// [`SupernetState`].
#[derive(Clone, Debug)]
pub struct Network<T> {
    macro_cfg: MacroConfig,
    params: ParamStore<T>,
    stem: ConvBn,
    stages: Vec<Vec<Cell>>,
    reductions: Vec<Reduction>,
    head_gamma: usize,
    head_beta: usize,
    fc_weight: usize,
    fc_bias: usize,
    state: SupernetState,
    seed: u64,
    init: InitScheme,
}

impl<T: Scalar> Network<T> {
    /// Instantiates `genotype` with Kaiming-uniform weights.
    pub fn build(genotype: &CellGenotype, macro_cfg: &MacroConfig, seed: u64) -> Result<Self> {
        Self::build_with_init(genotype, macro_cfg, seed, InitScheme::default())
    }

    pub fn build_with_init(
        genotype: &CellGenotype,
        macro_cfg: &MacroConfig,
        seed: u64,
        init: InitScheme,
    ) -> Result<Self> {
        Self::with_state(SupernetState::from_genotype(genotype), macro_cfg, seed, init)
    }

    /// Builds every operator that is active in `state`.
    pub fn with_state(state: SupernetState, macro_cfg: &MacroConfig, seed: u64, init: InitScheme) -> Result<Self> {
        macro_cfg.validate()?;
        let mut params = ParamStore::new();
        let mut b = Builder {
            store: &mut params,
            seed,
            init,
        };
        let c0 = macro_cfg.stem_channels;
        let stem = b.conv_bn("stem".into(), macro_cfg.input_channels, c0, 3, 1, false);
        let mut stages = Vec::new();
        let mut reductions = Vec::new();
        for s in 0..macro_cfg.num_stages {
            let c = macro_cfg.stage_channels(s);
            if s > 0 {
                let path = format!("reduce{s}");
                let a = b.conv_bn(format!("{path}.a"), c / 2, c, 3, 2, true);
                let bb = b.conv_bn(format!("{path}.b"), c, c, 3, 1, true);
                let shortcut = b.weight(
                    format!("{path}.shortcut.conv.weight"),
                    &[c, c / 2, 1, 1],
                    c / 2,
                    c,
                    ParamRole::Feature,
                );
                reductions.push(Reduction { path, a, b: bb, shortcut });
            }
            let mut cells = Vec::new();
            for ci in 0..macro_cfg.cells_per_stage {
                let path = format!("stage{}.cell{ci}", s + 1);
                let edges = (0..NUM_EDGES)
                    .map(|e| {
                        state
                            .active_ops(e)
                            .into_iter()
                            .map(|op| Candidate {
                                op,
                                conv: op
                                    .kernel()
                                    .map(|k| b.conv_bn(format!("{path}.edge{e}.{}", op.name()), c, c, k, 1, true)),
                            })
                            .collect()
                    })
                    .collect();
                cells.push(Cell { path, edges });
            }
            stages.push(cells);
        }
        let cf = macro_cfg.final_channels();
        let (head_gamma, head_beta) = b.bn("head", cf);
        let fc_weight = b.weight(
            "head.fc.weight".into(),
            &[macro_cfg.num_classes, cf],
            cf,
            macro_cfg.num_classes,
            ParamRole::PredictionWeight,
        );
        let fc_bias = params.insert(
            "head.fc.bias",
            Tensor::zeros(&[macro_cfg.num_classes]),
            ParamRole::PredictionBias,
        );
        Ok(Network {
            macro_cfg: macro_cfg.clone(),
            params,
            stem,
            stages,
            reductions,
            head_gamma,
            head_beta,
            fc_weight,
            fc_bias,
            state,
            seed,
            init,
        })
    }

    pub fn macro_config(&self) -> &MacroConfig {
        &self.macro_cfg
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn init_scheme(&self) -> InitScheme {
        self.init
    }

    pub fn state(&self) -> &SupernetState {
        &self.state
    }

    /// The genotype this network realises, once every edge has one operator.
    pub fn genotype(&self) -> Option<CellGenotype> {
        self.state.to_genotype()
    }

    /// Narrows the active operator set; operators can only be removed.
    pub fn set_state(&mut self, state: SupernetState) -> Result<()> {
        for e in 0..NUM_EDGES {
            for op in state.active_ops(e) {
                if !self.state.is_active(e, op) {
                    return Err(Error::Contract(format!(
                        "edge {e} operator {} was not built into this network",
                        op.name()
                    )));
                }
            }
        }
        self.state = state;
        Ok(())
    }

    pub fn num_parameters(&self) -> usize {
        self.params.scalar_count()
    }

    pub fn forward(&self, g: &mut Graph<T>, images: &Tensor<T>) -> Result<ForwardOutput> {
        let m = &self.macro_cfg;
        let r = m.input_resolution;
        match images.dims4() {
            Some([_, c, h, w]) if c == m.input_channels && h == r && w == r => {}
            _ => {
                return Err(Error::shape(
                    "input",
                    format!("expected [N, {}, {r}, {r}], got {:?}", m.input_channels, images.shape()),
                ))
            }
        }
        let mut x = g.input(images.clone(), "input");
        x = self.stem.forward(&self.params, g, x)?;
        for (s, cells) in self.stages.iter().enumerate() {
            if s > 0 {
                x = self.reduction_forward(&self.reductions[s - 1], g, x)?;
            }
            for cell in cells {
                x = self.cell_forward(cell, g, x)?;
            }
        }
        let gamma = g.param(&self.params, self.head_gamma);
        let beta = g.param(&self.params, self.head_beta);
        let y = g.batchnorm(x, gamma, beta, BN_EPS, "head.bn")?;
        let y = g.relu(y, "head.relu")?;
        let features = g.global_avg_pool(y, "head.pool")?;
        let w = g.param(&self.params, self.fc_weight);
        let b = g.param(&self.params, self.fc_bias);
        let logits = g.linear(features, w, b, "head.fc")?;
        Ok(ForwardOutput { features, logits })
    }

    fn reduction_forward(&self, red: &Reduction, g: &mut Graph<T>, x: NodeId) -> Result<NodeId> {
        let a = red.a.forward(&self.params, g, x)?;
        let b = red.b.forward(&self.params, g, a)?;
        let pooled = g.avgpool2(x, &format!("{}.shortcut.pool", red.path))?;
        let w = g.param(&self.params, red.shortcut);
        let sc = g.conv2d(pooled, w, 1, 0, &format!("{}.shortcut.conv", red.path))?;
        g.add(&[sc, b], &format!("{}.sum", red.path))
    }

    /// Node `j` is the sum of every active operator on edges `i → j`.
    fn cell_forward(&self, cell: &Cell, g: &mut Graph<T>, input: NodeId) -> Result<NodeId> {
        let mut nodes = vec![input];
        for to in 1..4 {
            let mut terms = Vec::new();
            for (e, &(from, t)) in EDGE_NODES.iter().enumerate() {
                if t != to {
                    continue;
                }
                for cand in &cell.edges[e] {
                    if !self.state.is_active(e, cand.op) {
                        continue;
                    }
                    let src = nodes[from];
                    let out = match cand.op {
                        CellOp::Zeroize => continue,
                        CellOp::SkipConnect => src,
                        CellOp::AvgPool3x3 => {
                            g.avgpool3(src, &format!("{}.edge{e}.avg_pool_3x3", cell.path))?
                        }
                        CellOp::Conv1x1 | CellOp::Conv3x3 => cand
                            .conv
                            .as_ref()
                            .expect("conv candidates carry parameters")
                            .forward(&self.params, g, src)?,
                    };
                    terms.push(out);
                }
            }
            let node = match terms.len() {
                0 => {
                    let shape = g.value(input).shape().to_vec();
                    g.constant(Tensor::zeros(&shape), &format!("{}.node{to}.zero", cell.path))
                }
                1 => terms[0],
                _ => g.add(&terms, &format!("{}.node{to}", cell.path))?,
            };
            nodes.push(node);
        }
        Ok(nodes[3])
    }
}
