use super::kernels::{self, BatchNormCache, ConvGeometry};
use super::{ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Input,
    Param(usize),
    Constant,
    Conv2d {
        x: NodeId,
        w: NodeId,
        geom: ConvGeometry,
    },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        cache: BatchNormCache<T>,
    },
    Relu(NodeId),
    AvgPool3(NodeId),
    AvgPool2(NodeId),
    GlobalAvgPool(NodeId),
    Linear {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Add(Vec<NodeId>),
    Mul(NodeId, NodeId),
    Sum(NodeId),
    CrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
    path: String,
}

/// Define-by-run tape. Nodes are appended in execution order, which is a
/// topological order by construction.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    taps: Vec<NodeId>,
}

/// Per-node adjoints produced by one backward sweep.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(usize, NodeId)>,
}

impl<T: Scalar> Gradients<T> {
    /// Adjoint of a leaf (input or parameter) node.
    pub fn node(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// Gradient w.r.t. parameter group `param` (summed over every use).
    pub fn param(&self, param: usize) -> Option<Tensor<T>> {
        let mut total: Option<Tensor<T>> = None;
        for &(p, node) in &self.params {
            if p != param {
                continue;
            }
            if let Some(g) = self.node(node) {
                match &mut total {
                    Some(t) => t.add_assign(g),
                    None => total = Some(g.clone()),
                }
            }
        }
        total
    }

    /// Adds every parameter gradient into `store.grad`.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) {
        for &(p, node) in &self.params {
            if let Some(g) = self.node(node) {
                store.get_mut(p).grad.add_assign(g);
            }
        }
    }
}

fn dims<T: Scalar>(t: &Tensor<T>, path: &str) -> Result<[usize; 4]> {
    t.dims4()
        .ok_or_else(|| Error::shape(path, format!("expected NCHW tensor, got {:?}", t.shape())))
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            taps: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn path(&self, id: NodeId) -> &str {
        &self.nodes[id.0].path
    }

    /// ReLU outputs in execution order.
    pub fn activation_taps(&self) -> &[NodeId] {
        &self.taps
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, path: &str) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            path: path.to_string(),
        });
        NodeId(self.nodes.len() - 1)
    }

    fn get(&self, id: NodeId, path: &str) -> Result<&Tensor<T>> {
        self.nodes
            .get(id.0)
            .map(|n| &n.value)
            .ok_or_else(|| Error::State(format!("`{path}` refers to a node not in this graph")))
    }

    pub fn input(&mut self, value: Tensor<T>, path: &str) -> NodeId {
        self.push(Op::Input, value, path)
    }

    pub fn constant(&mut self, value: Tensor<T>, path: &str) -> NodeId {
        self.push(Op::Constant, value, path)
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: usize) -> NodeId {
        let g = store.get(id);
        let path = g.name.clone();
        self.push(Op::Param(id), g.value.clone(), &path)
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        stride: usize,
        padding: usize,
        path: &str,
    ) -> Result<NodeId> {
        let [n, c, h, wd] = dims(self.get(x, path)?, path)?;
        let [k, wc, kh, kw] = dims(self.get(w, path)?, path)?;
        if wc != c {
            return Err(Error::shape(path, format!("weight expects {wc} channels, input has {c}")));
        }
        if kh != kw || !(kh == 1 || kh == 3) {
            return Err(Error::shape(path, format!("unsupported kernel {kh}x{kw}")));
        }
        if stride == 0 || h + 2 * padding < kh || wd + 2 * padding < kw {
            return Err(Error::shape(path, "kernel larger than padded input"));
        }
        let geom = ConvGeometry {
            batch: n,
            in_channels: c,
            height: h,
            width: wd,
            out_channels: k,
            kernel: kh,
            stride,
            padding,
        };
        let out = kernels::conv2d_forward(&geom, self.value(x).data(), self.value(w).data());
        let value = Tensor::new(vec![n, k, geom.out_height(), geom.out_width()], out)?;
        Ok(self.push(Op::Conv2d { x, w, geom }, value, path))
    }

    pub fn batchnorm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
        path: &str,
    ) -> Result<NodeId> {
        let d = dims(self.get(x, path)?, path)?;
        let (gv, bv) = (self.get(gamma, path)?, self.get(beta, path)?);
        if gv.len() != d[1] || bv.len() != d[1] {
            return Err(Error::shape(path, format!("affine params must have {} entries", d[1])));
        }
        let (y, cache) =
            kernels::batchnorm_forward(d, self.value(x).data(), gv.data(), bv.data(), eps);
        let value = Tensor::new(d.to_vec(), y)?;
        Ok(self.push(Op::BatchNorm { x, gamma, beta, cache }, value, path))
    }

    /// Records its on/off pattern as an activation tap.
    pub fn relu(&mut self, x: NodeId, path: &str) -> Result<NodeId> {
        let value = self.get(x, path)?.map(|v| if v > T::zero() { v } else { T::zero() });
        let id = self.push(Op::Relu(x), value, path);
        self.taps.push(id);
        Ok(id)
    }

    pub fn avgpool3(&mut self, x: NodeId, path: &str) -> Result<NodeId> {
        let d = dims(self.get(x, path)?, path)?;
        let y = kernels::avgpool3_forward(d, self.value(x).data());
        let value = Tensor::new(d.to_vec(), y)?;
        Ok(self.push(Op::AvgPool3(x), value, path))
    }

    pub fn avgpool2(&mut self, x: NodeId, path: &str) -> Result<NodeId> {
        let [n, c, h, w] = dims(self.get(x, path)?, path)?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape(path, format!("2x2 pooling needs even size, got {h}x{w}")));
        }
        let y = kernels::avgpool2_forward([n, c, h, w], self.value(x).data());
        let value = Tensor::new(vec![n, c, h / 2, w / 2], y)?;
        Ok(self.push(Op::AvgPool2(x), value, path))
    }

    pub fn global_avg_pool(&mut self, x: NodeId, path: &str) -> Result<NodeId> {
        let d = dims(self.get(x, path)?, path)?;
        let y = kernels::global_avg_pool_forward(d, self.value(x).data());
        let value = Tensor::new(vec![d[0], d[1]], y)?;
        Ok(self.push(Op::GlobalAvgPool(x), value, path))
    }

    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId, path: &str) -> Result<NodeId> {
        let xs = self.get(x, path)?.shape().to_vec();
        let ws = self.get(w, path)?.shape().to_vec();
        let bl = self.get(b, path)?.len();
        let (&[n, fin], &[fout, win]) = (&xs[..], &ws[..]) else {
            return Err(Error::shape(path, format!("linear on {xs:?} with weight {ws:?}")));
        };
        if win != fin || bl != fout {
            return Err(Error::shape(path, format!("linear on {xs:?} with weight {ws:?}")));
        }
        let y = kernels::linear_forward(
            n,
            fin,
            fout,
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
        );
        let value = Tensor::new(vec![n, fout], y)?;
        Ok(self.push(Op::Linear { x, w, b }, value, path))
    }

    /// Elementwise sum of equally shaped inputs.
    pub fn add(&mut self, xs: &[NodeId], path: &str) -> Result<NodeId> {
        let first = xs
            .first()
            .ok_or_else(|| Error::shape(path, "sum of zero inputs"))?;
        let mut acc = self.get(*first, path)?.clone();
        for &x in &xs[1..] {
            let v = self.get(x, path)?;
            if v.shape() != acc.shape() {
                return Err(Error::shape(
                    path,
                    format!("adding {:?} to {:?}", v.shape(), acc.shape()),
                ));
            }
            acc.add_assign(v);
        }
        Ok(self.push(Op::Add(xs.to_vec()), acc, path))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId, path: &str) -> Result<NodeId> {
        let (av, bv) = (self.get(a, path)?, self.get(b, path)?);
        if av.shape() != bv.shape() {
            return Err(Error::shape(path, format!("{:?} * {:?}", av.shape(), bv.shape())));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&p, &q)| p * q).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(Op::Mul(a, b), value, path))
    }

    pub fn sum(&mut self, x: NodeId, path: &str) -> Result<NodeId> {
        let s = self.get(x, path)?.data().iter().copied().sum::<T>();
        Ok(self.push(Op::Sum(x), Tensor::scalar(s), path))
    }

    /// Mean softmax cross-entropy of `[N, C]` logits.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize], path: &str) -> Result<NodeId> {
        let lv = self.get(logits, path)?;
        let &[n, c] = lv.shape() else {
            return Err(Error::shape(path, format!("logits must be [N, C], got {:?}", lv.shape())));
        };
        if labels.len() != n || labels.iter().any(|&l| l >= c) {
            return Err(Error::shape(path, format!("{} labels for {n} samples of {c} classes", labels.len())));
        }
        if !lv.all_finite() {
            return Err(Error::NonFinite {
                path: self.nodes[logits.0].path.clone(),
            });
        }
        let (loss, probs) = kernels::softmax_cross_entropy(n, c, lv.data(), labels);
        let op = Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        Ok(self.push(op, Tensor::scalar(T::from_f64_lossy(loss)), path))
    }

    /// Reverse sweep from a scalar node with unit seed.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        let node = self
            .nodes
            .get(loss.0)
            .ok_or_else(|| Error::State("backward called before forward built the loss".into()))?;
        if node.value.len() != 1 {
            return Err(Error::shape(
                &node.path,
                format!("backward needs a scalar, got {:?}", node.value.shape()),
            ));
        }
        self.backward_seeded(loss, Tensor::full(node.value.shape(), T::one()))
    }

    /// Reverse sweep from `output` with an arbitrary upstream gradient.
    pub fn backward_seeded(&self, output: NodeId, seed: Tensor<T>) -> Result<Gradients<T>> {
        let out = self
            .nodes
            .get(output.0)
            .ok_or_else(|| Error::State("backward called before forward".into()))?;
        if seed.shape() != out.value.shape() {
            return Err(Error::shape(&out.path, "seed gradient shape differs from output"));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=output.0).map(|_| None).collect();
        grads[output.0] = Some(seed);
        let mut params = Vec::new();

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let mut send = |target: NodeId, delta: Tensor<T>| match &mut grads[target.0] {
                Some(acc) => acc.add_assign(&delta),
                slot => *slot = Some(delta),
            };
            match &node.op {
                Op::Input | Op::Constant => {}
                Op::Param(p) => params.push((*p, NodeId(idx))),
                Op::Conv2d { x, w, geom } => {
                    let (dx, dw) = kernels::conv2d_backward(
                        geom,
                        self.value(*x).data(),
                        self.value(*w).data(),
                        g.data(),
                    );
                    send(*x, Tensor::new(self.value(*x).shape().to_vec(), dx)?);
                    send(*w, Tensor::new(self.value(*w).shape().to_vec(), dw)?);
                }
                Op::BatchNorm { x, gamma, beta, cache } => {
                    let d = self.value(*x).dims4().expect("checked in forward");
                    let (dx, dg, db) =
                        kernels::batchnorm_backward(d, cache, self.value(*gamma).data(), g.data());
                    send(*x, Tensor::new(d.to_vec(), dx)?);
                    send(*gamma, Tensor::new(self.value(*gamma).shape().to_vec(), dg)?);
                    send(*beta, Tensor::new(self.value(*beta).shape().to_vec(), db)?);
                }
                Op::Relu(x) => {
                    let data = g
                        .data()
                        .iter()
                        .zip(node.value.data())
                        .map(|(&gv, &y)| if y > T::zero() { gv } else { T::zero() })
                        .collect();
                    send(*x, Tensor::new(g.shape().to_vec(), data)?);
                }
                Op::AvgPool3(x) => {
                    let d = self.value(*x).dims4().expect("checked in forward");
                    send(*x, Tensor::new(d.to_vec(), kernels::avgpool3_backward(d, g.data()))?);
                }
                Op::AvgPool2(x) => {
                    let d = self.value(*x).dims4().expect("checked in forward");
                    send(*x, Tensor::new(d.to_vec(), kernels::avgpool2_backward(d, g.data()))?);
                }
                Op::GlobalAvgPool(x) => {
                    let d = self.value(*x).dims4().expect("checked in forward");
                    let dx = kernels::global_avg_pool_backward(d, g.data());
                    send(*x, Tensor::new(d.to_vec(), dx)?);
                }
                Op::Linear { x, w, b } => {
                    let xv = self.value(*x);
                    let (n, fin) = (xv.shape()[0], xv.shape()[1]);
                    let fout = self.value(*w).shape()[0];
                    let (dx, dw, db) =
                        kernels::linear_backward(n, fin, fout, xv.data(), self.value(*w).data(), g.data());
                    send(*x, Tensor::new(vec![n, fin], dx)?);
                    send(*w, Tensor::new(vec![fout, fin], dw)?);
                    send(*b, Tensor::new(self.value(*b).shape().to_vec(), db)?);
                }
                Op::Add(xs) => {
                    for &x in xs {
                        send(x, g.clone());
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let da = g.data().iter().zip(bv.data()).map(|(&u, &v)| u * v).collect();
                    let db = g.data().iter().zip(av.data()).map(|(&u, &v)| u * v).collect();
                    send(*a, Tensor::new(av.shape().to_vec(), da)?);
                    send(*b, Tensor::new(bv.shape().to_vec(), db)?);
                }
                Op::Sum(x) => {
                    send(*x, Tensor::full(self.value(*x).shape(), g.data()[0]));
                }
                Op::CrossEntropy { logits, labels, probs } => {
                    let shape = self.value(*logits).shape().to_vec();
                    let (n, c) = (shape[0], shape[1]);
                    let scale = g.data()[0] / T::from_usize(n).unwrap();
                    let mut d = probs.clone();
                    for (i, &l) in labels.iter().enumerate() {
                        d[i * c + l] -= T::one();
                    }
                    d.iter_mut().for_each(|v| *v *= scale);
                    send(*logits, Tensor::new(shape, d)?);
                }
            }
            if matches!(node.op, Op::Param(_) | Op::Input) {
                grads[idx] = Some(g);
            }
        }
        Ok(Gradients { grads, params })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ParamRole;

    #[test]
    fn dot_product_gradient_is_the_fixed_input() {
        let mut store = ParamStore::<f64>::new();
        let w = store.insert("w", Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap(), ParamRole::Feature);
        let mut g = Graph::new();
        let x = g.input(Tensor::new(vec![3], vec![1.5, 2.5, -4.0]).unwrap(), "x");
        let wn = g.param(&store, w);
        let prod = g.mul(wn, x, "prod").unwrap();
        let loss = g.sum(prod, "loss").unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.param(w).unwrap().data(), &[1.5, 2.5, -4.0]);
    }

    #[test]
    fn zero_seed_gives_zero_grads() {
        let mut store = ParamStore::<f64>::new();
        let w = store.insert("w", Tensor::new(vec![2], vec![3.0, 4.0]).unwrap(), ParamRole::Feature);
        let mut g = Graph::new();
        let x = g.input(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap(), "x");
        let wn = g.param(&store, w);
        let prod = g.mul(wn, x, "prod").unwrap();
        let loss = g.sum(prod, "loss").unwrap();
        let grads = g.backward_seeded(loss, Tensor::scalar(0.0)).unwrap();
        assert!(grads.param(w).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_before_forward_is_a_state_error() {
        let g = Graph::<f32>::new();
        assert!(matches!(g.backward(NodeId(0)), Err(Error::State(_))));
    }

    #[test]
    fn conv_channel_mismatch_names_the_node() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::zeros(&[1, 2, 4, 4]), "in");
        let w = g.input(Tensor::zeros(&[3, 5, 3, 3]), "w");
        let err = g.conv2d(x, w, 1, 1, "stage1.cell0.edge2.conv3x3").unwrap_err();
        assert!(err.to_string().contains("stage1.cell0.edge2.conv3x3"), "{err}");
    }

    #[test]
    fn cross_entropy_rejects_non_finite_logits() {
        let mut g = Graph::<f32>::new();
        let z = g.input(Tensor::new(vec![1, 2], vec![f32::NAN, 0.0]).unwrap(), "head.fc");
        let err = g.cross_entropy(z, &[0], "loss").unwrap_err();
        assert!(matches!(err, Error::NonFinite { ref path } if path == "head.fc"));
    }

    #[test]
    fn relu_records_taps() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::new(vec![4], vec![-1.0, 2.0, 0.0, 3.0]).unwrap(), "x");
        let r = g.relu(x, "act").unwrap();
        assert_eq!(g.value(r).data(), &[0.0, 2.0, 0.0, 3.0]);
        assert_eq!(g.activation_taps(), &[r]);
    }
}
