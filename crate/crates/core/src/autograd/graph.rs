use std::collections::HashMap;

use super::kernels::{self, ConvGeometry};
use super::param::{ParamId, ParamStore};
use super::tensor::{Float, Tensor};
use crate::error::{Error, Result};
use crate::nn::batchnorm::{bn_backward, bn_forward, BatchNormState, BnCache};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub usize);

/// Primitive operations understood by the engine.
#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Input(String),
    Param(ParamId),
    /// `(N×K) · (K×M)`.
    MatMul { a: NodeId, b: NodeId },
    /// NCHW input, `Cout×Cin×k×k` kernel, no bias.
    Conv2d {
        input: NodeId,
        kernel: NodeId,
        stride: usize,
        padding: usize,
    },
    /// Adds a per-column (rank 2) or per-channel (rank 4) bias.
    AddBias { input: NodeId, bias: NodeId },
    Relu(NodeId),
    /// `layer` indexes the batch-norm state slice passed to `forward`.
    BatchNorm {
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        layer: usize,
    },
    GlobalAvgPool(NodeId),
    SelectRows { input: NodeId, rows: Vec<usize> },
    /// Per-sample cross-entropy, output has one entry per logits row.
    SoftmaxCrossEntropy { logits: NodeId, labels: String },
    Sum(NodeId),
    Scale { input: NodeId, factor: f64 },
    Add { a: NodeId, b: NodeId },
}

impl Op {
    fn kind(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Param(_) => "param",
            Op::MatMul { .. } => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::AddBias { .. } => "add_bias",
            Op::Relu(_) => "relu",
            Op::BatchNorm { .. } => "batchnorm",
            Op::GlobalAvgPool(_) => "global_avg_pool",
            Op::SelectRows { .. } => "select_rows",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Op::Sum(_) => "sum",
            Op::Scale { .. } => "scale",
            Op::Add { .. } => "add",
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Input(_) | Op::Param(_) => vec![],
            Op::MatMul { a, b } | Op::Add { a, b } => vec![*a, *b],
            Op::Conv2d { input, kernel, .. } => vec![*input, *kernel],
            Op::AddBias { input, bias } => vec![*input, *bias],
            Op::BatchNorm {
                input, gamma, beta, ..
            } => vec![*input, *gamma, *beta],
            Op::Relu(x) | Op::GlobalAvgPool(x) | Op::Sum(x) => vec![*x],
            Op::SelectRows { input, .. } | Op::Scale { input, .. } => vec![*input],
            Op::SoftmaxCrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    name: Option<String>,
    requires_grad: bool,
}

/// Values bound to `Input` nodes (tensors) and to cross-entropy label slots.
#[derive(Clone, Debug, Default)]
pub struct Feed<F = f32> {
    pub tensors: HashMap<String, Tensor<F>>,
    pub labels: HashMap<String, Vec<usize>>,
}

impl<F: Float> Feed<F> {
    pub fn new() -> Self {
        Feed {
            tensors: HashMap::new(),
            labels: HashMap::new(),
        }
    }

    pub fn tensor(mut self, name: impl Into<String>, t: Tensor<F>) -> Self {
        self.tensors.insert(name.into(), t);
        self
    }

    pub fn labels(mut self, name: impl Into<String>, labels: Vec<usize>) -> Self {
        self.labels.insert(name.into(), labels);
        self
    }
}

#[derive(Clone, Debug)]
enum Cache<F> {
    None,
    Bn(BnCache<F>),
    Softmax { probs: Vec<F>, labels: Vec<usize> },
}

#[derive(Clone, Debug)]
struct Activations<F> {
    values: Vec<Tensor<F>>,
    caches: Vec<Cache<F>>,
}

/// A static computation graph. Nodes are appended in topological order;
/// `forward` evaluates all of them and `backward` propagates from a scalar.
#[derive(Clone, Debug)]
pub struct Graph<F = f32> {
    nodes: Vec<Node>,
    names: HashMap<String, NodeId>,
    param_nodes: HashMap<ParamId, NodeId>,
    activations: Option<Activations<F>>,
}

impl<F: Float> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Float> Graph<F> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            names: HashMap::new(),
            param_nodes: HashMap::new(),
            activations: None,
        }
    }

    fn push(&mut self, op: Op) -> NodeId {
        let requires_grad = match &op {
            Op::Param(_) => true,
            Op::Input(_) => false,
            other => other.inputs().iter().any(|i| self.nodes[i.0].requires_grad),
        };
        self.activations = None;
        self.nodes.push(Node {
            op,
            name: None,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn input(&mut self, name: impl Into<String>) -> NodeId {
        let name = name.into();
        let id = self.push(Op::Input(name.clone()));
        self.names.insert(name.clone(), id);
        self.nodes[id.0].name = Some(name);
        id
    }

    /// Node reading a parameter; repeated calls for the same id share a node.
    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(&n) = self.param_nodes.get(&id) {
            return n;
        }
        let n = self.push(Op::Param(id));
        self.param_nodes.insert(id, n);
        n
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul { a, b })
    }

    pub fn conv2d(&mut self, input: NodeId, kernel: NodeId, stride: usize, padding: usize) -> NodeId {
        self.push(Op::Conv2d {
            input,
            kernel,
            stride,
            padding,
        })
    }

    pub fn add_bias(&mut self, input: NodeId, bias: NodeId) -> NodeId {
        self.push(Op::AddBias { input, bias })
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Relu(x))
    }

    pub fn batchnorm(&mut self, input: NodeId, gamma: NodeId, beta: NodeId, layer: usize) -> NodeId {
        self.push(Op::BatchNorm {
            input,
            gamma,
            beta,
            layer,
        })
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> NodeId {
        self.push(Op::GlobalAvgPool(x))
    }

    pub fn select_rows(&mut self, input: NodeId, rows: Vec<usize>) -> NodeId {
        self.push(Op::SelectRows { input, rows })
    }

    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: impl Into<String>) -> NodeId {
        self.push(Op::SoftmaxCrossEntropy {
            logits,
            labels: labels.into(),
        })
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Sum(x))
    }

    pub fn scale(&mut self, input: NodeId, factor: f64) -> NodeId {
        self.push(Op::Scale { input, factor })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add { a, b })
    }

    /// Attaches a lookup name to a node so it appears in [`Graph::outputs`].
    pub fn set_name(&mut self, node: NodeId, name: impl Into<String>) {
        let name = name.into();
        self.names.insert(name.clone(), node);
        self.nodes[node.0].name = Some(name);
    }

    pub fn node(&self, name: &str) -> Option<NodeId> {
        self.names.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn op(&self, node: NodeId) -> &Op {
        &self.nodes[node.0].op
    }

    /// Parameters referenced by the graph, in node order.
    pub fn params(&self) -> Vec<ParamId> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Param(p) => Some(p),
                _ => None,
            })
            .collect()
    }

    fn label(&self, id: NodeId) -> String {
        match &self.nodes[id.0].name {
            Some(n) => n.clone(),
            None => format!("{}#{}", self.nodes[id.0].op.kind(), id.0),
        }
    }

    pub fn value(&self, node: NodeId) -> Option<&Tensor<F>> {
        self.activations.as_ref().map(|a| &a.values[node.0])
    }

    /// Softmax probabilities cached by a cross-entropy node.
    pub fn probs(&self, node: NodeId) -> Option<Tensor<F>> {
        let act = self.activations.as_ref()?;
        match (&act.caches[node.0], &self.nodes[node.0].op) {
            (Cache::Softmax { probs, .. }, Op::SoftmaxCrossEntropy { logits, .. }) => {
                Tensor::new(act.values[logits.0].dims().to_vec(), probs.clone()).ok()
            }
            _ => None,
        }
    }

    /// Values of all named nodes after a forward pass.
    pub fn outputs(&self) -> HashMap<String, Tensor<F>> {
        let Some(act) = &self.activations else {
            return HashMap::new();
        };
        self.names
            .iter()
            .map(|(k, v)| (k.clone(), act.values[v.0].clone()))
            .collect()
    }

    pub fn has_forward(&self) -> bool {
        self.activations.is_some()
    }

    pub fn forward(
        &mut self,
        params: &ParamStore<F>,
        bn: &mut [BatchNormState<F>],
        feed: &Feed<F>,
    ) -> Result<()> {
        self.activations = None;
        let mut values: Vec<Tensor<F>> = Vec::with_capacity(self.nodes.len());
        let mut caches = Vec::with_capacity(self.nodes.len());
        for idx in 0..self.nodes.len() {
            let id = NodeId(idx);
            let (value, cache) = self.eval_node(id, &values, params, bn, feed)?;
            values.push(value);
            caches.push(cache);
        }
        self.activations = Some(Activations { values, caches });
        Ok(())
    }

    fn eval_node(
        &self,
        id: NodeId,
        values: &[Tensor<F>],
        params: &ParamStore<F>,
        bn: &mut [BatchNormState<F>],
        feed: &Feed<F>,
    ) -> Result<(Tensor<F>, Cache<F>)> {
        let label = || self.label(id);
        let v = |n: &NodeId| &values[n.0];
        let out = match &self.nodes[id.0].op {
            Op::Input(name) => feed
                .tensors
                .get(name)
                .cloned()
                .ok_or_else(|| Error::MissingInput(name.clone()))?,
            Op::Param(p) => params.get(*p).value.clone(),
            Op::MatMul { a, b } => {
                let (a, b) = (v(a), v(b));
                let (n, k, m) = match (a.dims(), b.dims()) {
                    ([n, k], [k2, m]) if k == k2 => (*n, *k, *m),
                    (da, db) => {
                        return Err(Error::shape(label(), format!("cannot multiply {da:?} by {db:?}")))
                    }
                };
                let mut out = vec![F::ZERO; n * m];
                kernels::matmul(a.data(), b.data(), &mut out, n, k, m);
                Tensor::new(vec![n, m], out)?
            }
            Op::Conv2d {
                input,
                kernel,
                stride,
                padding,
            } => {
                let (x, w) = (v(input), v(kernel));
                let geom = conv_geometry(x.dims(), w.dims(), *stride, *padding)
                    .map_err(|d| Error::shape(label(), d))?;
                let (n, cout) = (x.dims()[0], w.dims()[0]);
                let (rows, cols) = (geom.col_rows(), geom.col_cols());
                let in_size = geom.in_channels * geom.height * geom.width;
                let ld = n * cols;
                let mut buf = vec![F::ZERO; rows * ld];
                for b in 0..n {
                    kernels::im2col_at(&x.data()[b * in_size..(b + 1) * in_size], &geom, &mut buf, ld, b * cols);
                }
                let mut wide = vec![F::ZERO; cout * ld];
                kernels::matmul(w.data(), &buf, &mut wide, cout, rows, ld);
                let mut out = vec![F::ZERO; n * cout * cols];
                for co in 0..cout {
                    for b in 0..n {
                        out[(b * cout + co) * cols..(b * cout + co + 1) * cols]
                            .copy_from_slice(&wide[co * ld + b * cols..co * ld + (b + 1) * cols]);
                    }
                }
                Tensor::new(vec![n, cout, geom.out_height(), geom.out_width()], out)?
            }
            Op::AddBias { input, bias } => {
                let (x, b) = (v(input), v(bias));
                let (channels, inner) = bias_layout(x.dims()).map_err(|d| Error::shape(label(), d))?;
                if b.len() != channels {
                    return Err(Error::shape(
                        label(),
                        format!("bias has {} entries, input has {channels} channels", b.len()),
                    ));
                }
                let mut out = x.clone();
                let bd = b.data();
                for (i, o) in out.data_mut().iter_mut().enumerate() {
                    *o += bd[(i / inner) % channels];
                }
                out
            }
            Op::Relu(x) => {
                let mut out = v(x).clone();
                for o in out.data_mut() {
                    if *o < F::ZERO {
                        *o = F::ZERO;
                    }
                }
                out
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                layer,
            } => {
                let state = bn
                    .get_mut(*layer)
                    .ok_or_else(|| Error::shape(label(), format!("no batch-norm state {layer}")))?;
                let (y, cache) = bn_forward(v(input), v(gamma).data(), v(beta).data(), state)
                    .map_err(|e| match e {
                        Error::Shape { detail, .. } => Error::shape(label(), detail),
                        other => other,
                    })?;
                return Ok((y, Cache::Bn(cache)));
            }
            Op::GlobalAvgPool(x) => {
                let x = v(x);
                let [n, c, h, w] = x.dims() else {
                    return Err(Error::shape(label(), format!("expected N×C×H×W, got {:?}", x.dims())));
                };
                let s = h * w;
                let inv = F::ONE / F::from_usize(s);
                let out: Vec<F> = x
                    .data()
                    .chunks(s)
                    .map(|plane| {
                        let mut acc = F::ZERO;
                        for &p in plane {
                            acc += p;
                        }
                        acc * inv
                    })
                    .collect();
                Tensor::new(vec![*n, *c], out)?
            }
            Op::SelectRows { input, rows } => {
                if rows.is_empty() {
                    return Err(Error::shape(label(), "empty row selection"));
                }
                v(input)
                    .select_rows(rows)
                    .map_err(|e| Error::shape(label(), e.to_string()))?
            }
            Op::SoftmaxCrossEntropy { logits, labels } => {
                let x = v(logits);
                let [n, c] = x.dims() else {
                    return Err(Error::shape(label(), format!("expected N×C logits, got {:?}", x.dims())));
                };
                let (n, c) = (*n, *c);
                let labels = feed
                    .labels
                    .get(labels)
                    .ok_or_else(|| Error::MissingInput(labels.clone()))?;
                if labels.len() != n {
                    return Err(Error::shape(
                        label(),
                        format!("{} labels for {n} logit rows", labels.len()),
                    ));
                }
                if let Some(bad) = labels.iter().find(|&&l| l >= c) {
                    return Err(Error::shape(label(), format!("label {bad} out of range for {c} classes")));
                }
                if !x.all_finite() {
                    return Err(Error::NonFinite(format!("logits entering `{}`", label())));
                }
                let (losses, probs) = softmax_xent(x.data(), labels, n, c);
                return Ok((
                    Tensor::new(vec![n], losses)?,
                    Cache::Softmax {
                        probs,
                        labels: labels.clone(),
                    },
                ));
            }
            Op::Sum(x) => {
                let mut acc = F::ZERO;
                for &val in v(x).data() {
                    acc += val;
                }
                Tensor::scalar(acc)
            }
            Op::Scale { input, factor } => {
                let f = F::from_f64(*factor);
                let mut out = v(input).clone();
                out.data_mut().iter_mut().for_each(|o| *o = *o * f);
                out
            }
            Op::Add { a, b } => {
                let (a, b) = (v(a), v(b));
                if a.dims() != b.dims() {
                    return Err(Error::shape(label(), format!("cannot add {:?} and {:?}", a.dims(), b.dims())));
                }
                let mut out = a.clone();
                for (o, &y) in out.data_mut().iter_mut().zip(b.data()) {
                    *o += y;
                }
                out
            }
        };
        Ok((out, Cache::None))
    }

    /// Back-propagates from the scalar node `loss`. Gradients of every
    /// parameter referenced by the graph are overwritten; parameters the loss
    /// does not depend on end with exactly zero gradient. Parameters absent
    /// from the graph are not touched.
    pub fn backward(&mut self, loss: NodeId, params: &mut ParamStore<F>) -> Result<()> {
        let act = self.activations.as_ref().ok_or(Error::BackwardBeforeForward)?;
        let lv = &act.values[loss.0];
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss(lv.dims().to_vec()));
        }
        for node in &self.nodes {
            if let Op::Param(p) = node.op {
                params.get_mut(p).grad.fill(F::ZERO);
            }
        }
        let mut grads: Vec<Option<Vec<F>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![F::ONE]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let needs = |n: &NodeId| self.nodes[n.0].requires_grad;
            let val = |n: &NodeId| &act.values[n.0];
            match &node.op {
                Op::Input(_) => {}
                Op::Param(p) => {
                    let pg = params.get_mut(*p).grad.data_mut();
                    for (d, s) in pg.iter_mut().zip(&g) {
                        *d += *s;
                    }
                }
                Op::MatMul { a, b } => {
                    let (av, bv) = (val(a), val(b));
                    let (n, k, m) = (av.dims()[0], av.dims()[1], bv.dims()[1]);
                    if needs(a) {
                        let mut ga = vec![F::ZERO; n * k];
                        kernels::matmul_acc_bt(&g, bv.data(), &mut ga, n, k, m);
                        accumulate(&mut grads, *a, ga);
                    }
                    if needs(b) {
                        let mut gb = vec![F::ZERO; k * m];
                        kernels::matmul_acc_at(av.data(), &g, &mut gb, n, k, m);
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::Conv2d {
                    input,
                    kernel,
                    stride,
                    padding,
                } => {
                    let (x, w) = (val(input), val(kernel));
                    let geom = conv_geometry(x.dims(), w.dims(), *stride, *padding)
                        .expect("validated in forward");
                    let (n, cout) = (x.dims()[0], w.dims()[0]);
                    let (rows, cols) = (geom.col_rows(), geom.col_cols());
                    let in_size = geom.in_channels * geom.height * geom.width;
                    let ld = n * cols;
                    let mut gwide = vec![F::ZERO; cout * ld];
                    for co in 0..cout {
                        for b in 0..n {
                            gwide[co * ld + b * cols..co * ld + (b + 1) * cols]
                                .copy_from_slice(&g[(b * cout + co) * cols..(b * cout + co + 1) * cols]);
                        }
                    }
                    let mut buf = vec![F::ZERO; rows * ld];
                    let gw = needs(kernel).then(|| {
                        for b in 0..n {
                            kernels::im2col_at(&x.data()[b * in_size..(b + 1) * in_size], &geom, &mut buf, ld, b * cols);
                        }
                        let mut gw = vec![F::ZERO; w.len()];
                        kernels::matmul_acc_bt(&gwide, &buf, &mut gw, cout, rows, ld);
                        gw
                    });
                    let gx = needs(input).then(|| {
                        buf.iter_mut().for_each(|v| *v = F::ZERO);
                        kernels::matmul_acc_at(w.data(), &gwide, &mut buf, cout, rows, ld);
                        let mut gx = vec![F::ZERO; x.len()];
                        for b in 0..n {
                            kernels::col2im_acc_at(&buf, &geom, &mut gx[b * in_size..(b + 1) * in_size], ld, b * cols);
                        }
                        gx
                    });
                    if let Some(gw) = gw {
                        accumulate(&mut grads, *kernel, gw);
                    }
                    if let Some(gx) = gx {
                        accumulate(&mut grads, *input, gx);
                    }
                }
                Op::AddBias { input, bias } => {
                    if needs(bias) {
                        let x = val(input);
                        let (channels, inner) = bias_layout(x.dims()).expect("validated in forward");
                        let mut gb = vec![F::ZERO; channels];
                        for (i, &gv) in g.iter().enumerate() {
                            gb[(i / inner) % channels] += gv;
                        }
                        accumulate(&mut grads, *bias, gb);
                    }
                    if needs(input) {
                        accumulate(&mut grads, *input, g);
                    }
                }
                Op::Relu(x) => {
                    if needs(x) {
                        let xv = val(x).data();
                        let gx = g
                            .iter()
                            .zip(xv)
                            .map(|(&gv, &xv)| if xv > F::ZERO { gv } else { F::ZERO })
                            .collect();
                        accumulate(&mut grads, *x, gx);
                    }
                }
                Op::BatchNorm {
                    input, gamma, beta, ..
                } => {
                    let Cache::Bn(cache) = &act.caches[idx] else {
                        unreachable!("batch-norm node without cache")
                    };
                    let (dx, dgamma, dbeta) =
                        bn_backward(val(input).dims(), &g, val(gamma).data(), cache);
                    if needs(gamma) {
                        accumulate(&mut grads, *gamma, dgamma);
                    }
                    if needs(beta) {
                        accumulate(&mut grads, *beta, dbeta);
                    }
                    if needs(input) {
                        accumulate(&mut grads, *input, dx);
                    }
                }
                Op::GlobalAvgPool(x) => {
                    if needs(x) {
                        let xv = val(x);
                        let s = xv.dims()[2] * xv.dims()[3];
                        let inv = F::ONE / F::from_usize(s);
                        let mut gx = vec![F::ZERO; xv.len()];
                        for (plane, &gv) in gx.chunks_mut(s).zip(&g) {
                            plane.iter_mut().for_each(|p| *p = gv * inv);
                        }
                        accumulate(&mut grads, *x, gx);
                    }
                }
                Op::SelectRows { input, rows } => {
                    if needs(input) {
                        let xv = val(input);
                        let width = xv.len() / xv.dims()[0];
                        let mut gx = vec![F::ZERO; xv.len()];
                        for (r, &row) in rows.iter().enumerate() {
                            for (d, &s) in gx[row * width..(row + 1) * width]
                                .iter_mut()
                                .zip(&g[r * width..(r + 1) * width])
                            {
                                *d += s;
                            }
                        }
                        accumulate(&mut grads, *input, gx);
                    }
                }
                Op::SoftmaxCrossEntropy { logits, .. } => {
                    if needs(logits) {
                        let Cache::Softmax { probs, labels } = &act.caches[idx] else {
                            unreachable!("cross-entropy node without cache")
                        };
                        let c = val(logits).dims()[1];
                        let mut gx = probs.clone();
                        for (j, &gv) in g.iter().enumerate() {
                            let row = &mut gx[j * c..(j + 1) * c];
                            row[labels[j]] -= F::ONE;
                            row.iter_mut().for_each(|p| *p = *p * gv);
                        }
                        accumulate(&mut grads, *logits, gx);
                    }
                }
                Op::Sum(x) => {
                    if needs(x) {
                        accumulate(&mut grads, *x, vec![g[0]; val(x).len()]);
                    }
                }
                Op::Scale { input, factor } => {
                    if needs(input) {
                        let f = F::from_f64(*factor);
                        accumulate(&mut grads, *input, g.iter().map(|&v| v * f).collect());
                    }
                }
                Op::Add { a, b } => {
                    if needs(b) {
                        accumulate(&mut grads, *b, g.clone());
                    }
                    if needs(a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
            }
        }
        Ok(())
    }
}

fn accumulate<F: Float>(grads: &mut [Option<Vec<F>>], node: NodeId, g: Vec<F>) {
    match &mut grads[node.0] {
        Some(existing) => {
            for (d, s) in existing.iter_mut().zip(&g) {
                *d += *s;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn conv_geometry(
    x: &[usize],
    w: &[usize],
    stride: usize,
    padding: usize,
) -> std::result::Result<ConvGeometry, String> {
    let ([_, cin, h, wd], [_, cin2, kh, kw]) = (x, w) else {
        return Err(format!("expected rank-4 input and kernel, got {x:?} and {w:?}"));
    };
    if cin != cin2 {
        return Err(format!("input has {cin} channels, kernel expects {cin2}"));
    }
    if kh != kw {
        return Err(format!("kernel must be square, got {kh}×{kw}"));
    }
    let geom = ConvGeometry {
        in_channels: *cin,
        height: *h,
        width: *wd,
        kernel: *kh,
        stride,
        padding,
    };
    if !geom.valid() {
        return Err(format!(
            "kernel {kh} with stride {stride} and padding {padding} does not fit a {h}×{wd} input"
        ));
    }
    Ok(geom)
}

/// `(channels, inner)` such that element `i` uses bias `(i / inner) % channels`.
fn bias_layout(dims: &[usize]) -> std::result::Result<(usize, usize), String> {
    match dims {
        [_, m] => Ok((*m, 1)),
        [_, c, h, w] => Ok((*c, h * w)),
        other => Err(format!("bias needs a rank-2 or rank-4 input, got {other:?}")),
    }
}

/// Per-row cross-entropy and softmax probabilities.
pub(crate) fn softmax_xent<F: Float>(logits: &[F], labels: &[usize], n: usize, c: usize) -> (Vec<F>, Vec<F>) {
    let mut probs = vec![F::ZERO; n * c];
    let mut losses = Vec::with_capacity(n);
    for j in 0..n {
        let row = &logits[j * c..(j + 1) * c];
        kernels::softmax_row(row, &mut probs[j * c..(j + 1) * c]);
        losses.push(kernels::log_sum_exp(row) - row[labels[j]]);
    }
    (losses, probs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(dims: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64_slice(dims, v).unwrap()
    }

    #[test]
    fn identity_graph_passes_input_through() {
        let mut g = Graph::<f64>::new();
        let x = g.input("x");
        let _ = x;
        g.forward(&ParamStore::new(), &mut [], &Feed::new().tensor("x", t(&[3], &[1.0, 2.0, 3.0])))
            .unwrap();
        assert_eq!(g.outputs()["x"].data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn relu_clamps_negatives() {
        let mut g = Graph::<f64>::new();
        let x = g.input("x");
        let y = g.relu(x);
        g.set_name(y, "y");
        g.forward(&ParamStore::new(), &mut [], &Feed::new().tensor("x", t(&[3], &[-1.0, 0.0, 2.0])))
            .unwrap();
        assert_eq!(g.outputs()["y"].data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn one_by_one_conv_scales() {
        let mut ps = ParamStore::<f64>::new();
        let k = ps.add("k", t(&[1, 1, 1, 1], &[2.0])).unwrap();
        let mut g = Graph::new();
        let x = g.input("x");
        let kn = g.param(k);
        let y = g.conv2d(x, kn, 1, 0);
        g.forward(&ps, &mut [], &Feed::new().tensor("x", t(&[1, 1, 1, 1], &[3.0])))
            .unwrap();
        assert_eq!(g.value(y).unwrap().data(), &[6.0]);
    }

    #[test]
    fn product_rule_gradient() {
        let mut ps = ParamStore::<f64>::new();
        let w = ps.add("w", t(&[1, 1], &[0.7])).unwrap();
        let mut g = Graph::new();
        let x = g.input("x");
        let wn = g.param(w);
        let y = g.matmul(x, wn);
        let loss = g.sum(y);
        g.forward(&ps, &mut [], &Feed::new().tensor("x", t(&[1, 1], &[3.0])))
            .unwrap();
        g.backward(loss, &mut ps).unwrap();
        assert_eq!(ps.get(w).grad.data(), &[3.0]);
    }

    #[test]
    fn unreachable_parameter_gets_zero_gradient() {
        let mut ps = ParamStore::<f64>::new();
        let w = ps.add("w", t(&[2, 1], &[0.5, -0.5])).unwrap();
        let p = ps.add("p", t(&[2, 1], &[1.0, 1.0])).unwrap();
        ps.get_mut(p).grad = t(&[2, 1], &[9.0, 9.0]);
        let mut g = Graph::new();
        let x = g.input("x");
        let wn = g.param(w);
        let pn = g.param(p);
        let y = g.matmul(x, wn);
        let _unused = g.matmul(x, pn);
        let loss = g.sum(y);
        g.forward(&ps, &mut [], &Feed::new().tensor("x", t(&[1, 2], &[1.0, 2.0])))
            .unwrap();
        g.backward(loss, &mut ps).unwrap();
        assert!(ps.get(p).grad.data().iter().all(|v| v.to_bits() == 0));
    }

    #[test]
    fn backward_before_forward_fails() {
        let mut ps = ParamStore::<f64>::new();
        let w = ps.add("w", t(&[1], &[1.0])).unwrap();
        let mut g = Graph::new();
        let wn = g.param(w);
        let loss = g.sum(wn);
        assert!(matches!(g.backward(loss, &mut ps), Err(Error::BackwardBeforeForward)));
    }

    #[test]
    fn dimension_mismatch_names_the_node() {
        let mut g = Graph::<f64>::new();
        let a = g.input("a");
        let b = g.input("b");
        let y = g.matmul(a, b);
        g.set_name(y, "bad_product");
        let feed = Feed::new()
            .tensor("a", t(&[2, 3], &[0.0; 6]))
            .tensor("b", t(&[2, 2], &[0.0; 4]));
        match g.forward(&ParamStore::new(), &mut [], &feed) {
            Err(Error::Shape { node, .. }) => assert_eq!(node, "bad_product"),
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut ps = ParamStore::<f64>::new();
        let w = ps.add("w", t(&[2], &[1.0, 2.0])).unwrap();
        let mut g = Graph::new();
        let wn = g.param(w);
        g.forward(&ps, &mut [], &Feed::new()).unwrap();
        assert!(matches!(g.backward(wn, &mut ps), Err(Error::NonScalarLoss(_))));
    }
}
