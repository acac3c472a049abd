//! Shared trunk with one linear head per task. Samples of a batch are routed
//! through the trunk and then only through their own task's head; heads of
//! tasks absent from the batch are not part of the graph at all.

use std::collections::BTreeMap;

use crate::autograd::{kernels, Feed, Float, Graph, NodeId, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::nn::{init_trunk, BatchNormState, BnMode, Head, TrunkConfig, TrunkLayout};
use crate::pool::{SampleId, TaskId};
use crate::seed::stream;

const EXTRACT_CHUNK: usize = 256;

/// A batch of images, each tagged with its task and label.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch<F = f32> {
    /// `B × C × H × W`, already augmented and normalized.
    pub images: Tensor<F>,
    pub task_of: Vec<TaskId>,
    pub labels: Vec<usize>,
    pub sample_ids: Vec<SampleId>,
}

impl<F: Float> Batch<F> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Sample indices per task, in batch order.
    pub fn routes(&self) -> BTreeMap<TaskId, Vec<usize>> {
        let mut routes: BTreeMap<TaskId, Vec<usize>> = BTreeMap::new();
        for (i, t) in self.task_of.iter().enumerate() {
            routes.entry(*t).or_default().push(i);
        }
        routes
    }
}

/// Output of one task head for its routed samples.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutedOutput<F = f32> {
    /// Positions of the task's samples in the batch.
    pub indices: Vec<usize>,
    pub logits: Tensor<F>,
    pub probs: Tensor<F>,
}

#[derive(Clone, Debug)]
pub(crate) struct RouteNodes {
    pub indices: Vec<usize>,
    pub logits: NodeId,
    pub xent: NodeId,
}

/// A per-batch graph: trunk, the active heads and the averaged loss.
#[derive(Clone, Debug)]
pub(crate) struct RoutedGraph<F: Float> {
    pub graph: Graph<F>,
    pub feed: Feed<F>,
    pub routes: BTreeMap<TaskId, RouteNodes>,
    pub loss: NodeId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MtlModel<F: Float = f32> {
    pub params: ParamStore<F>,
    pub bn: Vec<BatchNormState<F>>,
    pub trunk: TrunkLayout,
    pub heads: BTreeMap<TaskId, Head>,
    mode: BnMode,
}

impl<F: Float> MtlModel<F> {
    /// A trunk with no heads; initialization depends only on `init_seed`.
    pub fn build_trunk(config: &TrunkConfig, init_seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let mut bn = Vec::new();
        let mut rng = stream(init_seed, "trunk");
        let trunk = init_trunk(config, &mut params, &mut bn, &mut rng)?;
        Ok(MtlModel {
            params,
            bn,
            trunk,
            heads: BTreeMap::new(),
            mode: BnMode::Train,
        })
    }

    /// Trunk plus one head per entry of `classes`.
    pub fn new(config: &TrunkConfig, classes: &BTreeMap<TaskId, usize>, init_seed: u64) -> Result<Self> {
        let mut m = Self::build_trunk(config, init_seed)?;
        for (&task, &c) in classes {
            m.add_head(task, c, init_seed)?;
        }
        Ok(m)
    }

    pub fn add_head(&mut self, task: TaskId, classes: usize, seed: u64) -> Result<()> {
        if classes < 2 {
            return Err(Error::InvalidArgument(format!("head for task {task} needs ≥2 classes, got {classes}")));
        }
        if self.heads.contains_key(&task) {
            return Err(Error::InvalidArgument(format!("task {task} already has a head")));
        }
        let mut rng = stream(seed, &format!("head/{}", task.0));
        let head = Head::init(task, self.feature_dim(), classes, &mut self.params, &mut rng)?;
        self.heads.insert(task, head);
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        self.trunk.config.feature_dim
    }

    pub fn mode(&self) -> BnMode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: BnMode) {
        self.mode = mode;
        for s in &mut self.bn {
            s.mode = mode;
        }
    }

    pub fn trunk_param_ids(&self) -> Vec<ParamId> {
        self.trunk.param_ids(&self.bn)
    }

    pub fn head_param_ids(&self, task: TaskId) -> Result<[ParamId; 2]> {
        self.heads
            .get(&task)
            .map(Head::param_ids)
            .ok_or_else(|| Error::UnknownTask(task.to_string()))
    }

    pub fn trunk_param_count(&self) -> usize {
        self.params.numel(&self.trunk_param_ids())
    }

    pub fn head_param_count(&self, task: TaskId) -> Result<usize> {
        Ok(self.params.numel(&self.head_param_ids(task)?))
    }

    fn check_batch(&self, batch: &Batch<F>) -> Result<()> {
        let b = batch.len();
        if b == 0 || batch.task_of.len() != b || batch.images.dims()[0] != b {
            return Err(Error::InvalidArgument(format!(
                "inconsistent batch: {} images, {} task ids, {b} labels",
                batch.images.dims()[0],
                batch.task_of.len()
            )));
        }
        for (t, &l) in batch.task_of.iter().zip(&batch.labels) {
            let head = self.heads.get(t).ok_or_else(|| Error::UnknownTask(t.to_string()))?;
            if l >= head.classes {
                return Err(Error::InvalidArgument(format!(
                    "label {l} invalid for task {t} with {} classes",
                    head.classes
                )));
            }
        }
        Ok(())
    }

    /// Graph computing `L = (1/B)·Σ_tasks Σ_samples CE` with only the heads of
    /// tasks present in the batch.
    pub(crate) fn routed_graph(&self, batch: &Batch<F>) -> Result<RoutedGraph<F>> {
        self.check_batch(batch)?;
        let mut graph = Graph::new();
        let input = graph.input("images");
        let features = self.trunk.append_to_graph(&mut graph, input, &self.bn);
        graph.set_name(features, "features");
        let mut feed = Feed::new().tensor("images", batch.images.clone());
        let mut routes = BTreeMap::new();
        let mut total: Option<NodeId> = None;
        for (task, indices) in batch.routes() {
            let head = &self.heads[&task];
            let rows = graph.select_rows(features, indices.clone());
            let w = graph.param(head.weight);
            let b = graph.param(head.bias);
            let z = graph.matmul(rows, w);
            let logits = graph.add_bias(z, b);
            graph.set_name(logits, format!("logits.{}", task.0));
            let label_key = format!("labels.{}", task.0);
            feed.labels
                .insert(label_key.clone(), indices.iter().map(|&i| batch.labels[i]).collect());
            let xent = graph.softmax_cross_entropy(logits, label_key);
            let task_loss = graph.sum(xent);
            total = Some(match total {
                Some(acc) => graph.add(acc, task_loss),
                None => task_loss,
            });
            routes.insert(
                task,
                RouteNodes {
                    indices,
                    logits,
                    xent,
                },
            );
        }
        let loss = graph.scale(total.expect("batch is non-empty"), 1.0 / batch.len() as f64);
        graph.set_name(loss, "loss");
        Ok(RoutedGraph {
            graph,
            feed,
            routes,
            loss,
        })
    }

    pub(crate) fn collect_routes(rg: &RoutedGraph<F>) -> BTreeMap<TaskId, RoutedOutput<F>> {
        rg.routes
            .iter()
            .map(|(&task, r)| {
                let logits = rg.graph.value(r.logits).expect("forward ran").clone();
                let probs = rg.graph.probs(r.xent).expect("cross-entropy node");
                (
                    task,
                    RoutedOutput {
                        indices: r.indices.clone(),
                        logits,
                        probs,
                    },
                )
            })
            .collect()
    }

    /// Routes each sample through the trunk and its own head. Tasks absent
    /// from the batch do not appear in the result. In train mode batch-norm
    /// running statistics are updated.
    pub fn route_forward(&mut self, batch: &Batch<F>) -> Result<BTreeMap<TaskId, RoutedOutput<F>>> {
        let mut rg = self.routed_graph(batch)?;
        rg.graph.forward(&self.params, &mut self.bn, &rg.feed)?;
        Ok(Self::collect_routes(&rg))
    }

    /// Finite-difference check of the routed loss on `batch` (see
    /// [`grad_check`](crate::autograd::grad_check)). Parameter values and
    /// batch-norm statistics are left as they were; gradients are overwritten.
    pub fn grad_check(&mut self, batch: &Batch<F>, eps: f64) -> Result<f64> {
        let mut rg = self.routed_graph(batch)?;
        crate::autograd::grad_check(&mut rg.graph, &mut self.params, &mut self.bn, &rg.feed, rg.loss, eps)
    }

    /// Trunk features `(N, f_s)`; the model must not be in train mode.
    pub fn extract_features(&self, images: &Tensor<F>) -> Result<Tensor<F>> {
        if self.mode == BnMode::Train {
            return Err(Error::TrainModeExtraction);
        }
        let dims = images.dims();
        if dims.len() != 4 {
            return Err(Error::shape("images", format!("expected N×C×H×W, got {dims:?}")));
        }
        let n = dims[0];
        let per = images.len() / n;
        let fs = self.feature_dim();
        let mut graph = Graph::new();
        let input = graph.input("images");
        let features = self.trunk.append_to_graph(&mut graph, input, &self.bn);
        let mut bn = self.bn.clone();
        let mut out = Vec::with_capacity(n * fs);
        for start in (0..n).step_by(EXTRACT_CHUNK) {
            let end = (start + EXTRACT_CHUNK).min(n);
            let mut cd = dims.to_vec();
            cd[0] = end - start;
            let chunk = Tensor::new(cd, images.data()[start * per..end * per].to_vec())?;
            graph.forward(&self.params, &mut bn, &Feed::new().tensor("images", chunk))?;
            out.extend_from_slice(graph.value(features).expect("forward ran").data());
        }
        Tensor::new(vec![n, fs], out)
    }

    /// Softmax probabilities `(N, C)` of `task`'s head; the model must not be
    /// in train mode.
    pub fn predict(&self, task: TaskId, images: &Tensor<F>) -> Result<Tensor<F>> {
        let head = self.heads.get(&task).ok_or_else(|| Error::UnknownTask(task.to_string()))?;
        let features = self.extract_features(images)?;
        let n = features.dims()[0];
        let c = head.classes;
        let mut logits = vec![F::ZERO; n * c];
        kernels::matmul(
            features.data(),
            self.params.get(head.weight).value.data(),
            &mut logits,
            n,
            self.feature_dim(),
            c,
        );
        let bias = self.params.get(head.bias).value.data();
        let mut probs = vec![F::ZERO; n * c];
        for i in 0..n {
            let row = &mut logits[i * c..(i + 1) * c];
            for (v, &b) in row.iter_mut().zip(bias) {
                *v += b;
            }
            kernels::softmax_row(row, &mut probs[i * c..(i + 1) * c]);
        }
        Tensor::new(vec![n, c], probs)
    }

    /// Re-estimates every batch-norm layer's running statistics as the
    /// cumulative average of batch statistics over `batches`, without
    /// touching any parameter. The returned model is in eval mode.
    pub fn recalibrate_bn(&self, batches: &[Tensor<F>]) -> Result<MtlModel<F>> {
        if batches.is_empty() {
            return Err(Error::InvalidArgument("batch-norm recalibration needs a non-empty stream".into()));
        }
        if self.bn.is_empty() {
            return Err(Error::InvalidArgument("model has no batch-norm layers".into()));
        }
        let mut m = self.clone();
        m.set_mode(BnMode::Train);
        for s in &mut m.bn {
            s.recalibration = Some(0);
        }
        let mut graph = Graph::new();
        let input = graph.input("images");
        m.trunk.append_to_graph(&mut graph, input, &m.bn);
        for images in batches {
            graph.forward(&m.params, &mut m.bn, &Feed::new().tensor("images", images.clone()))?;
        }
        for s in &mut m.bn {
            s.recalibration = None;
        }
        m.set_mode(BnMode::Eval);
        Ok(m)
    }

    /// Copy of the trunk (parameter values and batch-norm statistics) with no
    /// heads. The copy shares nothing with `self`.
    pub fn trunk_copy(&self) -> MtlModel<F> {
        let ids = self.trunk_param_ids();
        let mut params = ParamStore::new();
        for (expected, id) in ids.iter().enumerate() {
            let p = self.params.get(*id);
            let new_id = params.add(p.name.clone(), p.value.clone()).expect("names are unique");
            debug_assert_eq!(new_id.0, expected);
            debug_assert_eq!(new_id, *id, "trunk parameters are registered before heads");
        }
        let mut bn = self.bn.clone();
        for s in &mut bn {
            s.recalibration = None;
        }
        MtlModel {
            params,
            bn,
            trunk: self.trunk.clone(),
            heads: BTreeMap::new(),
            mode: self.mode,
        }
    }

    /// Single-task network: a value copy of the trunk plus a freshly
    /// initialized head with `classes` outputs.
    pub fn attach_target_head(&self, task: TaskId, classes: usize, seed: u64) -> Result<MtlModel<F>> {
        let mut m = self.trunk_copy();
        m.add_head(task, classes, seed)?;
        Ok(m)
    }

    pub fn cast<G: Float>(&self) -> MtlModel<G> {
        MtlModel {
            params: self.params.cast(),
            bn: self.bn.iter().map(|s| s.cast()).collect(),
            trunk: self.trunk.clone(),
            heads: self.heads.clone(),
            mode: self.mode,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> TrunkConfig {
        TrunkConfig::new((3, 8, 8), &[(8, 2), (16, 2)], true)
    }

    fn batch(tasks: &[u32], seed: u64) -> Batch<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = tasks.len();
        let images = Tensor::from_f64_slice(
            &[b, 3, 8, 8],
            &(0..b * 192).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>(),
        )
        .unwrap();
        Batch {
            images,
            task_of: tasks.iter().map(|&t| TaskId(t)).collect(),
            labels: tasks.iter().map(|_| rng.gen_range(0..2)).collect(),
            sample_ids: vec![],
        }
    }

    fn model() -> MtlModel<f64> {
        let classes: BTreeMap<TaskId, usize> = (1..=3).map(|t| (TaskId(t), 2)).collect();
        MtlModel::new(&cfg(), &classes, 5).unwrap()
    }

    #[test]
    fn absent_tasks_produce_no_output() {
        let mut m = model();
        let out = m.route_forward(&batch(&[1, 2, 1, 2], 0)).unwrap();
        assert_eq!(out.keys().copied().collect::<Vec<_>>(), vec![TaskId(1), TaskId(2)]);
    }

    #[test]
    fn single_sample_batch_has_one_route() {
        let mut m = model();
        m.set_mode(BnMode::Eval);
        let out = m.route_forward(&batch(&[3], 1)).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[&TaskId(3)].logits.dims(), &[1, 2]);
    }

    #[test]
    fn unknown_task_rejected() {
        let mut m = model();
        assert!(matches!(m.route_forward(&batch(&[1, 9], 0)), Err(Error::UnknownTask(_))));
    }

    #[test]
    fn extraction_refuses_train_mode() {
        let m = model();
        let b = batch(&[1, 1], 0);
        assert!(matches!(m.extract_features(&b.images), Err(Error::TrainModeExtraction)));
    }

    #[test]
    fn target_head_has_expected_dims_and_copies_trunk() {
        let m = model();
        let t = m.attach_target_head(TaskId(99), 9, 1).unwrap();
        let h = &t.heads[&TaskId(99)];
        assert_eq!(t.params.get(h.weight).value.dims(), &[16, 9]);
        assert_eq!(t.params.get(h.bias).value.dims(), &[9]);
        let u = m.attach_target_head(TaskId(99), 9, 2).unwrap();
        assert_ne!(t.params.get(h.weight).value, u.params.get(h.weight).value);
        for id in m.trunk_param_ids() {
            assert_eq!(t.params.get(id).value, m.params.get(id).value);
            assert_eq!(u.params.get(id).value, m.params.get(id).value);
        }
    }

    #[test]
    fn recalibration_keeps_weights_and_needs_data() {
        let m = model();
        assert!(m.recalibrate_bn(&[]).is_err());
        let stream: Vec<_> = (0..3).map(|s| batch(&[1, 2, 3], s).images).collect();
        let r = m.recalibrate_bn(&stream).unwrap();
        assert_eq!(r.params, m.params);
        assert_eq!(r.mode(), BnMode::Eval);
        assert_ne!(r.bn[0].running_mean, m.bn[0].running_mean);
        assert!(r.bn.iter().all(|s| s.recalibration.is_none()));
    }

    #[test]
    fn predict_matches_routed_probabilities() {
        let mut m = model();
        m.set_mode(BnMode::Eval);
        let b = batch(&[2, 2, 2], 5);
        let routed = m.route_forward(&b).unwrap();
        let p = m.predict(TaskId(2), &b.images).unwrap();
        for (x, y) in p.data().iter().zip(routed[&TaskId(2)].probs.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
