//! Stage 3: a task head and the backbone tail trained on uncompressed
//! features, then evaluated on features that went through a codec.

use std::path::Path;

use ndarray::{Array2, Array3, Array4, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneHead, BackboneTail, HEAD_DOWNSAMPLE};
use crate::coder::EntropyCoder;
use crate::contrastive::OmniEncoder;
use crate::error::{Error, Result};
use crate::evalkit::bpp;
use crate::feature::FeatureMap;
use crate::feature_codec::{Bitstream, FeatureCodec};
use crate::ifmodule::IfModule;
use crate::nn::conv::Conv2d;
use crate::nn::layers::Linear;
use crate::nn::{Ctx, FrozenDigest, Module, Optimizer, Sgd};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    LinearProbeClassification,
    ToySegmentation,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskMetric {
    Top1Accuracy,
    MeanIou,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// Output classes; segmentation counts background as class 0.
    pub classes: usize,
}

impl TaskSpec {
    pub fn classification(classes: usize) -> Self {
        TaskSpec {
            kind: TaskKind::LinearProbeClassification,
            classes,
        }
    }

    pub fn segmentation(classes: usize) -> Self {
        TaskSpec {
            kind: TaskKind::ToySegmentation,
            classes,
        }
    }

    /// The single headline metric of this task.
    pub fn metric(&self) -> TaskMetric {
        match self.kind {
            TaskKind::LinearProbeClassification => TaskMetric::Top1Accuracy,
            TaskKind::ToySegmentation => TaskMetric::MeanIou,
        }
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            TaskKind::LinearProbeClassification => "linear_probe",
            TaskKind::ToySegmentation => "toy_segmentation",
        }
    }
}

/// Backbone head and information filter, the part of the network that
/// produces features.
#[derive(Clone, Debug)]
pub struct FrontEnd {
    pub head: BackboneHead,
    pub ifmodule: IfModule,
}

crate::impl_module!(FrontEnd { head, ifmodule });

/// A front end whose parameters may not change after registration.
#[derive(Clone, Debug)]
pub struct FrozenFrontEnd {
    net: FrontEnd,
    digest: FrozenDigest,
}

impl FrozenFrontEnd {
    pub fn new(mut net: FrontEnd) -> Self {
        net.set_trainable(false);
        let digest = FrozenDigest::register("head+IF", &net);
        FrozenFrontEnd { net, digest }
    }

    pub fn from_encoder(enc: &OmniEncoder) -> Self {
        Self::new(FrontEnd {
            head: enc.head.clone(),
            ifmodule: enc.ifmodule.clone(),
        })
    }

    pub fn net(&self) -> &FrontEnd {
        &self.net
    }

    pub fn digest(&self) -> crate::nn::ContentDigest {
        self.digest.digest()
    }

    pub fn verify(&self) -> Result<()> {
        self.digest.verify(&self.net)
    }

    /// Features of a normalized image batch.
    pub fn features(&self, x: &Array4<f64>) -> Result<Array4<f64>> {
        self.net.ifmodule.features(&self.net.head.forward_batch(x)?)
    }

    pub fn features_of(&self, images: &[Array3<f64>], batch: usize) -> Result<Vec<FeatureMap>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(batch.max(1)) {
            let views: Vec<_> = chunk.iter().map(|a| a.view()).collect();
            let x = ndarray::stack(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))?;
            out.extend(FeatureMap::from_batch(&self.features(&x)?, HEAD_DOWNSAMPLE));
        }
        Ok(out)
    }
}

/// One labeled example; images are normalized `[3, H, W]`, possibly padded.
#[derive(Clone, Debug)]
pub struct TaskSample {
    pub image: Array3<f64>,
    /// Size before padding; bpp divides by this.
    pub original_dims: (usize, usize),
    pub label: usize,
    /// Per-pixel classes at (padded) image resolution, for dense tasks.
    pub mask: Option<Array2<u8>>,
}

/// Per-pixel logits from every tail stage, summed at the first stage's resolution.
#[derive(Clone, Debug)]
pub struct SegHead {
    pub lateral: Vec<Conv2d>,
}

crate::impl_module!(SegHead { lateral });

#[derive(Clone, Debug)]
pub enum TaskHead {
    Linear(Linear),
    Seg(SegHead),
}

impl Module for TaskHead {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &crate::nn::Param)) {
        match self {
            TaskHead::Linear(l) => l.visit(prefix, f),
            TaskHead::Seg(s) => s.visit(prefix, f),
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut crate::nn::Param)) {
        match self {
            TaskHead::Linear(l) => l.visit_mut(prefix, f),
            TaskHead::Seg(s) => s.visit_mut(prefix, f),
        }
    }
}

/// Tail plus task head: everything downstream of the features.
#[derive(Clone, Debug)]
pub struct TaskModel {
    pub spec: TaskSpec,
    pub tail: BackboneTail,
    pub head: TaskHead,
}

crate::impl_module!(TaskModel { tail, head });

/// Logits: `[n, classes]` for classification, `[n, classes, h/8, w/8]` (image
/// resolution) flattened to rows for segmentation.
enum Logits {
    Rows(Array2<f64>),
    Dense(Array4<f64>),
}

fn upsample_nearest(x: &Array4<f64>, k: usize) -> Array4<f64> {
    let (n, c, h, w) = x.dim();
    Array4::from_shape_fn((n, c, h * k, w * k), |(i, j, y, xx)| x[[i, j, y / k, xx / k]])
}

fn upsample_nearest_backward(dy: &Array4<f64>, k: usize) -> Array4<f64> {
    let (n, c, h, w) = dy.dim();
    let mut dx = Array4::zeros((n, c, h / k, w / k));
    for ((i, j, y, xx), g) in dy.indexed_iter() {
        dx[[i, j, y / k, xx / k]] += g;
    }
    dx
}

/// Dense logits to `[n·h·w, classes]` rows, pixel-major.
fn dense_to_rows(x: &Array4<f64>) -> Array2<f64> {
    let (n, c, h, w) = x.dim();
    x.view()
        .permuted_axes([0, 2, 3, 1])
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((n * h * w, c))
        .unwrap()
}

fn rows_to_dense(rows: &Array2<f64>, dims: (usize, usize, usize, usize)) -> Array4<f64> {
    let (n, c, h, w) = dims;
    rows.clone()
        .into_shape_with_order((n, h, w, c))
        .unwrap()
        .permuted_axes([0, 3, 1, 2])
        .as_standard_layout()
        .into_owned()
}

/// Mean softmax cross-entropy over rows and its gradient.
pub fn softmax_cross_entropy(logits: &Array2<f64>, targets: &[usize]) -> Result<(f64, Array2<f64>)> {
    let (n, c) = logits.dim();
    if targets.len() != n {
        return Err(Error::Shape(format!("{} targets for {n} rows", targets.len())));
    }
    if let Some(t) = targets.iter().find(|&&t| t >= c) {
        return Err(Error::InvalidArgument(format!("target class {t} with {c} logits")));
    }
    let mut grad = Array2::zeros((n, c));
    let mut loss = 0.0;
    for (i, row) in logits.rows().into_iter().enumerate() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
        loss += z.ln() + m - row[targets[i]];
        for (j, v) in row.iter().enumerate() {
            grad[[i, j]] = (v - m).exp() / z / n as f64;
        }
        grad[[i, targets[i]]] -= 1.0 / n as f64;
    }
    Ok((loss / n as f64, grad))
}

fn argmax_rows(x: &Array2<f64>) -> Vec<usize> {
    x.rows()
        .into_iter()
        .map(|r| {
            r.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

/// Resolution of the dense head relative to the image.
pub const SEG_STRIDE: usize = 2 * HEAD_DOWNSAMPLE;

impl TaskModel {
    /// Builds the head for `spec` on top of `tail` (normally the stage-1 tail).
    pub fn new<R: Rng + ?Sized>(spec: TaskSpec, tail: BackboneTail, rng: &mut R) -> Result<Self> {
        if spec.classes < 2 {
            return Err(Error::Config(format!("a task needs at least 2 classes, got {}", spec.classes)));
        }
        let head = match spec.kind {
            TaskKind::LinearProbeClassification => TaskHead::Linear(Linear::new(tail.out_channels(), spec.classes, rng)),
            TaskKind::ToySegmentation => TaskHead::Seg(SegHead {
                lateral: tail
                    .stage_channels()
                    .into_iter()
                    .map(|c| Conv2d::new(c, spec.classes, 1, 1, 0, true, rng))
                    .collect(),
            }),
        };
        Ok(TaskModel { spec, tail, head })
    }

    fn logits(&self, f: &Array4<f64>) -> Result<Logits> {
        let out = self.tail.forward(f)?;
        Ok(match &self.head {
            TaskHead::Linear(l) => Logits::Rows(l.forward(&out.pooled)),
            TaskHead::Seg(s) => {
                let mut acc = s.lateral[0].forward(&out.stage_feats[0]);
                for (i, (conv, feat)) in s.lateral.iter().zip(&out.stage_feats).enumerate().skip(1) {
                    acc += &upsample_nearest(&conv.forward(feat), 1 << i);
                }
                Logits::Dense(acc)
            }
        })
    }

    /// Predicted classes: one per item, or one per pixel at image resolution.
    pub fn predict(&self, f: &Array4<f64>) -> Result<Prediction> {
        Ok(match self.logits(f)? {
            Logits::Rows(r) => Prediction::Labels(argmax_rows(&r)),
            Logits::Dense(d) => {
                let (n, _, h, w) = d.dim();
                let cls = argmax_rows(&dense_to_rows(&d));
                let masks = (0..n)
                    .map(|i| {
                        Array2::from_shape_fn((h * SEG_STRIDE, w * SEG_STRIDE), |(y, x)| {
                            cls[(i * h + y / SEG_STRIDE) * w + x / SEG_STRIDE] as u8
                        })
                    })
                    .collect();
                Prediction::Masks(masks)
            }
        })
    }

    /// Loss on a feature batch; accumulates gradients into tail and head.
    pub fn train_step(&mut self, f: &Array4<f64>, batch: &[&TaskSample], ctx: Ctx) -> Result<f64> {
        let (out, cache) = self.tail.forward_cached(f, ctx)?;
        match &mut self.head {
            TaskHead::Linear(l) => {
                let logits = l.forward(&out.pooled);
                let targets: Vec<usize> = batch.iter().map(|s| s.label).collect();
                let (loss, d) = softmax_cross_entropy(&logits, &targets)?;
                let dp = l.backward(&out.pooled, &d);
                self.tail.backward(cache, vec![], Some(&dp));
                Ok(loss)
            }
            TaskHead::Seg(s) => {
                let mut caches = Vec::with_capacity(s.lateral.len());
                let mut acc: Option<Array4<f64>> = None;
                for (i, (conv, feat)) in s.lateral.iter().zip(&out.stage_feats).enumerate() {
                    let (y, c) = conv.forward_cached(feat);
                    caches.push(c);
                    let y = upsample_nearest(&y, 1 << i);
                    acc = Some(match acc {
                        Some(a) => a + y,
                        None => y,
                    });
                }
                let acc = acc.expect("tail has stages");
                let dims = acc.dim();
                let targets = dense_targets(batch, (dims.2, dims.3))?;
                let (loss, d) = softmax_cross_entropy(&dense_to_rows(&acc), &targets)?;
                let d = rows_to_dense(&d, dims);
                let mut d_stages = Vec::with_capacity(caches.len());
                for (i, (conv, c)) in s.lateral.iter_mut().zip(caches).enumerate() {
                    d_stages.push(Some(conv.backward(c, &upsample_nearest_backward(&d, 1 << i))));
                }
                self.tail.backward(cache, d_stages, None);
                Ok(loss)
            }
        }
    }
}

/// Mask classes sampled at the center of each dense-head cell.
fn dense_targets(batch: &[&TaskSample], grid: (usize, usize)) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(batch.len() * grid.0 * grid.1);
    for s in batch {
        let mask = s
            .mask
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("segmentation sample without a mask".into()))?;
        let (h, w) = mask.dim();
        if h != grid.0 * SEG_STRIDE || w != grid.1 * SEG_STRIDE {
            return Err(Error::Shape(format!("mask {h}x{w} does not match a {}x{} logit grid", grid.0, grid.1)));
        }
        for y in 0..grid.0 {
            for x in 0..grid.1 {
                out.push(mask[[y * SEG_STRIDE + SEG_STRIDE / 2, x * SEG_STRIDE + SEG_STRIDE / 2]] as usize);
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub enum Prediction {
    Labels(Vec<usize>),
    Masks(Vec<Array2<u8>>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    /// SGD with momentum, as in stage 1, at a tenth of its learning rate.
    pub lr: f64,
    pub sgd_momentum: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub steps: usize,
    pub bn_groups: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        let s1 = crate::contrastive::Stage1Config::default();
        FinetuneConfig {
            lr: s1.lr / 10.0,
            sgd_momentum: s1.sgd_momentum,
            weight_decay: s1.weight_decay,
            batch: 32,
            steps: 2000,
            bn_groups: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneLog {
    pub step: usize,
    pub loss: f64,
}

/// Trains tail and head on uncompressed features; the front end is checked
/// against its registered digest at every step boundary.
pub fn finetune(
    model: &mut TaskModel,
    frontend: &FrozenFrontEnd,
    data: &[TaskSample],
    cfg: &FinetuneConfig,
    seed: u64,
) -> Result<Vec<FinetuneLog>> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    frontend.verify()?;
    let images: Vec<_> = data.iter().map(|s| s.image.clone()).collect();
    let feats = frontend.features_of(&images, 32)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = Sgd::new(cfg.lr, cfg.sgd_momentum, cfg.weight_decay);
    let batch = cfg.batch.clamp(1, data.len());
    let mut order: Vec<usize> = Vec::new();
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        if order.len() < batch {
            let mut fresh: Vec<usize> = (0..data.len()).collect();
            fresh.shuffle(&mut rng);
            order.extend(fresh);
        }
        let idx: Vec<usize> = order.drain(..batch).collect();
        let f = FeatureMap::stack(&idx.iter().map(|&i| feats[i].clone()).collect::<Vec<_>>())?;
        let samples: Vec<&TaskSample> = idx.iter().map(|&i| &data[i]).collect();
        model.zero_grad();
        let loss = model.train_step(&f, &samples, Ctx::train(cfg.bn_groups))?;
        if !loss.is_finite() {
            return Err(Error::Numerical(format!("task loss diverged at step {step}")));
        }
        opt.step(model, "task");
        frontend.verify()?;
        log.push(FinetuneLog { step, loss });
    }
    Ok(log)
}

/// How features travel from the front end to the task model.
pub trait FeatureChannel {
    /// Reconstructed features and the number of payload bytes spent.
    fn transmit(&self, f: &FeatureMap, image_dims: (usize, usize)) -> Result<(FeatureMap, usize)>;
}

/// Passes features through untouched and spends nothing.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityChannel;

impl FeatureChannel for IdentityChannel {
    fn transmit(&self, f: &FeatureMap, _: (usize, usize)) -> Result<(FeatureMap, usize)> {
        Ok((f.clone(), 0))
    }
}

/// Serializes through the full bitstream container and back.
pub struct CodecChannel<'a> {
    pub codec: &'a FeatureCodec,
    pub coder: &'a dyn EntropyCoder,
}

impl FeatureChannel for CodecChannel<'_> {
    fn transmit(&self, f: &FeatureMap, image_dims: (usize, usize)) -> Result<(FeatureMap, usize)> {
        let stream = self.codec.compress(f, image_dims, self.coder)?;
        let parsed = Bitstream::from_bytes(&stream.to_bytes())?;
        let back = self.codec.decompress(&parsed, self.coder)?;
        Ok((back, parsed.payload_len()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub task: String,
    pub lambda_coef: f64,
    pub bpp: f64,
    pub metric: f64,
}

/// Headline metric and mean bpp with every feature routed through `channel`.
pub fn evaluate(
    model: &TaskModel,
    frontend: &FrozenFrontEnd,
    channel: &dyn FeatureChannel,
    data: &[TaskSample],
) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty evaluation set".into()));
    }
    let mut bpp_sum = 0.0;
    let mut scorer = Scorer::new(&model.spec);
    for chunk in data.chunks(32) {
        let images: Vec<_> = chunk.iter().map(|s| s.image.clone()).collect();
        let feats = frontend.features_of(&images, chunk.len())?;
        let mut recon = Vec::with_capacity(chunk.len());
        for (f, s) in feats.iter().zip(chunk) {
            let (h, w) = s.original_dims;
            let (back, bytes) = channel.transmit(f, (h, w))?;
            bpp_sum += bpp(bytes, h, w);
            recon.push(back);
        }
        let pred = model.predict(&FeatureMap::stack(&recon)?)?;
        scorer.add(&pred, chunk)?;
    }
    Ok((scorer.finish(), bpp_sum / data.len() as f64))
}

/// Accumulates top-1 accuracy or a confusion matrix for mean IoU.
struct Scorer {
    metric: TaskMetric,
    correct: usize,
    total: usize,
    confusion: Array2<u64>,
}

impl Scorer {
    fn new(spec: &TaskSpec) -> Self {
        Scorer {
            metric: spec.metric(),
            correct: 0,
            total: 0,
            confusion: Array2::zeros((spec.classes, spec.classes)),
        }
    }

    fn add(&mut self, pred: &Prediction, samples: &[TaskSample]) -> Result<()> {
        match pred {
            Prediction::Labels(l) => {
                for (p, s) in l.iter().zip(samples) {
                    self.correct += usize::from(*p == s.label);
                    self.total += 1;
                }
            }
            Prediction::Masks(masks) => {
                let k = self.confusion.nrows();
                for (p, s) in masks.iter().zip(samples) {
                    let truth = s
                        .mask
                        .as_ref()
                        .ok_or_else(|| Error::InvalidArgument("segmentation sample without a mask".into()))?;
                    if truth.dim() != p.dim() {
                        return Err(Error::Shape(format!("mask {:?} vs prediction {:?}", truth.dim(), p.dim())));
                    }
                    for (&t, &q) in truth.iter().zip(p) {
                        if (t as usize) < k {
                            self.confusion[[t as usize, q as usize]] += 1;
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn finish(&self) -> f64 {
        match self.metric {
            TaskMetric::Top1Accuracy => self.correct as f64 / self.total.max(1) as f64,
            TaskMetric::MeanIou => mean_iou(&self.confusion),
        }
    }
}

/// Mean IoU over classes that occur in either truth or prediction.
pub fn mean_iou(confusion: &Array2<u64>) -> f64 {
    let k = confusion.nrows();
    let mut sum = 0.0;
    let mut n = 0;
    for c in 0..k {
        let tp = confusion[[c, c]];
        let union = confusion.row(c).sum() + confusion.column(c).sum() - tp;
        if union > 0 {
            sum += tp as f64 / union as f64;
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Appends result records with a `task,lambda_coef,bpp,metric` header.
pub fn write_results_csv(path: &Path, rows: &[TaskResult]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::io(path, e.into()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_results_csv(path: &Path) -> Result<Vec<TaskResult>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    r.deserialize()
        .map(|row| row.map_err(|e| Error::io(path, e.into())))
        .collect()
}

/// Shapes scenes as task samples (normalized images, scene labels, masks).
/// Scene labels are shifted to start at 0; masks keep 0 for background.
pub fn samples_from_shapes(scenes: &[crate::data::ShapesSample], norm: &crate::data::Normalization) -> Vec<TaskSample> {
    scenes
        .iter()
        .map(|s| TaskSample {
            image: norm.apply_unit(&s.image),
            original_dims: (s.mask.nrows(), s.mask.ncols()),
            label: s.label - 1,
            mask: Some(s.mask.clone()),
        })
        .collect()
}
