//! Entropy-constrained contrastive training of the front end (stage 1).

use std::collections::BTreeMap;
use std::io::Write;

use ndarray::{s, Array2, Array3, Array4, ArrayD, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, BackboneHead, BackboneTail, ProjectionHead};
use crate::data::{augment_pair, AugmentConfig, Normalization};
use crate::error::{Error, Result};
use crate::ifmodule::{IfConfig, IfModule};
use crate::nn::layers::l2_normalize_rows;
use crate::nn::{Ctx, Module, Optimizer, Sgd};

/// Architecture of the whole stage-1 network.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub ifmodule: IfConfig,
}

/// Head, information filter, tail and projection MLP.
#[derive(Clone, Debug)]
pub struct OmniEncoder {
    pub head: BackboneHead,
    pub ifmodule: IfModule,
    pub tail: BackboneTail,
    pub proj: ProjectionHead,
}

crate::impl_module!(OmniEncoder { head, ifmodule, tail, proj });

impl OmniEncoder {
    pub fn new<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let head = BackboneHead::new(&cfg.backbone, rng);
        let ifmodule = IfModule::new(head.out_channels(), &cfg.ifmodule, rng);
        let tail = BackboneTail::new(&cfg.backbone, rng);
        let proj = ProjectionHead::new(tail.out_channels(), cfg.backbone.proj_hidden, cfg.backbone.embed_dim, rng);
        OmniEncoder { head, ifmodule, tail, proj }
    }

    /// Omnipotent features of a normalized image batch (evaluation mode, no noise).
    pub fn features(&self, x: &Array4<f64>) -> Result<Array4<f64>> {
        self.ifmodule.features(&self.head.forward_batch(x)?)
    }

    /// Features of many normalized `[3, H, W]` images, computed `batch` at a time.
    pub fn features_of(&self, images: &[Array3<f64>], batch: usize) -> Result<Vec<crate::FeatureMap>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(batch.max(1)) {
            let views: Vec<_> = chunk.iter().map(|a| a.view()).collect();
            let x = ndarray::stack(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))?;
            out.extend(crate::FeatureMap::from_batch(&self.features(&x)?, crate::backbone::HEAD_DOWNSAMPLE));
        }
        Ok(out)
    }

    /// Evaluation-mode embedding.
    pub fn embed(&self, x: &Array4<f64>) -> Result<Array2<f64>> {
        let f = self.features(x)?;
        self.proj.forward(&self.tail.forward(&f)?.pooled)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage1Config {
    pub alpha: f64,
    pub tau: f64,
    pub momentum: f64,
    pub queue_size: usize,
    pub batch: usize,
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    pub sgd_momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub warmup_epochs: usize,
    /// Stops after this many steps when nonzero.
    pub max_steps: usize,
    pub bn_groups: usize,
    pub augment: AugmentConfig,
    /// Optional checkpoint to start from instead of random weights.
    pub init_checkpoint: Option<String>,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Stage1Config {
            alpha: 0.1,
            tau: 0.2,
            momentum: 0.999,
            queue_size: 1024,
            batch: 64,
            lr: 1e-3,
            lr_schedule: LrSchedule::Constant,
            sgd_momentum: 0.9,
            weight_decay: 1e-4,
            epochs: 200,
            warmup_epochs: 10,
            max_steps: 0,
            bn_groups: 2,
            augment: AugmentConfig::default(),
            init_checkpoint: None,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine decay to zero over the run.
    Cosine,
}

impl LrSchedule {
    pub fn lr_at(self, base: f64, step: usize, total: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine if total == 0 => base,
            LrSchedule::Cosine => 0.5 * base * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos()),
        }
    }
}

/// FIFO dictionary of unit-norm negative keys.
#[derive(Clone, Debug)]
pub struct NegativeQueue {
    buffer: Array2<f64>,
    head: usize,
}

impl NegativeQueue {
    /// Random unit vectors.
    pub fn random<R: Rng + ?Sized>(capacity: usize, dim: usize, rng: &mut R) -> Self {
        let raw = Array2::from_shape_fn((capacity, dim), |_| rng.sample::<f64, _>(StandardNormal));
        NegativeQueue {
            buffer: l2_normalize_rows(&raw).0,
            head: 0,
        }
    }

    pub fn from_rows(rows: Array2<f64>) -> Self {
        NegativeQueue { buffer: rows, head: 0 }
    }

    pub fn capacity(&self) -> usize {
        self.buffer.nrows()
    }

    pub fn dim(&self) -> usize {
        self.buffer.ncols()
    }

    /// Storage order (a rotation of the logical order).
    pub fn raw(&self) -> &Array2<f64> {
        &self.buffer
    }

    /// Entries from oldest to newest.
    pub fn ordered(&self) -> Array2<f64> {
        let k = self.capacity();
        let mut out = Array2::zeros(self.buffer.raw_dim());
        for i in 0..k {
            out.row_mut(i).assign(&self.buffer.row((self.head + i) % k));
        }
        out
    }

    /// Replaces the oldest `keys.nrows()` entries.
    pub fn enqueue(&mut self, keys: &Array2<f64>) -> Result<()> {
        if keys.ncols() != self.dim() {
            return Err(Error::Shape(format!("key dim {} vs queue dim {}", keys.ncols(), self.dim())));
        }
        let k = self.capacity();
        for row in keys.outer_iter() {
            self.buffer.row_mut(self.head).assign(&row);
            self.head = (self.head + 1) % k;
        }
        Ok(())
    }
}

/// Contrastive loss of one query against its positive and a set of negatives.
pub fn info_nce(q: &[f64], k_pos: &[f64], negatives: &Array2<f64>, tau: f64) -> Result<f64> {
    let qa = Array2::from_shape_vec((1, q.len()), q.to_vec()).map_err(|e| Error::Shape(e.to_string()))?;
    let ka = Array2::from_shape_vec((1, k_pos.len()), k_pos.to_vec()).map_err(|e| Error::Shape(e.to_string()))?;
    Ok(info_nce_batch(&qa, &ka, negatives, tau)?.0)
}

/// Mean contrastive loss over a batch and its gradient with respect to the
/// queries. `negatives` is `[K, d]`.
pub fn info_nce_batch(q: &Array2<f64>, k_pos: &Array2<f64>, negatives: &Array2<f64>, tau: f64) -> Result<(f64, Array2<f64>)> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {tau}")));
    }
    if q.dim() != k_pos.dim() || q.ncols() != negatives.ncols() {
        return Err(Error::Shape(format!(
            "queries {:?}, keys {:?}, negatives {:?}",
            q.dim(),
            k_pos.dim(),
            negatives.dim()
        )));
    }
    let b = q.nrows();
    let neg = q.dot(&negatives.t()) / tau;
    let mut loss = 0.0;
    let mut dq = Array2::zeros(q.raw_dim());
    for i in 0..b {
        let pos = q.row(i).dot(&k_pos.row(i)) / tau;
        let row = neg.row(i);
        let m = row.fold(pos, |a, &v| a.max(v));
        let ep = (pos - m).exp();
        let en: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
        let z = ep + en.iter().sum::<f64>();
        loss += z.ln() + m - pos;
        let p0 = ep / z;
        let mut g = k_pos.row(i).to_owned() * (p0 - 1.0);
        for (j, e) in en.iter().enumerate() {
            g.scaled_add(e / z, &negatives.row(j));
        }
        dq.row_mut(i).assign(&(g / (tau * b as f64)));
    }
    Ok((loss / b as f64, dq))
}

/// `key <- m * key + (1 - m) * query` over learned weights.
pub fn momentum_update(query: &dyn Module, key: &mut dyn Module, m: f64) -> Result<()> {
    let mut src: BTreeMap<String, ArrayD<f64>> = BTreeMap::new();
    query.visit("", &mut |n, p| {
        if p.is_weight() {
            src.insert(n.to_string(), p.value.clone());
        }
    });
    let mut err = None;
    let mut seen = 0;
    key.visit_mut("", &mut |n, p| {
        if !p.is_weight() || err.is_some() {
            return;
        }
        match src.get(n) {
            Some(v) if v.shape() == p.value.shape() => {
                seen += 1;
                if m == 0.0 {
                    p.value.assign(v);
                } else if m != 1.0 {
                    p.value.zip_mut_with(v, |k, &q| *k = m * *k + (1.0 - m) * q);
                }
            }
            Some(v) => err = Some(Error::Shape(format!("`{n}`: {:?} vs {:?}", v.shape(), p.value.shape()))),
            None => err = Some(Error::Shape(format!("`{n}` missing from query parameters"))),
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    if seen != src.len() {
        return Err(Error::Shape("query has parameters the key lacks".into()));
    }
    Ok(())
}

/// One line of the stage-1 metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: f64,
    pub l_q: f64,
    pub l_e: f64,
    pub lr: f64,
    /// Mean cosine between queries and their positive keys.
    pub pos_sim: f64,
    /// Mean cosine between queries and the queued negatives.
    pub neg_sim: f64,
}

/// Query/key pair, queue and optimizer state.
pub struct Stage1Trainer {
    pub query: OmniEncoder,
    pub key: OmniEncoder,
    pub queue: NegativeQueue,
    pub cfg: Stage1Config,
    opt: Sgd,
    rng: ChaCha8Rng,
    step: usize,
    warmup: bool,
}

impl Stage1Trainer {
    pub fn new(model: OmniEncoder, cfg: Stage1Config, seed: u64) -> Result<Self> {
        if !(cfg.tau > 0.0) {
            return Err(Error::Config(format!("tau must be positive, got {}", cfg.tau)));
        }
        if !(0.0..=1.0).contains(&cfg.momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1], got {}", cfg.momentum)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let queue = NegativeQueue::random(cfg.queue_size, model.proj.out_dim(), &mut rng);
        let mut key = model.clone();
        key.set_trainable(false);
        let opt = Sgd::new(cfg.lr, cfg.sgd_momentum, cfg.weight_decay);
        let mut t = Stage1Trainer {
            query: model,
            key,
            queue,
            cfg,
            opt,
            rng,
            step: 0,
            warmup: false,
        };
        t.set_warmup(false);
        Ok(t)
    }

    /// While warming up only the information filter is updated.
    pub fn set_warmup(&mut self, on: bool) {
        self.warmup = on;
        self.query.set_trainable(!on);
        self.query.ifmodule.set_trainable(true);
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    fn keys(&mut self, xk: &Array4<f64>, ctx: Ctx) -> Result<Array2<f64>> {
        let n = xk.dim().0;
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut self.rng);
        let shuffled = xk.select(Axis(0), &perm);
        let (h, _) = self.key.head.forward_cached(&shuffled, ctx)?;
        let (io, _) = self.key.ifmodule.forward_train(&h, ctx, true, &mut self.rng)?;
        let (to, _) = self.key.tail.forward_cached(&io.f, ctx)?;
        let k_shuf = self.key.proj.forward(&to.pooled)?;
        let mut k = Array2::zeros(k_shuf.raw_dim());
        for (i, &p) in perm.iter().enumerate() {
            k.row_mut(p).assign(&k_shuf.row(i));
        }
        Ok(k)
    }

    /// One optimization step on a batch of query views and key views.
    pub fn step(&mut self, xq: &Array4<f64>, xk: &Array4<f64>) -> Result<StepMetrics> {
        if xq.dim() != xk.dim() {
            return Err(Error::Shape(format!("query views {:?} vs key views {:?}", xq.dim(), xk.dim())));
        }
        let ctx = Ctx::train(self.cfg.bn_groups);
        self.query.zero_grad();

        let (h, hc) = self.query.head.forward_cached(xq, ctx)?;
        let (io, ic) = self.query.ifmodule.forward_train(&h, ctx, true, &mut self.rng)?;
        let (to, tc) = self.query.tail.forward_cached(&io.f, ctx)?;
        let (q, pc) = self.query.proj.forward_cached(&to.pooled)?;

        let k = self.keys(xk, ctx)?;
        let (l_q, dq) = info_nce_batch(&q, &k, self.queue.raw(), self.cfg.tau)?;
        let pos_sim = (&q * &k).sum() / q.nrows() as f64;
        let neg_sim = q.dot(&self.queue.raw().t()).mean().unwrap_or(0.0);
        // L_e is the mean code length per latent element
        let n_el = io.y_relaxed.len() as f64;
        let (bits, dy_e) = self
            .query
            .ifmodule
            .entropy_bits_and_grad(&io.y_relaxed, self.cfg.alpha / n_el, 1.0 / n_el)?;
        let l_e = bits / n_el;

        let dpooled = self.query.proj.backward(pc, &dq);
        let df = self.query.tail.backward(tc, vec![], Some(&dpooled));
        let dh = self.query.ifmodule.backward(ic, &df, Some(&dy_e));
        if !self.warmup {
            self.query.head.backward(hc, &dh);
        }
        self.opt.step(&mut self.query, "");
        momentum_update(&self.query, &mut self.key, self.cfg.momentum)?;
        self.queue.enqueue(&k)?;
        self.step += 1;
        let loss = l_q + self.cfg.alpha * l_e;
        if !loss.is_finite() {
            return Err(Error::Numerical(format!("stage-1 loss became {loss} at step {}", self.step)));
        }
        Ok(StepMetrics {
            step: self.step,
            loss,
            l_q,
            l_e,
            lr: self.opt.lr(),
            pos_sim,
            neg_sim,
        })
    }
}

/// Builds a pair of augmented, normalized view batches.
pub fn view_batch<R: Rng + ?Sized>(
    images: &[&Array3<f64>],
    aug: &AugmentConfig,
    norm: &Normalization,
    rng: &mut R,
) -> Result<(Array4<f64>, Array4<f64>)> {
    let n = images.len();
    let c = aug.crop;
    if c == 0 || !c.is_multiple_of(32) {
        return Err(Error::Config(format!("crop {c} is not a multiple of 32")));
    }
    let mut a = Array4::zeros((n, 3, c, c));
    let mut b = Array4::zeros((n, 3, c, c));
    for (i, img) in images.iter().enumerate() {
        let (va, vb) = augment_pair(img, aug, rng);
        a.slice_mut(s![i, .., .., ..]).assign(&norm.apply_unit(&va));
        b.slice_mut(s![i, .., .., ..]).assign(&norm.apply_unit(&vb));
    }
    Ok((a, b))
}

/// Runs the configured schedule over `images` (0..1 intensities), writing
/// one JSON line per step to `log` when given.
pub fn train_stage1(
    trainer: &mut Stage1Trainer,
    images: &[Array3<f64>],
    norm: &Normalization,
    seed: u64,
    mut log: Option<&mut dyn Write>,
) -> Result<Vec<StepMetrics>> {
    if images.is_empty() {
        return Err(Error::InvalidArgument("no training images".into()));
    }
    let cfg = trainer.cfg.clone();
    let batch = cfg.batch.min(images.len()).max(1);
    let per_epoch = images.len() / batch;
    let mut total = cfg.epochs * per_epoch;
    if cfg.max_steps > 0 {
        total = total.min(cfg.max_steps);
    }
    let warmup = cfg.warmup_epochs * per_epoch;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut metrics = Vec::with_capacity(total);
    for step in 0..total {
        if step % per_epoch == 0 {
            order.shuffle(&mut rng);
        }
        trainer.set_warmup(step < warmup);
        trainer.opt.set_lr(cfg.lr_schedule.lr_at(cfg.lr, step, total));
        let start = (step % per_epoch) * batch;
        let refs: Vec<&Array3<f64>> = order[start..start + batch].iter().map(|&i| &images[i]).collect();
        let (xq, xk) = view_batch(&refs, &cfg.augment, norm, &mut rng)?;
        let m = trainer.step(&xq, &xk)?;
        if let Some(w) = log.as_deref_mut() {
            let line = serde_json::to_string(&m).expect("metrics serialize");
            writeln!(w, "{line}").map_err(|e| Error::io("<metrics log>", e))?;
        }
        metrics.push(m);
    }
    trainer.set_warmup(false);
    Ok(metrics)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ContentDigest;

    #[test]
    fn info_nce_examples() {
        let q = [1.0, 0.0, 0.0, 0.0, 0.0];
        let negs = Array2::from_shape_fn((4, 5), |(i, j)| if j == i + 1 { 1.0 } else { 0.0 });
        let l = info_nce(&q, &q, &negs, 0.2).unwrap();
        let oracle = (1.0 + 4.0 * (-5.0f64).exp()).ln();
        assert!((l - oracle).abs() < 1e-12);
        assert!((l - 0.02659).abs() < 1e-5);
        let same = Array2::from_shape_fn((4, 5), |(_, j)| if j == 0 { 1.0 } else { 0.0 });
        assert!((info_nce(&q, &q, &same, 0.2).unwrap() - 5f64.ln()).abs() < 1e-12);
        assert!(info_nce(&q, &q, &same, 0.0).is_err());
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(LrSchedule::Cosine.lr_at(0.4, 0, 100), 0.4);
        assert!((LrSchedule::Cosine.lr_at(0.4, 50, 100) - 0.2).abs() < 1e-12);
        assert_eq!(LrSchedule::Constant.lr_at(0.4, 99, 100), 0.4);
    }

    #[test]
    fn queue_is_fifo() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut qu = NegativeQueue::random(5, 3, &mut rng);
        let before = qu.ordered();
        let keys = l2_normalize_rows(&Array2::from_shape_fn((2, 3), |(i, j)| (i * 3 + j + 1) as f64)).0;
        qu.enqueue(&keys).unwrap();
        let after = qu.ordered();
        assert_eq!(after.slice(s![..3, ..]), before.slice(s![2.., ..]));
        assert_eq!(after.slice(s![3.., ..]), keys);
        assert_eq!(qu.capacity(), 5);
        for r in after.outer_iter() {
            assert!((r.dot(&r).sqrt() - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn momentum_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = ProjectionHead::new(4, 3, 2, &mut rng);
        let mut b = ProjectionHead::new(4, 3, 2, &mut rng);
        let d: ContentDigest = b.weight_digest();
        momentum_update(&a, &mut b, 1.0).unwrap();
        assert_eq!(d, b.weight_digest());
        momentum_update(&a, &mut b, 0.0).unwrap();
        assert_eq!(a.weight_digest(), b.weight_digest());
        let mut c = ProjectionHead::new(5, 3, 2, &mut rng);
        assert!(momentum_update(&a, &mut c, 0.5).is_err());
    }
}
