//! Clip-embedding network: small conv backbone with attention at P1–P3,
//! global average pooling, set aggregation, embedding head and classifier.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aggregation::{AggConfig, SetAggCell};
use crate::attention::{AttentionConfig, AttentionModule, Variant};
use crate::autograd::{Graph, Var};
use crate::error::{dim_err, Error, Result};
use crate::losses::{self, DEFAULT_MARGIN};
use crate::nn::{BatchNorm, Conv2d, Init, Linear};
use crate::param::{unique_params, zero_grads, Module, Param};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Placement {
    P1,
    P2,
    P3,
}

impl Placement {
    pub const ALL: [Placement; 3] = [Placement::P1, Placement::P2, Placement::P3];

    /// Index of the backbone stage this placement follows.
    pub fn stage(self) -> usize {
        match self {
            Placement::P1 => 0,
            Placement::P2 => 1,
            Placement::P3 => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Frame shape `[C, H, W]`.
    pub input: [usize; 3],
    /// Output channels per stage; each stage halves the resolution.
    pub stages: Vec<usize>,
    pub attach: Vec<Placement>,
    pub attention: AttentionConfig,
    /// `false` replaces the set aggregation cell by a plain frame average.
    pub set_aggregation: bool,
    pub agg: AggConfig,
    pub dv: usize,
    pub num_ids: usize,
    pub t: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input: [3, 64, 32],
            stages: vec![16, 32, 64, 128],
            attach: Placement::ALL.to_vec(),
            attention: AttentionConfig::default(),
            set_aggregation: true,
            agg: AggConfig::default(),
            dv: 128,
            num_ids: 10,
            t: 4,
        }
    }
}

impl ModelConfig {
    /// Feature-map shape `[c, h, w]` after stage `i`.
    pub fn stage_shape(&self, i: usize) -> [usize; 3] {
        let mut h = self.input[1];
        let mut w = self.input[2];
        for _ in 0..=i {
            h = h.div_ceil(2);
            w = w.div_ceil(2);
        }
        [self.stages[i], h, w]
    }

    pub fn validate(&self) -> Result<()> {
        if self.input.iter().any(|&d| d == 0) {
            return Err(Error::Config(format!("input shape {:?} has a zero extent", self.input)));
        }
        if self.stages.len() < 3 || self.stages.contains(&0) {
            return Err(Error::Config("the backbone needs at least three non-empty stages".into()));
        }
        if self.dv == 0 || self.num_ids == 0 || self.t == 0 {
            return Err(Error::Config("dv, num_ids and t must be positive".into()));
        }
        let mut seen = self.attach.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.attach.len() {
            return Err(Error::Config(format!("duplicate attention placement in {:?}", self.attach)));
        }
        Ok(())
    }

    pub fn has_attention(&self) -> bool {
        self.attention.variant != Variant::None && !self.attach.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct Stage<T: Scalar> {
    pub conv: Conv2d<T>,
    pub bn: BatchNorm<T>,
}

/// A batch of clips `[B, t, C, H, W]` with identity and camera labels.
#[derive(Debug, Clone)]
pub struct ClipBatch<T: Scalar> {
    pub frames: Tensor<T>,
    pub ids: Vec<usize>,
    pub cams: Vec<usize>,
}

impl<T: Scalar> ClipBatch<T> {
    pub fn new(frames: Tensor<T>, ids: Vec<usize>, cams: Vec<usize>) -> Result<Self> {
        let s = frames.shape();
        if s.len() != 5 || s[0] != ids.len() || ids.len() != cams.len() {
            return Err(dim_err(format!("clip batch {s:?} with {} ids and {} cameras", ids.len(), cams.len())));
        }
        Ok(Self { frames, ids, cams })
    }
}

/// Feature maps around the P2 attention module, recorded for inspection.
#[derive(Debug, Clone)]
pub struct AttentionTap<T> {
    pub pre: Tensor<T>,
    pub post: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct Model<T: Scalar> {
    pub cfg: ModelConfig,
    pub stages: Vec<Stage<T>>,
    pub attention: Vec<Option<AttentionModule<T>>>,
    pub agg: Option<SetAggCell<T>>,
    pub fc1: Linear<T>,
    pub bn1: BatchNorm<T>,
    pub fc2: Linear<T>,
}

impl<T: Scalar> Model<T> {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut stages = Vec::with_capacity(cfg.stages.len());
        let mut in_c = cfg.input[0];
        for (i, &c) in cfg.stages.iter().enumerate() {
            stages.push(Stage {
                conv: Conv2d::new(&format!("stage{}.conv", i + 1), in_c, c, 3, 2, 1, false, Init::KaimingUniform, &mut rng),
                bn: BatchNorm::new(&format!("stage{}.bn", i + 1), c),
            });
            in_c = c;
        }
        let mut attention: Vec<Option<AttentionModule<T>>> = vec![None; cfg.stages.len()];
        if cfg.attention.variant != Variant::None {
            for &p in &cfg.attach {
                let name = format!("att.{p:?}").to_lowercase();
                attention[p.stage()] = Some(AttentionModule::new(&name, &cfg.attention, cfg.stage_shape(p.stage()), &mut rng)?);
            }
        }
        let c_last = *cfg.stages.last().expect("validated");
        let agg = if cfg.set_aggregation { Some(SetAggCell::new("agg", c_last, &cfg.agg, &mut rng)?) } else { None };
        Ok(Self {
            cfg: cfg.clone(),
            stages,
            attention,
            agg,
            fc1: Linear::new("fc1", c_last, cfg.dv, false, Init::KaimingUniform, &mut rng),
            bn1: BatchNorm::new("bn1", cfg.dv),
            fc2: Linear::new("fc2", cfg.dv, cfg.num_ids, false, Init::XavierUniform, &mut rng),
        })
    }

    pub fn attention_modules(&self) -> impl Iterator<Item = (Placement, &AttentionModule<T>)> {
        Placement::ALL.into_iter().filter_map(|p| self.attention.get(p.stage()).and_then(|a| a.as_ref()).map(|a| (p, a)))
    }

    /// Backbone with attention on frames `[N, C, H, W]`, pooled to `[N, c]`.
    pub fn frame_features<'g>(
        &self,
        g: &'g Graph<T>,
        x: &Var<'g, T>,
        mut tap: Option<&mut AttentionTap<T>>,
    ) -> Result<Var<'g, T>> {
        let s = x.shape();
        if s.len() != 4 || s[1..] != self.cfg.input {
            return Err(dim_err(format!("frames must be [N, {:?}], got {s:?}", self.cfg.input)));
        }
        let mut h = *x;
        for (i, st) in self.stages.iter().enumerate() {
            h = st.bn.forward(g, &st.conv.forward(g, &h)?)?.relu();
            if let Some(att) = &self.attention[i] {
                let out = att.forward(g, &h)?;
                if i == Placement::P2.stage() {
                    if let Some(t) = tap.as_deref_mut() {
                        t.pre = (*h.value()).clone();
                        t.post = (*out.value()).clone();
                    }
                }
                h = out;
            }
        }
        h.global_avg_pool()
    }

    /// Clip embeddings `F[B, dv]` for clips `[B, t, C, H, W]`.
    pub fn embed<'g>(&self, g: &'g Graph<T>, clips: &Var<'g, T>) -> Result<Var<'g, T>> {
        self.embed_tapped(g, clips, None)
    }

    pub fn embed_tapped<'g>(
        &self,
        g: &'g Graph<T>,
        clips: &Var<'g, T>,
        tap: Option<&mut AttentionTap<T>>,
    ) -> Result<Var<'g, T>> {
        let s = clips.shape();
        if s.len() != 5 || s[2..] != self.cfg.input {
            return Err(dim_err(format!("clips must be [B, t, {:?}], got {s:?}", self.cfg.input)));
        }
        let (b, t) = (s[0], s[1]);
        let frames = clips.reshape(&[b * t, s[2], s[3], s[4]])?;
        let f = self.frame_features(g, &frames, tap)?;
        let c = f.shape()[1];
        let f = f.reshape(&[b, t, c])?;
        let pooled = match &self.agg {
            Some(cell) => cell.forward(g, &f)?,
            None => f.mean_axis(1)?,
        };
        Ok(self.bn1.forward(g, &self.fc1.forward(g, &pooled)?)?.relu())
    }

    /// Raw identity logits `[B, num_ids]`.
    pub fn classify<'g>(&self, g: &'g Graph<T>, f: &Var<'g, T>) -> Result<Var<'g, T>> {
        self.fc2.forward(g, f)
    }

    pub fn trainable_params(&self) -> Vec<Param<T>> {
        unique_params(self.params()).into_iter().filter(|p| p.is_trainable()).collect()
    }

    /// Embed many clips in evaluation mode, `chunk` clips per graph.
    pub fn embed_eval(&self, clips: &Tensor<T>, chunk: usize) -> Result<Tensor<T>> {
        let s = clips.shape().to_vec();
        let per_clip: usize = s[1..].iter().product();
        let n = s[0];
        let chunk = chunk.max(1);
        let mut out = Vec::with_capacity(n * self.cfg.dv);
        let mut start = 0;
        while start < n {
            let end = (start + chunk).min(n);
            let mut shape = s.clone();
            shape[0] = end - start;
            let part = Tensor::new(&shape, clips.data()[start * per_clip..end * per_clip].to_vec())?;
            let g = Graph::eval();
            out.extend_from_slice(self.embed(&g, &g.constant(part))?.value().data());
            start = end;
        }
        Tensor::new(&[n, self.cfg.dv], out)
    }
}

impl<T: Scalar> Module<T> for Model<T> {
    fn params(&self) -> Vec<Param<T>> {
        let mut v = Vec::new();
        for (i, st) in self.stages.iter().enumerate() {
            v.extend(st.conv.params());
            v.extend(st.bn.params());
            if let Some(a) = &self.attention[i] {
                v.extend(a.params());
            }
        }
        if let Some(a) = &self.agg {
            v.extend(a.params());
        }
        v.extend(self.fc1.params());
        v.extend(self.bn1.params());
        v.extend(self.fc2.params());
        unique_params(v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 3e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam over a fixed, ordered parameter list.
#[derive(Debug, Clone)]
pub struct Adam<T: Scalar> {
    pub cfg: AdamConfig,
    pub lr: f64,
    pub step: u64,
    pub params: Vec<Param<T>>,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: Vec<Param<T>>, cfg: AdamConfig) -> Self {
        let m: Vec<Vec<T>> = params.iter().map(|p| vec![T::zero(); p.numel()]).collect();
        Self { lr: cfg.lr, cfg, step: 0, v: m.clone(), m, params }
    }

    pub fn zero_grad(&self) {
        zero_grads(&self.params);
    }

    pub fn step(&mut self) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        let (lr, eps) = (self.lr, self.cfg.eps);
        for ((p, m), v) in self.params.iter().zip(&mut self.m).zip(&mut self.v) {
            p.update(|w, g| {
                for i in 0..w.len() {
                    let gi = g[i].as_f64();
                    let mi = b1 * m[i].as_f64() + (1.0 - b1) * gi;
                    let vi = b2 * v[i].as_f64() + (1.0 - b2) * gi * gi;
                    m[i] = T::from_f64(mi);
                    v[i] = T::from_f64(vi);
                    let mhat = mi / bc1;
                    let vhat = vi / bc2;
                    w[i] = T::from_f64(w[i].as_f64() - lr * mhat / (vhat.sqrt() + eps));
                }
            });
        }
    }
}

/// Step decay: `base · gamma^(number of milestones ≤ epoch)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LrSchedule {
    pub milestones: Vec<usize>,
    pub gamma: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self { milestones: vec![10, 20], gamma: 0.1 }
    }
}

impl LrSchedule {
    pub fn lr_at(&self, base: f64, epoch: usize) -> f64 {
        let n = self.milestones.iter().filter(|&&m| m <= epoch).count();
        base * self.gamma.powi(n as i32)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub triplet: f64,
    pub softmax: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub margin: f64,
    pub squared: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { margin: DEFAULT_MARGIN, squared: false }
    }
}

/// Forward, `L_sof + L_tri`, backward, Adam update. `labels` are classifier
/// targets in `[0, num_ids)`; `graph_seed` drives stochastic sequence orders.
pub fn train_step<T: Scalar>(
    model: &Model<T>,
    opt: &mut Adam<T>,
    batch: &ClipBatch<T>,
    labels: &[usize],
    loss_cfg: LossConfig,
    graph_seed: u64,
) -> Result<StepReport> {
    opt.zero_grad();
    let g = Graph::train(graph_seed);
    let x = g.constant(batch.frames.clone());
    let f = model.embed(&g, &x)?;
    let logits = model.classify(&g, &f)?;
    let (tri, _) = losses::triplet_batch_hard(&f, labels, loss_cfg.margin, loss_cfg.squared)?;
    let ce = losses::cross_entropy(&logits, labels)?;
    let total = losses::total_loss(&tri, &ce)?;
    let report = StepReport { triplet: tri.item().as_f64(), softmax: ce.item().as_f64(), total: total.item().as_f64() };
    if !report.total.is_finite() {
        return Err(Error::Divergence { step: opt.step as usize, loss: report.total });
    }
    g.backward(total)?;
    opt.step();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregation::Pooling;
    use crate::attention::SequenceOrder;

    fn tiny(variant: Variant) -> ModelConfig {
        ModelConfig {
            input: [3, 16, 8],
            stages: vec![8, 8, 16, 16],
            attention: AttentionConfig { variant, d: 4, ..Default::default() },
            agg: AggConfig { r: 4, ..Default::default() },
            dv: 12,
            num_ids: 5,
            t: 3,
            ..Default::default()
        }
    }

    fn clips(b: usize, t: usize, seed: u64) -> Tensor<f64> {
        Tensor::randn(&[b, t, 3, 16, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn shapes_and_placements() {
        let cfg = tiny(Variant::Cra);
        assert_eq!(cfg.stage_shape(0), [8, 8, 4]);
        assert_eq!(cfg.stage_shape(2), [16, 2, 1]);
        let m = Model::<f64>::new(&cfg, 0).unwrap();
        assert_eq!(m.attention_modules().count(), 3);
        let g = Graph::eval();
        let f = m.embed(&g, &g.constant(clips(2, 3, 1))).unwrap();
        assert_eq!(f.shape(), vec![2, 12]);
        assert_eq!(m.classify(&g, &f).unwrap().shape(), vec![2, 5]);
        for t in [1, 2, 5] {
            assert_eq!(m.embed(&g, &g.constant(clips(1, t, 2))).unwrap().shape(), vec![1, 12]);
        }
        let bad = g.constant(Tensor::zeros(&[1, 2, 3, 8, 8]));
        assert!(matches!(m.embed(&g, &bad), Err(Error::Dimension(_))));
    }

    #[test]
    fn identical_frames_match_single_frame() {
        let m = Model::<f64>::new(&tiny(Variant::None), 3).unwrap();
        let one = clips(1, 1, 4);
        let mut rep = Vec::new();
        for _ in 0..4 {
            rep.extend_from_slice(one.data());
        }
        let four = Tensor::new(&[1, 4, 3, 16, 8], rep).unwrap();
        let g = Graph::eval();
        let a = m.embed(&g, &g.constant(one)).unwrap().value();
        let b = m.embed(&g, &g.constant(four)).unwrap().value();
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn frame_order_invariance_and_eval_determinism() {
        let m = Model::<f32>::new(&tiny(Variant::Cra), 5).unwrap();
        let x: Tensor<f32> = clips(2, 3, 6).cast();
        let per = 3 * 16 * 8;
        let mut y = x.clone();
        for b in 0..2 {
            for (j, src) in [2, 0, 1].into_iter().enumerate() {
                let dst = (b * 3 + j) * per;
                let from = (b * 3 + src) * per;
                y.data_mut()[dst..dst + per].copy_from_slice(&x.data()[from..from + per]);
            }
        }
        let g = Graph::eval();
        let a = m.embed(&g, &g.constant(x.clone())).unwrap().value();
        let b = m.embed(&g, &g.constant(y)).unwrap().value();
        assert!(a.max_abs_diff(&b) < 1e-6);
        let g2 = Graph::eval();
        let c = m.embed(&g2, &g2.constant(x)).unwrap().value();
        assert_eq!(a.data(), c.data());
    }

    #[test]
    fn attention_never_changes_shapes() {
        let none = Model::<f64>::new(&tiny(Variant::None), 0).unwrap();
        let x = clips(1, 2, 7);
        for v in [Variant::Cra, Variant::Sra, Variant::Ca] {
            let m = Model::<f64>::new(&tiny(v), 0).unwrap();
            let g = Graph::eval();
            let frames = g.constant(x.reshape(&[2, 3, 16, 8]).unwrap());
            let mut h = frames;
            let mut h0 = frames;
            for i in 0..4 {
                h = m.stages[i].bn.forward(&g, &m.stages[i].conv.forward(&g, &h).unwrap()).unwrap().relu();
                h0 = none.stages[i].bn.forward(&g, &none.stages[i].conv.forward(&g, &h0).unwrap()).unwrap().relu();
                if let Some(a) = &m.attention[i] {
                    h = a.forward(&g, &h).unwrap();
                }
                assert_eq!(h.shape(), h0.shape());
            }
        }
    }

    #[test]
    fn zero_classifier_gives_zero_logits() {
        let m = Model::<f64>::new(&tiny(Variant::None), 0).unwrap();
        m.fc2.weight.set_value(Tensor::zeros(&[5, 12])).unwrap();
        let g = Graph::eval();
        let f = m.embed(&g, &g.constant(clips(2, 2, 8))).unwrap();
        assert!(m.classify(&g, &f).unwrap().value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lr_schedule_decays_by_gamma() {
        let s = LrSchedule { milestones: vec![10, 20], gamma: 0.1 };
        assert_eq!(s.lr_at(1.0, 9), 1.0);
        assert!((s.lr_at(1.0, 10) - 0.1).abs() < 1e-15);
        assert!((s.lr_at(1.0, 25) - 0.01).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let p = Param::new("w", Tensor::<f64>::from_f64(&[2], &[1.0, -1.0]).unwrap());
        p.accumulate_grad(&[0.5, -2.0]);
        let mut opt = Adam::new(vec![p.clone()], AdamConfig { lr: 0.1, ..Default::default() });
        opt.step();
        let v = p.value();
        assert!((v.data()[0] - 0.9).abs() < 1e-6);
        assert!((v.data()[1] + 0.9).abs() < 1e-6);
    }

    fn pk_batch() -> (ClipBatch<f32>, Vec<usize>) {
        let frames: Tensor<f32> = clips(6, 2, 9).cast();
        let ids = vec![0, 0, 1, 1, 2, 2];
        (ClipBatch::new(frames, ids.clone(), vec![0; 6]).unwrap(), ids)
    }

    #[test]
    fn train_step_is_bitwise_reproducible() {
        let cfg = ModelConfig { t: 2, attention: AttentionConfig { order: SequenceOrder::RandomShuffle, ..tiny(Variant::Cra).attention }, ..tiny(Variant::Cra) };
        let (batch, labels) = pk_batch();
        let run = || {
            let m = Model::<f32>::new(&cfg, 11).unwrap();
            let mut opt = Adam::new(m.trainable_params(), AdamConfig::default());
            let r1 = train_step(&m, &mut opt, &batch, &labels, LossConfig::default(), 5).unwrap();
            let r2 = train_step(&m, &mut opt, &batch, &labels, LossConfig::default(), 6).unwrap();
            (r1, r2, m.fc1.weight.value())
        };
        let (a1, a2, wa) = run();
        let (b1, b2, wb) = run();
        assert_eq!((a1, a2), (b1, b2));
        assert_eq!(wa, wb);
    }

    #[test]
    fn loss_decreases_on_separable_set() {
        let cfg = ModelConfig { t: 2, agg: AggConfig { pooling: Pooling::Avg, r: 4, share_weights: false }, ..tiny(Variant::None) };
        let m = Model::<f32>::new(&cfg, 12).unwrap();
        // each identity is a distinct constant offset
        let mut frames = Tensor::<f32>::randn(&[6, 2, 3, 16, 8], 0.1, &mut ChaCha8Rng::seed_from_u64(13));
        let per = 2 * 3 * 16 * 8;
        for c in 0..6 {
            let off = (c / 2) as f32 * 1.5 - 1.5;
            frames.data_mut()[c * per..(c + 1) * per].iter_mut().for_each(|v| *v += off);
        }
        let labels = vec![0, 0, 1, 1, 2, 2];
        let batch = ClipBatch::new(frames, labels.clone(), vec![0; 6]).unwrap();
        let mut opt = Adam::new(m.trainable_params(), AdamConfig { lr: 1e-3, ..Default::default() });
        let losses: Vec<f64> = (0..50)
            .map(|s| train_step(&m, &mut opt, &batch, &labels, LossConfig::default(), s).unwrap().total)
            .collect();
        let head: f64 = losses[..10].iter().sum::<f64>() / 10.0;
        let tail: f64 = losses[40..].iter().sum::<f64>() / 10.0;
        assert!(tail < head, "{head} -> {tail}");
    }
}
