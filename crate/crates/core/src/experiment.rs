//! Training, evaluation and ablation sweeps on synthetic clips.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::aggregation::{AggConfig, Pooling};
use crate::attention::{SequenceOrder, Variant};
use crate::checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::losses::sample_pk;
use crate::metrics::{evaluate, EmbeddingGallery, Protocol, RetrievalResult};
use crate::model::{train_step, Adam, AttentionTap, ClipBatch, LossConfig, Model, Placement};
use crate::tensor::Tensor;
use crate::synth::{even_frames, generate, random_frames, split, Split, Subset, SynthDataset};

pub const CSV_HEADER: &str = "epoch,L_tri,L_sof,R-1,mAP";
pub const LOG_FILE: &str = "log.csv";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const CONFIG_FILE: &str = "config.toml";

/// One row of the training log. Retrieval columns are `None` on epochs
/// without evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub triplet: f64,
    pub softmax: f64,
    pub retrieval: Option<(f64, f64)>,
}

impl EpochRow {
    pub fn to_csv(&self) -> String {
        let (r1, map) = match self.retrieval {
            Some((r, m)) => (format!("{r:.6}"), format!("{m:.6}")),
            None => (String::new(), String::new()),
        };
        format!("{},{:.6},{:.6},{},{}", self.epoch, self.triplet, self.softmax, r1, map)
    }
}

/// Per-step RNG: one ChaCha stream per `(epoch, step)` under the run seed.
pub fn step_rng(seed: u64, epoch: usize, step: usize) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(((epoch as u64) << 32) | step as u64);
    r
}

/// A generated dataset, its split, and the run configuration.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub cfg: RunConfig,
    pub data: SynthDataset,
    pub split: Split,
}

impl Experiment {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let data = generate(&cfg.data)?;
        let split = split(&data, cfg.train.train_fraction)?;
        let mut cfg = cfg.clone();
        cfg.model.num_ids = split.train_ids.len();
        if split.train_ids.len() < cfg.train.p {
            return Err(Error::Dataset(format!("{} training identities, P = {}", split.train_ids.len(), cfg.train.p)));
        }
        Ok(Self { cfg, data, split })
    }

    /// Reuse an existing dataset (e.g. for ablations over model settings).
    pub fn with_data(cfg: &RunConfig, data: SynthDataset) -> Result<Self> {
        cfg.validate()?;
        let split = split(&data, cfg.train.train_fraction)?;
        let mut cfg = cfg.clone();
        cfg.model.num_ids = split.train_ids.len();
        Ok(Self { cfg, data, split })
    }

    pub fn build_model(&self) -> Result<Model<f32>> {
        Model::new(&self.cfg.model, self.cfg.seed)
    }

    pub fn optimizer(&self, model: &Model<f32>) -> Adam<f32> {
        Adam::new(model.trainable_params(), self.cfg.optim.clone())
    }

    pub fn steps_per_epoch(&self) -> usize {
        match self.cfg.train.steps_per_epoch {
            0 => self.split.train.indices.len().div_ceil(self.cfg.train.p * self.cfg.train.k).max(1),
            n => n,
        }
    }

    /// The batch, classifier labels and graph seed for one step.
    pub fn step_batch(&self, epoch: usize, step: usize) -> Result<(ClipBatch<f32>, Vec<usize>, u64)> {
        let mut rng = step_rng(self.cfg.seed, epoch, step);
        let tr = &self.split.train;
        let picks = sample_pk(&tr.ids, self.cfg.train.p, self.cfg.train.k, &mut rng)?;
        let clips: Vec<usize> = picks.iter().map(|&i| tr.indices[i]).collect();
        let frames: Vec<Vec<usize>> =
            clips.iter().map(|_| random_frames(self.data.spec.frames_per_clip, self.cfg.model.t, &mut rng)).collect();
        let batch = self.data.gather(&clips, &frames)?;
        let labels = batch.ids.iter().map(|&id| self.split.train_label(id).expect("training identity")).collect();
        Ok((batch, labels, rng.random()))
    }

    /// One epoch of training; returns mean `(L_tri, L_sof)`.
    pub fn train_epoch(&self, model: &Model<f32>, opt: &mut Adam<f32>, epoch: usize) -> Result<(f64, f64)> {
        opt.lr = self.cfg.schedule.lr_at(self.cfg.optim.lr, epoch);
        let loss_cfg = LossConfig { margin: self.cfg.train.margin, squared: self.cfg.train.squared };
        let n = self.steps_per_epoch();
        let (mut tri, mut sof) = (0.0, 0.0);
        for step in 0..n {
            let (batch, labels, seed) = self.step_batch(epoch, step)?;
            let r = train_step(model, opt, &batch, &labels, loss_cfg, seed)?;
            tri += r.triplet;
            sof += r.softmax;
        }
        Ok((tri / n as f64, sof / n as f64))
    }

    /// Embed a subset with evenly spaced frames in evaluation mode.
    pub fn embed_subset(&self, model: &Model<f32>, subset: &Subset) -> Result<Tensor<f32>> {
        let frames = even_frames(self.data.spec.frames_per_clip, self.cfg.model.t);
        let batch = self.data.gather::<f32>(&subset.indices, &vec![frames; subset.indices.len()])?;
        model.embed_eval(&batch.frames, self.cfg.train.eval_chunk)
    }

    pub fn evaluate(&self, model: &Model<f32>) -> Result<RetrievalResult> {
        let q = self.embed_subset(model, &self.split.query)?;
        let g = self.embed_subset(model, &self.split.gallery)?;
        let (sq, sg) = (&self.split.query, &self.split.gallery);
        let gal = EmbeddingGallery::new(&q, sq.ids.clone(), sq.cams.clone(), &g, sg.ids.clone(), sg.cams.clone())?;
        evaluate(&gal, Protocol::CrossCamera)
    }

    /// Train from scratch (or from `out/checkpoint` when `resume`), writing
    /// the log, config and per-epoch checkpoints under `out` when given.
    pub fn run(
        &self,
        out: Option<&Path>,
        resume: bool,
        mut on_epoch: impl FnMut(&EpochRow),
    ) -> Result<(Model<f32>, Vec<EpochRow>)> {
        let model = self.build_model()?;
        let mut opt = self.optimizer(&model);
        let mut start = 0;
        let mut rows = Vec::new();
        if let Some(out) = out {
            fs::create_dir_all(out)?;
            let ckpt = out.join(CHECKPOINT_DIR);
            if resume && ckpt.join(checkpoint::MANIFEST).exists() {
                start = checkpoint::load_model(&ckpt, &model, Some(&mut opt))?;
                rows = read_log(&out.join(LOG_FILE))?.into_iter().take(start).collect();
            }
            fs::write(out.join(CONFIG_FILE), self.cfg.to_toml())?;
        }
        for epoch in start..self.cfg.train.epochs {
            let (triplet, softmax) = self.train_epoch(&model, &mut opt, epoch)?;
            let last = epoch + 1 == self.cfg.train.epochs;
            let retrieval = if last || (epoch + 1) % self.cfg.train.eval_every == 0 {
                let r = self.evaluate(&model)?;
                Some((r.rank(1), r.map))
            } else {
                None
            };
            let row = EpochRow { epoch: epoch + 1, triplet, softmax, retrieval };
            on_epoch(&row);
            rows.push(row);
            if let Some(out) = out {
                checkpoint::save_model(&out.join(CHECKPOINT_DIR), &model, Some(&opt), epoch + 1)?;
                write_log(&out.join(LOG_FILE), &rows)?;
            }
        }
        Ok((model, rows))
    }
}

/// Per-frame channel-mean maps before and after the P2 attention module for
/// dataset clip `clip`, as `(file name, PGM bytes)` pairs: `2·t` files.
pub fn attention_maps(exp: &Experiment, model: &Model<f32>, clip: usize) -> Result<Vec<(String, Vec<u8>)>> {
    if clip >= exp.data.len() {
        return Err(Error::Input(format!("clip index {clip} out of range ({} clips)", exp.data.len())));
    }
    if model.attention.get(Placement::P2.stage()).is_none_or(|a| a.is_none()) {
        return Err(Error::Config("the model has no attention module at P2".into()));
    }
    let t = exp.cfg.model.t;
    let batch = exp.data.gather::<f32>(&[clip], &[even_frames(exp.data.spec.frames_per_clip, t)])?;
    let g = crate::autograd::Graph::eval();
    let mut tap = AttentionTap { pre: Tensor::zeros(&[0]), post: Tensor::zeros(&[0]) };
    model.embed_tapped(&g, &g.constant(batch.frames), Some(&mut tap))?;
    let mut files = Vec::with_capacity(2 * t);
    for j in 0..t {
        for (tag, maps) in [("pre", &tap.pre), ("post", &tap.post)] {
            let [_, c, h, w] = maps.shape() else { unreachable!("feature maps are rank 4") };
            let (c, h, w) = (*c, *h, *w);
            let frame = &maps.data()[j * c * h * w..(j + 1) * c * h * w];
            let mean: Vec<f64> = (0..h * w)
                .map(|p| (0..c).map(|ch| frame[ch * h * w + p] as f64).sum::<f64>() / c as f64)
                .collect();
            files.push((format!("frame{j}_{tag}.pgm"), pgm(w, h, &mean)));
        }
    }
    Ok(files)
}

/// Binary graymap (P5) of `values`, min–max normalized to `[0, 255]`; a
/// constant map is written as zeros.
pub fn pgm(width: usize, height: usize, values: &[f64]) -> Vec<u8> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| if hi > lo { (255.0 * (v - lo) / (hi - lo)).round() as u8 } else { 0 }));
    out
}

pub fn write_log(path: &Path, rows: &[EpochRow]) -> Result<()> {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.to_csv());
        s.push('\n');
    }
    fs::write(path, s)?;
    Ok(())
}

pub fn read_log(path: &Path) -> Result<Vec<EpochRow>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(path)?;
    let bad = |l: &str| Error::Input(format!("malformed log row {l:?}"));
    text.lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 5 {
                return Err(bad(l));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad(l));
            let retrieval = if f[3].is_empty() { None } else { Some((num(f[3])?, num(f[4])?)) };
            Ok(EpochRow { epoch: f[0].parse().map_err(|_| bad(l))?, triplet: num(f[1])?, softmax: num(f[2])?, retrieval })
        })
        .collect()
}

/// Ablation axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sweep {
    Order,
    Variant,
    Pooling,
    D,
    R,
    T,
    Placement,
}

impl FromStr for Sweep {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "order" => Sweep::Order,
            "variant" => Sweep::Variant,
            "pooling" => Sweep::Pooling,
            "d" => Sweep::D,
            "r" => Sweep::R,
            "t" => Sweep::T,
            "placement" => Sweep::Placement,
            _ => return Err(Error::Config(format!("unknown sweep axis {s:?}"))),
        })
    }
}

/// Labeled configurations for one sweep axis, all derived from `base`.
pub fn sweep_settings(base: &RunConfig, sweep: Sweep) -> Vec<(String, RunConfig)> {
    let with = |f: &dyn Fn(&mut RunConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    let cra = |c: &mut RunConfig| {
        if c.model.attention.variant == Variant::None {
            c.model.attention.variant = Variant::Cra;
        }
    };
    match sweep {
        Sweep::Order => [
            SequenceOrder::Forward,
            SequenceOrder::Reverse,
            SequenceOrder::RandomShuffle,
            SequenceOrder::FixedPermutation(1),
            SequenceOrder::FixedPermutation(2),
        ]
        .into_iter()
        .map(|o| {
            (o.label(), with(&|c| {
                cra(c);
                c.model.attention.order = o.clone();
            }))
        })
        .collect(),
        Sweep::Variant => [Variant::None, Variant::Cra, Variant::Sra, Variant::Ca]
            .into_iter()
            .map(|v| (v.label().to_string(), with(&|c| c.model.attention.variant = v)))
            .collect(),
        Sweep::Pooling => [
            (Pooling::Avg, false),
            (Pooling::Max, false),
            (Pooling::Combined, true),
            (Pooling::Combined, false),
        ]
        .into_iter()
        .map(|(pooling, share_weights)| {
            let agg = AggConfig { pooling, share_weights, ..base.model.agg.clone() };
            (agg.label(), with(&|c| c.model.agg = agg.clone()))
        })
        .collect(),
        Sweep::D => [4, 8, 16]
            .into_iter()
            .map(|d| {
                (format!("d = {d}"), with(&|c| {
                    cra(c);
                    c.model.attention.d = d;
                }))
            })
            .collect(),
        Sweep::R => [4, 8, 16].into_iter().map(|r| (format!("r = {r}"), with(&|c| c.model.agg.r = r))).collect(),
        Sweep::T => [1, 2, 4, 8].into_iter().map(|t| (format!("t = {t}"), with(&|c| c.model.t = t))).collect(),
        Sweep::Placement => [
            vec![Placement::P1],
            vec![Placement::P2],
            vec![Placement::P3],
            vec![Placement::P2, Placement::P3],
            Placement::ALL.to_vec(),
        ]
        .into_iter()
        .map(|p| {
            let label = p.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join("+");
            (label, with(&|c| {
                cra(c);
                c.model.attach = p.clone();
            }))
        })
        .collect(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub setting: String,
    pub r1: f64,
    pub map: f64,
}

/// Train and evaluate every setting on the same dataset.
pub fn ablate(
    base: &RunConfig,
    sweep: Sweep,
    mut on_row: impl FnMut(&AblationRow),
) -> Result<Vec<AblationRow>> {
    let data = generate(&base.data)?;
    let mut rows = Vec::new();
    for (label, cfg) in sweep_settings(base, sweep) {
        let exp = Experiment::with_data(&cfg, data.clone())?;
        let (model, _) = exp.run(None, false, |_| {})?;
        let r = exp.evaluate(&model)?;
        let row = AblationRow { setting: label, r1: r.rank(1), map: r.map };
        on_row(&row);
        rows.push(row);
    }
    Ok(rows)
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let w = rows.iter().map(|r| r.setting.len()).max().unwrap_or(0).max(7);
    let mut s = format!("{:<w$}  {:>7}  {:>7}\n", "setting", "R-1", "mAP");
    for r in rows {
        let _ = writeln!(s, "{:<w$}  {:>6.2}%  {:>6.2}%", r.setting, 100.0 * r.r1, 100.0 * r.map);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::SynthSpec;

    pub(crate) fn tiny_run() -> RunConfig {
        let mut c = RunConfig::default();
        c.data = SynthSpec { num_ids: 8, clips_per_id: 4, frames_per_clip: 4, image: [3, 16, 8], ..Default::default() };
        c.model.input = [3, 16, 8];
        c.model.stages = vec![8, 8, 16, 16];
        c.model.attention.d = 4;
        c.model.agg.r = 4;
        c.model.dv = 16;
        c.model.t = 2;
        c.train.epochs = 2;
        c.train.p = 2;
        c.train.k = 2;
        c
    }

    #[test]
    fn log_rows_match_epochs_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let exp = Experiment::new(&tiny_run()).unwrap();
        let (_, rows) = exp.run(Some(dir.path()), false, |_| {}).unwrap();
        assert_eq!(rows.len(), 2);
        let text = fs::read_to_string(dir.path().join(LOG_FILE)).unwrap();
        assert_eq!(text.lines().next().unwrap(), CSV_HEADER);
        assert_eq!(text.lines().count(), 3);
        let back = read_log(&dir.path().join(LOG_FILE)).unwrap();
        assert_eq!(back.iter().map(|r| r.to_csv()).collect::<Vec<_>>(), rows.iter().map(|r| r.to_csv()).collect::<Vec<_>>());
        assert!(RunConfig::load(&dir.path().join(CONFIG_FILE)).is_ok());
    }

    #[test]
    fn resume_continues_identically() {
        let mut cfg = tiny_run();
        cfg.train.epochs = 3;
        let full = Experiment::new(&cfg).unwrap().run(None, false, |_| {}).unwrap().1;
        let dir = tempfile::tempdir().unwrap();
        let mut short = cfg.clone();
        short.train.epochs = 2;
        Experiment::new(&short).unwrap().run(Some(dir.path()), false, |_| {}).unwrap();
        let resumed = Experiment::new(&cfg).unwrap().run(Some(dir.path()), true, |_| {}).unwrap().1;
        assert_eq!(resumed.len(), 3);
        assert_eq!(resumed[2].triplet, full[2].triplet);
        assert_eq!(resumed[2].softmax, full[2].softmax);
    }

    #[test]
    fn attention_dump_files() {
        let exp = Experiment::new(&tiny_run()).unwrap();
        let model = exp.build_model().unwrap();
        let files = attention_maps(&exp, &model, 3).unwrap();
        assert_eq!(files.len(), 2 * exp.cfg.model.t);
        let header = b"P5\n2 4\n255\n";
        assert!(files.iter().all(|(_, b)| b.starts_with(header) && b.len() == header.len() + 8));
        assert_eq!(files, attention_maps(&exp, &model, 3).unwrap());
        assert!(matches!(attention_maps(&exp, &model, 10_000), Err(Error::Input(_))));
        assert_eq!(pgm(2, 1, &[1.0, 3.0])[11..], [0, 255]);
    }

    #[test]
    fn sweeps_cover_expected_rows() {
        let base = RunConfig::default();
        let labels = |s| sweep_settings(&base, s).into_iter().map(|(l, _)| l).collect::<Vec<_>>();
        assert_eq!(labels(Sweep::Order).len(), 5);
        assert_eq!(labels(Sweep::Variant), vec!["none", "CRA", "SRA", "CA"]);
        assert_eq!(labels(Sweep::Pooling).len(), 4);
        for s in [Sweep::Order, Sweep::Variant, Sweep::Pooling, Sweep::D, Sweep::R, Sweep::T, Sweep::Placement] {
            for (_, c) in sweep_settings(&base, s) {
                c.validate().unwrap();
                Model::<f32>::new(&c.model, 0).unwrap();
            }
        }
        assert!("bogus".parse::<Sweep>().is_err());
    }
}
