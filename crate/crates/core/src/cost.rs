//! Analytic parameter and FLOP counts.
//!
//! FLOPs are `2·MACs` for convolutions, linear layers and LSTM gate
//! products, plus one per bias add; batch norm costs two per element and the
//! attention mask product one per element. Activations are free.

use std::fmt;

use crate::aggregation::Pooling;
use crate::attention::{AttentionConfig, Variant};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Placement};
use crate::recurrent::{lstm_param_count, CellKind};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostReport {
    pub name: String,
    pub params: u64,
    pub flops: u64,
}

impl CostReport {
    pub fn new(name: impl Into<String>, params: u64, flops: u64) -> Self {
        Self { name: name.into(), params, flops }
    }

    pub fn sum(name: impl Into<String>, parts: &[CostReport]) -> Self {
        Self::new(name, parts.iter().map(|p| p.params).sum(), parts.iter().map(|p| p.flops).sum())
    }
}

impl fmt::Display for CostReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:<28} params {:>12}  FLOPs {:>14}", self.name, self.params, self.flops)
    }
}

fn out_extent(n: usize, k: usize, stride: usize, pad: usize) -> usize {
    (n + 2 * pad - k) / stride + 1
}

/// Convolution on an `in_h × in_w` input; returns the cost and output extent.
#[allow(clippy::too_many_arguments)]
pub fn conv2d(
    name: &str,
    in_c: usize,
    out_c: usize,
    k: usize,
    stride: usize,
    pad: usize,
    in_hw: (usize, usize),
    bias: bool,
) -> (CostReport, (usize, usize)) {
    let oh = out_extent(in_hw.0, k, stride, pad);
    let ow = out_extent(in_hw.1, k, stride, pad);
    let outputs = (out_c * oh * ow) as u64;
    let macs = outputs * (in_c * k * k) as u64;
    let params = (out_c * in_c * k * k + if bias { out_c } else { 0 }) as u64;
    let flops = 2 * macs + if bias { outputs } else { 0 };
    (CostReport::new(name, params, flops), (oh, ow))
}

pub fn linear(name: &str, in_f: usize, out_f: usize, bias: bool) -> CostReport {
    let params = (in_f * out_f + if bias { out_f } else { 0 }) as u64;
    let flops = 2 * (in_f * out_f) as u64 + if bias { out_f as u64 } else { 0 };
    CostReport::new(name, params, flops)
}

/// Trainable affine parameters only; running statistics are buffers.
pub fn batch_norm(name: &str, channels: usize, elements: usize) -> CostReport {
    CostReport::new(name, 2 * channels as u64, 2 * elements as u64)
}

/// LSTM over `len` steps; the bidirectional cell adds its two directions.
pub fn lstm(name: &str, input: usize, hidden: usize, len: usize, kind: CellKind) -> CostReport {
    let bidir = kind == CellKind::BiLstm;
    let per_step = 2 * (4 * hidden * (input + hidden)) as u64 + 4 * hidden as u64;
    let dirs = if bidir { 2 } else { 1 };
    let merge = if bidir { (len * hidden) as u64 } else { 0 };
    CostReport::new(name, lstm_param_count(input, hidden, bidir) as u64, dirs * per_step * len as u64 + merge)
}

/// One attention module on a single `[c, h, w]` feature map.
pub fn attention_module(name: &str, cfg: &AttentionConfig, shape: [usize; 3]) -> Result<CostReport> {
    let [c, h, w] = shape;
    if cfg.variant == Variant::None {
        return Ok(CostReport::new(name, 0, 0));
    }
    if cfg.d == 0 || c % cfg.d != 0 {
        return Err(Error::Config(format!("reduction d = {} must divide the channel count {c}", cfg.d)));
    }
    let r = c / cfg.d;
    let hw = h * w;
    let (phi, _) = conv2d("phi", c, r, 1, 1, 0, (h, w), false);
    let bn = batch_norm("phi_bn", r, r * hw);
    let core = match cfg.variant {
        Variant::Cra => lstm("core", hw, hw, r, cfg.cell),
        Variant::Sra => lstm("core", r, r, hw, cfg.cell),
        Variant::Ca => conv2d("core", r, r, 3, 1, 1, (h, w), true).0,
        Variant::None => unreachable!(),
    };
    let (varphi, _) = conv2d("varphi", r, c, 1, 1, 0, (h, w), true);
    let mask = CostReport::new("mask", 0, (c * hw) as u64);
    Ok(CostReport::sum(name, &[phi, bn, core, varphi, mask]))
}

fn gate(c: usize, r: usize) -> CostReport {
    CostReport::sum("gate", &[linear("fc1", c, c / r, false), batch_norm("bn", c / r, c / r), linear("fc2", c / r, c, true)])
}

/// Per-component costs of the full model for one clip of `cfg.t` frames,
/// with the total last.
pub fn model_cost(cfg: &ModelConfig) -> Result<Vec<CostReport>> {
    cfg.validate()?;
    let t = cfg.t as u64;
    let mut parts = Vec::new();
    let (mut h, mut w) = (cfg.input[1], cfg.input[2]);
    let mut in_c = cfg.input[0];
    for (i, &c) in cfg.stages.iter().enumerate() {
        let (conv, (oh, ow)) = conv2d("", in_c, c, 3, 2, 1, (h, w), false);
        let bn = batch_norm("", c, c * oh * ow);
        let stage = CostReport::sum(format!("stage{}", i + 1), &[conv, bn]);
        parts.push(CostReport::new(stage.name, stage.params, stage.flops * t));
        (h, w, in_c) = (oh, ow, c);
        if let Some(p) = Placement::ALL.into_iter().find(|p| p.stage() == i && cfg.attach.contains(p)) {
            if cfg.attention.variant != Variant::None {
                let a = attention_module(&format!("attention {p:?}"), &cfg.attention, [c, h, w])?;
                parts.push(CostReport::new(a.name, a.params, a.flops * t));
            }
        }
    }
    let c = in_c;
    parts.push(CostReport::new("gap", 0, (c * h * w) as u64 * t));
    if cfg.set_aggregation {
        let r = cfg.agg.r;
        if r == 0 || c % r != 0 {
            return Err(Error::Config(format!("gate ratio r = {r} must divide the channel count {c}")));
        }
        let pool = (c as u64) * t;
        let gated = 2 * (c as u64) * t;
        let agg = match (cfg.agg.pooling, cfg.agg.share_weights) {
            (Pooling::Combined, true) => {
                let g = gate(c, r);
                CostReport::new("set aggregation", g.params, 2 * g.flops + 2 * pool + c as u64 + gated)
            }
            (Pooling::Combined, false) => {
                let g = gate(c, r);
                CostReport::new("set aggregation", 2 * g.params, 2 * g.flops + 2 * pool + c as u64 + gated)
            }
            _ => {
                let g = gate(c, r);
                CostReport::new("set aggregation", g.params, g.flops + pool + gated)
            }
        };
        parts.push(agg);
    } else {
        parts.push(CostReport::new("frame average", 0, (c as u64) * t));
    }
    parts.push(linear("fc1", c, cfg.dv, false));
    parts.push(batch_norm("bn1", cfg.dv, cfg.dv));
    parts.push(linear("fc2", cfg.dv, cfg.num_ids, false));
    let total = CostReport::sum("total", &parts);
    parts.push(total);
    Ok(parts)
}

/// `(LSTM module, Bi-LSTM module, params ratio, FLOPs ratio)` for the CRA
/// module at a placement of `cfg`.
pub fn cell_ratio(cfg: &ModelConfig, placement: Placement) -> Result<(CostReport, CostReport, f64, f64)> {
    let shape = cfg.stage_shape(placement.stage());
    let mk = |cell| AttentionConfig { variant: Variant::Cra, cell, ..cfg.attention.clone() };
    let a = attention_module(&format!("CRA {placement:?} LSTM"), &mk(CellKind::Lstm), shape)?;
    let b = attention_module(&format!("CRA {placement:?} Bi-LSTM"), &mk(CellKind::BiLstm), shape)?;
    let pr = b.params as f64 / a.params as f64;
    let fr = b.flops as f64 / a.flops as f64;
    Ok((a, b, pr, fr))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregation::AggConfig;
    use crate::attention::AttentionModule;
    use crate::model::Model;
    use crate::param::{count_trainable, Module};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn hand_counts() {
        assert_eq!(linear("l", 10, 5, true).params, 55);
        let (c, hw) = conv2d("c", 2, 3, 3, 1, 1, (8, 8), true);
        assert_eq!(hw, (8, 8));
        assert_eq!(c.flops, 2 * (3 * 2 * 3 * 3 * 64) + 3 * 64);
        assert_eq!(c.params, 3 * 2 * 9 + 3);
        assert_eq!(lstm("x", 3, 2, 1, CellKind::Lstm).params, 4 * (6 + 4 + 2));
    }

    #[test]
    fn module_params_match_instantiated_modules() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for variant in [Variant::Cra, Variant::Sra, Variant::Ca] {
            for cell in [CellKind::Lstm, CellKind::BiLstm] {
                let cfg = AttentionConfig { variant, d: 4, cell, ..Default::default() };
                let m = AttentionModule::<f32>::new("a", &cfg, [8, 4, 3], &mut rng).unwrap();
                let est = attention_module("a", &cfg, [8, 4, 3]).unwrap();
                assert_eq!(est.params as usize, count_trainable(m.params()), "{variant:?} {cell:?}");
            }
        }
    }

    #[test]
    fn model_params_match_instantiated_models() {
        for (variant, pooling, share) in [
            (Variant::Cra, Pooling::Combined, false),
            (Variant::Sra, Pooling::Combined, true),
            (Variant::Ca, Pooling::Avg, false),
            (Variant::None, Pooling::Max, false),
        ] {
            let cfg = ModelConfig {
                attention: AttentionConfig { variant, ..Default::default() },
                agg: AggConfig { pooling, share_weights: share, ..Default::default() },
                ..Default::default()
            };
            let m = Model::<f32>::new(&cfg, 0).unwrap();
            let total = model_cost(&cfg).unwrap().pop().unwrap();
            assert_eq!(total.params as usize, count_trainable(m.params()), "{variant:?}");
        }
        let plain = ModelConfig { set_aggregation: false, ..Default::default() };
        let m = Model::<f32>::new(&plain, 0).unwrap();
        assert_eq!(model_cost(&plain).unwrap().pop().unwrap().params as usize, count_trainable(m.params()));
    }

    #[test]
    fn bidirectional_costs_about_twice() {
        let cfg = ModelConfig::default();
        let (a, _, pr, fr) = cell_ratio(&cfg, Placement::P1).unwrap();
        assert!((2_000_000..2_200_000).contains(&a.params), "{a}");
        assert!((1.89..=2.09).contains(&pr), "params ratio {pr}");
        assert!((1.89..=2.09).contains(&fr), "FLOPs ratio {fr}");
        // the recurrent core shrinks with depth, so the 1×1 convolutions
        // dilute the ratio at later placements
        let (_, _, _, fr3) = cell_ratio(&cfg, Placement::P3).unwrap();
        assert!(fr3 < fr);
    }

    #[test]
    fn baseline_outweighs_deepest_module() {
        let cfg = ModelConfig::default();
        let base = ModelConfig { attention: AttentionConfig { variant: Variant::None, ..Default::default() }, ..cfg.clone() };
        let base_params = model_cost(&base).unwrap().pop().unwrap().params;
        let p3 = attention_module("p3", &cfg.attention, cfg.stage_shape(Placement::P3.stage())).unwrap();
        assert!(base_params > p3.params);
    }

    #[test]
    fn reports_are_reproducible() {
        let cfg = ModelConfig::default();
        assert_eq!(model_cost(&cfg).unwrap(), model_cost(&cfg).unwrap());
    }
}
