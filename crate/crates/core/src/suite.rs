//! The gradient-check suite shared by the CLI and the acceptance tests.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::aggregation::{AggConfig, Pooling, SetAggCell};
use crate::attention::{AttentionConfig, AttentionModule, Variant};
use crate::error::{Error, Result};
use crate::gradcheck::{check, GradCheckConfig, GradCheckReport};
use crate::losses;
use crate::model::{Model, ModelConfig};
use crate::nn::{pool2d, BatchNorm, Conv2d, Init, Linear, PoolKind};
use crate::param::Module;
use crate::recurrent::{CellKind, Recurrent};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    Op,
    Module,
    Model,
}

impl std::str::FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "op" => Ok(Scope::Op),
            "module" => Ok(Scope::Module),
            "model" => Ok(Scope::Model),
            _ => Err(Error::Config(format!("unknown gradcheck scope {s:?}"))),
        }
    }
}

fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Values bounded away from zero, for ops with a kink there.
fn away_from_zero(shape: &[usize], seed: u64) -> Tensor<f64> {
    randn(shape, seed).map(|v| if v >= 0.0 { v + 0.1 } else { v - 0.1 })
}

pub fn op_checks() -> Result<Vec<GradCheckReport>> {
    let cfg = GradCheckConfig::default();
    let a = || randn(&[3, 4], 1);
    let b = || randn(&[3, 4], 2);
    let row = || randn(&[1, 4], 3);
    let x4 = || randn(&[2, 3, 5, 4], 4);
    let mut out = vec![
        check("add (broadcast)", &[a(), row()], &[], &cfg, |_, v| v[0].add(&v[1]))?,
        check("sub", &[a(), b()], &[], &cfg, |_, v| v[0].sub(&v[1]))?,
        check("mul (broadcast)", &[a(), row()], &[], &cfg, |_, v| v[0].mul(&v[1]))?,
        check("scale + add_scalar", &[a()], &[], &cfg, |_, v| Ok(v[0].scale(-1.7).add_scalar(0.4)))?,
        check("square", &[a()], &[], &cfg, |_, v| Ok(v[0].square()))?,
        check("sigmoid", &[a()], &[], &cfg, |_, v| Ok(v[0].sigmoid()))?,
        check("tanh", &[a()], &[], &cfg, |_, v| Ok(v[0].tanh()))?,
        check("relu", &[away_from_zero(&[3, 4], 5)], &[], &cfg, |_, v| Ok(v[0].relu()))?,
        check("sqrt", &[a().map(|v| v * v + 0.5)], &[], &cfg, |_, v| Ok(v[0].sqrt()))?,
        check("matmul", &[a(), randn(&[4, 2], 6)], &[], &cfg, |_, v| v[0].matmul(&v[1]))?,
        check("matmul_t", &[a(), randn(&[5, 4], 7)], &[], &cfg, |_, v| v[0].matmul_t(&v[1]))?,
        check("reshape + permute", &[randn(&[2, 3, 4], 8)], &[], &cfg, |_, v| {
            v[0].reshape(&[3, 2, 4])?.permute(&[2, 0, 1])
        })?,
        check("index_select", &[a()], &[], &cfg, |_, v| v[0].index_select(1, &[3, 0, 0, 2]))?,
        check("narrow", &[randn(&[2, 5, 3], 9)], &[], &cfg, |_, v| v[0].narrow(1, 1, 3))?,
        check("concat", &[a(), b()], &[], &cfg, |g, v| g.concat(&[v[0], v[1]], 1))?,
        check("sum", &[a()], &[], &cfg, |_, v| Ok(v[0].sum()))?,
        check("mean", &[a()], &[], &cfg, |_, v| Ok(v[0].mean()))?,
        check("sum_axis", &[randn(&[2, 3, 4], 10)], &[], &cfg, |_, v| v[0].sum_axis(1))?,
        check("mean_axis", &[randn(&[2, 3, 4], 11)], &[], &cfg, |_, v| v[0].mean_axis(2))?,
        check("max_axis", &[randn(&[2, 3, 4], 12)], &[], &cfg, |_, v| v[0].max_axis(1))?,
    ];
    for (stride, pad) in [(1, 0), (1, 1), (2, 1)] {
        let name = format!("conv2d (stride {stride}, pad {pad})");
        out.push(check(&name, &[x4(), randn(&[3, 3, 3, 3], 13), randn(&[3], 14)], &[], &cfg, |_, v| {
            v[0].conv2d(&v[1], Some(&v[2]), stride, pad)
        })?);
    }
    out.push(check("avg_pool2d", &[randn(&[1, 2, 4, 6], 15)], &[], &cfg, |_, v| v[0].avg_pool2d(2))?);
    out.push(check("max_pool2d", &[randn(&[1, 2, 4, 6], 16)], &[], &cfg, |_, v| v[0].max_pool2d(2))?);
    out.push(check("global_avg_pool", &[x4()], &[], &cfg, |_, v| v[0].global_avg_pool())?);
    for training in [true, false] {
        let bn = BatchNorm::<f64>::new("bn", 3);
        bn.running_var.set_value(Tensor::full(&[3], 1.5))?;
        let c = GradCheckConfig { training, ..cfg.clone() };
        let name = if training { "batch_norm (train)" } else { "batch_norm (eval)" };
        out.push(check(name, &[x4()], &bn.params(), &c, |g, v| bn.forward(g, &v[0]))?);
    }
    out.push(check("cross_entropy", &[randn(&[4, 5], 17)], &[], &cfg, |_, v| v[0].cross_entropy(&[0, 4, 2, 2]))?);
    for squared in [false, true] {
        let name = if squared { "row_distance (squared)" } else { "row_distance" };
        out.push(check(name, &[a(), b()], &[], &cfg, |_, v| v[0].row_distance(&v[1], squared))?);
    }
    Ok(out)
}

pub fn module_checks() -> Result<Vec<GradCheckReport>> {
    let cfg = GradCheckConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let mut out = Vec::new();

    let lin = Linear::<f64>::new("linear", 4, 3, true, Init::KaimingUniform, &mut rng);
    out.push(check("Linear", &[randn(&[5, 4], 21)], &lin.params(), &cfg, |g, v| lin.forward(g, &v[0]))?);
    let conv = Conv2d::<f64>::new("conv", 3, 2, 3, 2, 1, true, Init::KaimingUniform, &mut rng);
    out.push(check("Conv2d", &[randn(&[2, 3, 5, 4], 22)], &conv.params(), &cfg, |g, v| conv.forward(g, &v[0]))?);
    let bn = BatchNorm::<f64>::new("bn", 3);
    out.push(check("BatchNorm", &[randn(&[4, 3, 2, 2], 23)], &bn.params(), &cfg, |g, v| bn.forward(g, &v[0]))?);
    for kind in [PoolKind::Avg(2), PoolKind::Max(2), PoolKind::GlobalAvg] {
        out.push(check(&format!("pool {kind:?}"), &[randn(&[1, 2, 4, 4], 24)], &[], &cfg, |_, v| pool2d(kind, &v[0]))?);
    }
    for (cell, name) in [(CellKind::Lstm, "LSTM"), (CellKind::BiLstm, "Bi-LSTM")] {
        let r = Recurrent::<f64>::new(name, cell, 3, 4, &mut rng)?;
        out.push(check(name, &[randn(&[2, 5, 3], 25)], &r.params(), &cfg, |g, v| r.forward(g, &v[0]))?);
    }
    for variant in [Variant::Cra, Variant::Sra, Variant::Ca] {
        let acfg = AttentionConfig { variant, d: 2, ..Default::default() };
        let m = AttentionModule::<f64>::new(variant.label(), &acfg, [4, 3, 2], &mut rng)?;
        out.push(check(
            &format!("attention {}", variant.label()),
            &[randn(&[2, 4, 3, 2], 26)],
            &m.params(),
            &cfg,
            |g, v| m.forward(g, &v[0]),
        )?);
    }
    for (pooling, share) in [(Pooling::Avg, false), (Pooling::Max, false), (Pooling::Combined, false), (Pooling::Combined, true)] {
        let agg = AggConfig { pooling, r: 2, share_weights: share };
        let cell = SetAggCell::<f64>::new("agg", 4, &agg, &mut rng)?;
        out.push(check(
            &format!("SetAggCell {}", agg.label()),
            &[randn(&[3, 4, 4], 27)],
            &cell.params(),
            &cfg,
            |g, v| cell.forward(g, &v[0]),
        )?);
    }
    let labels = [0, 0, 0, 1, 1, 1, 2, 2, 2];
    out.push(check("triplet (batch hard)", &[randn(&[9, 4], 28)], &[], &cfg, |_, v| {
        Ok(losses::triplet_batch_hard(&v[0], &labels, losses::DEFAULT_MARGIN, false)?.0)
    })?);
    out.push(check("cross-entropy loss", &[randn(&[4, 5], 29)], &[], &cfg, |_, v| {
        losses::cross_entropy(&v[0], &[1, 0, 4, 4])
    })?);
    Ok(out)
}

fn toy_model_config() -> ModelConfig {
    ModelConfig {
        input: [2, 8, 8],
        stages: vec![4, 4, 4, 4],
        attention: AttentionConfig { d: 2, ..Default::default() },
        agg: AggConfig { r: 2, ..Default::default() },
        dv: 6,
        num_ids: 3,
        t: 2,
        ..Default::default()
    }
}

pub fn model_checks() -> Result<Vec<GradCheckReport>> {
    let cfg = GradCheckConfig::default();
    let model = Model::<f64>::new(&toy_model_config(), 30)?;
    let params = model.params();
    // non-trivial running statistics keep exact zeros (ReLU outputs) off the
    // ReLU kink after an eval-mode batch norm
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    for p in params.iter().filter(|p| !p.is_trainable()) {
        let shape = p.shape();
        let v = if p.name().ends_with("running_var") {
            Tensor::uniform(&shape, 0.5, 1.5, &mut rng)
        } else {
            Tensor::uniform(&shape, -0.2, 0.2, &mut rng)
        };
        p.set_value(v)?;
    }
    let eval = GradCheckConfig { training: false, ..cfg.clone() };
    let clip = randn(&[1, 2, 2, 8, 8], 31);
    let mut out = vec![check("model classify∘embed (eval)", &[clip], &params, &eval, |g, v| {
        model.classify(g, &model.embed(g, &v[0])?)
    })?];
    let labels = [0, 0, 1, 1, 2, 2];
    let clips = randn(&[6, 2, 2, 8, 8], 32);
    out.push(check("model total loss (train)", &[clips], &params, &cfg, |g, v| {
        let f = model.embed(g, &v[0])?;
        let tri = losses::triplet_batch_hard(&f, &labels, losses::DEFAULT_MARGIN, false)?.0;
        let ce = losses::cross_entropy(&model.classify(g, &f)?, &labels)?;
        losses::total_loss(&tri, &ce)
    })?);
    Ok(out)
}

pub fn gradient_suite(scope: Scope) -> Result<Vec<GradCheckReport>> {
    match scope {
        Scope::Op => op_checks(),
        Scope::Module => module_checks(),
        Scope::Model => model_checks(),
    }
}

/// A deliberately wrong gradient (`x·detach(x)` differentiates to `x`, not
/// `2x`); a working harness must report it as failing.
pub fn negative_control() -> Result<GradCheckReport> {
    check("negative control (corrupted rule)", &[randn(&[3, 3], 40)], &[], &GradCheckConfig::default(), |_, v| {
        v[0].mul(&v[0].detach())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn op_scope_passes() {
        for r in op_checks().unwrap() {
            assert!(r.passed(), "{r:?}");
        }
    }

    #[test]
    fn module_scope_passes() {
        for r in module_checks().unwrap() {
            assert!(r.passed(), "{r:?}");
        }
    }

    #[test]
    fn model_scope_passes() {
        for r in model_checks().unwrap() {
            assert!(r.passed(), "{r:?}");
        }
    }

    #[test]
    fn negative_control_fails() {
        assert!(!negative_control().unwrap().passed());
    }

    #[test]
    fn scope_parsing() {
        assert_eq!("model".parse::<Scope>().unwrap(), Scope::Model);
        assert!("all".parse::<Scope>().is_err());
    }
}
