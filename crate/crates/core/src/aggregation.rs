//! Set aggregation cell: gated, permutation-invariant fusion of `t` frame
//! vectors into one clip vector.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{dim_err, Error, Result};
use crate::nn::{BatchNorm, Init, Linear};
use crate::param::{Module, Param};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Pooling {
    Avg,
    Max,
    Combined,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Avg,
    Max,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AggConfig {
    pub pooling: Pooling,
    pub r: usize,
    pub share_weights: bool,
}

impl Default for AggConfig {
    fn default() -> Self {
        Self { pooling: Pooling::Combined, r: 16, share_weights: false }
    }
}

impl AggConfig {
    pub fn label(&self) -> String {
        match (self.pooling, self.share_weights) {
            (Pooling::Avg, _) => "avg".into(),
            (Pooling::Max, _) => "max".into(),
            (Pooling::Combined, true) => "avg+max shared".into(),
            (Pooling::Combined, false) => "avg+max non-shared".into(),
        }
    }
}

/// Elementwise mean or maximum over a set of equal-length vectors, summed in
/// ascending frame order.
pub fn pool_set<T: Scalar>(kind: PoolKind, frames: &[Vec<T>]) -> Result<Vec<T>> {
    let first = frames.first().ok_or_else(|| Error::EmptySet("cannot pool an empty frame set".into()))?;
    let c = first.len();
    if frames.iter().any(|f| f.len() != c) {
        return Err(dim_err("frame vectors differ in length"));
    }
    Ok(match kind {
        PoolKind::Avg => {
            let mut acc = vec![0.0f64; c];
            for f in frames {
                for (a, v) in acc.iter_mut().zip(f) {
                    *a += v.as_f64();
                }
            }
            acc.iter().map(|&a| T::from_f64(a / frames.len() as f64)).collect()
        }
        PoolKind::Max => {
            let mut acc = first.clone();
            for f in &frames[1..] {
                for (a, &v) in acc.iter_mut().zip(f) {
                    if v > *a {
                        *a = v;
                    }
                }
            }
            acc
        }
    })
}

/// Bottleneck `Linear(c→c/r) → BN → ReLU → Linear(c/r→c)`.
#[derive(Debug, Clone)]
pub struct Gate<T: Scalar> {
    pub fc1: Linear<T>,
    pub bn: BatchNorm<T>,
    pub fc2: Linear<T>,
}

impl<T: Scalar> Gate<T> {
    pub fn new<R: Rng + ?Sized>(name: &str, c: usize, r: usize, rng: &mut R) -> Self {
        Self {
            fc1: Linear::new(&format!("{name}.fc1"), c, c / r, false, Init::KaimingUniform, rng),
            bn: BatchNorm::new(&format!("{name}.bn"), c / r),
            fc2: Linear::new(&format!("{name}.fc2"), c / r, c, true, Init::XavierUniform, rng),
        }
    }

    pub fn forward<'g>(&self, g: &'g Graph<T>, v: &Var<'g, T>) -> Result<Var<'g, T>> {
        let h = self.bn.forward(g, &self.fc1.forward(g, v)?)?.relu();
        self.fc2.forward(g, &h)
    }
}

impl<T: Scalar> Module<T> for Gate<T> {
    fn params(&self) -> Vec<Param<T>> {
        let mut v = self.fc1.params();
        v.extend(self.bn.params());
        v.extend(self.fc2.params());
        v
    }
}

#[derive(Debug, Clone)]
pub struct SetAggCell<T: Scalar> {
    pub pooling: Pooling,
    pub channels: usize,
    pub r: usize,
    pub varpi: Gate<T>,
    /// Gate on the max-pooled vector; a clone of `varpi`'s handles when
    /// weights are shared.
    pub psi: Option<Gate<T>>,
}

impl<T: Scalar> SetAggCell<T> {
    pub fn new<R: Rng + ?Sized>(name: &str, channels: usize, cfg: &AggConfig, rng: &mut R) -> Result<Self> {
        if cfg.r == 0 || channels % cfg.r != 0 {
            return Err(Error::Config(format!("gate ratio r = {} must divide the channel count {channels}", cfg.r)));
        }
        let varpi = Gate::new(&format!("{name}.varpi"), channels, cfg.r, rng);
        let psi = match (cfg.pooling, cfg.share_weights) {
            (Pooling::Combined, true) => Some(varpi.clone()),
            (Pooling::Combined, false) => Some(Gate::new(&format!("{name}.psi"), channels, cfg.r, rng)),
            _ => None,
        };
        Ok(Self { pooling: cfg.pooling, channels, r: cfg.r, varpi, psi })
    }

    fn check_input(&self, f: &Var<'_, T>) -> Result<()> {
        let s = f.shape();
        if s.len() != 3 || s[2] != self.channels {
            return Err(dim_err(format!("set aggregation expects [B, t, {}], got {s:?}", self.channels)));
        }
        Ok(())
    }

    /// The gating mask `m_s = σ(f̂)`, shape `[B, c]`.
    pub fn mask<'g>(&self, g: &'g Graph<T>, f: &Var<'g, T>) -> Result<Var<'g, T>> {
        self.check_input(f)?;
        let pre = match self.pooling {
            Pooling::Avg => self.varpi.forward(g, &f.mean_axis(1)?)?,
            Pooling::Max => self.varpi.forward(g, &f.max_axis(1)?)?,
            Pooling::Combined => {
                let psi = self.psi.as_ref().expect("combined pooling has a second gate");
                let a = self.varpi.forward(g, &f.mean_axis(1)?)?;
                a.add(&psi.forward(g, &f.max_axis(1)?)?)?
            }
        };
        Ok(pre.sigmoid())
    }

    /// `g = (1/t) Σ_j m_s ⊙ f^j` for `f[B, t, c]`, giving `[B, c]`.
    pub fn forward<'g>(&self, g: &'g Graph<T>, f: &Var<'g, T>) -> Result<Var<'g, T>> {
        let m = self.mask(g, f)?;
        let b = f.shape()[0];
        f.mul(&m.reshape(&[b, 1, self.channels])?)?.mean_axis(1)
    }
}

impl<T: Scalar> Module<T> for SetAggCell<T> {
    fn params(&self) -> Vec<Param<T>> {
        let mut v = self.varpi.params();
        if let Some(psi) = &self.psi {
            v.extend(psi.params());
        }
        v
    }
}

/// Largest deviation between the cell's output and the explicit
/// decomposition `β(Σ γ(f))` with `γ(f) = m_s ⊙ f` and `β(s) = s / t`,
/// evaluated element by element. `f` is `[B, t, c]`.
pub fn decompose_deviation<T: Scalar>(cell: &SetAggCell<T>, f: &Tensor<T>) -> Result<f64> {
    let g = Graph::eval();
    let fv = g.constant(f.clone());
    let direct = cell.forward(&g, &fv)?.value();
    let mask = cell.mask(&g, &fv)?.value();
    let s = f.shape();
    let (b, t, c) = (s[0], s[1], s[2]);
    let mut worst = 0.0f64;
    for bi in 0..b {
        let mut sum = vec![0.0f64; c];
        for j in 0..t {
            for k in 0..c {
                let gamma = mask.data()[bi * c + k].as_f64() * f.data()[(bi * t + j) * c + k].as_f64();
                sum[k] += gamma;
            }
        }
        for k in 0..c {
            let beta = sum[k] / t as f64;
            worst = worst.max((beta - direct.data()[bi * c + k].as_f64()).abs());
        }
    }
    Ok(worst)
}

pub fn decompose_check<T: Scalar>(cell: &SetAggCell<T>, f: &Tensor<T>) -> Result<bool> {
    Ok(decompose_deviation(cell, f)? < 1e-6)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check, GradCheckConfig};
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn configs() -> Vec<AggConfig> {
        vec![
            AggConfig { pooling: Pooling::Avg, r: 4, share_weights: false },
            AggConfig { pooling: Pooling::Max, r: 4, share_weights: false },
            AggConfig { pooling: Pooling::Combined, r: 4, share_weights: true },
            AggConfig { pooling: Pooling::Combined, r: 4, share_weights: false },
        ]
    }

    fn permute_frames(f: &Tensor<f32>, perm: &[usize]) -> Tensor<f32> {
        let s = f.shape();
        let (b, t, c) = (s[0], s[1], s[2]);
        let mut out = f.clone();
        for bi in 0..b {
            for (j, &pj) in perm.iter().enumerate() {
                for k in 0..c {
                    out.set(&[bi, j, k], f.get(&[bi, pj, k]));
                }
            }
        }
        assert_eq!(t, perm.len());
        out
    }

    #[test]
    fn pool_set_basics() {
        let f = vec![vec![1.0f64, 3.0], vec![3.0, 1.0]];
        assert_eq!(pool_set(PoolKind::Avg, &f).unwrap(), vec![2.0, 2.0]);
        assert_eq!(pool_set(PoolKind::Max, &f).unwrap(), vec![3.0, 3.0]);
        let one = vec![vec![0.25f64, -1.0]];
        assert_eq!(pool_set(PoolKind::Avg, &one).unwrap(), one[0]);
        assert_eq!(pool_set(PoolKind::Max, &one).unwrap(), one[0]);
        let empty: Vec<Vec<f64>> = vec![];
        assert!(matches!(pool_set(PoolKind::Avg, &empty), Err(Error::EmptySet(_))));
    }

    #[test]
    fn zero_gates_half_mean() {
        for cfg in configs() {
            let cell = SetAggCell::<f64>::new("agg", 8, &cfg, &mut rng(0)).unwrap();
            for p in cell.params() {
                if p.is_trainable() {
                    p.set_value(Tensor::zeros(&p.shape())).unwrap();
                }
            }
            let f = Tensor::randn(&[2, 3, 8], 1.0, &mut rng(1));
            let g = Graph::train(0);
            let y = cell.forward(&g, &g.constant(f.clone())).unwrap().value();
            for b in 0..2 {
                for k in 0..8 {
                    let mean = (0..3).map(|j| f.get(&[b, j, k])).sum::<f64>() / 3.0;
                    assert!((y.get(&[b, k]) - 0.5 * mean).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn shared_gates_are_the_same_function() {
        let cfg = AggConfig { pooling: Pooling::Combined, r: 4, share_weights: true };
        let cell = SetAggCell::<f64>::new("agg", 8, &cfg, &mut rng(2)).unwrap();
        let psi = cell.psi.as_ref().unwrap();
        assert!(psi.fc1.weight.same_storage(&cell.varpi.fc1.weight));
        let g = Graph::eval();
        let v = g.constant(Tensor::randn(&[3, 8], 1.0, &mut rng(3)));
        assert_eq!(cell.varpi.forward(&g, &v).unwrap().value(), psi.forward(&g, &v).unwrap().value());
        let count = crate::param::count_trainable(cell.params());
        let unshared = SetAggCell::<f64>::new("agg", 8, &AggConfig { share_weights: false, ..cfg }, &mut rng(2)).unwrap();
        assert_eq!(2 * count, crate::param::count_trainable(unshared.params()));
    }

    #[test]
    fn frame_permutation_invariance_f32() {
        for cfg in configs() {
            let cell = SetAggCell::<f32>::new("agg", 16, &cfg, &mut rng(4)).unwrap();
            let f = Tensor::<f32>::randn(&[3, 5, 16], 1.0, &mut rng(5));
            let g = Graph::train(0);
            let base = cell.forward(&g, &g.constant(f.clone())).unwrap().value();
            let mut r = rng(6);
            for _ in 0..20 {
                let mut perm: Vec<usize> = (0..5).collect();
                perm.shuffle(&mut r);
                let g = Graph::train(0);
                let y = cell.forward(&g, &g.constant(permute_frames(&f, &perm))).unwrap().value();
                assert!(base.max_abs_diff(&y) < 1e-6, "{cfg:?}");
            }
        }
    }

    #[test]
    fn decomposition_holds() {
        for cfg in configs() {
            let cell = SetAggCell::<f64>::new("agg", 8, &cfg, &mut rng(7)).unwrap();
            for t in [1, 4] {
                let f = Tensor::randn(&[2, t, 8], 1.0, &mut rng(8));
                assert!(decompose_check(&cell, &f).unwrap(), "{cfg:?} t={t}");
            }
        }
    }

    #[test]
    fn singleton_set_is_masked_frame() {
        let cell = SetAggCell::<f64>::new("agg", 8, &AggConfig { r: 4, ..Default::default() }, &mut rng(9)).unwrap();
        let f = Tensor::randn(&[2, 1, 8], 1.0, &mut rng(10));
        let g = Graph::eval();
        let fv = g.constant(f.clone());
        let y = cell.forward(&g, &fv).unwrap().value();
        let m = cell.mask(&g, &fv).unwrap().value();
        for i in 0..16 {
            assert!((y.data()[i] - m.data()[i] * f.data()[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn r_must_divide_channels() {
        let cfg = AggConfig { r: 3, ..Default::default() };
        assert!(matches!(SetAggCell::<f32>::new("a", 8, &cfg, &mut rng(0)), Err(Error::Config(_))));
        let cell = SetAggCell::<f32>::new("a", 8, &AggConfig { r: 4, ..Default::default() }, &mut rng(0)).unwrap();
        let g = Graph::eval();
        assert!(cell.forward(&g, &g.constant(Tensor::zeros(&[1, 2, 6]))).is_err());
    }

    #[test]
    fn gradchecks() {
        for cfg in configs() {
            let cell = SetAggCell::<f64>::new("agg", 8, &cfg, &mut rng(11)).unwrap();
            let cc = cell.clone();
            let f = Tensor::randn(&[3, 4, 8], 1.0, &mut rng(12));
            let r = check("agg", &[f], &cell.params(), &GradCheckConfig::default(), |g, v| cc.forward(g, &v[0])).unwrap();
            assert!(r.passed(), "{cfg:?}: {r:?}");
        }
    }
}
