//! Full (per-element) attention over frame feature maps.
//!
//! All three variants share the shape `x → σ(ϕ(core(φ(x)))) ⊙ x`, where
//! `φ` is a 1×1 conv + BN + ReLU down to `c/d` channels and `ϕ` a bare 1×1
//! conv back to `c`:
//!
//! * channel recurrent (CRA): the `c/d` channel slices, each flattened
//!   row-major to `h·w`, are fed to an LSTM as a sequence;
//! * spatial recurrent (SRA): the `h·w` positions, each a `c/d` vector, are
//!   the sequence;
//! * conv (CA): a 3×3 convolution replaces the recurrence.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{dim_err, Error, Result};
use crate::nn::{BatchNorm, Conv2d, Init};
use crate::param::{Module, Param};
use crate::recurrent::{CellKind, Recurrent};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    None,
    Cra,
    Sra,
    Ca,
}

impl Variant {
    pub fn label(self) -> &'static str {
        match self {
            Variant::None => "none",
            Variant::Cra => "CRA",
            Variant::Sra => "SRA",
            Variant::Ca => "CA",
        }
    }
}

/// Order in which sequence rows are fed to the recurrence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum SequenceOrder {
    Forward,
    Reverse,
    /// A fresh uniform permutation on every training forward; identity in
    /// evaluation.
    RandomShuffle,
    /// A permutation drawn once from the given seed.
    FixedPermutation(u64),
    /// An explicit fixed permutation.
    Permutation(Vec<usize>),
}

impl SequenceOrder {
    pub fn label(&self) -> String {
        match self {
            SequenceOrder::Forward => "forward".into(),
            SequenceOrder::Reverse => "reverse".into(),
            SequenceOrder::RandomShuffle => "random-shuffle".into(),
            SequenceOrder::FixedPermutation(s) => format!("fixed-permutation({s})"),
            SequenceOrder::Permutation(_) => "explicit-permutation".into(),
        }
    }

    /// The permutation for a sequence of `len` rows: output row `i` is input
    /// row `perm[i]`. `rng` is the caller's training stream; `None` means
    /// evaluation.
    pub fn permutation<R: Rng + ?Sized>(&self, len: usize, rng: Option<&mut R>) -> Result<Vec<usize>> {
        Ok(match self {
            SequenceOrder::Forward => (0..len).collect(),
            SequenceOrder::Reverse => (0..len).rev().collect(),
            SequenceOrder::RandomShuffle => {
                let mut p: Vec<usize> = (0..len).collect();
                if let Some(rng) = rng {
                    p.shuffle(rng);
                }
                p
            }
            SequenceOrder::FixedPermutation(seed) => {
                let mut p: Vec<usize> = (0..len).collect();
                p.shuffle(&mut ChaCha8Rng::seed_from_u64(*seed));
                p
            }
            SequenceOrder::Permutation(p) => {
                validate_permutation(p, len)?;
                p.clone()
            }
        })
    }
}

fn validate_permutation(p: &[usize], len: usize) -> Result<()> {
    let mut seen = vec![false; len];
    if p.len() != len || p.iter().any(|&i| i >= len || std::mem::replace(&mut seen[i], true)) {
        return Err(Error::Config(format!("{p:?} is not a permutation of 0..{len}")));
    }
    Ok(())
}

pub fn invert(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Reorder the rows of `rows[T×L]`; returns the permuted rows and the
/// inverse permutation that restores the original order.
pub fn apply_order<T: Scalar, R: Rng + ?Sized>(
    rows: &Tensor<T>,
    order: &SequenceOrder,
    rng: Option<&mut R>,
) -> Result<(Tensor<T>, Vec<usize>)> {
    if rows.rank() != 2 {
        return Err(dim_err(format!("apply_order expects [T, L], got {:?}", rows.shape())));
    }
    let perm = order.permutation(rows.shape()[0], rng)?;
    Ok((rows.select_rows(&perm), invert(&perm)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttentionConfig {
    pub variant: Variant,
    pub d: usize,
    pub order: SequenceOrder,
    pub cell: CellKind,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self { variant: Variant::Cra, d: 16, order: SequenceOrder::Forward, cell: CellKind::Lstm }
    }
}

#[derive(Debug, Clone)]
enum Core<T: Scalar> {
    Recurrent(Recurrent<T>),
    Conv(Conv2d<T>),
}

/// One attention module bound to a feature-map shape `c×h×w`.
#[derive(Debug, Clone)]
pub struct AttentionModule<T: Scalar> {
    pub variant: Variant,
    pub order: SequenceOrder,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub reduced: usize,
    pub phi: Conv2d<T>,
    pub phi_bn: BatchNorm<T>,
    core: Core<T>,
    pub varphi: Conv2d<T>,
}

impl<T: Scalar> AttentionModule<T> {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        cfg: &AttentionConfig,
        shape: [usize; 3],
        rng: &mut R,
    ) -> Result<Self> {
        let [c, h, w] = shape;
        if cfg.variant == Variant::None {
            return Err(Error::Config("attention module requested with variant None".into()));
        }
        if cfg.d == 0 || c % cfg.d != 0 {
            return Err(Error::Config(format!("reduction d = {} must divide the channel count {c}", cfg.d)));
        }
        let r = c / cfg.d;
        let hw = h * w;
        let phi = Conv2d::new(&format!("{name}.phi"), c, r, 1, 1, 0, false, Init::KaimingUniform, rng);
        let phi_bn = BatchNorm::new(&format!("{name}.phi_bn"), r);
        let core = match cfg.variant {
            Variant::Cra => Core::Recurrent(Recurrent::new(&format!("{name}.lstm"), cfg.cell, hw, hw, rng)?),
            Variant::Sra => Core::Recurrent(Recurrent::new(&format!("{name}.lstm"), cfg.cell, r, r, rng)?),
            Variant::Ca => Core::Conv(Conv2d::new(&format!("{name}.conv"), r, r, 3, 1, 1, true, Init::XavierUniform, rng)),
            Variant::None => unreachable!(),
        };
        let varphi = Conv2d::new(&format!("{name}.varphi"), r, c, 1, 1, 0, true, Init::XavierUniform, rng);
        let m = Self { variant: cfg.variant, order: cfg.order.clone(), channels: c, height: h, width: w, reduced: r, phi, phi_bn, core, varphi };
        if let SequenceOrder::Permutation(p) = &m.order {
            validate_permutation(p, m.sequence_shape().0)?;
        }
        Ok(m)
    }

    /// `(length, row width)` of the recurrent sequence per frame.
    pub fn sequence_shape(&self) -> (usize, usize) {
        let hw = self.height * self.width;
        match self.variant {
            Variant::Sra => (hw, self.reduced),
            _ => (self.reduced, hw),
        }
    }

    pub fn recurrent(&self) -> Option<&Recurrent<T>> {
        match &self.core {
            Core::Recurrent(r) => Some(r),
            Core::Conv(_) => None,
        }
    }

    pub fn conv(&self) -> Option<&Conv2d<T>> {
        match &self.core {
            Core::Conv(c) => Some(c),
            Core::Recurrent(_) => None,
        }
    }

    /// The mask `σ(ϕ(core(φ(x))))` for `x[N, c, h, w]`.
    pub fn mask<'g>(&self, g: &'g Graph<T>, x: &Var<'g, T>) -> Result<Var<'g, T>> {
        let s = x.shape();
        if s.len() != 4 || s[1..] != [self.channels, self.height, self.width] {
            return Err(dim_err(format!(
                "attention module expects [N, {}, {}, {}], got {s:?}",
                self.channels, self.height, self.width
            )));
        }
        let n = s[0];
        let (r, hw) = (self.reduced, self.height * self.width);
        let e = self.phi_bn.forward(g, &self.phi.forward(g, x)?)?.relu();
        let z = match &self.core {
            Core::Conv(conv) => conv.forward(g, &e)?,
            Core::Recurrent(cell) => {
                let rows = match self.variant {
                    Variant::Sra => e.reshape(&[n, r, hw])?.permute(&[0, 2, 1])?,
                    _ => e.reshape(&[n, r, hw])?,
                };
                let len = rows.shape()[1];
                let perm = if g.is_training() {
                    g.with_rng(|rng| self.order.permutation(len, Some(rng)))?
                } else {
                    self.order.permutation::<ChaCha8Rng>(len, None)?
                };
                let hs = if self.order == SequenceOrder::Forward {
                    cell.forward(g, &rows)?
                } else {
                    let inv = invert(&perm);
                    cell.forward(g, &rows.index_select(1, &perm)?)?.index_select(1, &inv)?
                };
                match self.variant {
                    Variant::Sra => hs.permute(&[0, 2, 1])?.reshape(&[n, r, self.height, self.width])?,
                    _ => hs.reshape(&[n, r, self.height, self.width])?,
                }
            }
        };
        Ok(self.varphi.forward(g, &z)?.sigmoid())
    }

    /// `(mask ⊙ x, mask)`
    pub fn forward_with_mask<'g>(&self, g: &'g Graph<T>, x: &Var<'g, T>) -> Result<(Var<'g, T>, Var<'g, T>)> {
        let m = self.mask(g, x)?;
        Ok((m.mul(x)?, m))
    }

    pub fn forward<'g>(&self, g: &'g Graph<T>, x: &Var<'g, T>) -> Result<Var<'g, T>> {
        Ok(self.forward_with_mask(g, x)?.0)
    }
}

impl<T: Scalar> Module<T> for AttentionModule<T> {
    fn params(&self) -> Vec<Param<T>> {
        let mut v = self.phi.params();
        v.extend(self.phi_bn.params());
        match &self.core {
            Core::Recurrent(r) => v.extend(r.params()),
            Core::Conv(c) => v.extend(c.params()),
        }
        v.extend(self.varphi.params());
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check, GradCheckConfig};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn module(variant: Variant, d: usize, order: SequenceOrder, shape: [usize; 3], seed: u64) -> AttentionModule<f64> {
        let cfg = AttentionConfig { variant, d, order, cell: CellKind::Lstm };
        AttentionModule::new("att", &cfg, shape, &mut rng(seed)).unwrap()
    }

    #[test]
    fn sequence_shapes() {
        let cra = module(Variant::Cra, 16, SequenceOrder::Forward, [64, 8, 4], 0);
        assert_eq!(cra.sequence_shape(), (4, 32));
        let sra = module(Variant::Sra, 16, SequenceOrder::Forward, [64, 8, 4], 0);
        assert_eq!(sra.sequence_shape(), (32, 4));
        let g = Graph::train(0);
        let x = g.constant(Tensor::randn(&[2, 64, 8, 4], 1.0, &mut rng(1)));
        for m in [&cra, &sra, &module(Variant::Ca, 16, SequenceOrder::Forward, [64, 8, 4], 0)] {
            assert_eq!(m.forward(&g, &x).unwrap().shape(), vec![2, 64, 8, 4]);
        }
    }

    #[test]
    fn d_must_divide_channels() {
        let cfg = AttentionConfig { d: 3, ..Default::default() };
        let err = AttentionModule::<f32>::new("a", &cfg, [8, 2, 2], &mut rng(0)).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn zero_varphi_halves_input() {
        for v in [Variant::Cra, Variant::Sra, Variant::Ca] {
            let m = module(v, 2, SequenceOrder::Forward, [8, 3, 2], 2);
            for p in m.varphi.params() {
                p.set_value(Tensor::zeros(&p.shape())).unwrap();
            }
            let g = Graph::train(0);
            let x = g.constant(Tensor::randn(&[2, 8, 3, 2], 1.0, &mut rng(3)));
            let y = m.forward(&g, &x).unwrap().value();
            for (a, b) in y.data().iter().zip(x.value().data()) {
                assert_eq!(*a, 0.5 * b);
            }
        }
    }

    #[test]
    fn identity_permutation_is_bitwise_forward() {
        let x = Tensor::<f64>::randn(&[2, 16, 4, 2], 1.0, &mut rng(4));
        for v in [Variant::Cra, Variant::Sra] {
            let fwd = module(v, 4, SequenceOrder::Forward, [16, 4, 2], 5);
            let len = fwd.sequence_shape().0;
            let mut idm = fwd.clone();
            idm.order = SequenceOrder::Permutation((0..len).collect());
            for train in [false, true] {
                let (ga, gb) = if train { (Graph::train(1), Graph::train(1)) } else { (Graph::eval(), Graph::eval()) };
                let a = fwd.forward(&ga, &ga.constant(x.clone())).unwrap().value();
                let b = idm.forward(&gb, &gb.constant(x.clone())).unwrap().value();
                assert_eq!(a.data(), b.data());
            }
        }
    }

    #[test]
    fn reverse_is_involution_and_inverse_round_trips() {
        let rows = Tensor::<f64>::from_fn(&[16, 3], |i| i as f64);
        let none: Option<&mut ChaCha8Rng> = None;
        let (r1, _) = apply_order(&rows, &SequenceOrder::Reverse, none).unwrap();
        let (r2, _) = apply_order(&r1, &SequenceOrder::Reverse, None::<&mut ChaCha8Rng>).unwrap();
        assert_eq!(r2, rows);
        let orders = [
            SequenceOrder::Forward,
            SequenceOrder::Reverse,
            SequenceOrder::RandomShuffle,
            SequenceOrder::FixedPermutation(9),
        ];
        for o in &orders {
            let (p, inv) = apply_order(&rows, o, Some(&mut rng(6))).unwrap();
            assert_eq!(p.select_rows(&inv), rows, "{o:?}");
        }
    }

    #[test]
    fn random_shuffle_differs_across_seeds_and_fixed_is_stable() {
        let o = SequenceOrder::RandomShuffle;
        let a = o.permutation(16, Some(&mut rng(1))).unwrap();
        let b = o.permutation(16, Some(&mut rng(2))).unwrap();
        assert_ne!(a, b);
        assert_eq!(o.permutation::<ChaCha8Rng>(16, None).unwrap(), (0..16).collect::<Vec<_>>());
        let f = SequenceOrder::FixedPermutation(3);
        assert_eq!(f.permutation(16, Some(&mut rng(1))).unwrap(), f.permutation(16, Some(&mut rng(2))).unwrap());
    }

    #[test]
    fn cra_and_sra_differ() {
        let x = Tensor::<f64>::randn(&[1, 8, 2, 2], 1.0, &mut rng(7));
        let g = Graph::eval();
        let xv = g.constant(x);
        let a = module(Variant::Cra, 2, SequenceOrder::Forward, [8, 2, 2], 8).forward(&g, &xv).unwrap().value();
        let b = module(Variant::Sra, 2, SequenceOrder::Forward, [8, 2, 2], 9).forward(&g, &xv).unwrap().value();
        assert!(a.max_abs_diff(&b) > 0.0);
    }

    #[test]
    fn gradchecks_all_variants() {
        let x = Tensor::<f64>::randn(&[2, 8, 3, 2], 1.0, &mut rng(10));
        for (v, o) in [
            (Variant::Cra, SequenceOrder::Forward),
            (Variant::Cra, SequenceOrder::RandomShuffle),
            (Variant::Sra, SequenceOrder::Reverse),
            (Variant::Ca, SequenceOrder::Forward),
        ] {
            let m = module(v, 2, o.clone(), [8, 3, 2], 11);
            let mc = m.clone();
            let r = check("att", &[x.clone()], &m.params(), &GradCheckConfig::default(), |g, vs| mc.forward(g, &vs[0])).unwrap();
            assert!(r.passed(), "{v:?} {o:?}: {r:?}");
        }
    }
}
