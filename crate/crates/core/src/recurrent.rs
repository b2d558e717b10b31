//! LSTM and bidirectional LSTM over batched sequences `[N, T, in]`.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{dim_err, Result};
use crate::nn::Init;
use crate::param::{Module, Param};
use crate::tensor::{Scalar, Tensor};

/// Single-layer LSTM cell with gate order (i, f, g, o) and one bias vector.
#[derive(Debug, Clone)]
pub struct LstmCell<T: Scalar> {
    pub w_ih: Param<T>,
    pub w_hh: Param<T>,
    pub bias: Param<T>,
}

pub fn lstm_param_count(input: usize, hidden: usize, bidirectional: bool) -> usize {
    let one = 4 * (input * hidden + hidden * hidden + hidden);
    if bidirectional {
        2 * one
    } else {
        one
    }
}

impl<T: Scalar> LstmCell<T> {
    pub fn new<R: Rng + ?Sized>(name: &str, input: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        if input == 0 || hidden == 0 {
            return Err(dim_err(format!("lstm {name}: input {input} and hidden {hidden} must be positive")));
        }
        let w_ih = Init::XavierUniform.sample(&[4 * hidden, input], input, hidden, rng);
        let w_hh = Init::XavierUniform.sample(&[4 * hidden, hidden], hidden, hidden, rng);
        // forget gate starts open
        let bias = Tensor::from_fn(&[4 * hidden], |i| if (hidden..2 * hidden).contains(&i) { T::one() } else { T::zero() });
        Ok(Self {
            w_ih: Param::new(format!("{name}.w_ih"), w_ih),
            w_hh: Param::new(format!("{name}.w_hh"), w_hh),
            bias: Param::new(format!("{name}.bias"), bias),
        })
    }

    pub fn input_size(&self) -> usize {
        self.w_ih.shape()[1]
    }

    pub fn hidden_size(&self) -> usize {
        self.w_hh.shape()[1]
    }

    /// One recurrence step from precomputed input projections `pre[N×4h]`.
    fn step<'g>(
        &self,
        g: &'g Graph<T>,
        pre: Var<'g, T>,
        state: Option<(Var<'g, T>, Var<'g, T>)>,
    ) -> Result<(Var<'g, T>, Var<'g, T>)> {
        let h = self.hidden_size();
        let gates = match state {
            Some((hp, _)) => pre.add(&hp.matmul_t(&g.param(&self.w_hh))?)?,
            None => pre,
        };
        let i = gates.narrow(1, 0, h)?.sigmoid();
        let f = gates.narrow(1, h, h)?.sigmoid();
        let gg = gates.narrow(1, 2 * h, h)?.tanh();
        let o = gates.narrow(1, 3 * h, h)?.sigmoid();
        let ig = i.mul(&gg)?;
        let c = match state {
            Some((_, cp)) => f.mul(&cp)?.add(&ig)?,
            None => ig,
        };
        let hn = o.mul(&c.tanh())?;
        Ok((hn, c))
    }

    /// Run over `xs[N, T, in]`, returning every hidden state `[N, T, hid]`.
    /// `reverse` consumes the sequence last-to-first; outputs stay aligned
    /// with their input positions. `init` supplies `(h0, c0)`, each `[N, hid]`;
    /// zeros otherwise.
    pub fn forward<'g>(
        &self,
        g: &'g Graph<T>,
        xs: &Var<'g, T>,
        init: Option<(Var<'g, T>, Var<'g, T>)>,
        reverse: bool,
    ) -> Result<Var<'g, T>> {
        let s = xs.shape();
        if s.len() != 3 || s[2] != self.input_size() {
            return Err(dim_err(format!("lstm expects [N, T, {}], got {s:?}", self.input_size())));
        }
        let (n, t, inp) = (s[0], s[1], s[2]);
        let h = self.hidden_size();
        if let Some((h0, c0)) = &init {
            if h0.shape() != [n, h] || c0.shape() != [n, h] {
                return Err(dim_err(format!("lstm initial state must be [{n}, {h}]")));
            }
        }
        // input projections for all steps at once
        let pre = xs
            .reshape(&[n * t, inp])?
            .matmul_t(&g.param(&self.w_ih))?
            .add(&g.param(&self.bias))?
            .reshape(&[n, t, 4 * h])?;
        let mut state = init;
        let mut outs: Vec<Option<Var<'g, T>>> = vec![None; t];
        let order: Vec<usize> = if reverse { (0..t).rev().collect() } else { (0..t).collect() };
        for step in order {
            let p = pre.narrow(1, step, 1)?.reshape(&[n, 4 * h])?;
            let (hn, cn) = self.step(g, p, state)?;
            outs[step] = Some(hn.reshape(&[n, 1, h])?);
            state = Some((hn, cn));
        }
        let outs: Vec<Var<'g, T>> = outs.into_iter().map(|o| o.expect("every step visited")).collect();
        if outs.len() == 1 {
            Ok(outs[0])
        } else {
            g.concat(&outs, 1)
        }
    }

    /// Single sequence `[T, in]` with explicit initial state, giving `[T, hid]`.
    pub fn forward_seq<'g>(
        &self,
        g: &'g Graph<T>,
        seq: &Var<'g, T>,
        h0: &Var<'g, T>,
        c0: &Var<'g, T>,
    ) -> Result<Var<'g, T>> {
        let s = seq.shape();
        if s.len() != 2 {
            return Err(dim_err(format!("sequence must be [T, in], got {s:?}")));
        }
        let h = self.hidden_size();
        let init = (h0.reshape(&[1, h])?, c0.reshape(&[1, h])?);
        let out = self.forward(g, &seq.reshape(&[1, s[0], s[1]])?, Some(init), false)?;
        out.reshape(&[s[0], h])
    }
}

impl<T: Scalar> Module<T> for LstmCell<T> {
    fn params(&self) -> Vec<Param<T>> {
        vec![self.w_ih.clone(), self.w_hh.clone(), self.bias.clone()]
    }
}

/// Two independent cells, one per direction; outputs summed per step so the
/// width stays `hid`.
#[derive(Debug, Clone)]
pub struct BiLstm<T: Scalar> {
    pub fwd: LstmCell<T>,
    pub bwd: LstmCell<T>,
}

impl<T: Scalar> BiLstm<T> {
    pub fn new<R: Rng + ?Sized>(name: &str, input: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            fwd: LstmCell::new(&format!("{name}.fwd"), input, hidden, rng)?,
            bwd: LstmCell::new(&format!("{name}.bwd"), input, hidden, rng)?,
        })
    }

    pub fn forward<'g>(&self, g: &'g Graph<T>, xs: &Var<'g, T>) -> Result<Var<'g, T>> {
        let a = self.fwd.forward(g, xs, None, false)?;
        let b = self.bwd.forward(g, xs, None, true)?;
        a.add(&b)
    }
}

impl<T: Scalar> Module<T> for BiLstm<T> {
    fn params(&self) -> Vec<Param<T>> {
        let mut v = self.fwd.params();
        v.extend(self.bwd.params());
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum CellKind {
    Lstm,
    BiLstm,
}

#[derive(Debug, Clone)]
pub enum Recurrent<T: Scalar> {
    Lstm(LstmCell<T>),
    BiLstm(BiLstm<T>),
}

impl<T: Scalar> Recurrent<T> {
    pub fn new<R: Rng + ?Sized>(name: &str, kind: CellKind, input: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        Ok(match kind {
            CellKind::Lstm => Recurrent::Lstm(LstmCell::new(name, input, hidden, rng)?),
            CellKind::BiLstm => Recurrent::BiLstm(BiLstm::new(name, input, hidden, rng)?),
        })
    }

    pub fn forward<'g>(&self, g: &'g Graph<T>, xs: &Var<'g, T>) -> Result<Var<'g, T>> {
        match self {
            Recurrent::Lstm(c) => c.forward(g, xs, None, false),
            Recurrent::BiLstm(b) => b.forward(g, xs),
        }
    }
}

impl<T: Scalar> Module<T> for Recurrent<T> {
    fn params(&self) -> Vec<Param<T>> {
        match self {
            Recurrent::Lstm(c) => c.params(),
            Recurrent::BiLstm(b) => b.params(),
        }
    }
}
