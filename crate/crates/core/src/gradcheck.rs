//! Central finite-difference verification of reverse-mode gradients.
//!
//! Non-scalar outputs are reduced to a scalar through a fixed random
//! projection `sum(out ⊙ R)` so every output element contributes.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::param::Param;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tolerance: f64,
    /// At most this many coordinates are checked per tensor.
    pub max_coords: usize,
    pub seed: u64,
    /// Build training-mode graphs (batch statistics in batchnorm).
    pub training: bool,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { step: 1e-5, tolerance: 1e-4, max_coords: 24, seed: 7, training: true }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub name: String,
    pub max_rel_error: f64,
    pub coords_checked: usize,
    /// `(tensor label, flat index, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(String, usize, f64, f64)>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Check `f` with respect to every input tensor and every trainable entry in
/// `params`. `f` is re-run from a fresh graph for every perturbation, always
/// with the same graph seed, so stochastic ops see the same draws.
pub fn check<F>(
    name: &str,
    inputs: &[Tensor<f64>],
    params: &[Param<f64>],
    cfg: &GradCheckConfig,
    f: F,
) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>>,
{
    let new_graph = || if cfg.training { Graph::train(cfg.seed) } else { Graph::eval() };

    // fixed projection, sized from a first forward pass
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9);
    let projection = {
        let g = new_graph();
        let vars: Vec<_> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&g, &vars)?;
        let shape = out.shape();
        if shape.iter().product::<usize>() == 1 {
            None
        } else {
            Some(Tensor::<f64>::uniform(&shape, -1.0, 1.0, &mut rng))
        }
    };
    let eval_loss = |inputs: &[Tensor<f64>]| -> Result<f64> {
        let g = new_graph();
        let vars: Vec<_> = inputs.iter().map(|t| g.input(t.clone())).collect();
        Ok(project(&g, f(&g, &vars)?, &projection)?.item())
    };

    // running statistics drift with every training-mode forward; put them back afterwards
    let buffers: Vec<_> = params.iter().filter(|p| !p.is_trainable()).map(|p| (p, p.value())).collect();

    // analytic pass
    let trainable: Vec<&Param<f64>> = params.iter().filter(|p| p.is_trainable()).collect();
    let saved_grads: Vec<Tensor<f64>> = trainable.iter().map(|p| p.grad()).collect();
    trainable.iter().for_each(|p| p.zero_grad());
    let (input_grads, param_grads) = {
        let g = new_graph();
        let vars: Vec<_> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let loss = project(&g, f(&g, &vars)?, &projection)?;
        g.backward(loss)?;
        let ig: Vec<Tensor<f64>> = vars
            .iter()
            .zip(inputs)
            .map(|(v, t)| g.grad(*v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        let pg: Vec<Tensor<f64>> = trainable.iter().map(|p| p.grad()).collect();
        (ig, pg)
    };
    // restore whatever the caller had accumulated
    for (p, g) in trainable.iter().zip(&saved_grads) {
        p.zero_grad();
        p.accumulate_grad(g.data());
    }

    let mut report = GradCheckReport {
        name: name.to_string(),
        max_rel_error: 0.0,
        coords_checked: 0,
        worst: None,
        tolerance: cfg.tolerance,
    };
    let h = cfg.step;
    let note = |label: String, idx: usize, a: f64, n: f64, report: &mut GradCheckReport| {
        let e = relative_error(a, n);
        report.coords_checked += 1;
        if report.worst.is_none() || e > report.max_rel_error {
            report.max_rel_error = e;
            report.worst = Some((label, idx, a, n));
        }
    };

    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (ti, t) in inputs.iter().enumerate() {
        for idx in pick_coords(t.numel(), cfg.max_coords, &mut rng) {
            let x0 = t.data()[idx];
            work[ti].data_mut()[idx] = x0 + h;
            let fp = eval_loss(&work)?;
            work[ti].data_mut()[idx] = x0 - h;
            let fm = eval_loss(&work)?;
            work[ti].data_mut()[idx] = x0;
            let numeric = (fp - fm) / (2.0 * h);
            note(format!("input{ti}"), idx, input_grads[ti].data()[idx], numeric, &mut report);
        }
    }
    for (p, pg) in trainable.iter().zip(&param_grads) {
        let original = p.value();
        for idx in pick_coords(original.numel(), cfg.max_coords, &mut rng) {
            let x0 = original.data()[idx];
            let mut v = (*original).clone();
            v.data_mut()[idx] = x0 + h;
            p.set_value(v.clone())?;
            let fp = eval_loss(inputs)?;
            v.data_mut()[idx] = x0 - h;
            p.set_value(v)?;
            let fm = eval_loss(inputs)?;
            p.set_value((*original).clone())?;
            let numeric = (fp - fm) / (2.0 * h);
            note(p.name().to_string(), idx, pg.data()[idx], numeric, &mut report);
        }
    }
    for (p, v) in buffers {
        p.set_value((*v).clone())?;
    }
    Ok(report)
}

fn project<'g>(g: &'g Graph<f64>, out: Var<'g, f64>, r: &Option<Tensor<f64>>) -> Result<Var<'g, f64>> {
    match r {
        None => Ok(out.sum()),
        Some(r) => Ok(out.mul(&g.constant(r.clone()))?.sum()),
    }
}

fn pick_coords(n: usize, cap: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if n <= cap {
        (0..n).collect()
    } else {
        let mut v = sample(rng, n, cap).into_vec();
        v.sort_unstable();
        v
    }
}
