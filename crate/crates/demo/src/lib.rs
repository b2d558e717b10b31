//! Browser demo: attention masks under different sequence orders, frame-order
//! invariance of set aggregation, and CMC curves against embedding noise.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

use cra_kit::aggregation::{AggConfig, SetAggCell};
use cra_kit::attention::{AttentionConfig, AttentionModule, SequenceOrder, Variant};
use cra_kit::metrics::{evaluate, EmbeddingGallery, Protocol};
use cra_kit::synth::{generate, SynthSpec};
use cra_kit::{Graph, Tensor};

fn js_err(e: cra_kit::Error) -> JsError {
    JsError::new(&e.to_string())
}

fn parse_order(order: &str, seed: u64) -> Result<SequenceOrder, JsError> {
    match order {
        "forward" => Ok(SequenceOrder::Forward),
        "reverse" => Ok(SequenceOrder::Reverse),
        "shuffle" => Ok(SequenceOrder::RandomShuffle),
        "fixed" => Ok(SequenceOrder::FixedPermutation(seed)),
        _ => Err(JsError::new(&format!("unknown order {order:?}"))),
    }
}

/// Channel-mean CRA mask (`h·w` values in (0, 1)) for one synthetic
/// pedestrian frame of size 32×16. `shuffle` draws a fresh order per call
/// from `seed`, so it changes with the seed while the weights stay fixed.
#[wasm_bindgen]
pub fn cra_mask(order: &str, d: usize, seed: u64) -> Result<Vec<f32>, JsError> {
    let spec = SynthSpec { num_ids: 2, clips_per_id: 1, frames_per_clip: 1, image: [3, 32, 16], cameras: 1, seed: 3, ..Default::default() };
    let data = generate(&spec).map_err(js_err)?;
    let frame = Tensor::new(&[1, 3, 32, 16], data.clip(0).to_vec()).map_err(js_err)?;
    let cfg = AttentionConfig { variant: Variant::Cra, d, order: parse_order(order, seed)?, ..Default::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let m = AttentionModule::<f32>::new("demo", &cfg, [3 * d.max(1), 32, 16], &mut rng).map_err(js_err)?;
    // tile the RGB frame to the module's channel count
    let reps = m.channels / 3;
    let mut x = Vec::with_capacity(m.channels * 512);
    for _ in 0..reps {
        x.extend_from_slice(frame.data());
    }
    let g = Graph::train(seed);
    let input = g.constant(Tensor::new(&[1, m.channels, 32, 16], x).map_err(js_err)?);
    let mask = m.mask(&g, &input).map_err(js_err)?.value();
    let hw = 32 * 16;
    Ok((0..hw).map(|p| (0..m.channels).map(|c| mask.data()[c * hw + p]).sum::<f32>() / m.channels as f32).collect())
}

/// Maximum elementwise difference between set-aggregated clip vectors of
/// `t` random frames and of the same frames in `trials` random orders.
#[wasm_bindgen]
pub fn set_permutation_deviation(t: usize, channels: usize, trials: usize, seed: u64) -> Result<f64, JsError> {
    use rand::seq::SliceRandom;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cell = SetAggCell::<f32>::new("demo", channels, &AggConfig { r: 4, ..Default::default() }, &mut rng).map_err(js_err)?;
    let f = Tensor::<f32>::randn(&[1, t, channels], 1.0, &mut rng);
    let run = |x: Tensor<f32>| -> Result<Tensor<f32>, JsError> {
        let g = Graph::eval();
        Ok((*cell.forward(&g, &g.constant(x)).map_err(js_err)?.value()).clone())
    };
    let base = run(f.clone())?;
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let mut perm: Vec<usize> = (0..t).collect();
        perm.shuffle(&mut rng);
        let mut data = Vec::with_capacity(t * channels);
        for &j in &perm {
            data.extend_from_slice(&f.data()[j * channels..(j + 1) * channels]);
        }
        let y = run(Tensor::new(&[1, t, channels], data).map_err(js_err)?)?;
        worst = worst.max(base.max_abs_diff(&y));
    }
    Ok(worst)
}

/// CMC curve (first `ranks` entries) and mAP, appended last, for synthetic
/// embeddings `identity centroid + N(0, noise²)` with `ids` identities.
#[wasm_bindgen]
pub fn cmc_curve(noise: f64, ids: usize, ranks: usize, seed: u64) -> Result<Vec<f64>, JsError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = 16;
    let centroids = Tensor::<f64>::randn(&[ids, dim], 1.0, &mut rng);
    let sample = |rng: &mut ChaCha8Rng, per: usize| {
        let n = Tensor::<f64>::randn(&[ids * per, dim], noise.max(0.0), rng);
        let data: Vec<f64> = (0..ids * per).flat_map(|i| (0..dim).map(move |k| (i, k))).map(|(i, k)| centroids.row(i / per)[k] + n.row(i)[k]).collect();
        Tensor::new(&[ids * per, dim], data)
    };
    let q = sample(&mut rng, 1).map_err(js_err)?;
    let g = sample(&mut rng, 2).map_err(js_err)?;
    let gal = EmbeddingGallery::new(&q, (0..ids).collect(), vec![0; ids], &g, (0..2 * ids).map(|i| i / 2).collect(), vec![1; 2 * ids])
        .map_err(js_err)?;
    let r = evaluate(&gal, Protocol::CrossCamera).map_err(js_err)?;
    let mut out: Vec<f64> = (1..=ranks).map(|k| r.rank(k)).collect();
    out.push(r.map);
    Ok(out)
}
