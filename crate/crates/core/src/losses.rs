//! Batch-hard triplet loss, cross-entropy, and the P×K sampler.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::Rng;

use crate::autograd::{Var, DIST_EPS};
use crate::error::{dim_err, Error, Result};
use crate::tensor::Scalar;

pub const DEFAULT_MARGIN: f64 = 0.3;

/// Hardest positive / negative chosen for each anchor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mining {
    pub positive: Vec<usize>,
    pub negative: Vec<usize>,
}

/// Euclidean distance with the same arithmetic as the graph path: the
/// difference and square in `T`, the sum in f64, `+ε` and the root in `T`.
pub fn pair_distance<T: Scalar>(a: &[T], b: &[T], squared: bool) -> T {
    let s: f64 = a.iter().zip(b).map(|(&x, &y)| {
        let d = x - y;
        (d * d).as_f64()
    }).sum();
    let s = T::from_f64(s);
    if squared {
        s
    } else {
        (s + T::from_f64(DIST_EPS)).sqrt()
    }
}

fn check_labels(labels: &[usize]) -> Result<()> {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_default() += 1;
    }
    if counts.len() < 2 {
        return Err(Error::Sampling("batch needs at least two identities".into()));
    }
    if let Some((id, n)) = counts.iter().find(|(_, &n)| n < 2) {
        return Err(Error::Sampling(format!("identity {id} has {n} sample(s) in the batch; at least 2 needed")));
    }
    Ok(())
}

/// For each anchor: farthest same-identity sample and nearest
/// other-identity sample, ties to the lowest index.
pub fn hard_mining<T: Scalar>(emb: &crate::tensor::Tensor<T>, labels: &[usize], squared: bool) -> Result<Mining> {
    if emb.rank() != 2 || emb.shape()[0] != labels.len() {
        return Err(dim_err(format!("{} labels for embeddings of shape {:?}", labels.len(), emb.shape())));
    }
    check_labels(labels)?;
    let n = labels.len();
    let mut positive = Vec::with_capacity(n);
    let mut negative = Vec::with_capacity(n);
    for i in 0..n {
        let mut best_p: Option<(usize, T)> = None;
        let mut best_n: Option<(usize, T)> = None;
        for j in 0..n {
            if j == i {
                continue;
            }
            let d = pair_distance(emb.row(i), emb.row(j), squared);
            if labels[j] == labels[i] {
                if best_p.is_none_or(|(_, b)| d > b) {
                    best_p = Some((j, d));
                }
            } else if best_n.is_none_or(|(_, b)| d < b) {
                best_n = Some((j, d));
            }
        }
        positive.push(best_p.expect("checked").0);
        negative.push(best_n.expect("checked").0);
    }
    Ok(Mining { positive, negative })
}

/// Mean over anchors of `[d(a,p) − d(a,n) + ξ]₊` with batch-hard mining.
pub fn triplet_batch_hard<'g, T: Scalar>(
    emb: &Var<'g, T>,
    labels: &[usize],
    margin: f64,
    squared: bool,
) -> Result<(Var<'g, T>, Mining)> {
    if !(margin >= 0.0) {
        return Err(Error::Config(format!("triplet margin must be non-negative, got {margin}")));
    }
    let mining = hard_mining(&emb.value(), labels, squared)?;
    let pos = emb.index_select(0, &mining.positive)?;
    let neg = emb.index_select(0, &mining.negative)?;
    let dp = emb.row_distance(&pos, squared)?;
    let dn = emb.row_distance(&neg, squared)?;
    let loss = dp.sub(&dn)?.add_scalar(margin).relu().mean();
    Ok((loss, mining))
}

pub fn cross_entropy<'g, T: Scalar>(logits: &Var<'g, T>, labels: &[usize]) -> Result<Var<'g, T>> {
    logits.cross_entropy(labels)
}

pub fn total_loss<'g, T: Scalar>(tri: &Var<'g, T>, ce: &Var<'g, T>) -> Result<Var<'g, T>> {
    tri.add(ce)
}

/// `P` distinct identities, `K` clips each. `clip_ids[i]` is the identity of
/// clip `i`. Identities with fewer than `K` clips are sampled with
/// replacement.
pub fn sample_pk<R: Rng + ?Sized>(clip_ids: &[usize], p: usize, k: usize, rng: &mut R) -> Result<Vec<usize>> {
    if p == 0 || k == 0 {
        return Err(Error::Sampling(format!("P = {p} and K = {k} must both be positive")));
    }
    let mut by_id: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &id) in clip_ids.iter().enumerate() {
        by_id.entry(id).or_default().push(i);
    }
    if by_id.len() < p {
        return Err(Error::Dataset(format!("{} identities available, P = {p} requested", by_id.len())));
    }
    let ids: Vec<&Vec<usize>> = by_id.values().collect();
    let mut out = Vec::with_capacity(p * k);
    for pick in sample(rng, ids.len(), p) {
        let clips = ids[pick];
        if clips.len() >= k {
            out.extend(sample(rng, clips.len(), k).into_iter().map(|j| clips[j]));
        } else {
            out.extend((0..k).map(|_| clips[rng.random_range(0..clips.len())]));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Graph;
    use crate::gradcheck::{check, GradCheckConfig};
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn identical_embeddings_give_margin() {
        let g = Graph::<f64>::eval();
        let e = g.constant(Tensor::ones(&[6, 4]));
        let (l, _) = triplet_batch_hard(&e, &[0, 0, 1, 1, 2, 2], 0.3, false).unwrap();
        assert!((l.item() - 0.3).abs() < 1e-5);
        let (l, _) = triplet_batch_hard(&e, &[0, 0, 1, 1, 2, 2], 0.3, true).unwrap();
        assert_eq!(l.item(), 0.3);
    }

    #[test]
    fn separated_clusters_give_zero() {
        let g = Graph::<f64>::eval();
        let e = g.constant(Tensor::from_f64(&[4, 1], &[0., 0., 10., 10.]).unwrap());
        let (l, _) = triplet_batch_hard(&e, &[0, 0, 1, 1], 0.3, false).unwrap();
        assert_eq!(l.item(), 0.0);
    }

    #[test]
    fn sampling_contract() {
        let g = Graph::<f64>::eval();
        let e = g.constant(Tensor::ones(&[3, 2]));
        assert!(matches!(triplet_batch_hard(&e, &[0, 0, 1], 0.3, false), Err(Error::Sampling(_))));
        assert!(matches!(triplet_batch_hard(&e, &[0, 0, 0], 0.3, false), Err(Error::Sampling(_))));
    }

    #[test]
    fn translation_invariant_and_scale_covariant() {
        let e = Tensor::<f64>::randn(&[8, 3], 1.0, &mut rng(0));
        let labels = [0, 0, 1, 1, 2, 2, 3, 3];
        let base = hard_mining(&e, &labels, false).unwrap();
        let shifted = e.map(|v| v + 5.0);
        assert_eq!(hard_mining(&shifted, &labels, false).unwrap(), base);
        let scaled = e.map(|v| v * 3.0);
        assert_eq!(hard_mining(&scaled, &labels, false).unwrap(), base);
        let g = Graph::eval();
        let (l1, _) = triplet_batch_hard(&g.constant(e.clone()), &labels, 0.0, true).unwrap();
        let (l2, _) = triplet_batch_hard(&g.constant(shifted), &labels, 0.0, true).unwrap();
        assert!((l1.item() - l2.item()).abs() < 1e-9);
    }

    #[test]
    fn triplet_gradcheck() {
        let labels = [0, 0, 0, 1, 1, 1, 2, 2, 2];
        let e = Tensor::randn(&[9, 4], 1.0, &mut rng(1));
        let r = check("triplet", &[e], &[], &GradCheckConfig::default(), |_, v| {
            Ok(triplet_batch_hard(&v[0], &labels, 0.3, false)?.0)
        })
        .unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn cross_entropy_properties() {
        let g = Graph::<f64>::eval();
        let mut last = f64::INFINITY;
        for margin in [0.0, 1.0, 2.0, 5.0, 10.0] {
            let x = g.constant(Tensor::from_f64(&[1, 3], &[margin, 0.0, 0.0]).unwrap());
            let l = cross_entropy(&x, &[0]).unwrap().item();
            assert!(l >= 0.0 && l < last);
            last = l;
        }
        let x = Tensor::randn(&[4, 5], 1.0, &mut rng(2));
        let r = check("ce", &[x], &[], &GradCheckConfig::default(), |_, v| cross_entropy(&v[0], &[0, 4, 2, 2])).unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn total_is_sum() {
        let g = Graph::<f64>::eval();
        let a = g.constant(Tensor::scalar(0.3));
        let b = g.constant(Tensor::scalar(1.1));
        assert!((total_loss(&a, &b).unwrap().item() - 1.4).abs() < 1e-15);
        let z = g.constant(Tensor::scalar(0.0));
        assert_eq!(total_loss(&z, &z).unwrap().item(), 0.0);
    }

    #[test]
    fn pk_sampler_shape() {
        let ids: Vec<usize> = (0..40).map(|i| i / 4).collect();
        let idx = sample_pk(&ids, 4, 4, &mut rng(3)).unwrap();
        assert_eq!(idx.len(), 16);
        let mut counts = BTreeMap::new();
        for &i in &idx {
            *counts.entry(ids[i]).or_insert(0) += 1;
        }
        assert_eq!(counts.len(), 4);
        assert!(counts.values().all(|&c| c == 4));
        // fewer clips than K: with replacement
        let sparse = [0, 1, 1, 2, 2, 2];
        let idx = sample_pk(&sparse, 3, 4, &mut rng(4)).unwrap();
        assert_eq!(idx.iter().filter(|&&i| sparse[i] == 0).count(), 4);
        assert!(matches!(sample_pk(&sparse, 4, 2, &mut rng(5)), Err(Error::Dataset(_))));
    }

    #[test]
    fn pk_sampler_identity_frequencies_are_uniform() {
        let n_ids = 10;
        let ids: Vec<usize> = (0..n_ids * 3).map(|i| i % n_ids).collect();
        let mut r = rng(6);
        let draws = 10_000;
        let mut hist = vec![0usize; n_ids];
        for _ in 0..draws {
            let idx = sample_pk(&ids, 4, 2, &mut r).unwrap();
            for chunk in idx.chunks(2) {
                hist[ids[chunk[0]]] += 1;
            }
        }
        // each identity chosen with probability P / n_ids per draw
        let p = 4.0 / n_ids as f64;
        let mean = draws as f64 * p;
        let sd = (draws as f64 * p * (1.0 - p)).sqrt();
        for &h in &hist {
            assert!((h as f64 - mean).abs() < 3.0 * sd, "{hist:?}");
        }
    }
}
