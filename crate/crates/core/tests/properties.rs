use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use cra_kit::aggregation::{pool_set, PoolKind};
use cra_kit::attention::{apply_order, invert, SequenceOrder};
use cra_kit::checkpoint::{read_tensors, write_tensors};
use cra_kit::losses::{cross_entropy, sample_pk, triplet_batch_hard};
use cra_kit::metrics::{evaluate, EmbeddingGallery, Protocol};
use cra_kit::{Graph, Tensor};

fn permutation(len: usize) -> impl Strategy<Value = Vec<usize>> {
    Just((0..len).collect::<Vec<_>>()).prop_shuffle()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pooling_ignores_frame_order(
        frames in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 5), 1..8),
        seed in any::<u64>(),
    ) {
        use rand::seq::SliceRandom;
        let mut shuffled = frames.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(pool_set(PoolKind::Max, &frames).unwrap(), pool_set(PoolKind::Max, &shuffled).unwrap());
        let a = pool_set(PoolKind::Avg, &frames).unwrap();
        let b = pool_set(PoolKind::Avg, &shuffled).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn orders_are_permutations_and_invert(len in 1usize..40, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for order in [SequenceOrder::Forward, SequenceOrder::Reverse, SequenceOrder::RandomShuffle, SequenceOrder::FixedPermutation(seed)] {
            let p = order.permutation(len, Some(&mut rng)).unwrap();
            let mut sorted = p.clone();
            sorted.sort_unstable();
            prop_assert_eq!(sorted, (0..len).collect::<Vec<_>>());
            prop_assert_eq!(invert(&invert(&p)), p);
        }
    }

    #[test]
    fn apply_order_round_trips(p in (1usize..16).prop_flat_map(permutation), seed in any::<u64>()) {
        let rows = Tensor::<f32>::randn(&[p.len(), 3], 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
        let (moved, inverse) = apply_order(&rows, &SequenceOrder::Permutation(p), None::<&mut ChaCha8Rng>).unwrap();
        prop_assert_eq!(moved.select_rows(&inverse), rows);
    }

    #[test]
    fn pk_sampler_structure(ids in 2usize..10, per in 1usize..6, p in 2usize..5, k in 1usize..5, seed in any::<u64>()) {
        prop_assume!(p <= ids);
        let clip_ids: Vec<usize> = (0..ids * per).map(|i| i / per).collect();
        let picked = sample_pk(&clip_ids, p, k, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(picked.len(), p * k);
        let mut seen = std::collections::BTreeMap::new();
        for &i in &picked {
            *seen.entry(clip_ids[i]).or_insert(0) += 1;
        }
        prop_assert_eq!(seen.len(), p);
        prop_assert!(seen.values().all(|&n| n == k));
    }

    #[test]
    fn losses_are_non_negative(p in 2usize..5, k in 2usize..4, seed in any::<u64>(), margin in 0.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels: Vec<usize> = (0..p * k).map(|i| i / k).collect();
        let g = Graph::<f64>::eval();
        let emb = g.constant(Tensor::randn(&[p * k, 6], 1.0, &mut rng));
        let (tri, _) = triplet_batch_hard(&emb, &labels, margin, false).unwrap();
        prop_assert!(tri.item() >= 0.0);
        let logits = g.constant(Tensor::randn(&[p * k, p], 3.0, &mut rng));
        prop_assert!(cross_entropy(&logits, &labels).unwrap().item() > 0.0);
    }

    #[test]
    fn sigmoid_stays_open(x in prop::collection::vec(-1e4f32..1e4, 1..64)) {
        let g = Graph::<f32>::eval();
        let n = x.len();
        let y = g.constant(Tensor::new(&[n], x).unwrap()).sigmoid().value();
        prop_assert!(y.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn cmc_is_monotone_and_map_bounded(nq in 1usize..8, extra in 0usize..12, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // gallery holds one true match per query plus distractors
        let ng = nq + extra;
        let q = Tensor::<f64>::randn(&[nq, 4], 1.0, &mut rng);
        let g = Tensor::<f64>::randn(&[ng, 4], 1.0, &mut rng);
        let gid: Vec<usize> = (0..ng).map(|i| if i < nq { i } else { nq + i }).collect();
        let gal = EmbeddingGallery::new(&q, (0..nq).collect(), vec![0; nq], &g, gid, vec![1; ng]).unwrap();
        let r = evaluate(&gal, Protocol::CrossCamera).unwrap();
        prop_assert!(r.cmc.windows(2).all(|w| w[0] <= w[1]));
        prop_assert_eq!(*r.cmc.last().unwrap(), 1.0);
        prop_assert!(r.map > 0.0 && r.map <= 1.0);
        prop_assert!(r.per_query_ap.iter().all(|&ap| ap > 0.0 && ap <= 1.0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn checkpoint_tensors_round_trip_bitwise(
        bits in prop::collection::vec(any::<u32>(), 1..64),
        wide in prop::collection::vec(any::<u64>(), 1..16),
    ) {
        let dir = tempfile::tempdir().unwrap();
        let a = Tensor::new(&[bits.len()], bits.iter().map(|&b| f32::from_bits(b)).collect()).unwrap();
        write_tensors(dir.path(), &[("a".to_string(), &a)]).unwrap();
        let back = read_tensors::<f32>(dir.path()).unwrap();
        let got: Vec<u32> = back[0].1.data().iter().map(|v| v.to_bits()).collect();
        prop_assert_eq!(got, bits);

        let dir = tempfile::tempdir().unwrap();
        let b = Tensor::new(&[wide.len()], wide.iter().map(|&b| f64::from_bits(b)).collect()).unwrap();
        write_tensors(dir.path(), &[("b".to_string(), &b)]).unwrap();
        let back = read_tensors::<f64>(dir.path()).unwrap();
        let got: Vec<u64> = back[0].1.data().iter().map(|v| v.to_bits()).collect();
        prop_assert_eq!(got, wide);
    }
}
