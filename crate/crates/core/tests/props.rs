//! Property tests for the structural invariants: chunk tiling partitions,
//! wire round-trips, quantizer bounds, and normalization equivariances.

use std::sync::Arc;

use proptest::prelude::*;

use sparseloco::chunk::{chunk_tensor, effective_k, ChunkGeometry};
use sparseloco::codec::{
    deserialize, pack_indices, quantize_chunk, serialize, topk_select, unpack_indices, ChunkPlan,
    ChunkValues, CompressedChunk, CompressedDelta, ValueCoding,
};
use sparseloco::optimizer::median_normalize;
use sparseloco::params::{Layout, PeerId, TensorSpec};

fn shape_strategy() -> impl Strategy<Value = Vec<usize>> {
    prop_oneof![
        (1usize..9000).prop_map(|n| vec![n]),
        ((1usize..6), (1usize..6)).prop_map(|(r, c)| vec![r * 64, c * 64]),
        ((1usize..150), (1usize..90)).prop_map(|(r, c)| vec![r, c]),
        ((1usize..12), (1usize..12), (1usize..12)).prop_map(|(a, b, c)| vec![a, b, c]),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    /// Every flat index of a tensor lands in exactly one chunk.
    #[test]
    fn chunk_tiling_is_a_partition(shape in shape_strategy()) {
        let geometry = ChunkGeometry::standard();
        let chunks = chunk_tensor(&shape, &geometry, 0, 0).unwrap();
        let total: usize = shape.iter().product();
        let mut seen = vec![0u8; total];
        for c in &chunks {
            prop_assert!(c.len >= 1 && c.len <= geometry.chunk_1d());
            for p in c.positions() {
                seen[p] += 1;
            }
        }
        prop_assert!(seen.iter().all(|&n| n == 1));
    }

    /// Packed indices survive the 12-bit round trip.
    #[test]
    fn index_packing_roundtrips(mut indices in proptest::collection::vec(0u16..4096, 0..200)) {
        indices.sort_unstable();
        indices.dedup();
        let bytes = pack_indices(&indices).unwrap();
        prop_assert_eq!(bytes.len(), (indices.len() * 12).div_ceil(8));
        let back = unpack_indices(&bytes, indices.len()).unwrap();
        prop_assert_eq!(back, indices);
    }

    /// Decode keeps the sign of every nonzero value and lands within the
    /// bucket-distance bound of the original.
    #[test]
    fn quantizer_is_sign_preserving_and_bounded(
        values in proptest::collection::vec(-1e4f64..1e4, 1..200)
    ) {
        let q = quantize_chunk(&values);
        let (lo, hi) = match &q {
            ChunkValues::TwoBit { scale_lo, scale_hi, .. } => (*scale_lo, *scale_hi),
            _ => unreachable!(),
        };
        prop_assert!(lo >= 0.0 && lo <= hi);
        let chunk = CompressedChunk { indices: (0..values.len() as u16).collect(), values: q };
        for (v, d) in values.iter().zip(chunk.decode_values()) {
            if *v != 0.0 {
                prop_assert_eq!(v.signum(), d.signum());
            }
            let bound = (v.abs() - lo).abs().max((v.abs() - hi).abs());
            prop_assert!((d.abs() - v.abs()).abs() <= bound + hi.max(1.0) * 1e-3);
        }
    }

    /// Selection keeps the k largest magnitudes.
    #[test]
    fn topk_keeps_largest_magnitudes(
        values in proptest::collection::vec(-100f64..100.0, 1..120),
        k_frac in 0.01f64..1.0,
    ) {
        let k = ((values.len() as f64 * k_frac) as usize).clamp(1, values.len());
        let (indices, _) = topk_select(&values, k).unwrap();
        let min_kept = indices.iter().map(|&i| values[i as usize].abs()).fold(f64::INFINITY, f64::min);
        let max_dropped = (0..values.len() as u16)
            .filter(|i| !indices.contains(i))
            .map(|i| values[i as usize].abs())
            .fold(0.0f64, f64::max);
        prop_assert!(min_kept >= max_dropped);
    }

    /// Serialized deltas parse back bitwise identical.
    #[test]
    fn wire_roundtrip_is_bitwise(
        len in 1usize..6000,
        seed in 0u64..1_000,
        raw in proptest::bool::ANY,
    ) {
        let layout = Arc::new(Layout::new(vec![TensorSpec::new("t", &[len]).unwrap()]).unwrap());
        let plan = ChunkPlan::new(&layout, ChunkGeometry::standard()).unwrap();
        let mut stream = sparseloco::rng::Stream::new(seed, "prop-delta");
        let coding = if raw { ValueCoding::Raw } else { ValueCoding::TwoBit };
        let chunks = plan.descriptors.iter().map(|d| {
            let k = effective_k(d.len, &plan.geometry);
            let indices: Vec<u16> = stream.sample_distinct(d.len as u64, k)
                .into_iter().map(|i| i as u16).collect();
            let values: Vec<f64> = (0..k).map(|_| stream.next_gaussian()).collect();
            let values = match coding {
                ValueCoding::TwoBit => quantize_chunk(&values),
                ValueCoding::Raw => ChunkValues::Raw { values },
            };
            CompressedChunk { indices, values }
        }).collect();
        let delta = CompressedDelta {
            base_round: seed,
            peer: PeerId::from_ordinal(seed, 1),
            layout_digest: plan.layout_digest,
            chunks,
            coding,
        };
        let bytes = serialize(&delta).unwrap();
        let back = deserialize(&bytes, &plan).unwrap();
        prop_assert_eq!(&back, &delta);
        prop_assert_eq!(serialize(&back).unwrap(), bytes);
    }

    /// Median normalization is permutation-invariant and scale-equivariant.
    #[test]
    fn median_normalize_equivariances(
        vectors in proptest::collection::vec(
            proptest::collection::vec(-50f64..50.0, 4),
            1..12,
        ),
        scale in 0.01f64..100.0,
        rotate in 0usize..12,
    ) {
        let mut in_order = vectors.clone();
        median_normalize(&mut in_order);

        // Permutation invariance: rotate the inputs, outputs rotate with them.
        let mut rotated = vectors.clone();
        rotated.rotate_left(rotate % vectors.len());
        median_normalize(&mut rotated);
        let mut un_rotated = rotated.clone();
        un_rotated.rotate_right(rotate % vectors.len());
        for (a, b) in in_order.iter().zip(&un_rotated) {
            for (x, y) in a.iter().zip(b) {
                prop_assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
            }
        }

        // Scale equivariance: scaling all inputs by c scales all outputs by c.
        let mut scaled: Vec<Vec<f64>> = vectors
            .iter()
            .map(|v| v.iter().map(|x| x * scale).collect())
            .collect();
        median_normalize(&mut scaled);
        for (a, b) in in_order.iter().zip(&scaled) {
            for (x, y) in a.iter().zip(b) {
                prop_assert!((x * scale - y).abs() <= 1e-9 * (x * scale).abs().max(1e-9));
            }
        }
    }
}
