mod common;

use common::literal_adaptive_mask;
use dama::mask::{adaptive_mask, keep_len, random_mask, random_overlap_mask, AdaptiveCounts, Mask, MaskPair};
use dama::DamaError;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const RATIOS: [f64; 5] = [0.5, 0.6, 0.7, 0.8, 0.9];
const OVERLAPS: [f64; 4] = [0.0, 0.25, 0.5, 1.0];

/// A first mask at `ratio` plus strictly positive losses.
fn instance() -> impl Strategy<Value = (Mask, Vec<f32>, f64, f64)> {
    (8usize..=256, prop::sample::select(&RATIOS[..]), prop::sample::select(&OVERLAPS[..]), any::<u64>())
        .prop_filter("keeps at least one patch", |&(l, r, _, _)| keep_len(l, r) > 0)
        .prop_flat_map(|(l, r, o, seed)| {
            let m1 = random_mask(l, r, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            (Just(m1), prop::collection::vec(1e-4f32..10.0, l), Just(r), Just(o))
        })
}

fn pair(m1: &Mask, loss: &[f32], r: f64, o: f64) -> MaskPair {
    let m2 = adaptive_mask(m1, loss, r, o).unwrap();
    MaskPair { m1: m1.clone(), m2, patch_losses: loss.to_vec(), overlap_ratio: o }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn matches_reference_executor((m1, loss, r, o) in instance()) {
        let m2 = adaptive_mask(&m1, &loss, r, o).unwrap();
        prop_assert_eq!(m2.bits(), &literal_adaptive_mask(m1.bits(), &loss, r, o)[..]);
    }

    #[test]
    fn pair_invariants_hold((m1, loss, r, o) in instance()) {
        let p = pair(&m1, &loss, r, o);
        prop_assert!(p.validate(r, true).is_ok());
        prop_assert_eq!(p.m2.masked_count(), p.m1.masked_count());
        let s = p.stats();
        if let (Some(hi), Some(lo)) = (s.mean_loss_masked, s.mean_loss_visible) {
            prop_assert!(hi >= lo);
        }
    }

    #[test]
    fn newly_visible_are_lowest_loss((m1, loss, r, o) in instance()) {
        let p = pair(&m1, &loss, r, o);
        let c = AdaptiveCounts::new(m1.len(), r, o).unwrap();
        let mut ranked = m1.masked();
        ranked.sort_by(|&a, &b| loss[a].total_cmp(&loss[b]));
        let mut expect = ranked[..c.keep - c.overlap].to_vec();
        expect.sort_unstable();
        let got: Vec<usize> = (0..m1.len()).filter(|&i| m1.is_masked(i) && !p.m2.is_masked(i)).collect();
        prop_assert_eq!(got, expect);
    }

    #[test]
    fn invariant_to_monotone_transforms((m1, loss, r, o) in instance(), scale in 0.01f32..100.0) {
        let base = adaptive_mask(&m1, &loss, r, o).unwrap();
        let scaled: Vec<f32> = loss.iter().map(|&v| v * scale).collect();
        let logged: Vec<f32> = loss.iter().map(|&v| v.ln()).collect();
        prop_assert_eq!(&adaptive_mask(&m1, &scaled, r, o).unwrap(), &base);
        prop_assert_eq!(&adaptive_mask(&m1, &logged, r, o).unwrap(), &base);
    }

    #[test]
    fn ignores_losses_at_visible_patches((m1, loss, r, o) in instance(), junk in 0f32..1e3) {
        let base = adaptive_mask(&m1, &loss, r, o).unwrap();
        let mut noisy = loss.clone();
        for i in m1.visible() {
            noisy[i] = junk;
        }
        prop_assert_eq!(adaptive_mask(&m1, &noisy, r, o).unwrap(), base);
    }

    #[test]
    fn random_mask_preserves_ratio(l in 2usize..=512, r in 0.01f64..0.99, seed in any::<u64>()) {
        let got = random_mask(l, r, &mut ChaCha8Rng::seed_from_u64(seed));
        if keep_len(l, r) == 0 {
            prop_assert!(matches!(got, Err(DamaError::Config(_))));
        } else {
            let m = got.unwrap();
            prop_assert_eq!(m.len(), l);
            prop_assert_eq!(m.visible_count(), keep_len(l, r));
        }
    }

    #[test]
    fn random_overlap_keeps_counts((m1, loss, r, o) in instance(), seed in any::<u64>()) {
        let m2 = random_overlap_mask(&m1, r, o, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let p = MaskPair { m1, m2, patch_losses: loss, overlap_ratio: o };
        prop_assert!(p.validate(r, false).is_ok());
    }
}

#[test]
fn half_ratio_full_overlap_reproduces_first_mask() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for l in (8..=256).step_by(2) {
        let m1 = random_mask(l, 0.5, &mut rng).unwrap();
        let loss: Vec<f32> = (0..l).map(|i| ((i * 7919) % 101) as f32 + 0.5).collect();
        assert_eq!(adaptive_mask(&m1, &loss, 0.5, 1.0).unwrap(), m1, "L={l}");
    }
}

#[test]
fn hand_worked_example() {
    let m1 = Mask::from_bits(vec![1, 1, 0, 1, 1, 1, 0, 1]).unwrap();
    let loss = [0.9, 0.1, 0.0, 0.5, 0.8, 0.7, 0.0, 0.2];
    let m2 = adaptive_mask(&m1, &loss, 0.75, 0.5).unwrap();
    assert_eq!(m2.bits(), &[1, 0, 0, 1, 1, 1, 1, 1]);
    assert_eq!(literal_adaptive_mask(m1.bits(), &loss, 0.75, 0.5), m2.bits());
}

#[test]
fn low_ratios_are_unsupported() {
    let m1 = random_mask(16, 0.4, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let err = adaptive_mask(&m1, &[1.0; 16], 0.4, 0.5).unwrap_err();
    assert!(matches!(err, DamaError::UnsupportedRatio { .. }), "{err}");
}

#[test]
fn length_mismatch_is_a_shape_error() {
    let m1 = random_mask(16, 0.75, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let err = adaptive_mask(&m1, &[1.0; 15], 0.75, 0.5).unwrap_err();
    assert!(matches!(err, DamaError::Shape(_)), "{err}");
}
