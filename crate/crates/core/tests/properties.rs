use eaaw_core::extraction::{binarize, ridge_fit};
use eaaw_core::model::softmax;
use eaaw_core::verification::{chi_squared_log_p, log_sf_chi2_1df, wsr};
use eaaw_core::watermark::{apply_mask, generate_masks, segment_input};
use eaaw_core::{MaskScheme, Tensor, TriggerSample, Watermark};
use proptest::prelude::*;

fn signs(len: std::ops::Range<usize>) -> impl Strategy<Value = Vec<i8>> {
    prop::collection::vec(prop::bool::ANY, len)
        .prop_map(|v| v.into_iter().map(|b| if b { 1 } else { -1 }).collect())
}

fn two_signed(v: &[i8]) -> bool {
    v.contains(&1) && v.contains(&-1)
}

fn neg(v: &[i8]) -> Vec<i8> {
    v.iter().map(|b| -b).collect()
}

proptest! {
    #[test]
    fn softmax_is_a_shift_invariant_distribution(
        logits in prop::collection::vec(-50.0f64..50.0, 1..20),
        shift in -100.0f64..100.0,
    ) {
        let p = softmax(&logits);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
        let shifted: Vec<f64> = logits.iter().map(|x| x + shift).collect();
        for (a, b) in p.iter().zip(softmax(&shifted)) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn ridge_is_linear_in_the_metric_vector(
        seed in 0u64..1000,
        k in 2usize..16,
        scale in 0.01f64..100.0,
        v in prop::collection::vec(-1.0f64..1.0, 32),
    ) {
        let c = 2 * k;
        let masks = generate_masks(c, k, MaskScheme::Random, seed).unwrap();
        let m = Tensor::matrix(c, k, masks.matrix()).unwrap();
        let v = &v[..c];
        let base = ridge_fit(&m, v, 1.0).unwrap();
        let scaled: Vec<f64> = v.iter().map(|x| x * scale).collect();
        let w = ridge_fit(&m, &scaled, 1.0).unwrap();
        for (a, b) in base.weights.iter().zip(&w.weights) {
            prop_assert!((a * scale - b).abs() <= 1e-9 * (1.0 + b.abs()));
        }
        // positive scaling never flips a bit away from zero
        for ((a, b), x) in binarize(&base).bits().iter().zip(binarize(&w).bits()).zip(&base.weights) {
            if x.abs() > 1e-9 {
                prop_assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn masking_is_idempotent(
        input in prop::collection::vec(-5.0f64..5.0, 64..80),
        seed in 0u64..1000,
        k in 2usize..16,
    ) {
        let part = segment_input(input.len(), k).unwrap();
        let trigger = TriggerSample::Classifier { input: input.clone(), label: 0 };
        let masks = generate_masks(4, k, MaskScheme::Random, seed).unwrap();
        for mask in masks.rows() {
            let once = apply_mask(&trigger, mask, &part).unwrap();
            let twice = apply_mask(&once, mask, &part).unwrap();
            prop_assert_eq!(&once, &twice);
            let TriggerSample::Classifier { input: masked, .. } = once else { unreachable!() };
            // ignored tail and kept parts are untouched
            prop_assert_eq!(&masked[part.ignored()], &input[part.ignored()]);
            for (i, &bit) in mask.iter().enumerate() {
                let r = part.part(i);
                if bit == 1 {
                    prop_assert_eq!(&masked[r.clone()], &input[r]);
                } else {
                    prop_assert!(masked[r].iter().all(|&x| x == 0.0));
                }
            }
        }
        let keep = vec![1u8; k];
        prop_assert_eq!(apply_mask(&trigger, &keep, &part).unwrap(), trigger);
    }

    #[test]
    fn token_masking_is_idempotent(
        tokens in prop::collection::vec(1u32..50, 16..40),
        seed in 0u64..1000,
    ) {
        let part = segment_input(tokens.len(), 8).unwrap();
        let trigger = TriggerSample::lm_all_targets(tokens);
        for mask in generate_masks(4, 8, MaskScheme::Random, seed).unwrap().rows() {
            let once = apply_mask(&trigger, mask, &part).unwrap();
            prop_assert_eq!(apply_mask(&once, mask, &part).unwrap(), once);
        }
    }

    #[test]
    fn chi_squared_ignores_sign_labelling(e in signs(8..128), o in signs(8..128)) {
        let n = e.len().min(o.len());
        let (e, o) = (&e[..n], &o[..n]);
        prop_assume!(two_signed(o));
        let (x, p) = chi_squared_log_p(e, o).unwrap();
        for (ee, oo) in [(neg(e), o.to_vec()), (e.to_vec(), neg(o)), (neg(e), neg(o))] {
            let (x2, p2) = chi_squared_log_p(&ee, &oo).unwrap();
            prop_assert!((x - x2).abs() <= 1e-9 * (1.0 + x));
            prop_assert!((p - p2).abs() <= 1e-9 * (1.0 + p.abs()));
        }
        prop_assert!(x >= 0.0 && x <= n as f64 + 1e-9);
        prop_assert!(p <= 0.0);
    }

    #[test]
    fn wsr_of_complement(e in signs(8..64), o in signs(8..64)) {
        let n = e.len().min(o.len());
        let (e, o) = (&e[..n], &o[..n]);
        let a = wsr(e, o).unwrap();
        prop_assert!((a + wsr(&neg(e), o).unwrap() - 1.0).abs() < 1e-12);
        prop_assert_eq!(a, wsr(o, e).unwrap());
    }

    #[test]
    fn log_sf_is_monotone(a in 0.0f64..3000.0, d in 1e-6f64..100.0) {
        let lo = log_sf_chi2_1df(a).unwrap();
        let hi = log_sf_chi2_1df(a + d).unwrap();
        prop_assert!(hi < lo || (lo == 0.0 && hi == 0.0), "log_sf({a}) = {lo}, log_sf({}) = {hi}", a + d);
        prop_assert!(lo <= 0.0 && lo.is_finite());
    }

    #[test]
    fn watermark_text_roundtrip(bits in signs(8..300)) {
        prop_assume!(two_signed(&bits));
        let w = Watermark::new(bits).unwrap();
        prop_assert_eq!(Watermark::decode_text(&w.encode_text()).unwrap(), w);
    }
}

#[test]
fn perfect_match_gives_chi_squared_k() {
    for k in [8usize, 64, 256, 1024] {
        let o: Vec<i8> = (0..k).map(|i| if i % 2 == 0 { 1 } else { -1 }).collect();
        let (x, _) = chi_squared_log_p(&o, &o).unwrap();
        assert_eq!(x, k as f64);
    }
}
