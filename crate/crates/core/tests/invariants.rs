mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sfanet::data::{apply_gamma, augment, AugmentConfig, Entry, GroundTruthConfig, Normalization};
use sfanet::eval::{count_from_density, EvalResult, ImageResult};
use sfanet::groundtruth::{
    downscale_half_sum, render_attention, render_density, KernelSpec, PointAnnotation,
    ATTENTION_KERNEL, DENSITY_KERNEL,
};
use sfanet::imaging::{Image, Mask};
use sfanet::Tensor;

fn annotation() -> impl Strategy<Value = PointAnnotation> {
    (1usize..=64, 1usize..=64).prop_flat_map(|(w, h)| {
        let coord = (0.0..w as f64, 0.0..h as f64);
        let edge = prop_oneof![
            coord.clone(),
            (Just(0.0), 0.0..h as f64),
            (0.0..w as f64, Just(h as f64 - 1.0)),
            Just((w as f64 - 1.0, 0.0)),
        ];
        prop::collection::vec(edge, 0..20).prop_map(move |points| PointAnnotation {
            image_id: "p".into(),
            width: w,
            height: h,
            points,
        })
    })
}

fn kernel() -> impl Strategy<Value = KernelSpec> {
    (0usize..10, 0.3f64..6.0).prop_map(|(r, s)| KernelSpec::new(2 * r + 1, s).unwrap())
}

fn textured_entry(w: usize, h: usize, points: Vec<(f64, f64)>) -> Entry {
    let data = (0..3 * w * h).map(|i| ((i * 7919) % 255) as f32 / 255.0).collect();
    Entry::new(
        Image::new(w, h, data).unwrap(),
        PointAnnotation {
            image_id: "e".into(),
            width: w,
            height: h,
            points,
        },
        DENSITY_KERNEL,
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn density_sum_equals_head_count(ann in annotation(), k in kernel()) {
        let d = render_density(&ann, &k);
        prop_assert!((d.sum() - ann.count() as f64).abs() < 1e-6);
        prop_assert!(d.values.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn downscale_conserves_count_and_binary_mask(ann in annotation()) {
        let mut ann = ann;
        ann.width -= ann.width % 2;
        ann.height -= ann.height % 2;
        prop_assume!(ann.width > 0 && ann.height > 0);
        ann.clamp_points();
        let d = render_density(&ann, &DENSITY_KERNEL);
        let half = downscale_half_sum(&d).unwrap();
        prop_assert!((half.sum() - d.sum()).abs() < 1e-9);
        let a = render_attention(&d, &ATTENTION_KERNEL, 1e-3).unwrap();
        let ah = downscale_half_sum(&a).unwrap();
        prop_assert!(ah.values.iter().all(|&v| v <= 1));
        prop_assert_eq!(ah.ones() > 0, a.ones() > 0);
    }

    #[test]
    fn adding_a_head_never_clears_attention(ann in annotation(), fx in 0.0f64..1.0, fy in 0.0f64..1.0) {
        let before = render_attention(&render_density(&ann, &DENSITY_KERNEL), &ATTENTION_KERNEL, 1e-3).unwrap();
        let mut more = ann.clone();
        more.points.push((fx * ann.width as f64, fy * ann.height as f64));
        more.clamp_points();
        let after = render_attention(&render_density(&more, &DENSITY_KERNEL), &ATTENTION_KERNEL, 1e-3).unwrap();
        for (b, a) in before.values.iter().zip(&after.values) {
            prop_assert!(a >= b);
        }
    }

    #[test]
    fn gamma_is_monotone(a in prop::collection::vec(0.0f32..=1.0, 1..50), d in prop::collection::vec(0.0f32..=0.5, 50), g in 0.5f64..1.5) {
        let n = a.len();
        let lo: Vec<f32> = a.iter().flat_map(|&v| [v; 3]).collect();
        let hi: Vec<f32> = lo.iter().enumerate().map(|(i, &v)| (v + d[i / 3]).min(1.0)).collect();
        let mut x = Image::new(n, 1, lo).unwrap();
        let mut y = Image::new(n, 1, hi).unwrap();
        apply_gamma(&mut x, g);
        apply_gamma(&mut y, g);
        for (p, q) in x.data.iter().zip(&y.data) {
            prop_assert!(p <= q);
        }
    }

    #[test]
    fn mae_never_exceeds_rmse(errs in prop::collection::vec((0.0f64..500.0, 0usize..500), 1..40)) {
        let per: Vec<_> = errs.iter().enumerate()
            .map(|(i, &(p, g))| ImageResult::new(format!("{i:03}"), p, g)).collect();
        let r = EvalResult::from_images(per).unwrap();
        prop_assert!(r.mae <= r.mse * (1.0 + 1e-12));
    }

    #[test]
    fn evaluation_ignores_image_order(errs in prop::collection::vec((0.0f64..500.0, 0usize..500), 1..40), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let per: Vec<_> = errs.iter().enumerate()
            .map(|(i, &(p, g))| ImageResult::new(format!("{i:03}"), p, g)).collect();
        let mut shuffled = per.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(
            EvalResult::from_images(per).unwrap().to_json(),
            EvalResult::from_images(shuffled).unwrap().to_json()
        );
    }

    #[test]
    fn roi_masking_is_idempotent(vals in prop::collection::vec(-1.0f64..1.0, 48), bits in prop::collection::vec(any::<bool>(), 48)) {
        let mask = Mask { width: 8, height: 6, data: bits.clone() };
        let raw = Tensor::new([1, 1, 6, 8], vals.clone()).unwrap();
        let masked = Tensor::new(
            [1, 1, 6, 8],
            vals.iter().zip(&bits).map(|(&v, &b)| if b { v } else { 0.0 }).collect(),
        ).unwrap();
        let once = count_from_density(&raw, 8, 6, Some(&mask)).unwrap();
        let twice = count_from_density(&masked, 8, 6, Some(&mask)).unwrap();
        prop_assert_eq!(once, twice);
        prop_assert_eq!(count_from_density(&masked, 8, 6, None).unwrap(), once);
    }

    #[test]
    fn augmented_targets_match_surviving_points(seed in any::<u64>(), w in 20usize..60, h in 20usize..60) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts = common::random_points(&mut rng, w, h, 25);
        let e = textured_entry(w, h, pts);
        let cfg = AugmentConfig { crop: (32, 32), short_side_min: 24, gray_p: 0.1, ..Default::default() };
        let s = augment(&e, &cfg, &GroundTruthConfig::default(), &Normalization::default(), &mut rng).unwrap();
        prop_assert_eq!(s.image.shape(), &[3, 32, 32]);
        prop_assert_eq!(s.density_target.shape(), &[1, 16, 16]);
        prop_assert!((s.density_target.sum() - s.points.len() as f64).abs() < 1e-5);
        prop_assert!(s.attention_target.data().iter().all(|&v| v == 0.0 || v == 1.0));
        // Flipping maps x in (31, 32) to (-1, 0); rendering clamps it back.
        prop_assert!(s.points.iter().all(|&(x, y)| x > -1.0 && x < 32.0 && (0.0..32.0).contains(&y)));
    }

    #[test]
    fn same_seed_same_sample(seed in any::<u64>()) {
        let e = textured_entry(40, 36, vec![(3.0, 4.0), (20.5, 30.2), (39.0, 0.0)]);
        let cfg = AugmentConfig { crop: (32, 32), short_side_min: 0, gray_p: 0.5, ..Default::default() };
        let run = || augment(&e, &cfg, &GroundTruthConfig::default(), &Normalization::default(),
            &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let (a, b) = (run(), run());
        prop_assert_eq!(a.image.data(), b.image.data());
        prop_assert_eq!(a.points, b.points);
        prop_assert_eq!(a.applied, b.applied);
    }

    #[test]
    fn flip_mirrors_points_and_peak(seed in any::<u64>(), x in 0.0f64..48.0, y in 0.0f64..40.0) {
        let e = textured_entry(48, 40, vec![(x, y)]);
        let gt = GroundTruthConfig::default();
        let norm = Normalization::default();
        let plain = AugmentConfig { crop: (32, 32), short_side_min: 0, flip_p: 0.0, gamma_p: 0.0, ..Default::default() };
        let flip = AugmentConfig { flip_p: 1.0, ..plain.clone() };
        let a = augment(&e, &plain, &gt, &norm, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let b = augment(&e, &flip, &gt, &norm, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(a.applied.crop_origin, b.applied.crop_origin);
        prop_assert_eq!(a.points.len(), b.points.len());
        for (p, q) in a.points.iter().zip(&b.points) {
            prop_assert_eq!(q.0, 31.0 - p.0);
            prop_assert_eq!(q.1, p.1);
            let (pa, pb) = (single_peak(p), single_peak(q));
            prop_assert_eq!(pb, (31 - pa.0, pa.1));
        }
        let (ia, ib) = (a.image.data(), b.image.data());
        for c in 0..3 {
            for r in 0..32 {
                for col in 0..32 {
                    prop_assert_eq!(ia[(c * 32 + r) * 32 + col], ib[(c * 32 + r) * 32 + 31 - col]);
                }
            }
        }
    }
}

fn single_peak(p: &(f64, f64)) -> (usize, usize) {
    let mut ann = PointAnnotation::new("s", 32, 32);
    ann.points.push(*p);
    render_density(&ann, &KernelSpec::new(5, 1.0).unwrap()).argmax().unwrap()
}

#[test]
fn flip_and_gamma_frequencies() {
    let e = textured_entry(8, 8, vec![(4.0, 4.0)]);
    let cfg = AugmentConfig {
        crop: (8, 8),
        short_side_min: 0,
        scale_range: (1.0, 1.0),
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let (mut flips, mut gammas) = (0, 0);
    let n = 10_000;
    for _ in 0..n {
        let s = augment(&e, &cfg, &GroundTruthConfig::default(), &Normalization::default(), &mut rng).unwrap();
        flips += s.applied.flipped as usize;
        gammas += s.applied.gamma.is_some() as usize;
        if let Some(g) = s.applied.gamma {
            assert!((0.5..=1.5).contains(&g));
        }
    }
    let (f, g) = (flips as f64 / n as f64, gammas as f64 / n as f64);
    assert!((f - 0.5).abs() < 0.02, "flip frequency {f}");
    assert!((g - 0.3).abs() < 0.02, "gamma frequency {g}");
}
