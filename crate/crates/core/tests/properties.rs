use std::f64::consts::LN_2;

use proptest::collection::vec;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use qdiff::distortion::{decode, DistortionBounds, Layout};
use qdiff::fitness::{f_div, jaccard, jsd, softmax, ActivationSignature, JaccardFormula};
use qdiff::metrics::{average_ranks, vargha_delaney_a12, wilcoxon_signed_rank};
use qdiff::patch::{is_valid, psnr};
use qdiff::quant::QuantParams;
use qdiff::search::{
    candidate_seed, read_dii_bytes, DiiRecord, DiiTracker, Ga, GaConfig, Pso, PsoConfig, DII_MAGIC,
};
use qdiff::{Dims, Patch3D};

fn logits(n: usize) -> impl Strategy<Value = Vec<f64>> {
    vec(-60.0f64..60.0, n)
}

fn patch() -> impl Strategy<Value = Patch3D> {
    (2usize..6, 2usize..6, 3usize..7).prop_flat_map(|(r, c, b)| {
        vec(-2.0f32..5.0, r * c * b)
            .prop_map(move |v| Patch3D::new(Dims::new(r, c, b), v, Some(0)).unwrap())
    })
}

fn signature() -> impl Strategy<Value = ActivationSignature> {
    vec((0u32..30, 0u32..4), 0..40).prop_map(ActivationSignature::from_pairs)
}

fn record(len: usize) -> impl Strategy<Value = DiiRecord> {
    (
        any::<u64>(),
        any::<u32>(),
        vec(-10.0f32..10.0, len),
        0u32..9,
        0u32..9,
        0u32..9,
    )
        .prop_map(
            |(rng_seed, patch_index, vector, true_label, original_label, quantized_label)| {
                DiiRecord {
                    rng_seed,
                    patch_index,
                    vector,
                    true_label,
                    original_label,
                    quantized_label,
                }
            },
        )
}

proptest! {
    #[test]
    fn divergence_is_symmetric_and_bounded((a, b) in (2usize..10).prop_flat_map(|n| (logits(n), logits(n)))) {
        let ab = f_div(&a, &b).unwrap();
        let ba = f_div(&b, &a).unwrap();
        prop_assert!((ab - ba).abs() <= 1e-12);
        prop_assert!((-1e-12..=LN_2 + 1e-12).contains(&ab), "{ab}");
        prop_assert!(f_div(&a, &a).unwrap().abs() <= 1e-12);
    }

    #[test]
    fn softmax_is_a_distribution_and_shift_invariant(x in logits(6), shift in -50.0f64..50.0) {
        let p = softmax(&x);
        let sum: f64 = p.as_slice().iter().sum();
        prop_assert!((sum - 1.0).abs() <= 1e-12);
        prop_assert!(p.as_slice().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let shifted: Vec<f64> = x.iter().map(|v| v + shift).collect();
        let q = softmax(&shifted);
        prop_assert!(jsd(&p, &q).unwrap() <= 1e-12);
    }

    #[test]
    fn jaccard_bounds(a in signature(), b in signature()) {
        let additive = jaccard(&a, &b, JaccardFormula::Additive);
        let standard = jaccard(&a, &b, JaccardFormula::Standard);
        prop_assert!((0.0..=1.0 / 3.0 + 1e-15).contains(&additive));
        prop_assert!((0.0..=1.0).contains(&standard));
        prop_assert_eq!(additive, jaccard(&b, &a, JaccardFormula::Additive));
        prop_assert!(additive <= standard);
    }

    #[test]
    fn psnr_falls_as_noise_grows(p in patch(), seed in any::<u64>(), amp in 0.01f64..1.0) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dir: Vec<f64> = (0..p.values().len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let noisy = |k: f64| {
            let v = p.values().iter().zip(&dir).map(|(&x, d)| (x as f64 + k * d) as f32).collect();
            Patch3D::new(p.dims(), v, None).unwrap()
        };
        prop_assert_eq!(psnr(&p, &p).unwrap(), f64::INFINITY);
        let near = psnr(&p, &noisy(amp)).unwrap();
        let far = psnr(&p, &noisy(4.0 * amp)).unwrap();
        prop_assert!(far < near, "{far} {near}");
        prop_assert_eq!(is_valid(&p, &noisy(amp), near).unwrap(), true);
        prop_assert_eq!(is_valid(&p, &noisy(amp), near + 1e-6).unwrap(), false);
    }

    #[test]
    fn identity_vector_decodes_to_the_same_bits(p in patch(), seed in any::<u64>()) {
        let bounds = DistortionBounds::default_for(p.dims());
        let layout = Layout::new(p.dims(), &bounds).unwrap();
        let out = decode(&layout, &layout.identity_vector(), &p, seed).unwrap();
        prop_assert!(out.bit_eq(&p));
    }

    #[test]
    fn decode_is_a_function_of_its_inputs(p in patch(), seed in any::<u64>(), raw in vec(-3.0f64..3.0, 64)) {
        let bounds = DistortionBounds::default_for(p.dims());
        let layout = Layout::new(p.dims(), &bounds).unwrap();
        let n = layout.bounds().len();
        let v: Vec<f64> = raw.iter().cycle().take(n).copied().collect();
        let a = decode(&layout, &v, &p, seed).unwrap();
        let b = decode(&layout, &v, &p, seed).unwrap();
        prop_assert!(a.bit_eq(&b));
        prop_assert_eq!(a.dims(), p.dims());
        prop_assert!(a.values().iter().all(|x| x.is_finite()));
    }

    #[test]
    fn clamp_lands_in_bounds_and_is_idempotent(raw in vec(-1e3f64..1e3, 64)) {
        let dims = Dims::new(5, 5, 6);
        let layout = Layout::new(dims, &DistortionBounds::default_for(dims)).unwrap();
        let b = layout.bounds();
        let v: Vec<f64> = raw.iter().cycle().take(b.len()).copied().collect();
        let c = layout.clamp(&v).unwrap();
        prop_assert!(c.iter().zip(&b).all(|(x, (lo, hi))| lo <= x && x <= hi));
        prop_assert_eq!(layout.clamp(&c).unwrap(), c);
    }

    #[test]
    fn a12_complements(a in vec(0.0f64..10.0, 1..15), b in vec(0.0f64..10.0, 1..15)) {
        let ab = vargha_delaney_a12(&a, &b).unwrap().a12;
        let ba = vargha_delaney_a12(&b, &a).unwrap().a12;
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert!((ab + ba - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn wilcoxon_p_is_a_probability_and_sign_blind(pairs in vec((0.0f64..5.0, 0.0f64..5.0), 1..40)) {
        let fwd = wilcoxon_signed_rank(&pairs).unwrap();
        let swapped: Vec<_> = pairs.iter().map(|&(x, y)| (y, x)).collect();
        let back = wilcoxon_signed_rank(&swapped).unwrap();
        match (fwd.p_value(), back.p_value()) {
            (Some(p), Some(q)) => {
                prop_assert!((0.0..=1.0).contains(&p));
                prop_assert!((p - q).abs() <= 1e-12);
            }
            (None, None) => {}
            other => prop_assert!(false, "{other:?}"),
        }
    }

    #[test]
    fn ranks_sum_to_triangle(values in vec(0u8..6, 1..30)) {
        let xs: Vec<f64> = values.iter().map(|&v| v as f64).collect();
        let r = average_ranks(&xs);
        let n = xs.len() as f64;
        prop_assert!((r.iter().sum::<f64>() - n * (n + 1.0) / 2.0).abs() <= 1e-9);
    }

    #[test]
    fn affine_error_is_half_a_step_inside_the_range(lo in -20.0f64..0.5, width in 0.01f64..40.0, t in 0.0f64..1.0) {
        let hi = lo + width;
        let q = QuantParams::affine(lo, hi);
        let x = lo + t * width;
        prop_assert!((q.fake_quant(x) - x).abs() <= q.scale / 2.0 + 1e-12);
        prop_assert_eq!(q.fake_quant(0.0), 0.0);
    }

    #[test]
    fn tracker_keeps_order_and_respects_the_bound(
        threshold in 40usize..400,
        records in vec((0usize..12).prop_flat_map(record), 0..30),
    ) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dii.bin");
        let mut t = DiiTracker::to_file(&path, threshold);
        for r in &records {
            t.track(r.clone()).unwrap();
            prop_assert!(t.buffered_bytes() <= threshold);
        }
        t.flush().unwrap();
        let back = if records.is_empty() {
            prop_assert!(!path.exists());
            Vec::new()
        } else {
            read_dii_bytes(&std::fs::read(&path).unwrap()).unwrap()
        };
        prop_assert_eq!(back, records);
    }

    #[test]
    fn swarm_and_ga_stay_in_bounds(seed in any::<u64>(), fit in vec(-5.0f64..5.0, 8 * 6)) {
        let bounds = [(0.0, 1.0), (-2.0, 3.0), (5.0, 5.5), (0.0, 12.0)];
        let mut pso = Pso::new(PsoConfig::default(), &bounds, 8, ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let mut ga = Ga::new(GaConfig::default(), &bounds, 8, ChaCha8Rng::seed_from_u64(seed)).unwrap();
        for g in fit.chunks(8) {
            pso.step(g).unwrap();
            ga.step(g).unwrap();
            for x in pso.population().iter().chain(ga.population()) {
                prop_assert!(x.iter().zip(&bounds).all(|(v, (lo, hi))| lo <= v && v <= hi));
            }
        }
    }

    #[test]
    fn candidate_seed_is_stable(session in any::<u64>(), v in vec(-5.0f32..5.0, 1..20)) {
        prop_assert_eq!(candidate_seed(session, &v), candidate_seed(session, &v));
    }
}

#[test]
fn dii_magic_is_pinned() {
    assert_eq!(DII_MAGIC, b"DVGDIIV1");
}
