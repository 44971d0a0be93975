//! Property tests for the invariants the modules promise.

use ndarray::{Array3, Array4};
use omni_icm::backbone::{BackboneConfig, BackboneHead, BackboneTail};
use omni_icm::coder::{EntropyCoder, ReferenceCoder, SymbolPlan};
use omni_icm::data::{pad_edge, prepare, Normalization};
use omni_icm::entropy_models::{gmm_likelihood, tables_from_blob, tables_to_blob, CdfTable, FactorizedDensity, GmmParams, LIKELIHOOD_FLOOR};
use omni_icm::evalkit::{bd_rate, bpp, psnr, RdCurve, RdPoint};
use omni_icm::feature_codec::{CodecConfig, FeatureCodec};
use omni_icm::ifmodule::{IfConfig, IfModule};
use omni_icm::nn::Module;
use omni_icm::FeatureMap;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_backbone(width: usize) -> BackboneConfig {
    BackboneConfig {
        width,
        blocks: [1, 1, 1, 1],
        proj_hidden: 8,
        embed_dim: 4,
    }
}

fn random_image(c: usize, h: usize, w: usize, seed: u64) -> Array3<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array3::from_shape_fn((c, h, w), |_| rng.random_range(0.0..1.0))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn backbone_follows_the_stride_ladder(hb in 1usize..4, wb in 1usize..4, width in 2usize..5, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let head = BackboneHead::new(&small_backbone(width), &mut rng);
        let tail = BackboneTail::new(&small_backbone(width), &mut rng);
        let (h, w) = (32 * hb, 32 * wb);
        let f = head.forward(&FeatureMap::new(random_image(3, h, w, seed), 1)).unwrap();
        prop_assert_eq!(f.dims(), (width, h / 4, w / 4));
        let out = tail.forward(&f.to_batch()).unwrap();
        let dims: Vec<_> = out.stage_feats.iter().map(|a| (a.dim().2, a.dim().3)).collect();
        prop_assert_eq!(dims, vec![(h / 8, w / 8), (h / 16, w / 16), (h / 32, w / 32)]);
    }

    #[test]
    fn eval_forward_is_deterministic_and_digests_survive_save_load(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let head = BackboneHead::new(&small_backbone(3), &mut rng);
        let x = FeatureMap::new(random_image(3, 32, 32, seed + 1), 1);
        prop_assert_eq!(head.forward(&x).unwrap(), head.forward(&x).unwrap());

        let mut dict = Default::default();
        head.state_dict("head", &mut dict);
        let mut other = BackboneHead::new(&small_backbone(3), &mut ChaCha8Rng::seed_from_u64(seed + 7));
        other.load_state_dict("head", &dict).unwrap();
        prop_assert_eq!(other.state_digest(), head.state_digest());
        prop_assert_eq!(other.forward(&x).unwrap(), head.forward(&x).unwrap());
    }

    #[test]
    fn filter_round_trip_keeps_shape(hb in 1usize..4, wb in 1usize..4, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = IfConfig { hidden: 4, latent: 3, res_blocks: 1, ..Default::default() };
        let m = IfModule::new(5, &cfg, &mut rng);
        let h = Array4::from_shape_fn((1, 5, 8 * hb, 8 * wb), |_| rng.random_range(-1.0..1.0));
        prop_assert_eq!(m.decode(&m.encode(&h).unwrap()).unwrap().dim(), h.dim());
    }

    #[test]
    fn factorized_likelihoods_are_floored_probabilities(values in prop::collection::vec(-200.0f64..200.0, 1..40), seed in 0u64..100) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = FactorizedDensity::new(1, &[3, 3, 3], 10.0, &mut rng);
        let x = Array4::from_shape_vec((1, 1, 1, values.len()), values).unwrap();
        let p = m.likelihoods(&x);
        prop_assert!(p.iter().all(|v| (LIKELIHOOD_FLOOR..=1.0).contains(v)));
        prop_assert!(m.bits(&x).is_finite());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn mixture_likelihood_is_translation_consistent(
        y in -20.0f64..20.0,
        shift in -50.0f64..50.0,
        integer_shift in -50i32..50,
        means in prop::collection::vec(-5.0f64..5.0, 3),
        scales in prop::collection::vec(0.11f64..6.0, 3),
        raw_w in prop::collection::vec(0.05f64..1.0, 3),
    ) {
        let total: f64 = raw_w.iter().sum();
        let w: Vec<f64> = raw_w.iter().map(|v| v / total).collect();
        let base = gmm_likelihood(y, &GmmParams::new(w.clone(), means.clone(), scales.clone()).unwrap());
        for c in [shift, integer_shift as f64] {
            let moved = GmmParams::new(w.clone(), means.iter().map(|m| m + c).collect(), scales.clone()).unwrap();
            prop_assert!((gmm_likelihood(y + c, &moved) - base).abs() <= 1e-9);
        }
    }

    #[test]
    fn cdf_tables_serialize_bit_exactly(
        pmfs in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 1..50), 0..6),
        offset in -100i32..100,
        precision in 8u8..=16,
    ) {
        let tables: Vec<CdfTable> = pmfs
            .iter()
            .filter(|p| p.len() < (1 << precision))
            .map(|p| CdfTable::from_pmf(offset, p, precision).unwrap())
            .collect();
        for t in &tables {
            prop_assert_eq!(&CdfTable::from_bytes(&t.to_bytes()).unwrap(), t);
        }
        prop_assert_eq!(tables_from_blob(&tables_to_blob(&tables)).unwrap(), tables);
    }

    #[test]
    fn coder_round_trips_any_in_range_plan(
        pmf in prop::collection::vec(0.0f64..1.0, 1..40),
        picks in prop::collection::vec(0usize..1000, 0..500),
    ) {
        let table = CdfTable::from_pmf(-7, &pmf, 16).unwrap();
        let n = table.num_symbols();
        let plan = SymbolPlan::new(picks.iter().map(|p| -7 + (p % n) as i32).collect(), vec![0; picks.len()]).unwrap();
        let bytes = ReferenceCoder.encode(&plan, std::slice::from_ref(&table)).unwrap();
        prop_assert_eq!(ReferenceCoder.decode(&bytes, &plan.table_indexes, &[table]).unwrap(), plan.symbols);
    }

    #[test]
    fn psnr_of_integer_offsets_is_exact(c in 1i32..200, negative in any::<bool>(), seed in 0u64..100) {
        let x = random_image(3, 8, 8, seed).mapv(|v| (v * 255.0).round());
        let offset = if negative { -c } else { c } as f64;
        let p = psnr(&x, &x.mapv(|v| v + offset), 255.0).unwrap();
        prop_assert_eq!(p.db, 20.0 * (255.0 / c as f64).log10());
    }
}

/// Monotone synthetic RD curve: metric rising like a log of the rate.
fn synthetic(scale: f64, gain: f64, offset: f64) -> RdCurve {
    let pts = [0.1, 0.2, 0.4, 0.8]
        .iter()
        .map(|&r: &f64| RdPoint {
            bpp: r * scale,
            metric: offset + gain * (r * 10.0).ln(),
        })
        .collect();
    RdCurve::new("s", pts).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn bd_rate_is_antisymmetric(scale in 0.6f64..1.6, gain in 2.0f64..6.0, dg in -0.3f64..0.3, offset in 25.0f64..35.0) {
        let a = synthetic(1.0, gain, offset);
        let b = synthetic(scale, gain + dg, offset);
        let ab = bd_rate(&a, &b).unwrap();
        let ba = bd_rate(&b, &a).unwrap();
        let implied = -ba / (1.0 + ba / 100.0);
        prop_assert!((ab - implied).abs() <= 0.5, "{} vs {}", ab, implied);
    }

    #[test]
    fn bd_rate_ignores_a_common_rate_scale(scale in 0.6f64..1.6, k in 0.01f64..100.0, gain in 2.0f64..6.0) {
        let a = synthetic(1.0, gain, 30.0);
        let b = synthetic(scale, gain * 1.1, 30.0);
        let scaled = |c: &RdCurve| RdCurve::new("k", c.points.iter().map(|p| RdPoint { bpp: p.bpp * k, metric: p.metric }).collect()).unwrap();
        let d = bd_rate(&a, &b).unwrap() - bd_rate(&scaled(&a), &scaled(&b)).unwrap();
        prop_assert!(d.abs() <= 1e-9, "{}", d);
    }
}

fn tiny_codec() -> FeatureCodec {
    let cfg = CodecConfig {
        feature_channels: 3,
        hidden: 4,
        latent: 3,
        hyper: 2,
        res_blocks: 1,
        mixtures: 2,
        ..Default::default()
    };
    FeatureCodec::new(&cfg, &mut ChaCha8Rng::seed_from_u64(3))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn padding_never_enters_bpp(h in 1usize..80, w in 1usize..80, seed in 0u64..100) {
        let (padded, dims) = prepare(&random_image(3, h, w, seed), &Normalization::default());
        prop_assert_eq!(dims, (h, w));
        prop_assert_eq!(padded.dim(), (3, h.div_ceil(32) * 32, w.div_ceil(32) * 32));
        prop_assert_eq!(pad_edge(&padded, 32), padded.clone());

        // features of the padded image, coded against the original size
        let (fh, fw) = (padded.dim().1 / 4, padded.dim().2 / 4);
        let f = FeatureMap::new(random_image(3, fh, fw, seed + 1).mapv(|v| 8.0 * v - 4.0), 4);
        let codec = tiny_codec();
        let stream = codec.compress(&f, (h, w), &ReferenceCoder).unwrap();
        prop_assert_eq!(stream.bpp(), bpp(stream.payload_len(), h, w));
        let back = codec.decompress(&stream, &ReferenceCoder).unwrap();
        prop_assert_eq!(back.dims(), f.dims());
        prop_assert_eq!(back, codec.decompress(&stream, &ReferenceCoder).unwrap());
    }
}
