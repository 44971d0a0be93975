//! Stage 2 on toy features: a short stage-1 run supplies the front end, then
//! the feature codec is trained and used to compress held-out features.
//!
//! cargo run --release --example feature_compression -- [stage1_steps] [stage2_iters] [lambda_coef]

use omni_icm::coder::ReferenceCoder;
use omni_icm::contrastive::{train_stage1, OmniEncoder, Stage1Trainer};
use omni_icm::data::{generate_shapes, Normalization};
use omni_icm::entropy_models::QuantMode;
use omni_icm::feature_codec::{train_stage2, FeatureCodec, Stage2Trainer};
use omni_icm::presets;
use omni_icm::FeatureMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> anyhow::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let s1: usize = args.get(1).map(|s| s.parse()).transpose()?.unwrap_or(200);
    let s2: usize = args.get(2).map(|s| s.parse()).transpose()?.unwrap_or(1000);
    let coef: f64 = args.get(3).map(|s| s.parse()).transpose()?.unwrap_or(1.0);
    let norm = Normalization::default();

    let small = presets::TOY_SIZE;
    let images: Vec<_> = generate_shapes(presets::TOY_IMAGES, (small, small), presets::TOY_CLASSES, presets::TOY_DATA_SEED)?
        .into_iter()
        .map(|s| s.image)
        .collect();
    let model = OmniEncoder::new(&presets::toy_model(), &mut ChaCha8Rng::seed_from_u64(0));
    let mut stage1 = Stage1Trainer::new(model, presets::toy_stage1(0.1, s1), 0)?;
    train_stage1(&mut stage1, &images, &norm, 0, None)?;
    let model = stage1.query;

    let big = presets::TOY_CODEC_SIZE;
    let scenes = generate_shapes(576, (big, big), presets::TOY_CLASSES, 2)?;
    let normalized: Vec<_> = scenes.iter().map(|s| norm.apply_unit(&s.image)).collect();
    let feats = model.features_of(&normalized, 32)?;
    let (train, test) = feats.split_at(512);
    println!("features {:?}", train[0].dims());

    let codec = FeatureCodec::new(&presets::toy_codec(train[0].channels()), &mut ChaCha8Rng::seed_from_u64(1));
    let mut trainer = Stage2Trainer::new(codec, model.tail.clone(), presets::toy_stage2(coef, s2))?;
    let t0 = std::time::Instant::now();
    let log = train_stage2(&mut trainer, train, 3, (s2 / 10).max(1), None)?;
    for r in &log {
        println!(
            "step {:>6} loss {:>10.3} rate {:.4} mse {:.5} stage {:.3} bits/item {:.1}",
            r.step, r.total, r.rate, r.mse, r.stage_term, r.bits_per_item
        );
    }
    println!("{:.1} ms/step", t0.elapsed().as_secs_f64() * 1e3 / s2.max(1) as f64);

    let codec = &trainer.codec;
    let (mut est, mut actual, mut rel, mut mse) = (0.0, 0.0, 0.0, 0.0);
    for f in test {
        let out = codec.forward(&f.to_batch(), QuantMode::Round, &mut rand::rng())?;
        let stream = codec.compress(f, (big, big), &ReferenceCoder)?;
        let back: FeatureMap = codec.decompress(&stream, &ReferenceCoder)?;
        assert_eq!(back.data, out.f_hat.index_axis(ndarray::Axis(0), 0));
        mse += (&back.data - &f.data).mapv(|v| v * v).mean().unwrap();
        let e = out.total_bits()[0];
        let a = 8.0 * stream.payload_len() as f64;
        est += e;
        actual += a;
        rel += (e - a).abs() / a;
    }
    let n = test.len() as f64;
    println!(
        "held-out: estimated {:.1} bits, coded {:.1} bits, mean relative gap {:.2}%, {:.4} bpp, feature mse {:.4}",
        est / n,
        actual / n,
        100.0 * rel / n,
        actual / n / (big * big) as f64,
        mse / n
    );
    Ok(())
}
