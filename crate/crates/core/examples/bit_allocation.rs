//! Where the codec spends its bits: a short stage-2 run, then per-position
//! bit maps of a few scenes written as PNGs.
//!
//! cargo run --release --example bit_allocation -- [stage2_iters] [out_dir]

use omni_icm::contrastive::OmniEncoder;
use omni_icm::data::{generate_shapes, write_rgb, Normalization};
use omni_icm::entropy_models::QuantMode;
use omni_icm::evalkit::{bit_allocation_map, save_bit_map_png};
use omni_icm::feature_codec::{train_stage2, FeatureCodec, Stage2Trainer};
use omni_icm::presets;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> anyhow::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let iters: usize = args.get(1).map(|s| s.parse()).transpose()?.unwrap_or(300);
    let out = std::path::PathBuf::from(args.get(2).cloned().unwrap_or_else(|| "target/bit_allocation".into()));
    std::fs::create_dir_all(&out)?;

    let norm = Normalization::default();
    let size = presets::TOY_CODEC_SIZE;
    let scenes = generate_shapes(132, (size, size), presets::TOY_CLASSES, 5)?;
    let enc = OmniEncoder::new(&presets::toy_model(), &mut ChaCha8Rng::seed_from_u64(0));
    let normalized: Vec<_> = scenes.iter().map(|s| norm.apply_unit(&s.image)).collect();
    let feats = enc.features_of(&normalized, 32)?;

    let codec = FeatureCodec::new(&presets::toy_codec(feats[0].channels()), &mut ChaCha8Rng::seed_from_u64(1));
    let mut trainer = Stage2Trainer::new(codec, enc.tail.clone(), presets::toy_stage2(1.0, iters))?;
    train_stage2(&mut trainer, &feats[..128], 0, iters.max(1), None)?;

    for (i, (f, scene)) in feats[128..].iter().zip(&scenes[128..]).enumerate() {
        let o = trainer.codec.forward(&f.to_batch(), QuantMode::Round, &mut rand::rng())?;
        let bits = o.y_element_bits.index_axis(ndarray::Axis(0), 0).to_owned();
        let map = bit_allocation_map(&bits);
        save_bit_map_png(&map, 16, &out.join(format!("bits-{i}.png")))?;
        write_rgb(&out.join(format!("scene-{i}.png")), &scene.image)?;
        // the map sums to the latent's estimated bits
        println!("scene {i}: {:.1} latent bits, map {:?}, max {:.2} bits at one position", map.sum(), map.dim(), map.fold(0.0f64, |a, &b| a.max(b)));
    }
    println!("maps written to {}", out.display());
    Ok(())
}
