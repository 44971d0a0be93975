//! How much pixel detail survives the information filter: pixel decoders
//! trained on features before and after it, compared on held-out scenes.
//!
//! cargo run --release --example probe_reconstruction -- [stage1_steps] [probe_steps] [out_dir]

use omni_icm::contrastive::{train_stage1, OmniEncoder, Stage1Trainer};
use omni_icm::data::{generate_shapes, write_rgb, Normalization};
use omni_icm::evalkit::probe::{probe_quality, train_probe_decoder, FeatureSource, ProbeConfig};
use omni_icm::presets;
use omni_icm::tasks::FrozenFrontEnd;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> anyhow::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let s1: usize = args.get(1).map(|s| s.parse()).transpose()?.unwrap_or(300);
    let steps: usize = args.get(2).map(|s| s.parse()).transpose()?.unwrap_or(300);
    let out = std::path::PathBuf::from(args.get(3).cloned().unwrap_or_else(|| "target/probe_reconstruction".into()));
    std::fs::create_dir_all(&out)?;
    let norm = Normalization::default();

    let size = presets::TOY_SIZE;
    let images: Vec<_> = generate_shapes(presets::TOY_IMAGES, (size, size), presets::TOY_CLASSES, presets::TOY_DATA_SEED)?
        .into_iter()
        .map(|s| s.image)
        .collect();
    let model = OmniEncoder::new(&presets::toy_model(), &mut ChaCha8Rng::seed_from_u64(0));
    let mut trainer = Stage1Trainer::new(model, presets::toy_stage1(0.1, s1), 0)?;
    train_stage1(&mut trainer, &images, &norm, 0, None)?;
    let frontend = FrozenFrontEnd::from_encoder(&trainer.query);

    let held_out: Vec<_> = generate_shapes(4, (64, 64), presets::TOY_CLASSES, 99)?.into_iter().map(|s| s.image).collect();
    let cfg = ProbeConfig {
        steps,
        lr: 1e-3,
        ..Default::default()
    };
    for source in [FeatureSource::BeforeIf, FeatureSource::AfterIf] {
        let (dec, losses) = train_probe_decoder(&frontend, source, &images[..1024], &norm, &cfg, 0)?;
        let q = probe_quality(&dec, &frontend, &held_out, &norm)?;
        let psnr = q.iter().map(|(_, q)| q.psnr.db).sum::<f64>() / q.len() as f64;
        println!(
            "{source:?}: final train loss {:.5}, held-out PSNR {psnr:.2} dB",
            losses.last().copied().unwrap_or(f64::NAN)
        );
        for (i, (img, _)) in q.iter().enumerate() {
            write_rgb(&out.join(format!("{source:?}-{i}.png")), img)?;
        }
    }
    for (i, img) in held_out.iter().enumerate() {
        write_rgb(&out.join(format!("original-{i}.png")), img)?;
    }
    println!("reconstructions written to {}", out.display());
    Ok(())
}
