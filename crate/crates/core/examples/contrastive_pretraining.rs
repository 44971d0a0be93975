//! Stage-1 training on synthetic shape scenes, printing windowed losses.
//!
//! cargo run --release --example contrastive_pretraining -- [steps] [alpha] [metrics.jsonl]

use omni_icm::contrastive::{train_stage1, OmniEncoder, Stage1Trainer};
use omni_icm::data::{generate_shapes, Normalization};
use omni_icm::presets;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> anyhow::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).map(|s| s.parse()).transpose()?.unwrap_or(300);
    let alpha: f64 = args.get(2).map(|s| s.parse()).transpose()?.unwrap_or(0.1);
    let mut log = args.get(3).map(std::fs::File::create).transpose()?;

    let size = presets::TOY_SIZE;
    let images: Vec<_> = generate_shapes(presets::TOY_IMAGES, (size, size), presets::TOY_CLASSES, presets::TOY_DATA_SEED)?
        .into_iter()
        .map(|s| s.image)
        .collect();
    let model = OmniEncoder::new(&presets::toy_model(), &mut ChaCha8Rng::seed_from_u64(0));
    let mut trainer = Stage1Trainer::new(model, presets::toy_stage1(alpha, steps), 0)?;
    let t0 = std::time::Instant::now();
    let sink = log.as_mut().map(|f| f as &mut dyn std::io::Write);
    let metrics = train_stage1(&mut trainer, &images, &Normalization::default(), 0, sink)?;

    let window = 50.min(metrics.len());
    for chunk in metrics.chunks(window) {
        let n = chunk.len() as f64;
        let mean = |f: fn(&omni_icm::contrastive::StepMetrics) -> f64| chunk.iter().map(f).sum::<f64>() / n;
        println!(
            "steps {:>5}..{:<5} L_q {:.4} L_e {:.3} pos {:.3} neg {:.3}",
            chunk[0].step,
            chunk[chunk.len() - 1].step,
            mean(|m| m.l_q),
            mean(|m| m.l_e),
            mean(|m| m.pos_sim),
            mean(|m| m.neg_sim),
        );
    }
    println!("{:.1} ms/step", t0.elapsed().as_secs_f64() * 1e3 / metrics.len().max(1) as f64);
    Ok(())
}
