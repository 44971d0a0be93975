//! All three stages driven from the toy config, then one scene compressed
//! to a file, decoded, and the task evaluated with and without the codec.
//!
//! cargo run --release --example end_to_end -- [stage1_steps] [stage2_iters] [finetune_steps]

use omni_icm::coder::coder_for;
use omni_icm::feature_codec::Bitstream;
use omni_icm::pipeline;
use omni_icm::presets;
use omni_icm::tasks::{evaluate, CodecChannel, FrozenFrontEnd, IdentityChannel};

fn main() -> anyhow::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let arg = |i: usize, d: usize| -> anyhow::Result<usize> { Ok(args.get(i).map(|s| s.parse()).transpose()?.unwrap_or(d)) };
    let mut cfg = presets::toy_experiment();
    cfg.stage1.max_steps = arg(1, 200)?;
    cfg.stage2.iterations = arg(2, 500)?;
    cfg.finetune.steps = arg(3, 200)?;
    cfg.data.shapes_train = 1024;
    cfg.data.shapes_val = 128;

    let data = pipeline::load_data(&cfg)?;
    let (enc, s1) = pipeline::run_stage1(&cfg, &data.raw, None)?;
    let last = s1.last().expect("at least one step");
    println!("stage 1: {} steps, L_q {:.3}, L_e {:.3}", s1.len(), last.l_q, last.l_e);

    let (codec, s2) = pipeline::run_stage2(&cfg, &enc, &data.train, None)?;
    let last = s2.last().expect("at least one record");
    println!("stage 2: {} iterations, rate {:.4} bits/element, mse {:.4}", last.step + 1, last.rate, last.mse);

    let (model, ft) = pipeline::run_finetune(&cfg, &enc, &data.train)?;
    println!("stage 3: {} steps, final loss {:.4}", ft.len(), ft.last().map(|l| l.loss).unwrap_or(f64::NAN));

    let frontend = FrozenFrontEnd::from_encoder(&enc);
    let coder = coder_for(cfg.coder)?;
    let sample = &data.val[0];
    let f = pipeline::features(&frontend, std::slice::from_ref(sample))?.remove(0);
    let path = std::env::temp_dir().join("omni_icm_scene.bin");
    std::fs::write(&path, codec.compress(&f, sample.original_dims, coder.as_ref())?.to_bytes())?;
    let stream = Bitstream::from_bytes(&std::fs::read(&path)?)?;
    let f_hat = codec.decompress(&stream, coder.as_ref())?;
    println!(
        "one scene: {} bytes on disk, {:.4} bpp, feature mse {:.4}",
        stream.len(),
        stream.bpp(),
        (&f_hat.data - &f.data).mapv(|v| v * v).mean().unwrap_or(0.0)
    );

    let (acc, _) = evaluate(&model, &frontend, &IdentityChannel, &data.val)?;
    let channel = CodecChannel {
        codec: &codec,
        coder: coder.as_ref(),
    };
    let (acc_c, bpp) = evaluate(&model, &frontend, &channel, &data.val)?;
    println!("{}: {acc:.3} on features, {acc_c:.3} through the codec at {bpp:.4} bpp", model.spec.name());
    Ok(())
}
