//! Stage 3 for the dense task: tail plus per-stage lateral head trained on
//! uncompressed features of shape scenes, scored by mean IoU.
//!
//! cargo run --release --example toy_segmentation -- [stage1_steps] [finetune_steps]

use omni_icm::pipeline;
use omni_icm::presets;
use omni_icm::tasks::{evaluate, FrozenFrontEnd, IdentityChannel, TaskKind};

fn main() -> anyhow::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let mut cfg = presets::toy_experiment();
    cfg.stage1.max_steps = args.get(1).map(|s| s.parse()).transpose()?.unwrap_or(200);
    cfg.finetune.steps = args.get(2).map(|s| s.parse()).transpose()?.unwrap_or(300);
    cfg.task.kind = TaskKind::ToySegmentation;
    cfg.data.shapes_train = 1024;
    cfg.data.shapes_val = 128;

    let data = pipeline::load_data(&cfg)?;
    let (enc, _) = pipeline::run_stage1(&cfg, &data.raw, None)?;
    let frontend = FrozenFrontEnd::from_encoder(&enc);
    let before = frontend.digest();
    let (model, log) = pipeline::run_finetune(&cfg, &enc, &data.train)?;
    for l in log.iter().step_by((log.len() / 5).max(1)) {
        println!("step {:>5} loss {:.4}", l.step, l.loss);
    }
    assert_eq!(frontend.digest(), before, "head and filter stay frozen");
    let (miou, _) = evaluate(&model, &frontend, &IdentityChannel, &data.val)?;
    println!("{} classes, validation mean IoU {miou:.3}", model.spec.classes);
    Ok(())
}
