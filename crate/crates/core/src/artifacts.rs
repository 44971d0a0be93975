//! Trained networks stored in checkpoint sections, each with its
//! architecture config and digest in the manifest so a file can be rebuilt
//! and checked without outside information.

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::json;

use crate::contrastive::{ModelConfig, OmniEncoder};
use crate::error::{Error, Result};
use crate::feature_codec::{CodecConfig, FeatureCodec};
use crate::nn::checkpoint::Checkpoint;
use crate::nn::Module;
use crate::tasks::{TaskModel, TaskSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const ENCODER: &str = "encoder";
pub const CODEC: &str = "codec";
pub const TASK: &str = "task";

fn put<C: Serialize>(ckpt: &mut Checkpoint, section: &str, config: &C, module: &dyn Module) {
    if !ckpt.manifest.is_object() {
        ckpt.manifest = json!({});
    }
    ckpt.manifest[section] = json!({
        "config": config,
        "digest": format!("{:016x}", module.state_digest().0),
    });
    ckpt.tensors.retain(|k, _| !k.starts_with(&format!("{section}.")));
    module.state_dict(section, &mut ckpt.tensors);
}

fn config_of<C: DeserializeOwned>(ckpt: &Checkpoint, section: &str) -> Result<C> {
    let entry = ckpt
        .manifest
        .get(section)
        .ok_or_else(|| Error::Checkpoint(format!("no `{section}` section")))?;
    serde_json::from_value(entry["config"].clone()).map_err(|e| Error::Checkpoint(format!("{section} config: {e}")))
}

fn fill(ckpt: &Checkpoint, section: &str, module: &mut dyn Module) -> Result<()> {
    module.load_state_dict(section, &ckpt.tensors)?;
    let want = ckpt.manifest[section]["digest"].as_str().unwrap_or_default();
    let got = format!("{:016x}", module.state_digest().0);
    if want != got {
        return Err(Error::Checkpoint(format!("{section} digest {got} does not match manifest {want}")));
    }
    Ok(())
}

pub fn put_encoder(ckpt: &mut Checkpoint, cfg: &ModelConfig, enc: &OmniEncoder) {
    put(ckpt, ENCODER, cfg, enc);
}

pub fn get_encoder(ckpt: &Checkpoint) -> Result<(ModelConfig, OmniEncoder)> {
    let cfg: ModelConfig = config_of(ckpt, ENCODER)?;
    let mut enc = OmniEncoder::new(&cfg, &mut ChaCha8Rng::seed_from_u64(0));
    fill(ckpt, ENCODER, &mut enc)?;
    Ok((cfg, enc))
}

pub fn put_codec(ckpt: &mut Checkpoint, codec: &FeatureCodec) {
    put(ckpt, CODEC, codec.config(), codec);
}

pub fn get_codec(ckpt: &Checkpoint) -> Result<FeatureCodec> {
    let cfg: CodecConfig = config_of(ckpt, CODEC)?;
    let mut codec = FeatureCodec::new(&cfg, &mut ChaCha8Rng::seed_from_u64(0));
    fill(ckpt, CODEC, &mut codec)?;
    Ok(codec)
}

/// Stores the task model; its tail architecture comes from `model`.
pub fn put_task(ckpt: &mut Checkpoint, model_cfg: &ModelConfig, task: &TaskModel) {
    put(ckpt, TASK, &json!({ "spec": task.spec, "model": model_cfg }), task);
}

pub fn get_task(ckpt: &Checkpoint) -> Result<TaskModel> {
    let v: serde_json::Value = config_of(ckpt, TASK)?;
    let spec: TaskSpec = serde_json::from_value(v["spec"].clone()).map_err(|e| Error::Checkpoint(format!("task spec: {e}")))?;
    let model_cfg: ModelConfig =
        serde_json::from_value(v["model"].clone()).map_err(|e| Error::Checkpoint(format!("task model: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let tail = OmniEncoder::new(&model_cfg, &mut rng).tail;
    let mut task = TaskModel::new(spec, tail, &mut rng)?;
    fill(ckpt, TASK, &mut task)?;
    Ok(task)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        let mut c = ModelConfig::default();
        c.backbone.width = 4;
        c.backbone.blocks = [1, 1, 1, 1];
        c.backbone.proj_hidden = 8;
        c.backbone.embed_dim = 4;
        c.ifmodule.hidden = 4;
        c.ifmodule.latent = 3;
        c.ifmodule.res_blocks = 1;
        c
    }

    #[test]
    fn sections_round_trip_through_bytes() {
        let cfg = small();
        let enc = OmniEncoder::new(&cfg, &mut ChaCha8Rng::seed_from_u64(3));
        let codec_cfg = CodecConfig {
            feature_channels: 4,
            hidden: 4,
            latent: 3,
            hyper: 2,
            res_blocks: 1,
            mixtures: 2,
            ..Default::default()
        };
        let codec = FeatureCodec::new(&codec_cfg, &mut ChaCha8Rng::seed_from_u64(4));
        let task = TaskModel::new(TaskSpec::segmentation(3), enc.tail.clone(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();

        let mut ckpt = Checkpoint::default();
        put_encoder(&mut ckpt, &cfg, &enc);
        put_codec(&mut ckpt, &codec);
        put_task(&mut ckpt, &cfg, &task);
        let back = Checkpoint::from_bytes(&ckpt.to_bytes()).unwrap();

        let (c2, e2) = get_encoder(&back).unwrap();
        assert_eq!(c2, cfg);
        assert_eq!(e2.state_digest(), enc.state_digest());
        assert_eq!(get_codec(&back).unwrap().model_id(), codec.model_id());
        let t2 = get_task(&back).unwrap();
        assert_eq!(t2.spec, task.spec);
        assert_eq!(t2.state_digest(), task.state_digest());
    }

    #[test]
    fn tampered_tensors_fail_the_digest() {
        let cfg = small();
        let enc = OmniEncoder::new(&cfg, &mut ChaCha8Rng::seed_from_u64(3));
        let mut ckpt = Checkpoint::default();
        put_encoder(&mut ckpt, &cfg, &enc);
        let first = ckpt.tensors.keys().next().unwrap().clone();
        ckpt.tensors.get_mut(&first).unwrap().mapv_inplace(|v| v + 1.0);
        assert!(matches!(get_encoder(&ckpt), Err(Error::Checkpoint(_))));
        assert!(get_codec(&ckpt).is_err());
    }
}
