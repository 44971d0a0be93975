//! The three stages driven from an [`ExperimentConfig`]: data loading,
//! stage-1 training, codec training and task fine-tuning.

use std::io::Write;
use std::path::Path;

use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ExperimentConfig;
use crate::contrastive::{train_stage1, OmniEncoder, Stage1Trainer, StepMetrics};
use crate::data::{generate_shapes_cached, load_dataset, read_rgb, DatasetManifest, Normalization, Split};
use crate::error::{Error, Result};
use crate::feature::FeatureMap;
use crate::feature_codec::{train_stage2, CodecConfig, FeatureCodec, Stage2Loss, Stage2Trainer};
use crate::nn::checkpoint::Checkpoint;
use crate::tasks::{finetune, FinetuneLog, FrozenFrontEnd, TaskModel, TaskSample, TaskSpec};

/// Raw images for stage 1 plus labeled, normalized train and validation samples.
#[derive(Clone, Debug)]
pub struct Dataset {
    /// `[3, H, W]` intensities in 0..1, unpadded.
    pub raw: Vec<Array3<f64>>,
    pub train: Vec<TaskSample>,
    pub val: Vec<TaskSample>,
}

pub fn load_data(cfg: &ExperimentConfig) -> Result<Dataset> {
    let norm = Normalization::default();
    let d = &cfg.data;
    match (&d.train_manifest, &d.val_manifest) {
        (None, None) => {
            let cache = cfg.cache_dir();
            let dims = (d.shapes_size, d.shapes_size);
            let train = generate_shapes_cached(cache.as_deref(), d.shapes_train, dims, d.shapes_classes, d.shapes_seed)?;
            let val = generate_shapes_cached(cache.as_deref(), d.shapes_val, dims, d.shapes_classes, d.shapes_seed + 1)?;
            Ok(Dataset {
                raw: train.iter().map(|s| s.image.clone()).collect(),
                train: crate::tasks::samples_from_shapes(&train, &norm),
                val: crate::tasks::samples_from_shapes(&val, &norm),
            })
        }
        (Some(t), Some(v)) => {
            let tm = DatasetManifest::from_file(t, Split::Train, norm)?;
            let vm = DatasetManifest::from_file(v, Split::Val, norm)?;
            crate::data::check_disjoint(&tm, &vm)?;
            let raw = tm.items.iter().map(|(p, _)| read_rgb(p)).collect::<Result<Vec<_>>>()?;
            Ok(Dataset {
                raw,
                train: manifest_samples(&tm, cfg.seed)?,
                val: manifest_samples(&vm, cfg.seed)?,
            })
        }
        _ => Err(Error::Config("set both data.train_manifest and data.val_manifest, or neither".into())),
    }
}

fn manifest_samples(m: &DatasetManifest, seed: u64) -> Result<Vec<TaskSample>> {
    load_dataset(m, seed)?
        .into_iter()
        .map(|s| {
            let (_, ph, pw) = s.image.dim();
            let (h, w) = s.original_dims;
            let mask = s.mask.map(|v| {
                let m = Array2::from_shape_vec((h, w), v).expect("mask size checked at load");
                Array2::from_shape_fn((ph, pw), |(y, x)| m[[y.min(h - 1), x.min(w - 1)]])
            });
            Ok(TaskSample {
                image: s.image,
                original_dims: s.original_dims,
                label: s.label.unwrap_or(0),
                mask,
            })
        })
        .collect()
}

/// Stage 1 from random weights, or from `stage1.init_checkpoint` when set.
pub fn run_stage1(cfg: &ExperimentConfig, images: &[Array3<f64>], log: Option<&mut dyn Write>) -> Result<(OmniEncoder, Vec<StepMetrics>)> {
    let model = match &cfg.stage1.init_checkpoint {
        Some(p) => {
            let (mcfg, enc) = crate::artifacts::get_encoder(&Checkpoint::load(Path::new(p))?)?;
            if mcfg != cfg.model {
                return Err(Error::Config(format!("{p} was trained with a different [model] section")));
            }
            enc
        }
        None => OmniEncoder::new(&cfg.model, &mut ChaCha8Rng::seed_from_u64(cfg.seed)),
    };
    let mut trainer = Stage1Trainer::new(model, cfg.stage1.clone(), cfg.seed)?;
    let metrics = train_stage1(&mut trainer, images, &Normalization::default(), cfg.seed, log)?;
    Ok((trainer.query, metrics))
}

/// Codec config with its input width taken from the encoder.
pub fn codec_config(cfg: &ExperimentConfig, enc: &OmniEncoder) -> CodecConfig {
    CodecConfig {
        feature_channels: enc.ifmodule.in_channels(),
        ..cfg.codec.clone()
    }
}

pub fn features(frontend: &FrozenFrontEnd, samples: &[TaskSample]) -> Result<Vec<FeatureMap>> {
    let images: Vec<_> = samples.iter().map(|s| s.image.clone()).collect();
    frontend.features_of(&images, 32)
}

/// Stage 2 on the features of `samples`; head, IF and tail stay fixed.
pub fn run_stage2(
    cfg: &ExperimentConfig,
    enc: &OmniEncoder,
    samples: &[TaskSample],
    log: Option<&mut dyn Write>,
) -> Result<(FeatureCodec, Vec<Stage2Loss>)> {
    let frontend = FrozenFrontEnd::from_encoder(enc);
    let feats = features(&frontend, samples)?;
    let codec = FeatureCodec::new(&codec_config(cfg, enc), &mut ChaCha8Rng::seed_from_u64(cfg.seed));
    let mut trainer = Stage2Trainer::new(codec, enc.tail.clone(), cfg.stage2.clone())?;
    let every = (cfg.stage2.iterations / 100).max(1);
    let records = train_stage2(&mut trainer, &feats, cfg.seed, every, log)?;
    frontend.verify()?;
    Ok((trainer.codec, records))
}

pub fn task_spec(cfg: &ExperimentConfig) -> TaskSpec {
    TaskSpec {
        kind: cfg.task.kind,
        classes: cfg.task_classes(),
    }
}

/// Stage 3: tail (from stage 1) and task head trained on uncompressed features.
pub fn run_finetune(cfg: &ExperimentConfig, enc: &OmniEncoder, samples: &[TaskSample]) -> Result<(TaskModel, Vec<FinetuneLog>)> {
    let frontend = FrozenFrontEnd::from_encoder(enc);
    let mut model = TaskModel::new(task_spec(cfg), enc.tail.clone(), &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
    let log = finetune(&mut model, &frontend, samples, &cfg.finetune, cfg.seed)?;
    Ok((model, log))
}

/// Features stored in the checkpoint container as one tensor.
pub fn save_features(path: &Path, f: &FeatureMap) -> Result<()> {
    let mut ck = Checkpoint {
        manifest: serde_json::json!({ "downsample": f.downsample }),
        ..Default::default()
    };
    ck.tensors.insert("features".into(), f.data.clone().into_dyn());
    ck.save(path)
}

pub fn load_features(path: &Path) -> Result<FeatureMap> {
    let ck = Checkpoint::load(path)?;
    let t = ck
        .tensors
        .get("features")
        .ok_or_else(|| Error::Checkpoint(format!("{} holds no features", path.display())))?;
    let data = t
        .clone()
        .into_dimensionality()
        .map_err(|e| Error::Checkpoint(format!("features: {e}")))?;
    let ds = ck.manifest["downsample"].as_u64().unwrap_or(crate::backbone::HEAD_DOWNSAMPLE as u64) as usize;
    Ok(FeatureMap::new(data, ds))
}
