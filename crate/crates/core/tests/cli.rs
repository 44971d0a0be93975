//! The command-line binary driven end to end on a tiny config.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use omni_icm::pipeline::load_features;

const TINY: &str = r#"
seed = 3

[data]
shapes_train = 24
shapes_val = 8
shapes_size = 32
shapes_classes = 3

[model.backbone]
width = 4
blocks = [1, 1, 1, 1]
proj_hidden = 8
embed_dim = 6

[model.ifmodule]
hidden = 4
latent = 3
res_blocks = 1

[stage1]
batch = 4
queue_size = 16
max_steps = 3
warmup_epochs = 0
bn_groups = 1

[stage1.augment]
crop = 32

[codec]
hidden = 4
latent = 3
hyper = 2
res_blocks = 1
mixtures = 2

[stage2]
iterations = 3
batch = 2

[finetune]
steps = 2
batch = 4

[probe]
hidden = 4
res_blocks = 1
steps = 2
batch = 2
"#;

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let runs = dir.path().join("runs");
        let text = format!("{TINY}\n[paths]\nruns = {:?}\n", runs.to_str().unwrap());
        std::fs::write(dir.path().join("tiny.toml"), text).unwrap();
        Workspace { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn run(&self, args: &[&str]) -> Output {
        let config = self.path("tiny.toml");
        Command::new(env!("CARGO_BIN_EXE_omni-icm"))
            .args(args)
            .arg("--config")
            .arg(&config)
            .env("OMNI_ICM_CACHE", self.path("cache"))
            .env("RUST_LOG", "warn")
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn stages_compress_decompress_and_eval() {
    let ws = Workspace::new();
    let s1 = ws.path("s1.ckpt");
    let s2 = ws.path("s2.ckpt");
    let task = ws.path("task.ckpt");
    ws.ok(&["train-stage1", "--alpha", "0.1", "--out", s(&s1)]);
    ws.ok(&["train-stage2", "--checkpoint", s(&s1), "--lambda-coef", "1", "--out", s(&s2)]);
    ws.ok(&["finetune", "--checkpoint", s(&s2), "--task", "linear_probe", "--out", s(&task)]);

    // odd size, so both the image padding and the codec padding kick in
    let scene = omni_icm::data::generate_shapes(1, (64, 64), 3, 9).unwrap().remove(0);
    let img = ws.path("scene.png");
    omni_icm::data::write_rgb(&img, &scene.image.slice(ndarray::s![.., ..40, ..56]).to_owned()).unwrap();
    let bits = ws.path("scene.bin");
    let out = ws.ok(&["compress", "--checkpoint", s(&s2), "--input", s(&img), "--out", s(&bits)]);
    assert!(out.contains("bpp"), "{out}");

    // decoding twice gives the same features, and they match the codec's
    // own rounded reconstruction
    let (fa, fb) = (ws.path("a.feat"), ws.path("b.feat"));
    ws.ok(&["decompress", "--checkpoint", s(&s2), "--input", s(&bits), "--out", s(&fa)]);
    ws.ok(&["decompress", "--checkpoint", s(&s2), "--input", s(&bits), "--out", s(&fb)]);
    let (a, b) = (load_features(&fa).unwrap(), load_features(&fb).unwrap());
    assert_eq!(a, b);
    let ck = omni_icm::nn::checkpoint::Checkpoint::load(&s2).unwrap();
    let (_, enc) = omni_icm::artifacts::get_encoder(&ck).unwrap();
    let codec = omni_icm::artifacts::get_codec(&ck).unwrap();
    let pixels = omni_icm::data::read_rgb(&img).unwrap();
    let (x, dims) = omni_icm::data::prepare(&pixels, &omni_icm::data::Normalization::default());
    let f = enc.features_of(&[x], 1).unwrap().remove(0);
    let stream = codec.compress(&f, dims, &omni_icm::coder::ReferenceCoder).unwrap();
    assert_eq!(std::fs::read(&bits).unwrap(), stream.to_bytes());
    let direct = codec.decompress(&stream, &omni_icm::coder::ReferenceCoder).unwrap();
    assert_eq!(direct.data.to_owned(), a.data);

    let csv = ws.path("results.csv");
    ws.ok(&["eval", "--checkpoint", s(&task), "--out", s(&csv)]);
    ws.ok(&["eval", "--checkpoint", s(&task), "--identity", "--out", s(&csv)]);
    let rows = omni_icm::tasks::read_results_csv(&csv).unwrap();
    assert_eq!(rows.len(), 2);
    assert!(rows[0].bpp > 0.0 && rows[1].bpp == 0.0);

    let map = ws.path("bits.png");
    ws.ok(&["vis-bits", "--checkpoint", s(&s2), "--input", s(&img), "--upscale", "2", "--out", s(&map)]);
    assert!(map.exists());

    let recon = ws.path("recon");
    ws.ok(&["probe-recon", "--checkpoint", s(&s1), "--input", s(&img), "--out", s(&recon)]);
    assert!(recon.join("scene-before_if.png").exists() && recon.join("scene-after_if.png").exists());

    // every run directory holds its resolved config
    let runs: Vec<_> = std::fs::read_dir(ws.path("runs")).unwrap().collect();
    assert!(runs.len() >= 4);
    for r in runs {
        assert!(r.unwrap().path().join("config.toml").exists());
    }
}

#[test]
fn bdrate_of_identical_curves_prints_zero() {
    let ws = Workspace::new();
    let csv = "label,bpp,metric\na,0.1,30\na,0.2,32.5\na,0.4,34.6\na,0.8,36.2\n";
    let (a, b) = (ws.path("a.csv"), ws.path("b.csv"));
    std::fs::write(&a, csv).unwrap();
    std::fs::write(&b, csv).unwrap();
    let out = ws.ok(&["bdrate", "--anchor", s(&a), "--test", s(&b)]);
    assert_eq!(out.trim().parse::<f64>().unwrap(), 0.0);

    let svg = ws.path("rd.svg");
    ws.ok(&["plot-rd", "--input", s(&a), "--metric-name", "PSNR", "--out", s(&svg)]);
    assert!(std::fs::read_to_string(&svg).unwrap().contains("<svg"));
}

#[test]
fn exit_codes_separate_config_and_runtime_errors() {
    let ws = Workspace::new();
    // unknown key in the config file
    let bad = ws.path("bad.toml");
    std::fs::write(&bad, "sede = 1\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_omni-icm"))
        .args(["bdrate", "--anchor", "a", "--test", "b", "--config"])
        .arg(&bad)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));

    // invalid override value
    assert_eq!(ws.run(&["train-stage1", "--alpha", "-1"]).status.code(), Some(1));
    // unknown subcommand
    assert_eq!(ws.run(&["fly"]).status.code(), Some(1));
    // missing checkpoint is a runtime failure
    let missing = ws.path("missing.ckpt");
    let out = ws.run(&["compress", "--checkpoint", s(&missing), "--input", "x.png", "--out", "y.bin"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
}
