use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use dfgan::commands::{RunManifest, DEVICE_ENV, MANIFEST_FILE, PHANTOM_MANIFEST_FILE};
use dfgan::config::RunConfig;
use dfgan::data::PhantomManifest;
use dfgan::inference::UncertaintyBundle;
use dfgan::metrics;
use dfgan::network::{load_checkpoint, ModelConfig};
use dfgan::trainer::read_log;

fn dfgan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dfgan"))
        .args(args)
        .env_remove(DEVICE_ENV)
        .output()
        .expect("run dfgan")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "status {:?}\nstdout: {}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

const PHANTOMS_TOML: &str = "size = 32\nsamples = 12\nlung_semi_x = [0.12, 0.16]\nlung_semi_y = [0.24, 0.31]\n\
lung_offset_x = [0.17, 0.21]\ntexture_scale = 0.04\nsigma_range = [0.03, 0.09]\nnoise_beta = 2.0\n\
confounder_prob = 0.2\nstripes = false\nseed = 5\n";

fn tiny_config() -> RunConfig {
    let mut cfg = RunConfig::desk();
    cfg.model = ModelConfig {
        base_width: 4,
        levels: 2,
        disc_width: 4,
        ..ModelConfig::default()
    };
    for st in &mut cfg.stages {
        st.epochs = 1;
    }
    cfg
}

/// Phantoms, a trained tiny model and its run directory, shared by tests.
struct Fixture {
    _root: tempfile::TempDir,
    data: PathBuf,
    config: PathBuf,
    run: PathBuf,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let root = tempfile::tempdir().unwrap();
        let p = root.path();
        fs::write(p.join("phantoms.toml"), PHANTOMS_TOML).unwrap();
        fs::write(p.join("run.toml"), tiny_config().to_toml_string().unwrap()).unwrap();
        let data = p.join("data");
        assert_ok(&dfgan(&["generate-phantoms", "--config", s(&p.join("phantoms.toml")), "--out", s(&data)]));
        let run = p.join("run");
        assert_ok(&dfgan(&["train", "--config", s(&p.join("run.toml")), "--data", s(&data), "--out", s(&run)]));
        Fixture {
            data,
            config: p.join("run.toml"),
            run,
            _root: root,
        }
    })
}

#[test]
fn generate_phantoms_writes_dataset_and_manifests() {
    let f = fixture();
    for dir in ["attenuation", "darkfield", "truth_sigma", "lung_mask"] {
        assert_eq!(fs::read_dir(f.data.join(dir)).unwrap().count(), 12, "{dir}");
    }
    let m = RunManifest::load(&f.data).unwrap();
    assert_eq!(m.command, "generate-phantoms");
    assert_eq!(m.device, "cpu");
    assert_eq!(m.seeds["phantom"], 5);
    assert_eq!(m.config["sigma_range"], serde_json::json!([0.03, 0.09]));
    assert!(m.finished_unix >= m.started_unix);
    let fixture: PhantomManifest =
        serde_json::from_str(&fs::read_to_string(f.data.join(PHANTOM_MANIFEST_FILE)).unwrap()).unwrap();
    assert_eq!(fixture.samples.len(), 12);
    assert!(fixture.verify().unwrap().is_empty());
}

#[test]
fn train_writes_run_directory() {
    let f = fixture();
    for name in ["config.toml", "train_log.jsonl", "report.json", MANIFEST_FILE, "stage1.ckpt", "stage3.ckpt"] {
        assert!(f.run.join(name).is_file(), "{name}");
    }
    let echoed = RunConfig::load(&f.run.join("config.toml")).unwrap();
    assert_eq!(echoed, tiny_config());
    let log = read_log(&f.run.join("train_log.jsonl")).unwrap();
    let epochs: Vec<_> = log.iter().filter(|r| r.kind == "epoch").map(|r| r.stage).collect();
    assert_eq!(epochs, vec![1, 2, 3]);
    let (gen, header) = load_checkpoint(&f.run.join("stage3.ckpt")).unwrap();
    assert_eq!(header.stage_count, 3);
    let (g1, _) = load_checkpoint(&f.run.join("stage1.ckpt")).unwrap();
    assert_eq!(g1.stage_checksum(1).unwrap(), gen.stage_checksum(1).unwrap());
}

#[test]
fn train_single_stage_with_resume() {
    let f = fixture();
    let out = tempfile::tempdir().unwrap();
    let run = out.path().join("s2");
    let ckpt = f.run.join("stage1.ckpt");
    assert_ok(&dfgan(&[
        "train", "--config", s(&f.config), "--data", s(&f.data), "--out", s(&run), "--stage", "2", "--resume", s(&ckpt),
    ]));
    let (gen, header) = load_checkpoint(&run.join("stage2.ckpt")).unwrap();
    assert_eq!(header.stage_count, 2);
    let (g1, _) = load_checkpoint(&ckpt).unwrap();
    assert_eq!(gen.stage_checksum(1).unwrap(), g1.stage_checksum(1).unwrap());

    // stage 2 without the earlier stages is a usage error
    let bad = dfgan(&["train", "--config", s(&f.config), "--data", s(&f.data), "--out", s(&run), "--stage", "2"]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn infer_is_byte_reproducible() {
    let f = fixture();
    let out = tempfile::tempdir().unwrap();
    let ckpt = f.run.join("stage3.ckpt");
    let run = |name: &str| {
        let dir = out.path().join(name);
        assert_ok(&dfgan(&[
            "infer", "--checkpoint", s(&ckpt), "--input", s(&f.data), "--out", s(&dir), "--passes", "5", "--seed", "9",
        ]));
        dir
    };
    let (a, b) = (run("a"), run("b"));
    let ids: Vec<_> = fs::read_dir(&a).unwrap().filter_map(|e| e.ok()).filter(|e| e.path().is_dir()).collect();
    assert_eq!(ids.len(), 12);
    for id in ids {
        for file in fs::read_dir(id.path()).unwrap() {
            let file = file.unwrap().path();
            let twin = b.join(id.file_name()).join(file.file_name().unwrap());
            assert_eq!(fs::read(&file).unwrap(), fs::read(&twin).unwrap(), "{}", file.display());
        }
    }
    let (bundle, meta) = UncertaintyBundle::load(&a.join("phantom_00000")).unwrap();
    assert_eq!((bundle.passes, meta.seed, meta.stage), (5, 9, 3));
    assert!(a.join("phantom_00000/panel.png").is_file());
    assert!(RunManifest::load(&a).unwrap().artifacts.len() == 12);
}

#[test]
fn single_pass_has_zero_epistemic_variance() {
    let f = fixture();
    let out = tempfile::tempdir().unwrap();
    assert_ok(&dfgan(&[
        "infer",
        "--checkpoint",
        s(&f.run.join("stage3.ckpt")),
        "--input",
        s(&f.data),
        "--out",
        s(out.path()),
        "--passes",
        "1",
        "--stage",
        "2",
    ]));
    let (bundle, meta) = UncertaintyBundle::load(&out.path().join("phantom_00003")).unwrap();
    assert_eq!(meta.stage, 2);
    assert!(bundle.epistemic_var.as_slice().iter().all(|&v| v == 0.0));
}

#[test]
fn evaluate_reports_every_stage() {
    let f = fixture();
    let out = tempfile::tempdir().unwrap();
    let res = dfgan(&[
        "evaluate",
        "--checkpoint",
        s(&f.run.join("stage3.ckpt")),
        "--data",
        s(&f.data),
        "--out",
        s(out.path()),
        "--passes",
        "2",
    ]);
    assert_ok(&res);
    let stdout = String::from_utf8(res.stdout).unwrap();
    let header = stdout.lines().find(|l| l.contains("MSE")).expect("column header");
    let (m, p, q) = (header.find("MSE").unwrap(), header.find("PSNR").unwrap(), header.find("SSIM").unwrap());
    assert!(m < p && p < q);
    let reports = metrics::from_jsonl(&fs::read_to_string(out.path().join("metrics.jsonl")).unwrap()).unwrap();
    assert_eq!(reports.iter().map(|r| r.stage).collect::<Vec<_>>(), vec![1, 2, 3]);
    for r in &reports {
        assert_eq!(r.count, 12);
        assert!(r.mean.mse > 0.0 && r.mean.ssim <= 1.0);
    }

    // two checkpoints give one row each, ordered by stage
    let out2 = tempfile::tempdir().unwrap();
    assert_ok(&dfgan(&[
        "evaluate",
        "--checkpoint",
        s(&f.run.join("stage3.ckpt")),
        "--checkpoint",
        s(&f.run.join("stage1.ckpt")),
        "--data",
        s(&f.data),
        "--out",
        s(out2.path()),
        "--passes",
        "1",
        "--split",
        "train",
    ]));
    let rows = metrics::from_jsonl(&fs::read_to_string(out2.path().join("metrics.jsonl")).unwrap()).unwrap();
    assert_eq!(rows.iter().map(|r| r.stage).collect::<Vec<_>>(), vec![1, 3]);
}

#[test]
fn usage_and_input_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope.toml");
    let out = dfgan(&["generate-phantoms", "--config", s(&missing), "--out", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(2));

    let empty = tmp.path().join("empty");
    fs::create_dir_all(&empty).unwrap();
    let out = dfgan(&["train", "--data", s(&empty), "--out", s(&tmp.path().join("r"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));

    assert_eq!(dfgan(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn unknown_device_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("p.toml"), PHANTOMS_TOML).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_dfgan"))
        .args(["generate-phantoms", "--config", s(&tmp.path().join("p.toml")), "--out", s(&tmp.path().join("d"))])
        .env(DEVICE_ENV, "cuda")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains(DEVICE_ENV));
}

#[test]
fn diverging_training_exits_with_three() {
    let f = fixture();
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config();
    for st in &mut cfg.stages {
        st.learning_rate = 1e30;
    }
    let path = tmp.path().join("bad.toml");
    fs::write(&path, cfg.to_toml_string().unwrap()).unwrap();
    let out = dfgan(&["train", "--config", s(&path), "--data", s(&f.data), "--out", s(&tmp.path().join("r"))]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}
