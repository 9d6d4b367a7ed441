//! Implementations of the `dfgan` subcommands.
//!
//! Every command writes one `manifest.json` into its output directory with
//! the command line, resolved configuration, seeds, produced artifacts, the
//! tool version and start/finish timestamps. Exit codes: 0 success, 2 usage,
//! configuration or input error, 3 numeric abort, 1 other I/O failure.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{
    generate_phantom_pair, load_dataset, load_ood, read_image, write_dataset, IntensityMapping, PairedSample,
    PhantomConfig, PhantomManifest, SampleMeta, Split,
};
use crate::error::{Error, Result};
use crate::inference::stage_infer;
use crate::metrics::{self, MetricsReport};
use crate::network::{load_checkpoint, load_stages_into, ProgressiveGenerator};
use crate::panel::write_panel;
use crate::trainer::{Trainer, TrainReport};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PHANTOM_MANIFEST_FILE: &str = "phantoms.json";
/// Selects the execution device; only `cpu` (portable execution) exists.
pub const DEVICE_ENV: &str = "DFGAN_DEVICE";

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::NonFinite { .. } => 3,
        Error::Io(_) => 1,
        _ => 2,
    }
}

/// Resolve the execution device from [`DEVICE_ENV`].
pub fn device_from_env() -> Result<String> {
    match std::env::var(DEVICE_ENV) {
        Err(_) => Ok("cpu".into()),
        Ok(v) if v.is_empty() || v.eq_ignore_ascii_case("cpu") => Ok("cpu".into()),
        Ok(v) => Err(Error::Config(format!(
            "{DEVICE_ENV}={v} is not available; only portable cpu execution is supported"
        ))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub device: String,
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    pub artifacts: Vec<PathBuf>,
    pub started_unix: f64,
    pub finished_unix: f64,
}

fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

impl RunManifest {
    fn start(command: &str, config: serde_json::Value) -> Result<Self> {
        Ok(Self {
            command: command.into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            device: device_from_env()?,
            config,
            seeds: BTreeMap::new(),
            artifacts: Vec::new(),
            started_unix: now(),
            finished_unix: 0.0,
        })
    }

    fn finish(mut self, out: &Path) -> Result<Self> {
        self.finished_unix = now();
        self.artifacts.sort();
        fs::create_dir_all(out)?;
        fs::write(out.join(MANIFEST_FILE), serde_json::to_string_pretty(&self)?)?;
        Ok(self)
    }

    pub fn load(out: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(out.join(MANIFEST_FILE))?)?)
    }
}

pub fn load_phantom_config(path: &Path) -> Result<PhantomConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let cfg: PhantomConfig = toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Generate a phantom dataset plus its fixture manifest.
pub fn cmd_generate_phantoms(config: &Path, out: &Path) -> Result<RunManifest> {
    let cfg = load_phantom_config(config)?;
    let mut manifest = RunManifest::start("generate-phantoms", serde_json::to_value(&cfg)?)?;
    manifest.seeds.insert("phantom".into(), cfg.seed);
    let samples: Vec<PairedSample> = (0..cfg.samples)
        .map(|i| generate_phantom_pair(&cfg, i))
        .collect::<Result<_>>()?;
    write_dataset(out, &samples)?;
    let fixture = PhantomManifest::build(&cfg, &samples);
    fs::write(out.join(PHANTOM_MANIFEST_FILE), serde_json::to_string_pretty(&fixture)?)?;
    manifest.artifacts.push(PathBuf::from(PHANTOM_MANIFEST_FILE));
    for dir in ["attenuation", "darkfield", "truth_sigma", "lung_mask"] {
        manifest.artifacts.push(PathBuf::from(dir));
    }
    manifest.finish(out)
}

fn load_run_config(config: Option<&Path>) -> Result<RunConfig> {
    match config {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn split_of(samples: &[PairedSample], split: Split) -> Vec<PairedSample> {
    samples.iter().filter(|s| s.split == split).cloned().collect()
}

/// Train all stages, or a single stage on top of a resumed checkpoint.
pub fn cmd_train(
    config: Option<&Path>,
    data: &Path,
    out: &Path,
    stage: Option<usize>,
    resume: Option<&Path>,
) -> Result<RunManifest> {
    let cfg = load_run_config(config)?;
    let mut manifest = RunManifest::start("train", serde_json::to_value(&cfg)?)?;
    manifest.seeds.insert("init".into(), cfg.seed);
    manifest.seeds.insert("split".into(), cfg.split_seed);
    for s in &cfg.stages {
        manifest.seeds.insert(format!("stage{}", s.stage_index), s.seed);
    }
    let samples = load_dataset(data, cfg.split_seed)?;
    let train = split_of(&samples, Split::Train);
    let val = split_of(&samples, Split::Val);
    let mut trainer = Trainer::new(cfg.clone(), Some(out.to_path_buf()))?;
    let report = match stage {
        None => {
            if resume.is_some() {
                return Err(Error::invalid("--resume requires --stage"));
            }
            trainer.train_progressive(&train, &val)?.1
        }
        Some(k) => {
            let mut gen = ProgressiveGenerator::new(cfg.model.clone(), cfg.seed)?;
            if let Some(ckpt) = resume {
                let header = load_stages_into(&mut gen, ckpt)?;
                if header.stage_count + 1 < k {
                    return Err(Error::invalid(format!(
                        "stage {k} needs a checkpoint with at least {} stages, got {}",
                        k - 1,
                        header.stage_count
                    )));
                }
            } else if k > 1 {
                return Err(Error::invalid(format!("stage {k} needs --resume with the earlier stages")));
            }
            let mut disc = trainer.new_discriminator(k);
            let start = std::time::Instant::now();
            let r = trainer.train_stage(&mut gen, &mut disc, &train, &val, k)?;
            TrainReport {
                stages: vec![r],
                wall_clock_secs: start.elapsed().as_secs_f64(),
            }
        }
    };
    fs::write(out.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    manifest.artifacts.extend(
        [crate::trainer::CONFIG_ECHO_FILE, crate::trainer::LOG_FILE, "report.json"]
            .iter()
            .map(PathBuf::from),
    );
    for s in &report.stages {
        if let Some(p) = &s.checkpoint {
            manifest.artifacts.push(p.strip_prefix(out).unwrap_or(p).to_path_buf());
        }
        manifest.artifacts.push(PathBuf::from(format!("previews/stage{}.png", s.stage)));
    }
    manifest.finish(out)
}

/// Inputs of `cmd_infer`: the attenuation images of a dataset directory, or
/// every PNG of a plain directory.
fn infer_inputs(input: &Path, resize: Option<(usize, usize)>) -> Result<Vec<PairedSample>> {
    let att_dir = input.join("attenuation");
    if !att_dir.is_dir() {
        let ood = load_ood(input, resize)?;
        if !ood.skipped.is_empty() {
            log::warn!("{} input files skipped", ood.skipped.len());
        }
        return Ok(ood.samples);
    }
    let mut paths: Vec<PathBuf> = fs::read_dir(&att_dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    paths.retain(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("png" | "f32")));
    paths.sort();
    let mut out = Vec::new();
    for p in paths {
        let id = p.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        let meta_path = input.join("meta").join(format!("{id}.json"));
        let meta: Option<SampleMeta> = if meta_path.exists() {
            Some(serde_json::from_str(&fs::read_to_string(&meta_path)?)?)
        } else {
            None
        };
        let mapping = meta.as_ref().map_or(IntensityMapping::default(), |m| m.attenuation);
        let mut attenuation = read_image(&p, meta.as_ref(), mapping)?;
        if let Some((h, w)) = resize {
            attenuation = crate::image::resample_area(&attenuation, h, w)?.clamp01();
        }
        let df_path = input.join("darkfield").join(format!("{id}.png"));
        let darkfield = match (df_path.exists(), resize) {
            (true, None) => Some(read_image(&df_path, meta.as_ref(), meta.as_ref().map_or(IntensityMapping::default(), |m| m.darkfield))?),
            _ => None,
        };
        out.push(PairedSample {
            id,
            attenuation,
            darkfield,
            split: Split::Test,
            truth_noise_sigma: None,
            lung_mask: None,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferOptions {
    pub passes: usize,
    pub seed: u64,
    /// Truncate the cascade at this stage (default: last stored stage).
    pub stage: Option<usize>,
    /// Resample every input to `(height, width)` before inference.
    pub resize: Option<(usize, usize)>,
}

impl Default for InferOptions {
    fn default() -> Self {
        Self {
            passes: 20,
            seed: 0,
            stage: None,
            resize: None,
        }
    }
}

/// One bundle directory and panel per input image under `out/<id>/`.
pub fn cmd_infer(checkpoint: &Path, input: &Path, out: &Path, opts: &InferOptions) -> Result<RunManifest> {
    if opts.passes == 0 {
        return Err(Error::invalid("--passes must be >= 1"));
    }
    let (gen, header) = load_checkpoint(checkpoint)?;
    let k = opts.stage.unwrap_or(gen.stage_count());
    if k == 0 || k > gen.stage_count() {
        return Err(Error::invalid(format!("--stage {k} outside 1..={}", gen.stage_count())));
    }
    let mut manifest = RunManifest::start(
        "infer",
        serde_json::json!({
            "checkpoint": checkpoint,
            "input": input,
            "passes": opts.passes,
            "stage": k,
            "resize": opts.resize,
            "model": header.model,
        }),
    )?;
    manifest.seeds.insert("mc".into(), opts.seed);
    let inputs = infer_inputs(input, opts.resize)?;
    if inputs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let checksum = gen.checksum();
    for s in &inputs {
        let bundle = stage_infer(&gen, &s.attenuation, k, opts.passes, opts.seed)?;
        let dir = out.join(&s.id);
        bundle.save(&dir, &s.id, opts.seed, &checksum)?;
        write_panel(&dir.join("panel.png"), &s.attenuation, &bundle, s.darkfield.as_ref())?;
        manifest.artifacts.push(PathBuf::from(&s.id));
    }
    manifest.finish(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluateOptions {
    pub passes: usize,
    pub seed: u64,
    /// Evaluate only this split of the loaded dataset (default: all pairs).
    pub split: Option<Split>,
    pub split_seed: u64,
}

impl Default for EvaluateOptions {
    fn default() -> Self {
        Self {
            passes: 20,
            seed: 0,
            split: None,
            split_seed: 0,
        }
    }
}

/// Per-stage metrics of MC-mean predictions. A single checkpoint yields one
/// row per stored stage; several checkpoints yield one row each (for their
/// last stage), ordered by stage.
pub fn evaluate_generators(
    gens: &[(ProgressiveGenerator, Vec<usize>)],
    pairs: &[PairedSample],
    passes: usize,
    seed: u64,
) -> Result<Vec<MetricsReport>> {
    if pairs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut reports = Vec::new();
    for (gen, stages) in gens {
        for &k in stages {
            let mut triples = Vec::with_capacity(pairs.len());
            for s in pairs {
                let target = s
                    .darkfield
                    .as_ref()
                    .ok_or_else(|| Error::invalid(format!("sample {} has no dark-field target", s.id)))?;
                let b = stage_infer(gen, &s.attenuation, k, passes, seed)?;
                let m = metrics::mse(&b.prediction, target)?;
                triples.push(metrics::MetricTriple {
                    mse: m,
                    psnr: metrics::psnr_from_mse(m, 1.0)?,
                    ssim: metrics::ssim(&b.prediction, target)?,
                });
            }
            reports.push(metrics::report_from_triples(k, triples));
        }
    }
    reports.sort_by_key(|r| r.stage);
    Ok(reports)
}

pub fn cmd_evaluate(checkpoints: &[PathBuf], data: &Path, out: &Path, opts: &EvaluateOptions) -> Result<RunManifest> {
    if checkpoints.is_empty() {
        return Err(Error::invalid("at least one checkpoint is required"));
    }
    let mut manifest = RunManifest::start(
        "evaluate",
        serde_json::json!({
            "checkpoints": checkpoints,
            "data": data,
            "passes": opts.passes,
            "split": opts.split,
        }),
    )?;
    manifest.seeds.insert("mc".into(), opts.seed);
    manifest.seeds.insert("split".into(), opts.split_seed);
    let samples = load_dataset(data, opts.split_seed)?;
    let pairs: Vec<PairedSample> = match opts.split {
        Some(sp) => split_of(&samples, sp),
        None => samples,
    };
    let single = checkpoints.len() == 1;
    let gens = checkpoints
        .iter()
        .map(|c| {
            let (g, h) = load_checkpoint(c)?;
            let stages = if single { (1..=h.stage_count).collect() } else { vec![h.stage_count] };
            Ok((g, stages))
        })
        .collect::<Result<Vec<_>>>()?;
    let reports = evaluate_generators(&gens, &pairs, opts.passes, opts.seed)?;
    fs::create_dir_all(out)?;
    fs::write(out.join("metrics.txt"), metrics::render_table(&reports))?;
    fs::write(out.join("metrics.jsonl"), metrics::to_jsonl(&reports)?)?;
    manifest.artifacts.extend(["metrics.txt", "metrics.jsonl"].iter().map(PathBuf::from));
    manifest.finish(out)
}
