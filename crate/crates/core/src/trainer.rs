//! Progressive three-stage training.
//!
//! Stage `k` is trained with stages `1..k` frozen. Each step runs the frozen
//! cascade on the (augmented) attenuation batch with a fixed dropout seed per
//! training sample, feeds its prediction and attention map to stage `k`,
//! updates the discriminator and then the generator stage. The learning
//! rate follows cosine annealing per epoch; after every epoch the stage is
//! validated with a fixed seed and the best stage (lowest validation NLL) is
//! checkpointed and restored when the stage finishes.
//!
//! Run directory layout:
//!
//! ```text
//! config.toml           resolved run configuration
//! train_log.jsonl       one record per step and per epoch
//! stage{k}.ckpt         best checkpoint holding stages 1..=k
//! previews/stage{k}.png validation preview panel
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::{AugmentConfig, RunConfig, StageTrainConfig};
use crate::data::PairedSample;
use crate::error::{Error, Result};
use crate::ggd;
use crate::image::{contrast_jitter, geometric_transform, rotate_small, Geometry, Image2D};
use crate::losses::{
    discriminator_grads, discriminator_loss, generator_adversarial_grad, generator_loss,
    residual_consistency_grad, residual_consistency_loss,
};
use crate::metrics;
use crate::network::{save_checkpoint, GeneratorStage, PatchDiscriminator, ProgressiveGenerator, StageOutput};
use crate::nn::{clip_grad_norm, Adam, Tensor};
use crate::panel;
use crate::seed;

pub const LOG_FILE: &str = "train_log.jsonl";
pub const CONFIG_ECHO_FILE: &str = "config.toml";

/// Per-pixel bound on NLL partial derivatives. Where alpha is tiny,
/// `(r / alpha)^beta` overflows f32 long before the loss itself is
/// non-finite; NaN still passes through and aborts the run.
const NLL_GRAD_LIMIT: f64 = 1e4;

pub fn checkpoint_name(stage: usize) -> String {
    format!("stage{stage}.ckpt")
}

/// Geometric transforms available for an `h x w` pair. Quarter turns that
/// swap the axes are only offered for square images.
pub fn geometry_choices(h: usize, w: usize) -> Vec<Geometry> {
    let mut v = vec![Geometry::Identity, Geometry::HFlip, Geometry::VFlip, Geometry::Rot90(2)];
    if h == w {
        v.extend([Geometry::Rot90(1), Geometry::Rot90(3)]);
    }
    v
}

/// Parameters drawn for one augmentation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentDraw {
    pub geometry: Geometry,
    pub rotation_deg: f64,
    pub jitter: f64,
}

pub fn draw_augmentation<R: Rng + ?Sized>(h: usize, w: usize, cfg: &AugmentConfig, rng: &mut R) -> AugmentDraw {
    let choices = geometry_choices(h, w);
    let geometry = if cfg.geometric {
        choices[rng.random_range(0..choices.len())]
    } else {
        Geometry::Identity
    };
    let m = cfg.max_small_rotation_deg;
    let rotation_deg = if m > 0.0 { rng.random_range(-m..=m) } else { 0.0 };
    let jitter = if cfg.jitter > 0.0 {
        rng.random_range(1.0 - cfg.jitter..=1.0 + cfg.jitter)
    } else {
        1.0
    };
    AugmentDraw {
        geometry,
        rotation_deg,
        jitter,
    }
}

/// Apply a drawn augmentation. Geometry acts identically on every image of
/// the pair; contrast jitter only touches the attenuation input.
pub fn apply_augmentation(sample: &PairedSample, draw: &AugmentDraw) -> Result<PairedSample> {
    let spatial = |img: &Image2D| {
        let g = geometric_transform(img, draw.geometry);
        if draw.rotation_deg != 0.0 {
            rotate_small(&g, draw.rotation_deg)
        } else {
            g
        }
    };
    let attenuation = spatial(&sample.attenuation);
    let attenuation = if draw.jitter != 1.0 {
        contrast_jitter(&attenuation, draw.jitter)?
    } else {
        attenuation
    };
    Ok(PairedSample {
        id: sample.id.clone(),
        attenuation,
        darkfield: sample.darkfield.as_ref().map(spatial),
        split: sample.split,
        truth_noise_sigma: sample.truth_noise_sigma.as_ref().map(spatial),
        lung_mask: sample.lung_mask.as_ref().map(spatial),
    })
}

pub fn augment_pair<R: Rng + ?Sized>(sample: &PairedSample, cfg: &AugmentConfig, rng: &mut R) -> Result<PairedSample> {
    let (h, w) = sample.attenuation.shape();
    apply_augmentation(sample, &draw_augmentation(h, w, cfg, rng))
}

/// One line of the training log. Step records carry the batch losses;
/// epoch records carry epoch means and validation results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub kind: String,
    pub stage: usize,
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub l_adv: f64,
    pub l_nll: f64,
    pub l_res: f64,
    pub l_total: f64,
    pub l_disc: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val: Option<ValMetrics>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValMetrics {
    pub nll: f64,
    pub mse: f64,
    pub ssim: f64,
    pub mean_sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: usize,
    pub epochs: Vec<LogRecord>,
    pub best_epoch: usize,
    pub final_val: Option<ValMetrics>,
    pub checkpoint: Option<PathBuf>,
    pub frozen_checksums: Vec<String>,
    pub stage_checksum: String,
    pub wall_clock_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub stages: Vec<StageReport>,
    pub wall_clock_secs: f64,
}

/// Owns the run configuration, the log and the optional run directory.
pub struct Trainer {
    config: RunConfig,
    run_dir: Option<PathBuf>,
    log: Vec<LogRecord>,
}

fn to_f64(t: &Tensor) -> Vec<f64> {
    t.data.iter().map(|&v| v as f64).collect()
}

fn tensor_like(t: &Tensor, data: Vec<f64>) -> Tensor {
    Tensor::from_vec(t.n, t.c, t.h, t.w, data.into_iter().map(|v| v as f32).collect())
}

/// Dropout seed of training sample `index` inside the frozen stages.
fn frozen_seed(cfg: &StageTrainConfig, index: usize) -> u64 {
    seed::derive_path(cfg.seed, &[0xF202, index as u64])
}

fn validation_seed(cfg: &StageTrainConfig, index: usize) -> u64 {
    seed::derive_path(cfg.seed, &[0x7A11, index as u64])
}

/// Network input of `stage` and the previous prediction, computed by the
/// frozen stages below it.
fn stage_forward_batch(
    gen: &ProgressiveGenerator,
    stage: &GeneratorStage,
    x: &Tensor,
    frozen_seeds: &[u64],
) -> Result<(Tensor, Option<Tensor>)> {
    let k = stage.index;
    if k == 1 {
        return Ok((x.clone(), None));
    }
    let prev = gen.cascade(x, k - 1, frozen_seeds)?.pop().expect("k - 1 >= 1 stages");
    Ok((gen.stage_input(x, Some(&prev)), Some(prev.pred)))
}

impl Trainer {
    pub fn new(config: RunConfig, run_dir: Option<PathBuf>) -> Result<Self> {
        config.validate()?;
        if let Some(dir) = &run_dir {
            fs::create_dir_all(dir)?;
            fs::write(dir.join(CONFIG_ECHO_FILE), config.to_toml_string()?)?;
            fs::write(dir.join(LOG_FILE), "")?;
        }
        Ok(Self {
            config,
            run_dir,
            log: Vec::new(),
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn log(&self) -> &[LogRecord] {
        &self.log
    }

    fn push_log(&mut self, rec: LogRecord) -> Result<()> {
        if let Some(dir) = &self.run_dir {
            let mut f = fs::OpenOptions::new().append(true).create(true).open(dir.join(LOG_FILE))?;
            writeln!(f, "{}", serde_json::to_string(&rec)?)?;
        }
        self.log.push(rec);
        Ok(())
    }

    /// A fresh discriminator for stage `k`.
    pub fn new_discriminator(&self, k: usize) -> PatchDiscriminator {
        PatchDiscriminator::new(self.config.model.disc_width, seed::derive_path(self.config.seed, &[0xD15C, k as u64]))
    }

    /// Train all stages in order, starting from a freshly initialised
    /// generator.
    pub fn train_progressive(&mut self, train: &[PairedSample], val: &[PairedSample]) -> Result<(ProgressiveGenerator, TrainReport)> {
        let start = Instant::now();
        let mut gen = ProgressiveGenerator::new(self.config.model.clone(), self.config.seed)?;
        let mut stages = Vec::new();
        for k in 1..=gen.stage_count() {
            let mut disc = self.new_discriminator(k);
            stages.push(self.train_stage(&mut gen, &mut disc, train, val, k)?);
        }
        Ok((
            gen,
            TrainReport {
                stages,
                wall_clock_secs: start.elapsed().as_secs_f64(),
            },
        ))
    }

    fn check_data(&self, train: &[PairedSample], val: &[PairedSample]) -> Result<(usize, usize)> {
        let first = train.first().ok_or_else(|| Error::invalid("training set is empty"))?;
        let shape = first.attenuation.shape();
        let m = self.config.model.spatial_multiple();
        if shape.0 % m != 0 || shape.1 % m != 0 {
            return Err(Error::invalid(format!(
                "training images must have sides divisible by {m}, got {shape:?}"
            )));
        }
        for s in train.iter().chain(val) {
            let d = s
                .darkfield
                .as_ref()
                .ok_or_else(|| Error::invalid(format!("sample {} has no dark-field target", s.id)))?;
            if s.attenuation.shape() != shape || d.shape() != shape {
                return Err(Error::invalid(format!("sample {} differs from shape {shape:?}", s.id)));
            }
        }
        Ok(shape)
    }

    /// Train stage `k` of `gen` with all earlier stages frozen.
    pub fn train_stage(
        &mut self,
        gen: &mut ProgressiveGenerator,
        disc: &mut PatchDiscriminator,
        train: &[PairedSample],
        val: &[PairedSample],
        k: usize,
    ) -> Result<StageReport> {
        let start = Instant::now();
        let cfg = self.config.stage(k)?.clone();
        self.check_data(train, val)?;
        gen.freeze_stages_below(k)?;
        gen.set_dropout_rate(cfg.dropout_rate)?;
        let frozen_before: Vec<String> = (1..k).map(|j| gen.stage_checksum(j)).collect::<Result<_>>()?;

        let mut stage = gen.stage(k)?.clone();
        let mut gen_opt = Adam::new(self.config.adam, stage.params());
        let mut disc_opt = Adam::new(self.config.adam, disc.params());
        let rate = cfg.dropout_rate as f32;
        let kernel = self.config.blur_kernel;
        let weights = cfg.weights;

        let mut best: Option<(f64, usize, GeneratorStage)> = None;
        let mut epoch_records = Vec::new();
        let mut checkpoint = None;
        let mut global_step = 0usize;

        for epoch in 0..cfg.epochs {
            let lr = cfg.scheduler.lr(cfg.learning_rate, epoch, cfg.epochs);
            let mut order: Vec<usize> = (0..train.len()).collect();
            order.shuffle(&mut seed::rng(seed::derive_path(cfg.seed, &[0x0DE2, epoch as u64])));
            let mut sums = [0.0f64; 5];
            let mut steps = 0usize;

            for (step, batch_idx) in order.chunks(cfg.batch_size).enumerate() {
                let mut batch = Vec::with_capacity(batch_idx.len());
                for (b, &i) in batch_idx.iter().enumerate() {
                    let mut rng = seed::rng(seed::derive_path(cfg.seed, &[0xA06, epoch as u64, step as u64, b as u64]));
                    batch.push(augment_pair(&train[i], &self.config.augment, &mut rng)?);
                }
                let x = Tensor::from_images(&batch.iter().map(|s| vec![&s.attenuation]).collect::<Vec<_>>());
                let y = Tensor::from_images(
                    &batch
                        .iter()
                        .map(|s| vec![s.darkfield.as_ref().expect("checked")])
                        .collect::<Vec<_>>(),
                );
                let frozen_seeds: Vec<u64> = batch_idx.iter().map(|&i| frozen_seed(&cfg, i)).collect();
                let step_seeds: Vec<u64> = (0..batch_idx.len())
                    .map(|b| seed::derive_path(cfg.seed, &[0x57E9, epoch as u64, step as u64, b as u64]))
                    .collect();

                let (input, prev_pred) = stage_forward_batch(gen, &stage, &x, &frozen_seeds)?;
                let tape = stage.forward_train(&input, prev_pred.as_ref(), rate, &step_seeds);
                let out: StageOutput = tape.output.clone();
                if !out.pred.is_finite() || !out.alpha.is_finite() || !out.beta.is_finite() {
                    return Err(Error::non_finite("generator output"));
                }

                // discriminator update
                disc.zero_grad();
                let real_tape = disc.forward_train(&y, &x)?;
                let fake_tape = disc.forward_train(&out.pred, &x)?;
                let real_scores = to_f64(&real_tape.scores);
                let fake_scores = to_f64(&fake_tape.scores);
                let l_disc = discriminator_loss(&real_scores, &fake_scores)?;
                let (g_real, g_fake) = discriminator_grads(&real_scores, &fake_scores);
                let g_real = tensor_like(&real_tape.scores, g_real);
                let g_fake = tensor_like(&fake_tape.scores, g_fake);
                disc.backward(real_tape, &g_real);
                disc.backward(fake_tape, &g_fake);
                disc_opt.step(disc.params_mut(), lr);

                // generator update against the refreshed discriminator
                let adv_tape = disc.forward_train(&out.pred, &x)?;
                let adv_scores = to_f64(&adv_tape.scores);
                let g_adv = tensor_like(&adv_tape.scores, generator_adversarial_grad(&adv_scores));
                let d_pred_adv = disc.backward(adv_tape, &g_adv);
                disc.zero_grad();

                let n = batch.len();
                let inv_n = 1.0 / n as f64;
                let mut nll_values = Vec::with_capacity(n);
                let mut residual_sum = 0.0;
                let mut d_pred = d_pred_adv;
                let mut d_alpha = Tensor::zeros(n, 1, x.h, x.w);
                let mut d_beta = Tensor::zeros(n, 1, x.h, x.w);
                for b in 0..n {
                    let target = y.to_image(b, 0);
                    let pred = out.pred.to_image(b, 0);
                    let params = out.params(b);
                    let nll = ggd::ggd_nll(&target, &pred, &params)?;
                    nll_values.push(nll.mean);
                    let g = ggd::ggd_nll_grad(&target, &pred, &params)?;
                    residual_sum += residual_consistency_loss(&pred, &target, kernel)?;
                    let rg = residual_consistency_grad(&pred, &target, kernel)?;
                    let (wf, wr) = (weights.lambda_fidelity * inv_n, weights.lambda_residual * inv_n);
                    let dp = d_pred.channel_mut(b, 0);
                    for (q, v) in dp.iter_mut().enumerate() {
                        *v += (wf * g.d_pred.as_slice()[q].clamp(-NLL_GRAD_LIMIT, NLL_GRAD_LIMIT) + wr * rg.as_slice()[q]) as f32;
                    }
                    for (v, &s) in d_alpha.channel_mut(b, 0).iter_mut().zip(g.d_alpha.as_slice()) {
                        *v = (wf * s.clamp(-NLL_GRAD_LIMIT, NLL_GRAD_LIMIT)) as f32;
                    }
                    for (v, &s) in d_beta.channel_mut(b, 0).iter_mut().zip(g.d_beta.as_slice()) {
                        *v = (wf * s.clamp(-NLL_GRAD_LIMIT, NLL_GRAD_LIMIT)) as f32;
                    }
                }
                let loss = generator_loss(&adv_scores, &nll_values, residual_sum * inv_n, &weights)?;
                if !d_pred.is_finite() || !d_alpha.is_finite() || !d_beta.is_finite() {
                    return Err(Error::non_finite("generator gradient"));
                }
                stage.zero_grad();
                stage.backward(tape, &d_pred, &d_alpha, &d_beta);
                if let Some(m) = cfg.max_grad_norm {
                    clip_grad_norm(stage.params_mut(), m);
                }
                gen_opt.step(stage.params_mut(), lr);

                for (s, v) in sums
                    .iter_mut()
                    .zip([loss.adversarial, loss.nll, loss.residual, loss.total, l_disc])
                {
                    *s += v;
                }
                steps += 1;
                self.push_log(LogRecord {
                    kind: "step".into(),
                    stage: k,
                    epoch,
                    step: global_step,
                    lr,
                    l_adv: loss.adversarial,
                    l_nll: loss.nll,
                    l_res: loss.residual,
                    l_total: loss.total,
                    l_disc,
                    val: None,
                })?;
                global_step += 1;
            }

            let val_metrics = if val.is_empty() {
                None
            } else {
                Some(self.validate(gen, &stage, val, &cfg)?)
            };
            let m = |i: usize| sums[i] / steps as f64;
            let rec = LogRecord {
                kind: "epoch".into(),
                stage: k,
                epoch,
                step: global_step,
                lr,
                l_adv: m(0),
                l_nll: m(1),
                l_res: m(2),
                l_total: m(3),
                l_disc: m(4),
                val: val_metrics,
            };
            log::info!(
                "stage {k} epoch {}/{}: lr {lr:.3e} loss {:.4} val nll {}",
                epoch + 1,
                cfg.epochs,
                rec.l_total,
                val_metrics.map_or("-".into(), |v| format!("{:.4}", v.nll))
            );
            self.push_log(rec.clone())?;
            epoch_records.push(rec);

            // without validation data the latest epoch is kept
            let score = val_metrics.map_or(f64::NEG_INFINITY, |v| v.nll);
            if !score.is_finite() && val_metrics.is_some() {
                return Err(Error::non_finite("validation nll"));
            }
            if best.as_ref().is_none_or(|(b, _, _)| score <= *b) {
                best = Some((score, epoch, stage.clone()));
                if let Some(dir) = &self.run_dir {
                    let mut snapshot = gen.clone();
                    snapshot.replace_stage(k, stage.clone())?;
                    let path = dir.join(checkpoint_name(k));
                    save_checkpoint(&path, &snapshot, k, serde_json::to_value(&self.config)?)?;
                    checkpoint = Some(path);
                }
            }
        }

        let (_, best_epoch, best_stage) = best.expect("at least one epoch");
        gen.replace_stage(k, best_stage)?;
        let frozen_after: Vec<String> = (1..k).map(|j| gen.stage_checksum(j)).collect::<Result<_>>()?;
        if frozen_after != frozen_before {
            return Err(Error::invalid("frozen stage parameters changed during training"));
        }
        let final_val = epoch_records[best_epoch].val;
        if let (Some(dir), Some(sample)) = (&self.run_dir, val.first()) {
            let bundle = crate::inference::stage_infer(gen, &sample.attenuation, k, 4, self.config.inference.seed)?;
            panel::write_panel(
                &dir.join("previews").join(format!("stage{k}.png")),
                &sample.attenuation,
                &bundle,
                sample.darkfield.as_ref(),
            )?;
        }
        Ok(StageReport {
            stage: k,
            epochs: epoch_records,
            best_epoch,
            final_val,
            checkpoint,
            frozen_checksums: frozen_after,
            stage_checksum: gen.stage_checksum(k)?,
            wall_clock_secs: start.elapsed().as_secs_f64(),
        })
    }

    /// Validation with dropout active and a fixed seed per sample.
    fn validate(
        &self,
        gen: &ProgressiveGenerator,
        stage: &GeneratorStage,
        val: &[PairedSample],
        cfg: &StageTrainConfig,
    ) -> Result<ValMetrics> {
        let mut sums = [0.0f64; 4];
        let idx: Vec<usize> = (0..val.len()).collect();
        for chunk in idx.chunks(cfg.batch_size.max(1)) {
            let x = Tensor::from_images(&chunk.iter().map(|&i| vec![&val[i].attenuation]).collect::<Vec<_>>());
            let seeds: Vec<u64> = chunk.iter().map(|&i| validation_seed(cfg, i)).collect();
            let (input, prev) = stage_forward_batch(gen, stage, &x, &seeds)?;
            let out = stage.forward(&input, prev.as_ref(), cfg.dropout_rate as f32, &seeds);
            for (b, &i) in chunk.iter().enumerate() {
                let target = val[i].darkfield.as_ref().expect("checked");
                let pred = out.pred.to_image(b, 0);
                let params = out.params(b);
                sums[0] += ggd::ggd_nll(target, &pred, &params)?.mean;
                sums[1] += metrics::mse(&pred, target)?;
                sums[2] += metrics::ssim(&pred, target)?;
                sums[3] += ggd::effective_sigma(&params)?.mean();
            }
        }
        let n = val.len() as f64;
        let v = ValMetrics {
            nll: sums[0] / n,
            mse: sums[1] / n,
            ssim: sums[2] / n,
            mean_sigma: sums[3] / n,
        };
        if !v.nll.is_finite() {
            return Err(Error::non_finite("validation nll"));
        }
        Ok(v)
    }
}

/// Read a training log back.
pub fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_phantom_pair, PhantomConfig, Split};
    use crate::network::ModelConfig;

    fn sample() -> PairedSample {
        PairedSample {
            id: "s".into(),
            attenuation: Image2D::from_fn(6, 6, |i, j| (i * 6 + j) as f64 / 40.0 + 0.05),
            darkfield: Some(Image2D::from_fn(6, 6, |i, j| (i + 2 * j) as f64 / 20.0)),
            split: Split::Train,
            truth_noise_sigma: None,
            lung_mask: None,
        }
    }

    #[test]
    fn identity_augmentation_is_a_no_op() {
        let s = sample();
        let draw = AugmentDraw {
            geometry: Geometry::Identity,
            rotation_deg: 0.0,
            jitter: 1.0,
        };
        assert_eq!(apply_augmentation(&s, &draw).unwrap(), s);
    }

    #[test]
    fn flip_moves_input_and_target_together() {
        let s = sample();
        let draw = AugmentDraw {
            geometry: Geometry::HFlip,
            rotation_deg: 0.0,
            jitter: 1.0,
        };
        let a = apply_augmentation(&s, &draw).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                assert_eq!(a.attenuation.get(i, 5 - j), s.attenuation.get(i, j));
                assert_eq!(a.darkfield.as_ref().unwrap().get(i, 5 - j), s.darkfield.as_ref().unwrap().get(i, j));
            }
        }
    }

    #[test]
    fn jitter_touches_attenuation_only() {
        let s = sample();
        let draw = AugmentDraw {
            geometry: Geometry::Identity,
            rotation_deg: 0.0,
            jitter: 1.3,
        };
        let a = apply_augmentation(&s, &draw).unwrap();
        assert_ne!(a.attenuation, s.attenuation);
        assert_eq!(a.darkfield, s.darkfield);
    }

    #[test]
    fn geometry_draws_follow_uniform_choice() {
        let cfg = AugmentConfig::default();
        let choices = geometry_choices(8, 8);
        let mut counts = vec![0usize; choices.len()];
        let mut rng = seed::rng(42);
        let n = 10_000;
        for _ in 0..n {
            let d = draw_augmentation(8, 8, &cfg, &mut rng);
            counts[choices.iter().position(|&g| g == d.geometry).unwrap()] += 1;
        }
        let p = 1.0 / choices.len() as f64;
        let sd = (n as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - n as f64 * p).abs() < 3.0 * sd, "{c}");
        }
        assert_eq!(geometry_choices(8, 6).len(), 4);
    }

    fn tiny_run() -> RunConfig {
        let mut cfg = RunConfig::desk();
        cfg.model = ModelConfig {
            stages: 3,
            base_width: 4,
            levels: 2,
            dropout: 0.1,
            disc_width: 4,
        };
        for s in &mut cfg.stages {
            s.epochs = 2;
            s.batch_size = 2;
        }
        cfg
    }

    fn phantoms(n: usize) -> Vec<PairedSample> {
        let p = PhantomConfig {
            size: 32,
            samples: n,
            ..PhantomConfig::default()
        };
        (0..n).map(|i| generate_phantom_pair(&p, i).unwrap()).collect()
    }

    #[test]
    fn progressive_training_writes_run_directory_and_freezes() {
        let dir = tempfile::tempdir().unwrap();
        let data = phantoms(6);
        let mut t = Trainer::new(tiny_run(), Some(dir.path().to_path_buf())).unwrap();
        let (gen, report) = t.train_progressive(&data[..4], &data[4..]).unwrap();
        assert_eq!(report.stages.len(), 3);
        for k in 1..=3 {
            assert!(dir.path().join(checkpoint_name(k)).exists());
            assert!(dir.path().join(format!("previews/stage{k}.png")).exists());
        }
        assert_eq!(report.stages[2].frozen_checksums[0], report.stages[0].stage_checksum);
        assert_eq!(gen.stage_checksum(1).unwrap(), report.stages[0].stage_checksum);
        let log = read_log(&dir.path().join(LOG_FILE)).unwrap();
        assert_eq!(log, t.log());
        let epochs: Vec<_> = log.iter().filter(|r| r.kind == "epoch").collect();
        assert_eq!(epochs.len(), 6);
        assert!(epochs.iter().all(|r| r.val.is_some()));
        let echoed = RunConfig::load(&dir.path().join(CONFIG_ECHO_FILE)).unwrap();
        assert_eq!(&echoed, t.config());
    }

    #[test]
    fn training_is_deterministic() {
        let data = phantoms(4);
        let run = || {
            let mut t = Trainer::new(tiny_run(), None).unwrap();
            let (gen, _) = t.train_progressive(&data[..3], &data[3..]).unwrap();
            (gen.checksum(), t.log().to_vec())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn empty_training_set_is_rejected() {
        let mut t = Trainer::new(tiny_run(), None).unwrap();
        assert!(matches!(t.train_progressive(&[], &[]), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn exploding_learning_rate_aborts_with_non_finite() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_run();
        cfg.stages[0].learning_rate = 1e30;
        cfg.stages[0].scheduler.eta_min = 0.0;
        let data = phantoms(3);
        let mut t = Trainer::new(cfg, Some(dir.path().to_path_buf())).unwrap();
        let err = t.train_progressive(&data, &[]).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }), "{err}");
    }
}
