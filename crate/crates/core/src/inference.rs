//! Monte Carlo dropout inference.
//!
//! Pass `t` runs the cascade with dropout seed `derive(seed, t)`. The
//! prediction is the per-pixel mean over passes, the epistemic map is the
//! population variance of the per-pass predictions and the aleatoric map is
//! the mean per-pass effective sigma.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{read_image, write_png16, IntensityMapping};
use crate::error::{Error, Result};
use crate::ggd::{self, BETA_MAX, BETA_MIN};
use crate::image::Image2D;
use crate::network::ProgressiveGenerator;
use crate::nn::Tensor;
use crate::seed;

/// Passes evaluated together in one batch.
const PASS_CHUNK: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyBundle {
    pub prediction: Image2D,
    pub aleatoric_sigma: Image2D,
    pub epistemic_var: Image2D,
    pub alpha_mean: Image2D,
    pub beta_mean: Image2D,
    pub passes: usize,
    pub stage: usize,
}

/// Per-pass outputs of stage `k` for one image, cropped to its shape.
#[derive(Debug, Clone, PartialEq)]
pub struct PassOutput {
    pub prediction: Image2D,
    pub alpha: Image2D,
    pub beta: Image2D,
}

pub fn pass_seed(seed: u64, pass: usize) -> u64 {
    seed::derive(seed, pass as u64)
}

/// Run `passes` stochastic passes of the cascade truncated at stage `k`.
pub fn mc_passes(gen: &ProgressiveGenerator, input: &Image2D, k: usize, passes: usize, seed: u64) -> Result<Vec<PassOutput>> {
    if passes == 0 {
        return Err(Error::invalid("passes must be >= 1"));
    }
    if k == 0 || k > gen.stage_count() {
        return Err(Error::invalid(format!("stage {k} outside 1..={}", gen.stage_count())));
    }
    input.validate_network_shape()?;
    input.validate_unit_range()?;
    let (h, w) = input.shape();
    let m = gen.config().spatial_multiple();
    let padded = input.pad_replicate(h.div_ceil(m) * m, w.div_ceil(m) * m);
    let mut out = Vec::with_capacity(passes);
    let all: Vec<usize> = (0..passes).collect();
    for chunk in all.chunks(PASS_CHUNK) {
        let x = Tensor::from_images(&vec![vec![&padded]; chunk.len()]);
        let seeds: Vec<u64> = chunk.iter().map(|&t| pass_seed(seed, t)).collect();
        let last = gen.cascade(&x, k, &seeds)?.pop().expect("k >= 1 stages");
        for b in 0..chunk.len() {
            let crop = |t: &Tensor| t.to_image(b, 0).crop(0, 0, h, w);
            out.push(PassOutput {
                prediction: crop(&last.pred)?,
                alpha: crop(&last.alpha)?,
                beta: crop(&last.beta)?,
            });
        }
    }
    Ok(out)
}

/// Aggregate per-pass outputs into a bundle.
pub fn aggregate(outputs: &[PassOutput], stage: usize) -> Result<UncertaintyBundle> {
    let first = outputs.first().ok_or_else(|| Error::invalid("no passes to aggregate"))?;
    let (h, w) = first.prediction.shape();
    let t = outputs.len() as f64;
    let mean_of = |f: &dyn Fn(&PassOutput) -> &Image2D| -> Image2D {
        let mut acc = vec![0.0; h * w];
        for o in outputs {
            for (a, v) in acc.iter_mut().zip(f(o).as_slice()) {
                *a += v;
            }
        }
        Image2D::new(h, w, acc.into_iter().map(|v| v / t).collect()).expect("non-empty")
    };
    let prediction = mean_of(&|o| &o.prediction);
    let mut var = vec![0.0; h * w];
    for o in outputs {
        for ((acc, v), m) in var.iter_mut().zip(o.prediction.as_slice()).zip(prediction.as_slice()) {
            *acc += (v - m).powi(2);
        }
    }
    let epistemic_var = Image2D::new(h, w, var.into_iter().map(|v| v / t).collect())?;
    let sigmas = outputs
        .iter()
        .map(|o| ggd::effective_sigma(&ggd::GgdParams::new(o.alpha.clone(), o.beta.clone())?))
        .collect::<Result<Vec<_>>>()?;
    let mut sig = vec![0.0; h * w];
    for s in &sigmas {
        for (a, v) in sig.iter_mut().zip(s.as_slice()) {
            *a += v;
        }
    }
    let bundle = UncertaintyBundle {
        aleatoric_sigma: Image2D::new(h, w, sig.into_iter().map(|v| v / t).collect())?,
        alpha_mean: mean_of(&|o| &o.alpha),
        beta_mean: mean_of(&|o| &o.beta),
        prediction,
        epistemic_var,
        passes: outputs.len(),
        stage,
    };
    for (name, img) in [
        ("prediction", &bundle.prediction),
        ("aleatoric", &bundle.aleatoric_sigma),
        ("epistemic", &bundle.epistemic_var),
    ] {
        if !img.is_finite() {
            return Err(Error::non_finite(name));
        }
    }
    Ok(bundle)
}

/// MC inference through the cascade truncated at stage `k`.
pub fn stage_infer(gen: &ProgressiveGenerator, input: &Image2D, k: usize, passes: usize, seed: u64) -> Result<UncertaintyBundle> {
    aggregate(&mc_passes(gen, input, k, passes, seed)?, k)
}

/// MC inference through the full cascade.
pub fn mc_infer(gen: &ProgressiveGenerator, input: &Image2D, passes: usize, seed: u64) -> Result<UncertaintyBundle> {
    stage_infer(gen, input, gen.stage_count(), passes, seed)
}

/// Sidecar record of a persisted bundle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleMeta {
    pub id: String,
    pub passes: usize,
    pub seed: u64,
    pub stage: usize,
    pub model_checksum: String,
    /// Decoding of each map file: `value = offset + scale * raw / 65535`.
    pub maps: Vec<(String, IntensityMapping)>,
}

pub const BUNDLE_MAPS: [&str; 5] = ["prediction", "aleatoric", "epistemic", "alpha", "beta"];

fn encoding_range(name: &str, img: &Image2D) -> (f64, f64) {
    match name {
        "prediction" => (0.0, 1.0),
        "beta" => (BETA_MIN, BETA_MAX),
        _ => {
            let hi = img.max();
            (0.0, if hi > 0.0 { hi } else { 1.0 })
        }
    }
}

impl UncertaintyBundle {
    fn map(&self, name: &str) -> &Image2D {
        match name {
            "prediction" => &self.prediction,
            "aleatoric" => &self.aleatoric_sigma,
            "epistemic" => &self.epistemic_var,
            "alpha" => &self.alpha_mean,
            _ => &self.beta_mean,
        }
    }

    /// Write `<name>.png` for every map and `meta.json` into `dir`.
    pub fn save(&self, dir: &Path, id: &str, seed: u64, model_checksum: &str) -> Result<BundleMeta> {
        fs::create_dir_all(dir)?;
        let mut maps = Vec::new();
        for name in BUNDLE_MAPS {
            let img = self.map(name);
            let (lo, hi) = encoding_range(name, img);
            let mapping = write_png16(&dir.join(format!("{name}.png")), img, lo, hi)?;
            maps.push((name.to_string(), mapping));
        }
        let meta = BundleMeta {
            id: id.to_string(),
            passes: self.passes,
            seed,
            stage: self.stage,
            model_checksum: model_checksum.to_string(),
            maps,
        };
        fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
        Ok(meta)
    }

    /// Read a persisted bundle (values quantised to the stored 16 bits).
    pub fn load(dir: &Path) -> Result<(Self, BundleMeta)> {
        let meta: BundleMeta = serde_json::from_str(&fs::read_to_string(dir.join("meta.json"))?)?;
        let mut imgs = Vec::new();
        for name in BUNDLE_MAPS {
            let mapping = meta
                .maps
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, m)| *m)
                .ok_or_else(|| Error::ingestion(dir, format!("meta.json lacks map {name}")))?;
            let raw = read_image(&dir.join(format!("{name}.png")), None, IntensityMapping::default())?;
            imgs.push(raw.map(|v| mapping.apply(v)));
        }
        let mut it = imgs.into_iter();
        let mut next = || it.next().expect("five maps");
        let bundle = Self {
            prediction: next(),
            aleatoric_sigma: next(),
            epistemic_var: next(),
            alpha_mean: next(),
            beta_mean: next(),
            passes: meta.passes,
            stage: meta.stage,
        };
        Ok((bundle, meta))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::ModelConfig;

    fn gen() -> ProgressiveGenerator {
        ProgressiveGenerator::new(
            ModelConfig {
                stages: 3,
                base_width: 4,
                levels: 2,
                dropout: 0.1,
                disc_width: 4,
            },
            1,
        )
        .unwrap()
    }

    fn img() -> Image2D {
        Image2D::from_fn(12, 10, |i, j| ((i * 3 + j * 7) % 13) as f64 / 13.0)
    }

    #[test]
    fn population_variance_of_two_passes() {
        let c = |v: f64| Image2D::filled(2, 2, v);
        let passes = vec![
            PassOutput { prediction: c(1.0), alpha: c(0.1), beta: c(2.0) },
            PassOutput { prediction: c(3.0), alpha: c(0.1), beta: c(2.0) },
        ];
        let b = aggregate(&passes, 1).unwrap();
        assert_eq!(b.prediction.get(0, 0), 2.0);
        assert_eq!(b.epistemic_var.get(1, 1), 1.0);
        assert!((b.aleatoric_sigma.get(0, 0) - 0.1 / 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn zero_dropout_gives_zero_epistemic_and_matches_single_pass() {
        let mut g = gen();
        g.set_dropout_rate(0.0).unwrap();
        let b = mc_infer(&g, &img(), 5, 3).unwrap();
        assert!(b.epistemic_var.as_slice().iter().all(|&v| v == 0.0));
        let single = g.forward_image(&img(), 3, 0).unwrap().pop().unwrap();
        assert_eq!(b.prediction, single.0);
    }

    #[test]
    fn single_pass_has_zero_epistemic() {
        let b = mc_infer(&gen(), &img(), 1, 3).unwrap();
        assert!(b.epistemic_var.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn passes_match_individual_forward_calls_and_are_reproducible() {
        let g = gen();
        let passes = mc_passes(&g, &img(), 2, 10, 7).unwrap();
        let fifth = g.forward_image(&img(), 2, pass_seed(7, 9)).unwrap().pop().unwrap();
        assert_eq!(passes[9].prediction, fifth.0);
        let a = mc_infer(&g, &img(), 10, 7).unwrap();
        let b = mc_infer(&g, &img(), 10, 7).unwrap();
        assert_eq!(a, b);
        assert!(a.epistemic_var.max() > 0.0);
        assert!(a.aleatoric_sigma.min() > 0.0);
        assert_eq!(a.prediction.shape(), (12, 10));
    }

    #[test]
    fn stage_bounds_and_full_cascade() {
        let g = gen();
        assert!(stage_infer(&g, &img(), 0, 2, 1).is_err());
        assert!(stage_infer(&g, &img(), 4, 2, 1).is_err());
        assert!(mc_infer(&g, &img(), 0, 1).is_err());
        assert_eq!(stage_infer(&g, &img(), 3, 3, 1).unwrap(), mc_infer(&g, &img(), 3, 1).unwrap());
        for k in 1..=3 {
            assert_eq!(stage_infer(&g, &img(), k, 2, 1).unwrap().aleatoric_sigma.shape(), (12, 10));
        }
    }

    #[test]
    fn bundle_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let b = mc_infer(&gen(), &img(), 4, 2).unwrap();
        b.save(dir.path(), "x", 2, "abc").unwrap();
        let (back, meta) = UncertaintyBundle::load(dir.path()).unwrap();
        assert_eq!(meta.passes, 4);
        assert_eq!(meta.model_checksum, "abc");
        let tol = |img: &Image2D| img.max().max(1.0) / 65535.0;
        for (a, c) in [(&b.prediction, &back.prediction), (&b.epistemic_var, &back.epistemic_var)] {
            let t = tol(a);
            assert!(a.as_slice().iter().zip(c.as_slice()).all(|(x, y)| (x - y).abs() <= t));
        }
    }
}
