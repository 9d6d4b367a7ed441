//! Deterministic chest phantoms.
//!
//! Each phantom is built from latent geometry (body outline, two elliptical
//! lung fields, heart, rib bands and optional implants/cables):
//!
//! * attenuation: soft tissue with darker lungs, a dense heart and ribs;
//! * dark-field: bright inside the lungs (strongest at the lung centre),
//!   attenuated behind the heart, modulated by a smooth texture and near
//!   zero elsewhere;
//! * noise: zero-mean generalized Gaussian whose standard deviation grows
//!   from `sigma_lo` at the lung centre to `sigma_hi` at the lung border and
//!   stays at `sigma_lo` outside the lungs.
//!
//! Ribs and implants are visible in attenuation but have no dark-field
//! signature, so the translation has to learn to suppress them.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{PairedSample, Split};
use crate::error::{Error, Result};
use crate::ggd::{self, GgdParams};
use crate::image::Image2D;
use crate::seed;

/// Dark-field level outside the lung fields.
const BACKGROUND_DF: f64 = 0.04;
/// Width of the soft lung border in normalised elliptic radius.
const LUNG_EDGE: f64 = 0.12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomConfig {
    /// Side length of the square phantoms.
    pub size: usize,
    pub samples: usize,
    /// Lung semi-axis ranges as fractions of the image side.
    pub lung_semi_x: [f64; 2],
    pub lung_semi_y: [f64; 2],
    /// Range of the lung centre offset from the vertical mid-line.
    pub lung_offset_x: [f64; 2],
    /// Relative amplitude of the dark-field texture.
    pub texture_scale: f64,
    /// Injected noise standard deviation range `[sigma_lo, sigma_hi]`.
    pub sigma_range: [f64; 2],
    /// Shape of the injected generalized Gaussian noise.
    pub noise_beta: f64,
    /// Probability that a phantom carries an implant and cable.
    pub confounder_prob: f64,
    /// Add horizontal stripe artifacts to the dark-field image.
    pub stripes: bool,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            size: 64,
            samples: 200,
            lung_semi_x: [0.12, 0.16],
            lung_semi_y: [0.24, 0.31],
            lung_offset_x: [0.17, 0.21],
            texture_scale: 0.04,
            sigma_range: [0.02, 0.12],
            noise_beta: 2.0,
            confounder_prob: 0.1,
            stripes: false,
            seed: 0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.size < 32 {
            return bad(format!("phantom size must be >= 32, got {}", self.size));
        }
        let [lo, hi] = self.sigma_range;
        if !(lo > 0.0) || hi < lo || !hi.is_finite() {
            return bad(format!("sigma_range must satisfy 0 < lo <= hi, got {:?}", self.sigma_range));
        }
        for (name, r) in [
            ("lung_semi_x", self.lung_semi_x),
            ("lung_semi_y", self.lung_semi_y),
            ("lung_offset_x", self.lung_offset_x),
        ] {
            if !(r[0] > 0.0 && r[0] <= r[1] && r[1] < 0.5) {
                return bad(format!("{name} must be an increasing range inside (0, 0.5)"));
            }
        }
        if !(0.0..=1.0).contains(&self.confounder_prob) {
            return bad("confounder_prob must be in [0, 1]".into());
        }
        if !(0.0..0.5).contains(&self.texture_scale) {
            return bad("texture_scale must be in [0, 0.5)".into());
        }
        if !(ggd::BETA_MIN..=ggd::BETA_MAX).contains(&self.noise_beta) {
            return bad(format!("noise_beta must be in [{}, {}]", ggd::BETA_MIN, ggd::BETA_MAX));
        }
        Ok(())
    }
}

/// Noise-free phantom components.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomLayers {
    pub attenuation: Image2D,
    pub clean_darkfield: Image2D,
    pub sigma: Image2D,
    pub lung_mask: Image2D,
}

fn uniform<R: Rng>(rng: &mut R, r: [f64; 2]) -> f64 {
    if r[1] > r[0] {
        rng.random_range(r[0]..r[1])
    } else {
        r[0]
    }
}

fn smoothstep(x: f64) -> f64 {
    let t = x.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cy: f64,
    cx: f64,
    ay: f64,
    ax: f64,
}

impl Ellipse {
    /// Normalised elliptic radius (1 on the boundary).
    fn radius(&self, y: f64, x: f64) -> f64 {
        (((y - self.cy) / self.ay).powi(2) + ((x - self.cx) / self.ax).powi(2)).sqrt()
    }

    /// Soft membership: 1 well inside, 0 on and outside the boundary.
    fn mask(&self, y: f64, x: f64) -> f64 {
        smoothstep((1.0 - self.radius(y, x)) / LUNG_EDGE)
    }
}

/// Per-index sample seed.
fn sample_seed(cfg: &PhantomConfig, index: usize) -> u64 {
    seed::derive_path(cfg.seed, &[0xFA47, index as u64])
}

pub fn phantom_layers(cfg: &PhantomConfig, index: usize) -> Result<PhantomLayers> {
    cfg.validate()?;
    let mut rng = seed::rng(sample_seed(cfg, index));
    let s = cfg.size;
    let body = Ellipse {
        cy: 0.52 + uniform(&mut rng, [-0.02, 0.02]),
        cx: 0.5,
        ay: uniform(&mut rng, [0.43, 0.47]),
        ax: uniform(&mut rng, [0.40, 0.45]),
    };
    let lung_cy = uniform(&mut rng, [0.42, 0.48]);
    let lungs: Vec<Ellipse> = [-1.0, 1.0]
        .iter()
        .map(|side| Ellipse {
            cy: lung_cy + uniform(&mut rng, [-0.02, 0.02]),
            cx: 0.5 + side * uniform(&mut rng, cfg.lung_offset_x),
            ay: uniform(&mut rng, cfg.lung_semi_y),
            ax: uniform(&mut rng, cfg.lung_semi_x),
        })
        .collect();
    let heart = Ellipse {
        cy: uniform(&mut rng, [0.58, 0.64]),
        cx: uniform(&mut rng, [0.53, 0.58]),
        ay: uniform(&mut rng, [0.10, 0.13]),
        ax: uniform(&mut rng, [0.11, 0.14]),
    };
    let rib_spacing = uniform(&mut rng, [0.085, 0.11]);
    let rib_phase = uniform(&mut rng, [0.0, 1.0]);
    let rib_curve = uniform(&mut rng, [0.25, 0.45]);
    let tex_fy = uniform(&mut rng, [3.0, 5.0]);
    let tex_fx = uniform(&mut rng, [3.0, 5.0]);
    let tex_py = uniform(&mut rng, [0.0, 1.0]);
    let tex_px = uniform(&mut rng, [0.0, 1.0]);
    let lung_level = uniform(&mut rng, [0.75, 0.85]);
    let implant = (rng.random::<f64>() < cfg.confounder_prob).then(|| {
        (
            uniform(&mut rng, [0.2, 0.4]),
            uniform(&mut rng, [0.25, 0.75]),
            uniform(&mut rng, [0.025, 0.04]),
        )
    });

    let [sig_lo, sig_hi] = cfg.sigma_range;
    let mut att = vec![0.0; s * s];
    let mut df = vec![0.0; s * s];
    let mut sig = vec![0.0; s * s];
    let mut mask = vec![0.0; s * s];
    for i in 0..s {
        let y = (i as f64 + 0.5) / s as f64;
        for j in 0..s {
            let x = (j as f64 + 0.5) / s as f64;
            let k = i * s + j;
            let in_body = body.mask(y, x);
            let lung = lungs.iter().map(|l| l.mask(y, x)).fold(0.0, f64::max);
            let heart_m = heart.mask(y, x);
            // ribs: gently curved horizontal bands
            let rib_coord = (y - rib_curve * (x - 0.5).powi(2)) / rib_spacing + rib_phase;
            let rib = smoothstep((0.18 - (rib_coord - rib_coord.round()).abs()) / 0.08) * in_body;

            let mut a = 0.05 + 0.5 * in_body - 0.32 * lung + 0.22 * heart_m + 0.13 * rib;
            if let Some((iy, ix, r)) = implant {
                let d = ((y - iy).powi(2) + (x - ix).powi(2)).sqrt();
                if d < r {
                    a = 0.95;
                }
                // cable running from the implant to the top edge
                if y < iy && (x - ix - 0.3 * (iy - y)).abs() < 0.6 / s as f64 {
                    a = a.max(0.9);
                }
            }
            att[k] = a.clamp(0.0, 1.0);

            let radius = lungs
                .iter()
                .map(|l| l.radius(y, x))
                .fold(f64::INFINITY, f64::min);
            let texture = 1.0
                + cfg.texture_scale
                    * (std::f64::consts::TAU * (tex_fy * y + tex_py)).sin()
                    * (std::f64::consts::TAU * (tex_fx * x + tex_px)).sin();
            let signal = (0.45 + (lung_level - 0.45) * (1.0 - radius * radius).max(0.0))
                * (1.0 - 0.45 * heart_m)
                * texture;
            df[k] = BACKGROUND_DF + lung * (signal - BACKGROUND_DF);
            mask[k] = lung;
            let w = if radius < 1.0 { radius * radius } else { 0.0 };
            sig[k] = sig_lo + (sig_hi - sig_lo) * w;
        }
    }
    Ok(PhantomLayers {
        attenuation: Image2D::new(s, s, att)?,
        clean_darkfield: Image2D::new(s, s, df)?,
        sigma: Image2D::new(s, s, sig)?,
        lung_mask: Image2D::new(s, s, mask)?,
    })
}

/// One noise realisation for the given sigma map.
pub fn phantom_noise(cfg: &PhantomConfig, sigma: &Image2D, realisation_seed: u64) -> Result<Image2D> {
    let factor = ggd::sigma_factor(cfg.noise_beta);
    let (h, w) = sigma.shape();
    let params = GgdParams::new(
        sigma.map(|v| v / factor),
        Image2D::filled(h, w, cfg.noise_beta),
    )?;
    ggd::ggd_sample((h, w), &params, realisation_seed)
}

pub fn generate_phantom_pair(cfg: &PhantomConfig, index: usize) -> Result<PairedSample> {
    let layers = phantom_layers(cfg, index)?;
    let noise = phantom_noise(cfg, &layers.sigma, seed::derive(sample_seed(cfg, index), 1))?;
    let mut df = layers.clean_darkfield.zip_map(&noise, |c, n| c + n)?;
    if cfg.stripes {
        let mask = &layers.lung_mask;
        for i in 0..df.height() {
            let sign = if (i / 2) % 2 == 0 { 1.0 } else { -1.0 };
            for j in 0..df.width() {
                let v = df.get(i, j) + 0.03 * sign * mask.get(i, j);
                df.set(i, j, v);
            }
        }
    }
    Ok(PairedSample {
        id: format!("phantom_{index:05}"),
        attenuation: layers.attenuation,
        darkfield: Some(df.clamp01()),
        split: Split::Train,
        truth_noise_sigma: Some(layers.sigma),
        lung_mask: Some(layers.lung_mask),
    })
}

/// Fixture manifest written next to a generated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomManifest {
    pub config: PhantomConfig,
    pub samples: Vec<PhantomChecksum>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomChecksum {
    pub id: String,
    pub attenuation: String,
    pub darkfield: String,
}

impl PhantomManifest {
    pub fn build(cfg: &PhantomConfig, samples: &[PairedSample]) -> Self {
        Self {
            config: cfg.clone(),
            samples: samples
                .iter()
                .map(|s| PhantomChecksum {
                    id: s.id.clone(),
                    attenuation: s.attenuation.checksum(),
                    darkfield: s.darkfield.as_ref().map(Image2D::checksum).unwrap_or_default(),
                })
                .collect(),
        }
    }

    /// Regenerate every listed sample and compare checksums; returns the ids
    /// that no longer match.
    pub fn verify(&self) -> Result<Vec<String>> {
        let mut bad = Vec::new();
        for (i, entry) in self.samples.iter().enumerate() {
            let s = generate_phantom_pair(&self.config, i)?;
            let df = s.darkfield.as_ref().map(Image2D::checksum).unwrap_or_default();
            if s.id != entry.id || s.attenuation.checksum() != entry.attenuation || df != entry.darkfield {
                bad.push(entry.id.clone());
            }
        }
        Ok(bad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> PhantomConfig {
        PhantomConfig {
            seed: 11,
            ..PhantomConfig::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_phantom_pair(&cfg(), 3).unwrap();
        let b = generate_phantom_pair(&cfg(), 3).unwrap();
        assert_eq!(a, b);
        let c = generate_phantom_pair(&cfg(), 4).unwrap();
        assert_ne!(a.attenuation, c.attenuation);
    }

    #[test]
    fn images_are_in_unit_range_and_synthetic() {
        for i in 0..5 {
            let s = generate_phantom_pair(&cfg(), i).unwrap();
            s.attenuation.validate_unit_range().unwrap();
            s.darkfield.as_ref().unwrap().validate_unit_range().unwrap();
            assert!(s.is_synthetic());
        }
    }

    #[test]
    fn darkfield_outside_lungs_is_dark_before_noise() {
        for i in 0..5 {
            let l = phantom_layers(&cfg(), i).unwrap();
            for k in 0..l.lung_mask.len() {
                if l.lung_mask.as_slice()[k] == 0.0 {
                    assert!(l.clean_darkfield.as_slice()[k] < 0.1);
                }
            }
            // lungs are brighter than background in dark-field
            let inside: Vec<f64> = (0..l.lung_mask.len())
                .filter(|&k| l.lung_mask.as_slice()[k] > 0.9)
                .map(|k| l.clean_darkfield.as_slice()[k])
                .collect();
            assert!(!inside.is_empty());
            assert!(inside.iter().sum::<f64>() / inside.len() as f64 > 0.4);
        }
    }

    #[test]
    fn sigma_stays_in_configured_range() {
        let c = cfg();
        let l = phantom_layers(&c, 0).unwrap();
        assert!(l.sigma.min() >= c.sigma_range[0] - 1e-15);
        assert!(l.sigma.max() <= c.sigma_range[1] + 1e-15);
        assert!(l.sigma.max() > l.sigma.min());
    }

    #[test]
    fn constant_sigma_noise_matches_effective_sigma() {
        let c = PhantomConfig {
            noise_beta: 1.5,
            ..cfg()
        };
        let sigma = Image2D::filled(100, 100, 0.05);
        let n = phantom_noise(&c, &sigma, 5).unwrap();
        let m = n.mean();
        let sd = (n.as_slice().iter().map(|v| (v - m).powi(2)).sum::<f64>() / n.len() as f64).sqrt();
        assert!((sd / 0.05 - 1.0).abs() < 0.05, "{sd}");
    }

    #[test]
    fn config_validation() {
        assert!(PhantomConfig { size: 16, ..cfg() }.validate().is_err());
        assert!(PhantomConfig {
            sigma_range: [0.0, 0.1],
            ..cfg()
        }
        .validate()
        .is_err());
        assert!(PhantomConfig {
            sigma_range: [0.1, 0.05],
            ..cfg()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn stripes_flag_changes_only_darkfield() {
        let plain = generate_phantom_pair(&cfg(), 2).unwrap();
        let striped = generate_phantom_pair(&PhantomConfig { stripes: true, ..cfg() }, 2).unwrap();
        assert_eq!(plain.attenuation, striped.attenuation);
        assert_ne!(plain.darkfield, striped.darkfield);
    }

    #[test]
    fn manifest_verifies_regeneration() {
        let c = PhantomConfig { samples: 3, ..cfg() };
        let samples: Vec<_> = (0..3).map(|i| generate_phantom_pair(&c, i).unwrap()).collect();
        let m = PhantomManifest::build(&c, &samples);
        assert!(m.verify().unwrap().is_empty());
        let mut tampered = m.clone();
        tampered.samples[1].darkfield = "00".into();
        assert_eq!(tampered.verify().unwrap(), vec!["phantom_00001".to_string()]);
    }
}
