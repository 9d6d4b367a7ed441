//! MSE, PSNR and SSIM, plus per-stage reports.
//!
//! SSIM uses an 11x11 Gaussian window (sigma 1.5), K1 = 0.01, K2 = 0.03 and
//! data range 1, averaged over every fully contained window position.
//! Report standard deviations are population standard deviations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image2D;

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

pub fn mse(a: &Image2D, b: &Image2D) -> Result<f64> {
    a.ensure_same_shape(b)?;
    if a.is_empty() {
        return Err(Error::invalid("mse of empty images"));
    }
    let s: f64 = a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| (x - y).powi(2)).sum();
    Ok(s / a.len() as f64)
}

/// PSNR in dB for a given MSE; [`PSNR_CAP`] when `mse == 0`.
pub fn psnr_from_mse(mse: f64, data_range: f64) -> Result<f64> {
    if !(data_range > 0.0) {
        return Err(Error::invalid(format!("data_range must be > 0, got {data_range}")));
    }
    if mse < 0.0 || !mse.is_finite() {
        return Err(Error::invalid(format!("invalid mse {mse}")));
    }
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok(10.0 * (data_range * data_range / mse).log10())
}

pub fn psnr(a: &Image2D, b: &Image2D, data_range: f64) -> Result<f64> {
    psnr_from_mse(mse(a, b)?, data_range)
}

/// Normalised 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Valid-mode separable filtering.
fn filter_valid(data: &[f64], h: usize, w: usize, taps: &[f64]) -> (Vec<f64>, usize, usize) {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for i in 0..h {
        for j in 0..ow {
            rows[i * ow + j] = taps.iter().enumerate().map(|(t, g)| g * data[i * w + j + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            out[i * ow + j] = taps.iter().enumerate().map(|(t, g)| g * rows[(i + t) * ow + j]).sum();
        }
    }
    (out, oh, ow)
}

pub fn ssim(a: &Image2D, b: &Image2D) -> Result<f64> {
    a.ensure_same_shape(b)?;
    let (h, w) = a.shape();
    if h.min(w) < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let x = a.as_slice();
    let y = b.as_slice();
    let prod = |f: &dyn Fn(usize) -> f64| (0..x.len()).map(f).collect::<Vec<f64>>();
    let (mx, oh, ow) = filter_valid(x, h, w, &taps);
    let (my, _, _) = filter_valid(y, h, w, &taps);
    let (xx, _, _) = filter_valid(&prod(&|k| x[k] * x[k]), h, w, &taps);
    let (yy, _, _) = filter_valid(&prod(&|k| y[k] * y[k]), h, w, &taps);
    let (xy, _, _) = filter_valid(&prod(&|k| x[k] * y[k]), h, w, &taps);
    let c1 = (K1 * 1.0f64).powi(2);
    let c2 = (K2 * 1.0f64).powi(2);
    let mut total = 0.0;
    for k in 0..oh * ow {
        let (ux, uy) = (mx[k], my[k]);
        let vx = xx[k] - ux * ux;
        let vy = yy[k] - uy * uy;
        let cxy = xy[k] - ux * uy;
        total += ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
    }
    Ok(total / (oh * ow) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricTriple {
    pub mse: f64,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub stage: usize,
    pub count: usize,
    pub per_image: Vec<MetricTriple>,
    pub mean: MetricTriple,
    pub std: MetricTriple,
}

fn mean_std(xs: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = xs.clone().count() as f64;
    let m = xs.clone().sum::<f64>() / n;
    let v = xs.map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, v.sqrt())
}

/// Metrics of `(generated, target)` pairs for one stage.
pub fn stage_report(pairs: &[(Image2D, Image2D)], stage: usize) -> Result<MetricsReport> {
    if pairs.is_empty() {
        return Err(Error::invalid("stage report needs at least one pair"));
    }
    let per_image = pairs
        .iter()
        .map(|(g, t)| {
            let m = mse(g, t)?;
            Ok(MetricTriple {
                mse: m,
                psnr: psnr_from_mse(m, 1.0)?,
                ssim: ssim(g, t)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(report_from_triples(stage, per_image))
}

pub fn report_from_triples(stage: usize, per_image: Vec<MetricTriple>) -> MetricsReport {
    let (m_mse, s_mse) = mean_std(per_image.iter().map(|t| t.mse));
    let (m_psnr, s_psnr) = mean_std(per_image.iter().map(|t| t.psnr));
    let (m_ssim, s_ssim) = mean_std(per_image.iter().map(|t| t.ssim));
    MetricsReport {
        stage,
        count: per_image.len(),
        per_image,
        mean: MetricTriple {
            mse: m_mse,
            psnr: m_psnr,
            ssim: m_ssim,
        },
        std: MetricTriple {
            mse: s_mse,
            psnr: s_psnr,
            ssim: s_ssim,
        },
    }
}

/// Human-readable table, one row per stage.
pub fn render_table(reports: &[MetricsReport]) -> String {
    let mut out = String::from("# mean ± population std over test pairs\n");
    out.push_str(&format!("{:<6} {:>6} {:>22} {:>20} {:>18}\n", "stage", "n", "MSE", "PSNR [dB]", "SSIM"));
    for r in reports {
        out.push_str(&format!(
            "{:<6} {:>6} {:>22} {:>20} {:>18}\n",
            r.stage,
            r.count,
            format!("{:.4} ± {:.4}", r.mean.mse, r.std.mse),
            format!("{:.2} ± {:.2}", r.mean.psnr, r.std.psnr),
            format!("{:.3} ± {:.3}", r.mean.ssim, r.std.ssim),
        ));
    }
    out
}

/// One JSON record per report.
pub fn to_jsonl(reports: &[MetricsReport]) -> Result<String> {
    let mut out = String::new();
    for r in reports {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn from_jsonl(text: &str) -> Result<Vec<MetricsReport>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::{geometric_transform, Geometry};

    fn noise(h: usize, w: usize, s: u64) -> Image2D {
        use rand::Rng;
        let mut rng = crate::seed::rng(s);
        Image2D::from_fn(h, w, |_, _| rng.random())
    }

    #[test]
    fn mse_and_psnr_fixtures() {
        let a = Image2D::zeros(4, 4);
        let b = Image2D::filled(4, 4, 0.1);
        assert!((mse(&a, &b).unwrap() - 0.01).abs() < 1e-15);
        assert_eq!(mse(&a, &a).unwrap(), 0.0);
        assert_eq!(psnr_from_mse(0.01, 1.0).unwrap(), 20.0);
        assert_eq!(psnr_from_mse(1.0, 1.0).unwrap(), 0.0);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), PSNR_CAP);
        assert!(mse(&a, &Image2D::zeros(4, 5)).is_err());
        assert!(psnr_from_mse(0.1, 0.0).is_err());
    }

    #[test]
    fn ssim_fixtures() {
        let a = noise(16, 16, 1);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let b = noise(16, 16, 2);
        assert_eq!(ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
        // constant images 0 vs 1: luminance term only
        let c1 = 0.01f64.powi(2);
        let expect = c1 / (1.0 + c1);
        let got = ssim(&Image2D::zeros(16, 16), &Image2D::filled(16, 16, 1.0)).unwrap();
        assert!((got - expect).abs() < 1e-12);
        assert!(ssim(&Image2D::zeros(10, 16), &Image2D::zeros(10, 16)).is_err());
    }

    #[test]
    fn ssim_is_invariant_under_joint_flip() {
        let a = noise(20, 20, 3);
        let b = noise(20, 20, 4);
        let fa = geometric_transform(&a, Geometry::HFlip);
        let fb = geometric_transform(&b, Geometry::HFlip);
        assert!((ssim(&a, &b).unwrap() - ssim(&fa, &fb).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn report_statistics() {
        let t = Image2D::filled(16, 16, 0.5);
        let r = stage_report(&[(t.clone(), t.clone())], 1).unwrap();
        assert_eq!(r.mean, MetricTriple { mse: 0.0, psnr: 100.0, ssim: 1.0 });
        assert_eq!(r.std.mse, 0.0);
        let r = report_from_triples(
            2,
            vec![
                MetricTriple { mse: 0.01, psnr: 20.0, ssim: 0.5 },
                MetricTriple { mse: 0.03, psnr: 15.0, ssim: 0.7 },
            ],
        );
        assert!((r.mean.mse - 0.02).abs() < 1e-15);
        assert!((r.std.mse - 0.01).abs() < 1e-15);
        assert!(stage_report(&[], 1).is_err());
    }

    #[test]
    fn table_and_jsonl() {
        let a = noise(16, 16, 5);
        let b = noise(16, 16, 6);
        let reports: Vec<_> = (1..=3)
            .map(|k| stage_report(&[(a.clone(), b.clone()), (b.clone(), b.clone())], k).unwrap())
            .collect();
        let table = render_table(&reports);
        let header = table.lines().nth(1).unwrap();
        let (i_mse, i_psnr, i_ssim) = (
            header.find("MSE").unwrap(),
            header.find("PSNR").unwrap(),
            header.find("SSIM").unwrap(),
        );
        assert!(i_mse < i_psnr && i_psnr < i_ssim);
        assert_eq!(table.lines().count(), 5);
        assert_eq!(from_jsonl(&to_jsonl(&reports).unwrap()).unwrap(), reports);
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn psnr_decreases_with_mse(a in 1e-8f64..1.0, b in 1e-8f64..1.0) {
            prop_assume!(a < b);
            prop_assert!(psnr_from_mse(a, 1.0).unwrap() > psnr_from_mse(b, 1.0).unwrap());
        }

        #[test]
        fn mse_symmetric(d1 in proptest::collection::vec(0.0f64..1.0, 36), d2 in proptest::collection::vec(0.0f64..1.0, 36)) {
            let a = Image2D::new(6, 6, d1).unwrap();
            let b = Image2D::new(6, 6, d2).unwrap();
            prop_assert_eq!(mse(&a, &b).unwrap(), mse(&b, &a).unwrap());
        }
    }
}
