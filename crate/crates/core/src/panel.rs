//! Static figure panels.
//!
//! Columns: attenuation | prediction | aleatoric sigma | epistemic variance,
//! followed by the reference dark-field image when one is available. Image
//! columns are grayscale over `[0, 1]`; uncertainty columns use the fixed
//! [`heat`] colour map over `[0, max]` of that map. Each column has a colour
//! bar underneath, and the numeric ranges are stored in a `.json` file next
//! to the PNG.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::write_rgb_png;
use crate::error::Result;
use crate::image::Image2D;
use crate::inference::UncertaintyBundle;

const GAP: usize = 4;

/// Control points of the heat colour map (black, purple, red, orange, pale yellow).
const HEAT: [(f64, [f64; 3]); 5] = [
    (0.0, [0.0, 0.0, 0.0]),
    (0.25, [0.34, 0.06, 0.43]),
    (0.5, [0.73, 0.21, 0.33]),
    (0.75, [0.98, 0.55, 0.04]),
    (1.0, [0.99, 1.0, 0.64]),
];

/// Colour for `t` in `[0, 1]` (clamped).
pub fn heat(t: f64) -> [u8; 3] {
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 };
    let k = HEAT.iter().position(|(p, _)| *p >= t).unwrap_or(HEAT.len() - 1).max(1);
    let (p0, c0) = HEAT[k - 1];
    let (p1, c1) = HEAT[k];
    let f = (t - p0) / (p1 - p0);
    std::array::from_fn(|i| ((c0[i] + f * (c1[i] - c0[i])) * 255.0).round() as u8)
}

fn gray(t: f64) -> [u8; 3] {
    let v = (t.clamp(0.0, 1.0) * 255.0).round() as u8;
    [v, v, v]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelColumn {
    pub title: String,
    pub colormap: String,
    pub range: [f64; 2],
}

struct Column<'a> {
    img: &'a Image2D,
    info: PanelColumn,
    color: fn(f64) -> [u8; 3],
}

/// Render the panel into an RGB buffer; returns width, height, pixels and
/// the column descriptions.
pub fn render_panel(
    attenuation: &Image2D,
    bundle: &UncertaintyBundle,
    reference: Option<&Image2D>,
) -> (usize, usize, Vec<u8>, Vec<PanelColumn>) {
    let col = |img, title: &str, heat_map: bool| {
        let range = if heat_map {
            let hi = Image2D::max(img);
            [0.0, if hi > 0.0 { hi } else { 1.0 }]
        } else {
            [0.0, 1.0]
        };
        Column {
            img,
            info: PanelColumn {
                title: title.into(),
                colormap: if heat_map { "heat" } else { "gray" }.into(),
                range,
            },
            color: if heat_map { heat } else { gray },
        }
    };
    let mut cols = vec![
        col(attenuation, "attenuation", false),
        col(&bundle.prediction, "prediction", false),
        col(&bundle.aleatoric_sigma, "aleatoric sigma", true),
        col(&bundle.epistemic_var, "epistemic variance", true),
    ];
    if let Some(r) = reference {
        cols.push(col(r, "reference", false));
    }
    let (h, w) = attenuation.shape();
    let bar = (h / 16).max(4);
    let width = cols.len() * w + (cols.len() - 1) * GAP;
    let height = h + GAP + bar;
    let mut px = vec![255u8; width * height * 3];
    let mut put = |x: usize, y: usize, c: [u8; 3]| {
        let o = (y * width + x) * 3;
        px[o..o + 3].copy_from_slice(&c);
    };
    for (ci, c) in cols.iter().enumerate() {
        let x0 = ci * (w + GAP);
        let [lo, hi] = c.info.range;
        for i in 0..h.min(c.img.height()) {
            for j in 0..w.min(c.img.width()) {
                put(x0 + j, i, (c.color)((c.img.get(i, j) - lo) / (hi - lo)));
            }
        }
        for j in 0..w {
            let t = j as f64 / (w.max(2) - 1) as f64;
            for i in 0..bar {
                put(x0 + j, h + GAP + i, (c.color)(t));
            }
        }
    }
    (width, height, px, cols.into_iter().map(|c| c.info).collect())
}

/// Write the panel PNG and its `.json` range record.
pub fn write_panel(path: &Path, attenuation: &Image2D, bundle: &UncertaintyBundle, reference: Option<&Image2D>) -> Result<()> {
    let (w, h, px, cols) = render_panel(attenuation, bundle, reference);
    write_rgb_png(path, w, h, &px)?;
    fs::write(path.with_extension("json"), serde_json::to_string_pretty(&cols)?)?;
    Ok(())
}
