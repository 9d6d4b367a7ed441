use serde::{Deserialize, Serialize};

use super::Param;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    /// GAN-style first moment decay.
    fn default() -> Self {
        Self {
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with one moment buffer pair per registered parameter.
///
/// The optimiser is built for a fixed, ordered list of parameters and only
/// ever allocates state for those; callers pass the same list, in the same
/// order, to every [`Adam::step`].
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: u64,
}

impl Adam {
    pub fn new<'a>(cfg: AdamConfig, params: impl IntoIterator<Item = &'a Param>) -> Self {
        let sizes: Vec<usize> = params.into_iter().map(Param::len).collect();
        Self {
            cfg,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    /// Number of scalars held in moment buffers.
    pub fn state_len(&self) -> usize {
        self.m.iter().map(Vec::len).sum::<usize>() + self.v.iter().map(Vec::len).sum::<usize>()
    }

    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = &'a mut Param>, lr: f64) {
        self.t += 1;
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        let step = (lr * bc2.sqrt() / bc1) as f32;
        let eps = (self.cfg.eps * bc2.sqrt()) as f32;
        let (b1, b2) = (b1 as f32, b2 as f32);
        let mut count = 0;
        for (i, p) in params.into_iter().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            assert_eq!(m.len(), p.value.len(), "parameter list changed under Adam");
            for k in 0..p.value.len() {
                let g = p.grad[k];
                m[k] = b1 * m[k] + (1.0 - b1) * g;
                v[k] = b2 * v[k] + (1.0 - b2) * g * g;
                p.value[k] -= step * m[k] / (v[k].sqrt() + eps);
            }
            count += 1;
        }
        assert_eq!(count, self.m.len(), "parameter list changed under Adam");
    }
}

/// Rescale all gradients so their joint L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm<'a>(params: impl IntoIterator<Item = &'a mut Param>, max_norm: f64) -> f64 {
    let mut params: Vec<&mut Param> = params.into_iter().collect();
    let norm = params
        .iter()
        .flat_map(|p| p.grad.iter())
        .map(|&g| g as f64 * g as f64)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let scale = (max_norm / norm) as f32;
        for p in params.iter_mut() {
            p.grad.iter_mut().for_each(|g| *g *= scale);
        }
    }
    norm
}
