use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{leaky_relu, leaky_relu_backward, Conv2d, Param, Tensor};
use crate::seed;

/// Each side of the score grid is the input side divided by this factor
/// (rounded up).
pub const DOWNSAMPLE_FACTOR: usize = 8;

/// Conditional patch critic: three stride-2 3x3 convolutions followed by a
/// 3x3 scoring convolution. Input channels are `[candidate, condition]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchDiscriminator {
    convs: Vec<Conv2d>,
}

/// Activations of a recorded forward pass.
#[derive(Debug)]
pub struct DiscTape {
    inputs: Vec<Tensor>,
    acts: Vec<Tensor>,
    pub scores: Tensor,
}

impl PatchDiscriminator {
    pub fn new(width: usize, seed: u64) -> Self {
        let mut rng = seed::rng(seed::derive(seed, 0xD15C));
        let convs = vec![
            Conv2d::new(2, width, 3, 2, 1, &mut rng),
            Conv2d::new(width, 2 * width, 3, 2, 1, &mut rng),
            Conv2d::new(2 * width, 4 * width, 3, 2, 1, &mut rng),
            Conv2d::new(4 * width, 1, 3, 1, 1, &mut rng),
        ];
        Self { convs }
    }

    pub fn grid_size(h: usize, w: usize) -> (usize, usize) {
        (h.div_ceil(DOWNSAMPLE_FACTOR), w.div_ceil(DOWNSAMPLE_FACTOR))
    }

    /// Stack `[candidate, condition]` per sample; both `[n, 1, h, w]`.
    pub fn pair_input(candidate: &Tensor, condition: &Tensor) -> Result<Tensor> {
        if !candidate.same_shape(condition) || candidate.c != 1 {
            return Err(Error::invalid(format!(
                "discriminator inputs must be equally shaped single-channel batches, got {:?} and {:?}",
                (candidate.n, candidate.c, candidate.h, candidate.w),
                (condition.n, condition.c, condition.h, condition.w)
            )));
        }
        Ok(crate::nn::concat_channels(candidate, condition))
    }

    pub fn forward(&self, candidate: &Tensor, condition: &Tensor) -> Result<Tensor> {
        Ok(self.run(Self::pair_input(candidate, condition)?, false).scores)
    }

    pub fn forward_train(&self, candidate: &Tensor, condition: &Tensor) -> Result<DiscTape> {
        Ok(self.run(Self::pair_input(candidate, condition)?, true))
    }

    fn run(&self, x: Tensor, record: bool) -> DiscTape {
        let mut inputs = Vec::new();
        let mut acts = Vec::new();
        let mut h = x;
        let last = self.convs.len() - 1;
        for (i, conv) in self.convs.iter().enumerate() {
            let mut y = conv.forward(&h);
            if i < last {
                leaky_relu(&mut y);
            }
            if record {
                inputs.push(h);
                if i < last {
                    acts.push(y.clone());
                }
            }
            h = y;
        }
        DiscTape {
            inputs,
            acts,
            scores: h,
        }
    }

    /// Accumulate parameter gradients and return the gradient with respect
    /// to the candidate channel.
    pub fn backward(&mut self, tape: DiscTape, d_scores: &Tensor) -> Tensor {
        let DiscTape { inputs, acts, .. } = tape;
        let mut g = d_scores.clone();
        let last = self.convs.len() - 1;
        for i in (0..self.convs.len()).rev() {
            if i < last {
                leaky_relu_backward(&acts[i], &mut g);
            }
            g = self.convs[i]
                .backward(&inputs[i], &g, true)
                .expect("input gradient requested");
        }
        crate::nn::split_channels(&g, 1).0
    }

    pub fn params(&self) -> Vec<&Param> {
        self.convs.iter().flat_map(|c| c.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.convs.iter_mut().flat_map(|c| c.params_mut()).collect()
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(Param::zero_grad);
    }

    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for p in self.params() {
            for v in &p.value {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn batch(n: usize, h: usize, w: usize, s: u64) -> Tensor {
        let mut rng = seed::rng(s);
        Tensor::from_vec(n, 1, h, w, (0..n * h * w).map(|_| rng.random::<f32>()).collect())
    }

    #[test]
    fn grid_follows_downsampling_factor() {
        let d = PatchDiscriminator::new(4, 1);
        let s = d.forward(&batch(1, 64, 64, 1), &batch(1, 64, 64, 2)).unwrap();
        assert_eq!((s.h, s.w), (8, 8));
        assert_eq!(PatchDiscriminator::grid_size(64, 64), (8, 8));
        let s = d.forward(&batch(1, 20, 36, 1), &batch(1, 20, 36, 2)).unwrap();
        assert_eq!((s.h, s.w), PatchDiscriminator::grid_size(20, 36));
        assert!(s.is_finite());
    }

    #[test]
    fn rejects_mismatched_inputs() {
        let d = PatchDiscriminator::new(4, 1);
        assert!(d.forward(&batch(1, 16, 16, 1), &batch(1, 16, 8, 2)).is_err());
    }

    #[test]
    fn batch_permutation_permutes_scores() {
        let d = PatchDiscriminator::new(4, 3);
        let c = batch(2, 16, 16, 5);
        let x = batch(2, 16, 16, 6);
        let swap = |t: &Tensor| {
            let mut data = t.sample(1).to_vec();
            data.extend_from_slice(t.sample(0));
            Tensor::from_vec(t.n, t.c, t.h, t.w, data)
        };
        let a = d.forward(&c, &x).unwrap();
        let b = d.forward(&swap(&c), &swap(&x)).unwrap();
        assert_eq!(a.sample(0), b.sample(1));
        assert_eq!(a.sample(1), b.sample(0));
    }

    #[test]
    fn candidate_gradient_matches_finite_differences() {
        let mut d = PatchDiscriminator::new(3, 4);
        let c = batch(1, 16, 16, 7);
        let x = batch(1, 16, 16, 8);
        let tape = d.forward_train(&c, &x).unwrap();
        let ones = Tensor::from_vec(1, 1, 2, 2, vec![1.0; 4]);
        let g = d.backward(tape, &ones);
        let total = |c: &Tensor| -> f64 { d.forward(c, &x).unwrap().data.iter().map(|&v| v as f64).sum() };
        let h = 1e-2f32;
        for idx in [0usize, 37, 120, 255] {
            let mut cp = c.clone();
            cp.data[idx] += h;
            let up = total(&cp);
            cp.data[idx] -= 2.0 * h;
            let dn = total(&cp);
            let fd = (up - dn) / (2.0 * h as f64);
            assert!((fd - g.data[idx] as f64).abs() < 2e-3 + 2e-2 * fd.abs(), "{idx}: {fd} vs {}", g.data[idx]);
        }
    }
}
