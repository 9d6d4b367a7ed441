use rand::Rng;

use super::Tensor;
use crate::seed;

pub const LEAKY_SLOPE: f32 = 0.2;

pub fn leaky_relu(x: &mut Tensor) {
    x.data
        .iter_mut()
        .for_each(|v| *v = if *v > 0.0 { *v } else { LEAKY_SLOPE * *v });
}

/// Gradient through leaky ReLU, using the activation *output* to pick the branch.
pub fn leaky_relu_backward(y: &Tensor, dy: &mut Tensor) {
    for (g, &o) in dy.data.iter_mut().zip(&y.data) {
        if o <= 0.0 {
            *g *= LEAKY_SLOPE;
        }
    }
}

/// 2x2 average pooling; spatial sides must be even.
pub fn avg_pool2(x: &Tensor) -> Tensor {
    assert!(x.h % 2 == 0 && x.w % 2 == 0, "avg_pool2 needs even sides");
    let (ho, wo) = (x.h / 2, x.w / 2);
    let mut out = Tensor::zeros(x.n, x.c, ho, wo);
    for b in 0..x.n {
        for c in 0..x.c {
            let src = x.channel(b, c);
            let dst = out.channel_mut(b, c);
            for i in 0..ho {
                for j in 0..wo {
                    let r0 = 2 * i * x.w + 2 * j;
                    let r1 = r0 + x.w;
                    dst[i * wo + j] = 0.25 * (src[r0] + src[r0 + 1] + src[r1] + src[r1 + 1]);
                }
            }
        }
    }
    out
}

pub fn avg_pool2_backward(dy: &Tensor) -> Tensor {
    let (h, w) = (dy.h * 2, dy.w * 2);
    let mut dx = Tensor::zeros(dy.n, dy.c, h, w);
    for b in 0..dy.n {
        for c in 0..dy.c {
            let src = dy.channel(b, c);
            let dst = dx.channel_mut(b, c);
            for i in 0..h {
                for j in 0..w {
                    dst[i * w + j] = 0.25 * src[(i / 2) * dy.w + j / 2];
                }
            }
        }
    }
    dx
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2(x: &Tensor) -> Tensor {
    let (h, w) = (x.h * 2, x.w * 2);
    let mut out = Tensor::zeros(x.n, x.c, h, w);
    for b in 0..x.n {
        for c in 0..x.c {
            let src = x.channel(b, c);
            let dst = out.channel_mut(b, c);
            for i in 0..h {
                for j in 0..w {
                    dst[i * w + j] = src[(i / 2) * x.w + j / 2];
                }
            }
        }
    }
    out
}

pub fn upsample2_backward(dy: &Tensor) -> Tensor {
    assert!(dy.h % 2 == 0 && dy.w % 2 == 0);
    let (ho, wo) = (dy.h / 2, dy.w / 2);
    let mut dx = Tensor::zeros(dy.n, dy.c, ho, wo);
    for b in 0..dy.n {
        for c in 0..dy.c {
            let src = dy.channel(b, c);
            let dst = dx.channel_mut(b, c);
            for i in 0..ho {
                for j in 0..wo {
                    let r0 = 2 * i * dy.w + 2 * j;
                    let r1 = r0 + dy.w;
                    dst[i * wo + j] = src[r0] + src[r0 + 1] + src[r1] + src[r1 + 1];
                }
            }
        }
    }
    dx
}

pub fn concat_channels(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!((a.n, a.h, a.w), (b.n, b.h, b.w), "concat shape");
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    for s in 0..a.n {
        data.extend_from_slice(a.sample(s));
        data.extend_from_slice(b.sample(s));
    }
    Tensor::from_vec(a.n, a.c + b.c, a.h, a.w, data)
}

/// Inverse of [`concat_channels`]: split after the first `c_first` channels.
pub fn split_channels(x: &Tensor, c_first: usize) -> (Tensor, Tensor) {
    let p = x.plane();
    let mut a = Vec::with_capacity(x.n * c_first * p);
    let mut b = Vec::with_capacity(x.n * (x.c - c_first) * p);
    for s in 0..x.n {
        let sample = x.sample(s);
        a.extend_from_slice(&sample[..c_first * p]);
        b.extend_from_slice(&sample[c_first * p..]);
    }
    (
        Tensor::from_vec(x.n, c_first, x.h, x.w, a),
        Tensor::from_vec(x.n, x.c - c_first, x.h, x.w, b),
    )
}

/// Inverted dropout with one mask stream per sample.
///
/// The mask for sample `b` is drawn from `derive(sample_seeds[b], layer)`,
/// so a sample's pattern does not depend on its position in the batch.
/// Returns the multiplicative mask (values `0` or `1 / (1 - rate)`), or
/// `None` when `rate == 0`.
pub fn dropout(x: &mut Tensor, rate: f32, sample_seeds: &[u64], layer: u64) -> Option<Vec<f32>> {
    if rate <= 0.0 {
        return None;
    }
    assert!(rate < 1.0, "dropout rate must be below 1");
    assert_eq!(sample_seeds.len(), x.n, "one dropout seed per sample");
    let keep = 1.0 / (1.0 - rate);
    let len = x.sample_len();
    let mut mask = Vec::with_capacity(x.data.len());
    for (b, &s) in sample_seeds.iter().enumerate() {
        let mut rng = seed::rng(seed::derive(s, layer));
        for k in 0..len {
            let m = if rng.random::<f32>() < rate { 0.0 } else { keep };
            x.data[b * len + k] *= m;
            mask.push(m);
        }
    }
    Some(mask)
}
