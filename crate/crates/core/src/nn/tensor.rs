use serde::{Deserialize, Serialize};

use crate::image::Image2D;

/// Dense `[n, c, h, w]` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self {
            n,
            c,
            h,
            w,
            data: vec![0.0; n * c * h * w],
        }
    }

    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), n * c * h * w, "tensor buffer size");
        Self { n, c, h, w, data }
    }

    #[inline]
    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    #[inline]
    pub fn sample_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        (self.n, self.c, self.h, self.w) == (other.n, other.c, other.h, other.w)
    }

    pub fn sample(&self, b: usize) -> &[f32] {
        let s = self.sample_len();
        &self.data[b * s..(b + 1) * s]
    }

    pub fn sample_mut(&mut self, b: usize) -> &mut [f32] {
        let s = self.sample_len();
        &mut self.data[b * s..(b + 1) * s]
    }

    pub fn channel(&self, b: usize, c: usize) -> &[f32] {
        let p = self.plane();
        let off = (b * self.c + c) * p;
        &self.data[off..off + p]
    }

    pub fn channel_mut(&mut self, b: usize, c: usize) -> &mut [f32] {
        let p = self.plane();
        let off = (b * self.c + c) * p;
        &mut self.data[off..off + p]
    }

    /// Stack images as channels of one sample each: `images[b][c]`.
    pub fn from_images(images: &[Vec<&Image2D>]) -> Self {
        let n = images.len();
        assert!(n > 0, "empty batch");
        let c = images[0].len();
        let (h, w) = images[0][0].shape();
        let mut data = Vec::with_capacity(n * c * h * w);
        for sample in images {
            assert_eq!(sample.len(), c, "ragged channel count");
            for img in sample {
                assert_eq!(img.shape(), (h, w), "ragged image shape");
                data.extend(img.as_slice().iter().map(|&v| v as f32));
            }
        }
        Self { n, c, h, w, data }
    }

    pub fn to_image(&self, b: usize, c: usize) -> Image2D {
        Image2D::new(
            self.h,
            self.w,
            self.channel(b, c).iter().map(|&v| v as f64).collect(),
        )
        .expect("tensor plane is non-empty")
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert!(self.same_shape(other), "add_assign shape");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// A trainable parameter with its accumulated gradient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub shape: Vec<usize>,
    pub value: Vec<f32>,
    #[serde(skip)]
    pub grad: Vec<f32>,
}

impl Param {
    pub fn new(shape: Vec<usize>, value: Vec<f32>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), value.len());
        let grad = vec![0.0; value.len()];
        Self { shape, value, grad }
    }

    pub fn zero_grad(&mut self) {
        if self.grad.len() != self.value.len() {
            self.grad = vec![0.0; self.value.len()];
        } else {
            self.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}
