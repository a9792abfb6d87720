//! Dense 4-D tensor in (batch, channels, height, width) layout.

use crate::error::{Error, Result};

/// Row-major (batch-major) dense tensor of f64.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    shape: [usize; 4],
    data: Vec<f64>,
}

impl Tensor4 {
    pub fn zeros(shape: [usize; 4]) -> Self {
        let len = shape.iter().product();
        Tensor4 {
            shape,
            data: vec![0.0; len],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<f64>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if data.len() != len {
            return Err(Error::ShapeMismatch {
                op: "Tensor4::from_vec",
                detail: format!("shape {:?} wants {} values, got {}", shape, len, data.len()),
            });
        }
        Ok(Tensor4 { shape, data })
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn height(&self) -> usize {
        self.shape[2]
    }

    pub fn width(&self) -> usize {
        self.shape[3]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn idx(&self, b: usize, c: usize, y: usize, x: usize) -> usize {
        ((b * self.shape[1] + c) * self.shape[2] + y) * self.shape[3] + x
    }

    #[inline]
    pub fn at(&self, b: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.idx(b, c, y, x)]
    }

    #[inline]
    pub fn at_mut(&mut self, b: usize, c: usize, y: usize, x: usize) -> &mut f64 {
        let i = self.idx(b, c, y, x);
        &mut self.data[i]
    }

    /// Contiguous (height * width) plane of one (batch, channel) pair.
    #[inline]
    pub fn plane(&self, b: usize, c: usize) -> &[f64] {
        let hw = self.shape[2] * self.shape[3];
        let start = (b * self.shape[1] + c) * hw;
        &self.data[start..start + hw]
    }

    #[inline]
    pub fn plane_mut(&mut self, b: usize, c: usize) -> &mut [f64] {
        let hw = self.shape[2] * self.shape[3];
        let start = (b * self.shape[1] + c) * hw;
        &mut self.data[start..start + hw]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, op: &'static str) -> Result<()> {
        if self.all_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite { op, step: 0 })
        }
    }

    /// Element-wise in-place add; shapes must match.
    pub fn add_assign(&mut self, other: &Tensor4) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op: "Tensor4::add_assign",
                detail: format!("{:?} vs {:?}", self.shape, other.shape),
            });
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// In-place axpy: self += alpha * other.
    pub fn axpy(&mut self, alpha: f64, other: &Tensor4) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op: "Tensor4::axpy",
                detail: format!("{:?} vs {:?}", self.shape, other.shape),
            });
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn fill(&mut self, v: f64) {
        self.data.fill(v);
    }

    /// Concatenate along the channel axis.
    pub fn concat_channels(parts: &[&Tensor4]) -> Result<Tensor4> {
        assert!(!parts.is_empty());
        let [b, _, h, w] = parts[0].shape;
        let mut c_total = 0;
        for p in parts {
            let [pb, pc, ph, pw] = p.shape;
            if pb != b || ph != h || pw != w {
                return Err(Error::ShapeMismatch {
                    op: "concat_channels",
                    detail: format!("{:?} vs {:?}", parts[0].shape, p.shape),
                });
            }
            c_total += pc;
        }
        let mut out = Tensor4::zeros([b, c_total, h, w]);
        let hw = h * w;
        for bi in 0..b {
            let mut c_off = 0;
            for p in parts {
                for ci in 0..p.shape[1] {
                    out.plane_mut(bi, c_off + ci).copy_from_slice(p.plane(bi, ci));
                }
                c_off += p.shape[1];
            }
            let _ = hw;
        }
        Ok(out)
    }

    /// Split a channel-concatenated gradient back into per-part gradients.
    pub fn split_channels(&self, channel_counts: &[usize]) -> Vec<Tensor4> {
        let [b, c, h, w] = self.shape;
        debug_assert_eq!(channel_counts.iter().sum::<usize>(), c);
        let mut out = Vec::with_capacity(channel_counts.len());
        let mut c_off = 0;
        for &cc in channel_counts {
            let mut part = Tensor4::zeros([b, cc, h, w]);
            for bi in 0..b {
                for ci in 0..cc {
                    part.plane_mut(bi, ci)
                        .copy_from_slice(self.plane(bi, c_off + ci));
                }
            }
            c_off += cc;
            out.push(part);
        }
        out
    }
}
