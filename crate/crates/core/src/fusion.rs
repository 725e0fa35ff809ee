//! Shared-attention readouts: one attention volume, two normalizations.
//!
//! The network emits a per-pixel, per-slice score volume. A softplus
//! normalization turns it into a flat-capable distribution whose
//! expectation over the focus axis gives depth; a softmax normalization
//! gives a peaked distribution that selects the sharpest slice colors for
//! the all-in-focus image. There are no learnable parameters past the
//! score volume, which is what lets all-in-focus images supervise depth.

use crate::error::{Error, Result};
use crate::stackio::FocalStack;
use crate::tensor::{kernels_api as kernels, Scalar, Tensor};

/// Per-slice focus positions, in linear blur-domain (disparity-like) units:
/// larger means nearer to the camera.
#[derive(Debug, Clone, PartialEq)]
pub struct FocusAxis<T> {
    positions: Vec<T>,
}

impl<T: Scalar> FocusAxis<T> {
    pub fn new(positions: Vec<T>) -> Result<Self> {
        if positions.len() < 2 {
            return Err(Error::invalid(format!(
                "focus axis needs at least 2 positions, got {}",
                positions.len()
            )));
        }
        for (i, w) in positions.windows(2).enumerate() {
            if !(w[1] > w[0]) {
                return Err(Error::invalid(format!(
                    "focus positions must be strictly increasing, violated at index {}: {} then {}",
                    i + 1,
                    w[0],
                    w[1]
                )));
            }
        }
        if positions.iter().any(|p| !p.is_finite()) {
            return Err(Error::invalid("focus positions must be finite"));
        }
        Ok(FocusAxis { positions })
    }

    /// `count` evenly spaced positions spanning `[lo, hi]`.
    pub fn linspace(lo: T, hi: T, count: usize) -> Result<Self> {
        let n = T::from_f64((count.max(2) - 1) as f64);
        let positions = (0..count)
            .map(|i| lo + (hi - lo) * T::from_f64(i as f64) / n)
            .collect();
        Self::new(positions)
    }

    pub fn positions(&self) -> &[T] {
        &self.positions
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn min(&self) -> T {
        self.positions[0]
    }

    pub fn max(&self) -> T {
        *self.positions.last().unwrap()
    }

    /// Axis restricted to the given strictly increasing slice indices.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let positions = indices
            .iter()
            .map(|&i| {
                self.positions
                    .get(i)
                    .copied()
                    .ok_or_else(|| Error::invalid(format!("slice index {i} out of range")))
            })
            .collect::<Result<Vec<T>>>()?;
        Self::new(positions)
    }

    pub fn cast<U: Scalar>(&self) -> FocusAxis<U> {
        FocusAxis {
            positions: self
                .positions
                .iter()
                .map(|&p| U::from_f64(Scalar::to_f64(p)))
                .collect(),
        }
    }
}

/// Unnormalized per-pixel, per-slice scores `[H, W, 1, F]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionVolume<T> {
    scores: Tensor<T>,
}

impl<T: Scalar> AttentionVolume<T> {
    pub fn new(scores: Tensor<T>) -> Result<Self> {
        let shape = scores.shape();
        if shape.len() != 4 || shape[2] != 1 {
            return Err(Error::invalid(format!(
                "attention volume must be [H,W,1,F], got {shape:?}"
            )));
        }
        if let Some(idx) = scores.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "attention volume",
                index: idx,
            });
        }
        Ok(AttentionVolume { scores })
    }

    pub fn scores(&self) -> &Tensor<T> {
        &self.scores
    }

    pub fn frames(&self) -> usize {
        self.scores.shape()[3]
    }
}

/// A per-pixel distribution over slices: nonnegative, summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVolume<T> {
    weights: Tensor<T>,
}

impl<T: Scalar> WeightVolume<T> {
    pub fn new(weights: Tensor<T>) -> Result<Self> {
        let shape = weights.shape();
        if shape.len() != 4 || shape[2] != 1 {
            return Err(Error::invalid(format!(
                "weight volume must be [H,W,1,F], got {shape:?}"
            )));
        }
        let f = shape[3];
        let tol = T::from_f64(1e-6);
        for (px, chunk) in weights.data().chunks_exact(f).enumerate() {
            let mut total = T::zero();
            for &w in chunk {
                if w < T::zero() {
                    return Err(Error::invalid(format!(
                        "weight volume has a negative weight at pixel {px}"
                    )));
                }
                total = total + w;
            }
            if (total - T::one()).abs() > tol {
                return Err(Error::invalid(format!(
                    "weight volume pixel {px} sums to {total}, expected 1"
                )));
            }
        }
        Ok(WeightVolume { weights })
    }

    pub fn weights(&self) -> &Tensor<T> {
        &self.weights
    }

    pub fn frames(&self) -> usize {
        self.weights.shape()[3]
    }

    /// Shannon entropy of each pixel's slice distribution, in nats.
    pub fn per_pixel_entropy(&self) -> Vec<T> {
        let f = self.frames();
        self.weights
            .data()
            .chunks_exact(f)
            .map(|chunk| {
                chunk.iter().fold(T::zero(), |acc, &w| {
                    if w > T::zero() {
                        acc - w * w.ln()
                    } else {
                        acc
                    }
                })
            })
            .collect()
    }
}

/// Per-pixel expected focus position `[H, W, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap<T> {
    depth: Tensor<T>,
}

impl<T: Scalar> DepthMap<T> {
    pub fn new(depth: Tensor<T>) -> Result<Self> {
        let shape = depth.shape();
        if shape.len() != 3 || shape[2] != 1 {
            return Err(Error::invalid(format!(
                "depth map must be [H,W,1], got {shape:?}"
            )));
        }
        Ok(DepthMap { depth })
    }

    pub fn from_values(h: usize, w: usize, values: Vec<T>) -> Result<Self> {
        Self::new(Tensor::new(vec![h, w, 1], values)?)
    }

    pub fn values(&self) -> &Tensor<T> {
        &self.depth
    }

    pub fn height(&self) -> usize {
        self.depth.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.depth.shape()[1]
    }

    pub fn cast<U: Scalar>(&self) -> DepthMap<U> {
        DepthMap {
            depth: self.depth.cast(),
        }
    }
}

/// Per-pixel blended color `[H, W, 3]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AiFImage<T> {
    color: Tensor<T>,
}

impl<T: Scalar> AiFImage<T> {
    pub fn new(color: Tensor<T>) -> Result<Self> {
        let shape = color.shape();
        if shape.len() != 3 || shape[2] != 3 {
            return Err(Error::invalid(format!(
                "all-in-focus image must be [H,W,3], got {shape:?}"
            )));
        }
        Ok(AiFImage { color })
    }

    pub fn values(&self) -> &Tensor<T> {
        &self.color
    }

    pub fn height(&self) -> usize {
        self.color.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.color.shape()[1]
    }

    pub fn cast<U: Scalar>(&self) -> AiFImage<U> {
        AiFImage {
            color: self.color.cast(),
        }
    }
}

/// Softplus normalization of the score volume:
/// `w_t = softplus(m_t) / sum_n softplus(m_n)` per pixel.
pub fn softplus_normalize<T: Scalar>(m: &AttentionVolume<T>) -> Result<WeightVolume<T>> {
    let f = m.frames();
    let data = kernels::softplus_norm_forward(m.scores().data(), f);
    Ok(WeightVolume {
        weights: Tensor::new(m.scores().shape().to_vec(), data)?,
    })
}

/// Softmax normalization of the score volume, with max subtraction for
/// stability. `temperature` scales the scores; 1 is the plain form.
pub fn softmax_normalize<T: Scalar>(
    m: &AttentionVolume<T>,
    temperature: T,
) -> Result<WeightVolume<T>> {
    if temperature <= T::zero() {
        return Err(Error::invalid(format!(
            "softmax temperature must be positive, got {temperature}"
        )));
    }
    let f = m.frames();
    let data = kernels::softmax_norm_forward(m.scores().data(), f, temperature);
    Ok(WeightVolume {
        weights: Tensor::new(m.scores().shape().to_vec(), data)?,
    })
}

/// Expected focus position per pixel: `D(i,j) = sum_t w(i,j,t) P_t`.
pub fn expected_depth<T: Scalar>(
    w: &WeightVolume<T>,
    axis: &FocusAxis<T>,
) -> Result<DepthMap<T>> {
    if w.frames() != axis.len() {
        return Err(Error::ShapeMismatch {
            context: "expected_depth weights vs focus axis",
            lhs: w.weights().shape().to_vec(),
            rhs: vec![axis.len()],
        });
    }
    let data = kernels::expected_depth_forward(w.weights().data(), axis.positions());
    let shape = w.weights().shape();
    DepthMap::new(Tensor::new(vec![shape[0], shape[1], 1], data)?)
}

/// Attention-weighted blend of the stack slices:
/// `I(i,j,k) = sum_t w(i,j,t) S(i,j,k,t)`.
pub fn fuse_aif<T: Scalar>(w: &WeightVolume<T>, stack: &FocalStack<T>) -> Result<AiFImage<T>> {
    let ws = w.weights().shape();
    let ss = stack.data().shape();
    if ws[0] != ss[0] || ws[1] != ss[1] || ws[3] != ss[3] {
        return Err(Error::ShapeMismatch {
            context: "fuse_aif weights vs stack",
            lhs: ws.to_vec(),
            rhs: ss.to_vec(),
        });
    }
    let data = kernels::fuse_aif_forward(w.weights().data(), stack.data().data(), ss[2], ss[3]);
    AiFImage::new(Tensor::new(vec![ss[0], ss[1], ss[2]], data)?)
}
