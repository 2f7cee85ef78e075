//! Gaussian target heatmaps and the two decoding rules (hard argmax and the
//! differentiable spatial soft-argmax).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::{softmax, Scalar, Tensor};

/// Ground-truth landmark positions of one image, `(row, col)` in pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkSet {
    pub coords: Vec<(f64, f64)>,
    pub names: Vec<String>,
}

impl LandmarkSet {
    pub fn new(coords: Vec<(f64, f64)>, names: Vec<String>) -> Result<Self> {
        if coords.is_empty() {
            return Err(Error::config("a landmark set needs at least one landmark"));
        }
        if coords.len() != names.len() {
            return Err(Error::dim(format!(
                "{} coordinates but {} names",
                coords.len(),
                names.len()
            )));
        }
        Ok(Self { coords, names })
    }

    /// Landmarks named `L0`, `L1`, ... .
    pub fn unnamed(coords: Vec<(f64, f64)>) -> Result<Self> {
        let names = (0..coords.len()).map(|i| format!("L{i}")).collect();
        Self::new(coords, names)
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn check_bounds(&self, h: usize, w: usize) -> Result<()> {
        for (i, &(r, c)) in self.coords.iter().enumerate() {
            if !(r.is_finite() && c.is_finite())
                || r < 0.0
                || c < 0.0
                || r > (h - 1) as f64
                || c > (w - 1) as f64
            {
                return Err(Error::Validation(format!(
                    "landmark {i} at ({r}, {c}) lies outside a {h} x {w} image"
                )));
            }
        }
        Ok(())
    }
}

/// Search range for the per-landmark standard deviations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SigmaBounds {
    pub min: f64,
    pub max: f64,
}

impl Default for SigmaBounds {
    fn default() -> Self {
        Self { min: 1.0, max: 20.0 }
    }
}

impl SigmaBounds {
    pub fn clamp(&self, sigma: f64) -> f64 {
        sigma.clamp(self.min, self.max)
    }

    pub fn contains(&self, sigma: f64) -> bool {
        (self.min..=self.max).contains(&sigma)
    }
}

/// Per-landmark Gaussian standard deviations, in pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SigmaVector(Vec<f64>);

impl SigmaVector {
    pub fn new(sigmas: Vec<f64>, bounds: SigmaBounds) -> Result<Self> {
        if sigmas.is_empty() {
            return Err(Error::config("sigma vector is empty"));
        }
        if let Some(s) = sigmas.iter().find(|s| !bounds.contains(**s)) {
            return Err(Error::config(format!(
                "sigma {s} outside [{}, {}]",
                bounds.min, bounds.max
            )));
        }
        Ok(Self(sigmas))
    }

    pub fn uniform(n: usize, sigma: f64, bounds: SigmaBounds) -> Result<Self> {
        Self::new(vec![sigma; n], bounds)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Applies `sigma_i + delta_i` and clamps into `bounds`.
    pub fn stepped(&self, deltas: &[f64], bounds: SigmaBounds) -> Self {
        assert_eq!(deltas.len(), self.0.len());
        Self(
            self.0
                .iter()
                .zip(deltas)
                .map(|(s, d)| bounds.clamp(s + d))
                .collect(),
        )
    }
}

/// `N x H x W` stack of per-landmark heatmaps.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapStack<S> {
    pub values: Tensor<S>,
}

impl<S: Scalar> HeatmapStack<S> {
    pub fn new(values: Tensor<S>) -> Result<Self> {
        if values.shape().len() != 3 {
            return Err(Error::dim(format!(
                "heatmap stack must be N x H x W, got {:?}",
                values.shape()
            )));
        }
        Ok(Self { values })
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn channel(&self, i: usize) -> &[S] {
        self.values.slab(i)
    }
}

/// Unnormalised isotropic Gaussian with peak 1 at `center`:
/// `exp(-((r - row)^2 + (c - col)^2) / (2 sigma^2))`, sampled on the pixel grid.
pub fn gaussian_heatmap<S: Scalar>(center: (f64, f64), sigma: f64, h: usize, w: usize) -> Result<Tensor<S>> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::config(format!("sigma must be positive, got {sigma}")));
    }
    if h == 0 || w == 0 {
        return Err(Error::dim("heatmap extents must be positive"));
    }
    let mut out = Vec::with_capacity(h * w);
    fill_gaussian(&mut out, center, sigma, h, w);
    Ok(Tensor::from_parts(vec![h, w], out))
}

fn fill_gaussian<S: Scalar>(out: &mut Vec<S>, (row, col): (f64, f64), sigma: f64, h: usize, w: usize) {
    let denom = 2.0 * sigma * sigma;
    for r in 0..h {
        let dr = r as f64 - row;
        for c in 0..w {
            let dc = c as f64 - col;
            out.push(S::from_f64_lossy((-(dr * dr + dc * dc) / denom).exp()));
        }
    }
}

/// Renders channel `i` as the Gaussian at landmark `i` with width `sigma_i`.
pub fn render_targets<S: Scalar>(
    landmarks: &LandmarkSet,
    sigmas: &SigmaVector,
    h: usize,
    w: usize,
) -> Result<HeatmapStack<S>> {
    if landmarks.len() != sigmas.len() {
        return Err(Error::dim(format!(
            "{} landmarks but {} sigmas",
            landmarks.len(),
            sigmas.len()
        )));
    }
    let mut data = Vec::with_capacity(landmarks.len() * h * w);
    for (&center, &sigma) in landmarks.coords.iter().zip(sigmas.as_slice()) {
        if !(sigma > 0.0) {
            return Err(Error::config(format!("sigma must be positive, got {sigma}")));
        }
        fill_gaussian(&mut data, center, sigma, h, w);
    }
    HeatmapStack::new(Tensor::from_parts(vec![landmarks.len(), h, w], data))
}

fn argmax_channel<S: Scalar>(values: &[S], w: usize) -> (usize, usize) {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        // strict '>' keeps the first maximum in row-major order
        if *v > values[best] {
            best = i;
        }
    }
    (best / w, best % w)
}

/// Integer `(row, col)` of each channel's maximum; ties go to the smallest
/// row, then the smallest column.
pub fn argmax_decode<S: Scalar>(stack: &HeatmapStack<S>) -> Vec<(usize, usize)> {
    (0..stack.channels())
        .map(|i| argmax_channel(stack.channel(i), stack.width()))
        .collect()
}

/// Spatial softmax of a single channel followed by the expected coordinate.
/// Also returns the probability map for the backward pass.
pub fn soft_argmax_with_probs<S: Scalar>(channel: &Tensor<S>) -> Result<((S, S), Tensor<S>)> {
    let &[h, w] = channel.shape() else {
        return Err(Error::dim(format!(
            "soft-argmax needs an H x W channel, got {:?}",
            channel.shape()
        )));
    };
    let probs = softmax(channel)?;
    let (mut row, mut col) = (S::zero(), S::zero());
    for r in 0..h {
        let rs = S::from_usize(r).unwrap();
        let line = &probs.data()[r * w..(r + 1) * w];
        let mut row_mass = S::zero();
        for (c, &p) in line.iter().enumerate() {
            row_mass = row_mass + p;
            col = col + p * S::from_usize(c).unwrap();
        }
        row = row + rs * row_mass;
    }
    Ok(((row, col), probs))
}

pub fn soft_argmax_decode<S: Scalar>(channel: &Tensor<S>) -> Result<(S, S)> {
    soft_argmax_with_probs(channel).map(|(rc, _)| rc)
}

/// Gradient of `g_row * row + g_col * col` w.r.t. the channel logits, given
/// the probability map and decoded position from the forward pass:
/// `p_u * (g_row (r_u - row) + g_col (c_u - col))`.
pub fn soft_argmax_backward<S: Scalar>(probs: &Tensor<S>, decoded: (S, S), grad: (S, S)) -> Tensor<S> {
    let w = probs.shape()[1];
    let data = probs
        .data()
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let r = S::from_usize(i / w).unwrap();
            let c = S::from_usize(i % w).unwrap();
            p * (grad.0 * (r - decoded.0) + grad.1 * (c - decoded.1))
        })
        .collect();
    Tensor::from_parts(probs.shape().to_vec(), data)
}
