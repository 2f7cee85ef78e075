//! The inner heatmap regressor: a small encoder-decoder with skip
//! connections, trained against Gaussian targets (heatmap mode) or through
//! a soft-argmax coordinate loss (coordinate-regression mode).
//!
//! Layout for depth `d` and widths `w_0..w_{d-1}`:
//!
//! ```text
//! enc_l:  conv3x3(in -> w_l) + ReLU, kept as skip_l, then 2x2 max-pool
//! bottleneck: conv3x3(w_{d-1} -> w_{d-1}) + ReLU
//! dec_l:  nearest-up x2, concat skip_l, conv3x3(. -> w_l) + ReLU   (l = d-1 .. 0)
//! head:   conv1x1(w_0 -> N), no activation
//! ```

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::heatmap::{argmax_decode, render_targets, soft_argmax_backward, soft_argmax_with_probs, HeatmapStack, SigmaVector};
use crate::metrics::{mre, radial_errors};
use crate::numkernel::{
    adam_step, concat_channels, conv2d_backward_cached, conv2d_cached, mse_mean_backward, mse_per_channel, pool_max2,
    pool_max2_backward, relu, relu_backward, split_channels, upsample_nearest2, upsample_nearest2_backward, AdamState,
    ConvCache, ConvGeometry, Scalar, Tensor,
};
use crate::synthdata::{augment, Sample};

const LEARNER_MAGIC: &[u8; 8] = b"AHLNET\0\0";

/// Shape of the encoder-decoder.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub height: usize,
    pub width: usize,
    pub in_channels: usize,
    pub depth: usize,
    pub widths: Vec<usize>,
    pub landmarks: usize,
}

impl Architecture {
    /// Depth 3, widths 8/16/32 on single-channel input.
    pub fn desk(height: usize, width: usize, landmarks: usize) -> Self {
        Self {
            height,
            width,
            in_channels: 1,
            depth: 3,
            widths: vec![8, 16, 32],
            landmarks,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.widths.len() != self.depth {
            return Err(Error::config(format!(
                "depth {} needs exactly that many widths, got {:?}",
                self.depth, self.widths
            )));
        }
        if self.widths.iter().any(|&w| w == 0) || self.landmarks == 0 || self.in_channels == 0 {
            return Err(Error::config("widths, landmark count and input channels must be positive"));
        }
        let f = 1usize << self.depth;
        if self.height == 0 || self.width == 0 || self.height % f != 0 || self.width % f != 0 {
            return Err(Error::config(format!(
                "input {} x {} is not divisible by 2^{} = {f}",
                self.height, self.width, self.depth
            )));
        }
        Ok(())
    }

    /// Weight/bias shapes in declaration order.
    pub fn parameter_shapes(&self) -> Vec<Vec<usize>> {
        let d = self.depth;
        let mut shapes = Vec::new();
        let mut conv = |c_out: usize, c_in: usize, k: usize| {
            shapes.push(vec![c_out, c_in, k, k]);
            shapes.push(vec![c_out]);
        };
        let mut c_in = self.in_channels;
        for &w in &self.widths {
            conv(w, c_in, 3);
            c_in = w;
        }
        conv(self.widths[d - 1], self.widths[d - 1], 3);
        for l in (0..d).rev() {
            let below = if l == d - 1 { self.widths[d - 1] } else { self.widths[l + 1] };
            conv(self.widths[l], below + self.widths[l], 3);
        }
        conv(self.landmarks, self.widths[0], 1);
        shapes
    }

    pub fn parameter_count(&self) -> usize {
        self.parameter_shapes().iter().map(|s| s.iter().product::<usize>()).sum()
    }
}

/// How predicted heatmaps become coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decode {
    Argmax,
    SoftArgmax,
}

/// Per-batch optimisation settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainSettings {
    pub lr: f64,
    pub batch: usize,
    pub augment: bool,
}

/// Network parameters, their Adam states, and the seed they were built from.
#[derive(Debug, Clone, PartialEq)]
pub struct UNet<S> {
    arch: Architecture,
    params: Vec<Tensor<S>>,
    optim: Vec<AdamState<S>>,
    seed: u64,
}

struct ConvLayer<S> {
    cache: ConvCache<S>,
    pre: Tensor<S>,
}

struct Trace<S> {
    enc: Vec<ConvLayer<S>>,
    pools: Vec<(Vec<usize>, Vec<usize>)>,
    bottleneck: ConvLayer<S>,
    dec: Vec<(ConvLayer<S>, Vec<usize>)>,
    head: ConvCache<S>,
}

impl<S: Scalar> UNet<S> {
    /// He-initialised weights (`N(0, 2 / fan_in)`), zero biases.
    pub fn build(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params: Vec<Tensor<S>> = arch
            .parameter_shapes()
            .iter()
            .map(|shape| {
                if shape.len() == 1 {
                    return Tensor::zeros(shape);
                }
                let fan_in: usize = shape[1..].iter().product();
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
                Tensor::from_fn(shape, |_| S::from_f64_lossy(normal.sample(&mut rng)))
            })
            .collect();
        let optim = params.iter().map(|p| AdamState::new(p.shape())).collect();
        Ok(Self {
            arch,
            params,
            optim,
            seed,
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &[Tensor<S>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<S>] {
        &mut self.params
    }

    pub fn optimizer_states(&self) -> &[AdamState<S>] {
        &self.optim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Deep copy; the clone shares nothing with `self`.
    pub fn clone_weights(&self) -> Self {
        self.clone()
    }

    /// Bitwise equality of every parameter.
    pub fn params_bitwise_eq(&self, other: &Self) -> bool {
        self.params.len() == other.params.len()
            && self.params.iter().zip(&other.params).all(|(a, b)| a.bitwise_eq(b))
    }

    fn check_input(&self, image: &Tensor<S>) -> Result<()> {
        image.expect_shape(&[self.arch.in_channels, self.arch.height, self.arch.width])
    }

    fn forward_trace(&self, image: &Tensor<S>) -> Result<(Tensor<S>, Trace<S>)> {
        self.check_input(image)?;
        let d = self.arch.depth;
        let same = ConvGeometry::same(3);
        let p = &self.params;
        let mut x = image.clone();
        let mut enc = Vec::with_capacity(d);
        let mut pools = Vec::with_capacity(d);
        let mut skips = Vec::with_capacity(d);
        for l in 0..d {
            let (pre, cache) = conv2d_cached(&x, &p[2 * l], &p[2 * l + 1], same)?;
            let act = relu(&pre);
            let pooled = pool_max2(&act)?;
            pools.push((pooled.argmax, act.shape().to_vec()));
            enc.push(ConvLayer { cache, pre });
            skips.push(act);
            x = pooled.output;
        }
        let b = 2 * d;
        let (pre, cache) = conv2d_cached(&x, &p[b], &p[b + 1], same)?;
        x = relu(&pre);
        let bottleneck = ConvLayer { cache, pre };
        let mut dec = Vec::with_capacity(d);
        for (k, l) in (0..d).rev().enumerate() {
            let up = upsample_nearest2(&x)?;
            let up_channels = up.shape()[0];
            let cat = concat_channels(&up, &skips[l])?;
            let wi = 2 * (d + 1 + k);
            let (pre, cache) = conv2d_cached(&cat, &p[wi], &p[wi + 1], same)?;
            x = relu(&pre);
            dec.push((ConvLayer { cache, pre }, vec![up_channels, x.shape()[1] / 2, x.shape()[2] / 2]));
        }
        let h = 2 * (2 * d + 1);
        let (out, head) = conv2d_cached(&x, &p[h], &p[h + 1], ConvGeometry::default())?;
        Ok((
            out,
            Trace {
                enc,
                pools,
                bottleneck,
                dec,
                head,
            },
        ))
    }

    /// Raw `N x H x W` heatmap predictions.
    pub fn forward(&self, image: &Tensor<S>) -> Result<HeatmapStack<S>> {
        let (out, _) = self.forward_trace(image)?;
        HeatmapStack::new(out)
    }

    /// Parameter gradients given the gradient of the loss w.r.t. the output.
    fn backward(&self, trace: &Trace<S>, grad_out: &Tensor<S>) -> Result<Vec<Tensor<S>>> {
        let d = self.arch.depth;
        let p = &self.params;
        let mut grads: Vec<Option<Tensor<S>>> = vec![None; p.len()];
        let h = 2 * (2 * d + 1);
        let g = conv2d_backward_cached(&trace.head, &p[h], grad_out)?;
        grads[h] = Some(g.weights);
        grads[h + 1] = Some(g.bias);
        let mut gx = g.input;

        let mut skip_grads: Vec<Option<Tensor<S>>> = vec![None; d];
        for (k, l) in (0..d).rev().enumerate().collect::<Vec<_>>().into_iter().rev() {
            let (layer, up_shape) = &trace.dec[k];
            let wi = 2 * (d + 1 + k);
            let gpre = relu_backward(&layer.pre, &gx)?;
            let g = conv2d_backward_cached(&layer.cache, &p[wi], &gpre)?;
            grads[wi] = Some(g.weights);
            grads[wi + 1] = Some(g.bias);
            let (gup, gskip) = split_channels(&g.input, up_shape[0])?;
            skip_grads[l] = Some(gskip);
            gx = upsample_nearest2_backward(up_shape, &gup)?;
        }

        let b = 2 * d;
        let gpre = relu_backward(&trace.bottleneck.pre, &gx)?;
        let g = conv2d_backward_cached(&trace.bottleneck.cache, &p[b], &gpre)?;
        grads[b] = Some(g.weights);
        grads[b + 1] = Some(g.bias);
        gx = g.input;

        for l in (0..d).rev() {
            let (argmax, act_shape) = &trace.pools[l];
            let mut gact = pool_max2_backward(argmax, act_shape, &gx)?;
            gact.add_assign(skip_grads[l].as_ref().expect("decoder visited every level"))?;
            let layer = &trace.enc[l];
            let gpre = relu_backward(&layer.pre, &gact)?;
            let g = conv2d_backward_cached(&layer.cache, &p[2 * l], &gpre)?;
            grads[2 * l] = Some(g.weights);
            grads[2 * l + 1] = Some(g.bias);
            gx = g.input;
        }
        Ok(grads.into_iter().map(|g| g.expect("every parameter has a gradient")).collect())
    }

    /// Mean-over-channels heatmap MSE of one sample and its parameter gradients.
    pub fn heatmap_loss_and_grads(&self, image: &Tensor<S>, target: &HeatmapStack<S>) -> Result<(Vec<S>, Vec<Tensor<S>>)> {
        let (out, trace) = self.forward_trace(image)?;
        let per_channel = mse_per_channel(&out, &target.values)?;
        let gout = mse_mean_backward(&out, &target.values)?;
        Ok((per_channel, self.backward(&trace, &gout)?))
    }

    /// Per-landmark coordinate losses through the spatial soft-argmax (see
    /// [`coordinate_loss_per_landmark`]) and the parameter gradients of their mean.
    pub fn coordinate_loss_and_grads(&self, image: &Tensor<S>, truth: &[(f64, f64)]) -> Result<(Vec<S>, Vec<Tensor<S>>)> {
        let (out, trace) = self.forward_trace(image)?;
        let (per, gout) = coordinate_loss_per_landmark(&out, truth)?;
        Ok((per, self.backward(&trace, &gout)?))
    }

    fn apply_grads(&mut self, grads: &[Tensor<S>], lr: S) -> Result<()> {
        for ((p, g), st) in self.params.iter_mut().zip(grads).zip(&mut self.optim) {
            adam_step(p, g, st, lr)?;
        }
        Ok(())
    }

    fn run_batches(
        &mut self,
        data: &[Sample],
        settings: TrainSettings,
        rng: &mut ChaCha8Rng,
        mut per_sample: impl FnMut(&Self, &Sample) -> Result<Vec<Tensor<S>>>,
    ) -> Result<()> {
        if settings.batch == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(rng);
        let lr = S::from_f64_lossy(settings.lr);
        for chunk in order.chunks(settings.batch) {
            let mut total: Option<Vec<Tensor<S>>> = None;
            for &i in chunk {
                let sample = if settings.augment {
                    augment(&data[i], rng)
                } else {
                    data[i].clone()
                };
                let grads = per_sample(self, &sample)?;
                match &mut total {
                    None => total = Some(grads),
                    Some(t) => {
                        for (a, b) in t.iter_mut().zip(&grads) {
                            a.add_assign(b)?;
                        }
                    }
                }
            }
            let mut grads = total.expect("chunks are non-empty");
            let inv = S::one() / S::from_usize(chunk.len()).unwrap();
            grads.iter_mut().for_each(|g| g.scale(inv));
            self.apply_grads(&grads, lr)?;
        }
        Ok(())
    }

    /// Heatmap training for `epochs` epochs with the σ-set held fixed.
    /// Returns, per epoch, the per-landmark training MSE averaged over the
    /// samples seen (computed before each batch's update).
    pub fn train_epochs(
        &mut self,
        data: &[Sample],
        sigmas: &SigmaVector,
        epochs: usize,
        settings: TrainSettings,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<Vec<f64>>> {
        (0..epochs)
            .map(|_| self.train_one_epoch(data, sigmas, settings, rng))
            .collect()
    }

    pub fn train_one_epoch(
        &mut self,
        data: &[Sample],
        sigmas: &SigmaVector,
        settings: TrainSettings,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<f64>> {
        if data.is_empty() {
            return Err(Error::config("training set is empty"));
        }
        if sigmas.len() != self.arch.landmarks {
            return Err(Error::dim(format!(
                "{} sigmas for {} landmarks",
                sigmas.len(),
                self.arch.landmarks
            )));
        }
        let (h, w) = (self.arch.height, self.arch.width);
        let mut sums = vec![0.0; self.arch.landmarks];
        self.run_batches(data, settings, rng, |net, sample| {
            let target = render_targets::<S>(&sample.landmarks, sigmas, h, w)?;
            let (losses, grads) = net.heatmap_loss_and_grads(&sample.image.cast(), &target)?;
            for (s, l) in sums.iter_mut().zip(losses) {
                *s += l.to_f64_lossy();
            }
            Ok(grads)
        })?;
        let n = data.len() as f64;
        Ok(sums.into_iter().map(|s| s / n).collect())
    }

    /// Coordinate-regression training through soft-argmax. Returns, per
    /// epoch, the per-landmark coordinate loss averaged over the samples seen.
    pub fn train_coordreg(
        &mut self,
        data: &[Sample],
        epochs: usize,
        settings: TrainSettings,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<Vec<f64>>> {
        (0..epochs)
            .map(|_| self.train_coordreg_epoch(data, settings, rng))
            .collect()
    }

    pub fn train_coordreg_epoch(&mut self, data: &[Sample], settings: TrainSettings, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        if data.is_empty() {
            return Err(Error::config("training set is empty"));
        }
        let mut sums = vec![0.0; self.arch.landmarks];
        self.run_batches(data, settings, rng, |net, sample| {
            let (per, grads) = net.coordinate_loss_and_grads(&sample.image.cast(), &sample.landmarks.coords)?;
            for (s, l) in sums.iter_mut().zip(per) {
                *s += l.to_f64_lossy();
            }
            Ok(grads)
        })?;
        let n = data.len() as f64;
        Ok(sums.into_iter().map(|s| s / n).collect())
    }

    /// Predicted `(row, col)` of every landmark.
    pub fn predict(&self, image: &Tensor<S>, decode: Decode) -> Result<Vec<(f64, f64)>> {
        let stack = self.forward(image)?;
        Ok(match decode {
            Decode::Argmax => argmax_decode(&stack)
                .into_iter()
                .map(|(r, c)| (r as f64, c as f64))
                .collect(),
            Decode::SoftArgmax => {
                let (h, w) = (stack.height(), stack.width());
                (0..stack.channels())
                    .map(|i| {
                        let ch = Tensor::from_parts(vec![h, w], stack.channel(i).to_vec());
                        soft_argmax_with_probs(&ch).map(|((r, c), _)| (r.to_f64_lossy(), c.to_f64_lossy()))
                    })
                    .collect::<Result<_>>()?
            }
        })
    }

    pub fn predict_all(&self, data: &[Sample], decode: Decode) -> Result<Vec<Vec<(f64, f64)>>> {
        data.iter().map(|s| self.predict(&s.image.cast(), decode)).collect()
    }

    /// Per-landmark mean radial error in pixels over `data`.
    pub fn validate(&self, data: &[Sample], decode: Decode) -> Result<Vec<f64>> {
        if data.is_empty() {
            return Err(Error::config("validation set is empty"));
        }
        let preds = self.predict_all(data, decode)?;
        let gts: Vec<_> = data.iter().map(|s| s.landmarks.coords.clone()).collect();
        Ok(mre(&radial_errors(&preds, &gts, 1.0)?)?.per_landmark)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut header = vec![
            self.arch.height as u32,
            self.arch.width as u32,
            self.arch.in_channels as u32,
            self.arch.landmarks as u32,
            self.arch.depth as u32,
        ];
        header.extend(self.arch.widths.iter().map(|&w| w as u32));
        let tensors: Vec<&Tensor<S>> = self.params.iter().collect();
        checkpoint::write(path, LEARNER_MAGIC, &header, &tensors)
    }

    /// Loads parameters; optimizer state starts fresh.
    pub fn load(path: &Path) -> Result<Self> {
        let (header, params) = checkpoint::read::<S>(path, LEARNER_MAGIC)?;
        let bad = |msg: &str| Error::format(path, 0, msg.to_string());
        if header.len() < 5 {
            return Err(bad("architecture header too short"));
        }
        let depth = header[4] as usize;
        if header.len() != 5 + depth {
            return Err(bad("architecture header does not match its depth"));
        }
        let arch = Architecture {
            height: header[0] as usize,
            width: header[1] as usize,
            in_channels: header[2] as usize,
            landmarks: header[3] as usize,
            depth,
            widths: header[5..].iter().map(|&w| w as usize).collect(),
        };
        arch.validate().map_err(|e| bad(&e.to_string()))?;
        let shapes = arch.parameter_shapes();
        if shapes.len() != params.len() || shapes.iter().zip(&params).any(|(s, p)| p.shape() != s.as_slice()) {
            return Err(bad("parameter shapes do not match the architecture"));
        }
        let optim = params.iter().map(|p| AdamState::new(p.shape())).collect();
        Ok(Self {
            arch,
            params,
            optim,
            seed: 0,
        })
    }
}

/// Mean squared coordinate error of soft-argmax decoded channels against
/// `truth`, and its gradient w.r.t. the raw `N x H x W` output. The loss is
/// the mean over all `2N` coordinates.
pub fn coordinate_loss<S: Scalar>(out: &Tensor<S>, truth: &[(f64, f64)]) -> Result<(S, Tensor<S>)> {
    let (per, grad) = coordinate_loss_per_landmark(out, truth)?;
    let n = S::from_usize(per.len()).unwrap();
    Ok((per.into_iter().fold(S::zero(), |a, b| a + b) / n, grad))
}

/// Per-landmark `((r - r*)^2 + (c - c*)^2) / 2`, with the gradient of their mean.
pub fn coordinate_loss_per_landmark<S: Scalar>(out: &Tensor<S>, truth: &[(f64, f64)]) -> Result<(Vec<S>, Tensor<S>)> {
    let &[n, h, w] = out.shape() else {
        return Err(Error::dim("coordinate loss needs an N x H x W output"));
    };
    if truth.len() != n {
        return Err(Error::dim(format!("{} ground-truth points for {n} channels", truth.len())));
    }
    let half = S::from_f64_lossy(0.5);
    let denom = S::from_usize(2 * n).unwrap();
    let two = S::from_f64_lossy(2.0);
    let mut per = Vec::with_capacity(n);
    let mut grad = Vec::with_capacity(out.len());
    for (i, &(tr, tc)) in truth.iter().enumerate() {
        let ch = Tensor::from_parts(vec![h, w], out.slab(i).to_vec());
        let ((r, c), probs) = soft_argmax_with_probs(&ch)?;
        let (dr, dc) = (r - S::from_f64_lossy(tr), c - S::from_f64_lossy(tc));
        per.push((dr * dr + dc * dc) * half);
        let g = soft_argmax_backward(&probs, (r, c), (two * dr / denom, two * dc / denom));
        grad.extend_from_slice(g.data());
    }
    Ok((per, Tensor::from_parts(out.shape().to_vec(), grad)))
}

/// Scalar type the learner runs in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F64,
    F32,
}

/// A learner of either precision.
#[derive(Debug, Clone, PartialEq)]
pub enum Network {
    F64(UNet<f64>),
    F32(UNet<f32>),
}

macro_rules! dispatch {
    ($self:expr, $net:ident => $body:expr) => {
        match $self {
            Network::F64($net) => $body,
            Network::F32($net) => $body,
        }
    };
}

impl Network {
    pub fn build(arch: Architecture, precision: Precision, seed: u64) -> Result<Self> {
        Ok(match precision {
            Precision::F64 => Network::F64(UNet::build(arch, seed)?),
            Precision::F32 => Network::F32(UNet::build(arch, seed)?),
        })
    }

    pub fn load(path: &Path, precision: Precision) -> Result<Self> {
        Ok(match precision {
            Precision::F64 => Network::F64(UNet::load(path)?),
            Precision::F32 => Network::F32(UNet::load(path)?),
        })
    }

    pub fn precision(&self) -> Precision {
        match self {
            Network::F64(_) => Precision::F64,
            Network::F32(_) => Precision::F32,
        }
    }

    pub fn architecture(&self) -> &Architecture {
        dispatch!(self, n => n.architecture())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        dispatch!(self, n => n.save(path))
    }

    pub fn params_bitwise_eq(&self, other: &Self) -> bool {
        match (self, other) {
            (Network::F64(a), Network::F64(b)) => a.params_bitwise_eq(b),
            (Network::F32(a), Network::F32(b)) => a.params_bitwise_eq(b),
            _ => false,
        }
    }

    pub fn train_one_epoch(
        &mut self,
        data: &[Sample],
        sigmas: &SigmaVector,
        settings: TrainSettings,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<f64>> {
        dispatch!(self, n => n.train_one_epoch(data, sigmas, settings, rng))
    }

    pub fn train_coordreg_epoch(&mut self, data: &[Sample], settings: TrainSettings, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        dispatch!(self, n => n.train_coordreg_epoch(data, settings, rng))
    }

    pub fn validate(&self, data: &[Sample], decode: Decode) -> Result<Vec<f64>> {
        dispatch!(self, n => n.validate(data, decode))
    }

    pub fn predict_all(&self, data: &[Sample], decode: Decode) -> Result<Vec<Vec<(f64, f64)>>> {
        dispatch!(self, n => n.predict_all(data, decode))
    }
}
