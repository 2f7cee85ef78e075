//! Per-landmark policy controllers: a small MLP mapping the landmark's recent
//! training losses to probabilities over `Δσ ∈ {-1, 0, +1}`, trained with
//! REINFORCE on `R = C - ε`.

use std::collections::VecDeque;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::numkernel::{adam_step, linear, linear_backward, relu, relu_backward, softmax, AdamState, Tensor};

const CONTROLLER_MAGIC: &[u8; 8] = b"AHLCTRL\0";

/// Action values in index order.
pub const ACTIONS: [f64; 3] = [-1.0, 0.0, 1.0];

/// Layer sizes of the policy MLP.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyShape {
    pub input: usize,
    pub hidden: Vec<usize>,
}

impl Default for PolicyShape {
    fn default() -> Self {
        Self {
            input: 5,
            hidden: vec![64, 32],
        }
    }
}

impl PolicyShape {
    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::new();
        let mut prev = self.input;
        for &h in &self.hidden {
            dims.push((h, prev));
            prev = h;
        }
        dims.push((ACTIONS.len(), prev));
        dims
    }
}

/// The last `capacity` per-epoch losses of one landmark, oldest first.
#[derive(Debug, Clone, PartialEq)]
pub struct LossHistory {
    capacity: usize,
    values: VecDeque<f64>,
}

impl LossHistory {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            values: VecDeque::with_capacity(capacity),
        }
    }

    pub fn push(&mut self, loss: f64) {
        if self.values.len() == self.capacity {
            self.values.pop_front();
        }
        self.values.push_back(loss);
    }

    pub fn extend(&mut self, losses: impl IntoIterator<Item = f64>) {
        losses.into_iter().for_each(|l| self.push(l));
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Full-length input vector; missing leading entries repeat the oldest value.
    pub fn as_input(&self) -> Result<Vec<f64>> {
        let Some(&oldest) = self.values.front() else {
            return Err(Error::config("controller loss history is empty"));
        };
        let mut v = vec![oldest; self.capacity - self.values.len()];
        v.extend(self.values.iter().copied());
        Ok(v)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActionSample {
    pub delta: f64,
    pub probs: [f64; 3],
    pub index: usize,
}

/// One (input, action, reward) triple for a REINFORCE update.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub history: Vec<f64>,
    pub index: usize,
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Controller {
    shape: PolicyShape,
    params: Vec<Tensor<f64>>,
    optim: Vec<AdamState<f64>>,
    pub history: LossHistory,
    pub frozen: bool,
    pub lr: f64,
}

struct PolicyTrace {
    inputs: Vec<Tensor<f64>>,
    pre: Vec<Tensor<f64>>,
    probs: [f64; 3],
}

impl Controller {
    /// He-initialised hidden layers, zero output layer (uniform start policy).
    pub fn new(shape: PolicyShape, lr: f64, seed: u64) -> Result<Self> {
        if shape.input == 0 || shape.hidden.iter().any(|&h| h == 0) {
            return Err(Error::config("controller layer sizes must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = shape.layer_dims();
        let last = dims.len() - 1;
        let mut params = Vec::new();
        for (l, &(m, n)) in dims.iter().enumerate() {
            if l == last {
                params.push(Tensor::zeros(&[m, n]));
            } else {
                let normal = Normal::new(0.0, (2.0 / n as f64).sqrt()).expect("valid std");
                params.push(Tensor::from_fn(&[m, n], |_| normal.sample(&mut rng)));
            }
            params.push(Tensor::zeros(&[m]));
        }
        let optim = params.iter().map(|p| AdamState::new(p.shape())).collect();
        Ok(Self {
            history: LossHistory::new(shape.input),
            shape,
            params,
            optim,
            frozen: false,
            lr,
        })
    }

    pub fn shape(&self) -> &PolicyShape {
        &self.shape
    }

    pub fn params(&self) -> &[Tensor<f64>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<f64>] {
        &mut self.params
    }

    pub fn params_bitwise_eq(&self, other: &Self) -> bool {
        self.params.len() == other.params.len()
            && self.params.iter().zip(&other.params).all(|(a, b)| a.bitwise_eq(b))
    }

    fn trace(&self, history: &[f64]) -> Result<PolicyTrace> {
        if history.len() != self.shape.input {
            return Err(Error::dim(format!(
                "controller expects {} inputs, got {}",
                self.shape.input,
                history.len()
            )));
        }
        let mut x = Tensor::new(vec![history.len()], history.to_vec())?;
        let layers = self.params.len() / 2;
        let mut inputs = Vec::with_capacity(layers);
        let mut pre = Vec::with_capacity(layers);
        for l in 0..layers {
            let z = linear(&x, &self.params[2 * l], &self.params[2 * l + 1])?;
            inputs.push(x);
            x = if l + 1 < layers { relu(&z) } else { z.clone() };
            pre.push(z);
        }
        let p = softmax(&x)?;
        let d = p.data();
        Ok(PolicyTrace {
            inputs,
            pre,
            probs: [d[0], d[1], d[2]],
        })
    }

    /// Action probabilities for a full-length loss history.
    pub fn policy_forward(&self, history: &[f64]) -> Result<[f64; 3]> {
        Ok(self.trace(history)?.probs)
    }

    /// `-(1/K) Σ_j R_j log p(a_j | h_j)` and its gradient w.r.t. every parameter.
    pub fn surrogate_loss_and_grads(&self, trajectories: &[Trajectory]) -> Result<(f64, Vec<Tensor<f64>>)> {
        if trajectories.is_empty() {
            return Err(Error::config("REINFORCE update needs at least one trajectory"));
        }
        let k = trajectories.len() as f64;
        let mut loss = 0.0;
        let mut grads: Vec<Tensor<f64>> = self.params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        let layers = self.params.len() / 2;
        for t in trajectories {
            if t.index >= ACTIONS.len() {
                return Err(Error::config(format!("action index {} out of range", t.index)));
            }
            let tr = self.trace(&t.history)?;
            loss -= t.reward * tr.probs[t.index].ln() / k;
            // d(-R/K log p_a)/d logits = -(R/K) (onehot_a - p)
            let scale = -t.reward / k;
            let g: Vec<f64> = (0..3)
                .map(|c| scale * (f64::from(u8::from(c == t.index)) - tr.probs[c]))
                .collect();
            let mut gz = Tensor::new(vec![3], g)?;
            for l in (0..layers).rev() {
                let lg = linear_backward(&tr.inputs[l], &self.params[2 * l], &gz)?;
                grads[2 * l].add_assign(&lg.weights)?;
                grads[2 * l + 1].add_assign(&lg.bias)?;
                if l > 0 {
                    gz = relu_backward(&tr.pre[l - 1], &lg.input)?;
                }
            }
        }
        Ok((loss, grads))
    }

    /// One Adam step on the REINFORCE surrogate. Frozen controllers are left
    /// untouched.
    pub fn reinforce_update(&mut self, trajectories: &[Trajectory]) -> Result<()> {
        if trajectories.is_empty() {
            return Err(Error::config("REINFORCE update needs at least one trajectory"));
        }
        if self.frozen {
            return Ok(());
        }
        let (_, grads) = self.surrogate_loss_and_grads(trajectories)?;
        for ((p, g), st) in self.params.iter_mut().zip(&grads).zip(&mut self.optim) {
            adam_step(p, g, st, self.lr)?;
        }
        Ok(())
    }
}

/// Inverse-CDF draw with a given uniform variate `u ∈ [0, 1)`.
pub fn sample_action_with(probs: [f64; 3], u: f64) -> ActionSample {
    let mut acc = 0.0;
    let mut index = ACTIONS.len() - 1;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            index = i;
            break;
        }
    }
    // never land on a zero-probability tail through round-off
    while probs[index] == 0.0 && index > 0 {
        index -= 1;
    }
    ActionSample {
        delta: ACTIONS[index],
        probs,
        index,
    }
}

pub fn sample_action(probs: [f64; 3], rng: &mut impl Rng) -> ActionSample {
    sample_action_with(probs, rng.gen::<f64>())
}

pub fn compute_reward(epsilon: f64, c: f64) -> f64 {
    c - epsilon
}

/// Writes all controllers into one checkpoint file.
pub fn save_controllers(path: &Path, controllers: &[Controller]) -> Result<()> {
    let Some(first) = controllers.first() else {
        return Err(Error::config("no controllers to save"));
    };
    let mut header = vec![controllers.len() as u32, first.shape.input as u32, first.shape.hidden.len() as u32];
    header.extend(first.shape.hidden.iter().map(|&h| h as u32));
    header.extend(controllers.iter().map(|c| u32::from(c.frozen)));
    let tensors: Vec<&Tensor<f64>> = controllers.iter().flat_map(|c| c.params.iter()).collect();
    checkpoint::write(path, CONTROLLER_MAGIC, &header, &tensors)
}

/// Reads controllers back; optimizer state and histories start fresh.
pub fn load_controllers(path: &Path, lr: f64) -> Result<Vec<Controller>> {
    let (header, tensors) = checkpoint::read::<f64>(path, CONTROLLER_MAGIC)?;
    let bad = |msg: &str| Error::format(path, 0, msg.to_string());
    if header.len() < 3 {
        return Err(bad("controller header too short"));
    }
    let (n, input, depth) = (header[0] as usize, header[1] as usize, header[2] as usize);
    if header.len() != 3 + depth + n {
        return Err(bad("controller header length mismatch"));
    }
    let shape = PolicyShape {
        input,
        hidden: header[3..3 + depth].iter().map(|&h| h as usize).collect(),
    };
    let per = 2 * (depth + 1);
    if tensors.len() != n * per {
        return Err(bad("controller tensor count mismatch"));
    }
    let mut out = Vec::with_capacity(n);
    for (i, chunk) in tensors.chunks(per).enumerate() {
        let mut c = Controller::new(shape.clone(), lr, 0).map_err(|e| bad(&e.to_string()))?;
        for (p, t) in c.params.iter_mut().zip(chunk) {
            if p.shape() != t.shape() {
                return Err(bad("controller parameter shape mismatch"));
            }
            *p = t.clone();
        }
        c.frozen = header[3 + depth + i] != 0;
        out.push(c);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use crate::numkernel::{finite_diff_grad, max_scaled_error};
    use proptest::prelude::*;

    fn ctrl(seed: u64) -> Controller {
        Controller::new(PolicyShape::default(), 1e-3, seed).unwrap()
    }

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn history_pads_with_oldest() {
        let mut h = LossHistory::new(5);
        assert!(h.as_input().is_err());
        h.extend([0.3, 0.2]);
        assert_eq!(h.as_input().unwrap(), vec![0.3, 0.3, 0.3, 0.3, 0.2]);
        h.extend([0.1, 0.05, 0.04, 0.03]);
        assert_eq!(h.as_input().unwrap(), vec![0.2, 0.1, 0.05, 0.04, 0.03]);
    }

    #[test]
    fn fresh_policy_is_uniform() {
        let c = ctrl(3);
        for h in [[0.0; 5], [1.0, 2.0, 3.0, 4.0, 5.0], [0.01, 0.5, 7.0, 0.2, 0.0]] {
            let p = c.policy_forward(&h).unwrap();
            for v in p {
                assert_eq!(v, 1.0 / 3.0);
            }
        }
        assert!(c.policy_forward(&[0.0; 4]).is_err());
    }

    #[test]
    fn sample_action_examples() {
        let s = sample_action_with([0.7, 0.2, 0.1], 0.75);
        assert_eq!((s.index, s.delta), (1, 0.0));
        let mut r = rng(0);
        for _ in 0..1000 {
            assert_eq!(sample_action([1.0, 0.0, 0.0], &mut r).delta, -1.0);
        }
        assert_eq!(sample_action_with([0.5, 0.5, 0.0], 0.999_999_999_999).index, 1);
    }

    #[test]
    fn sample_frequency_matches_probability() {
        let mut r = rng(11);
        let n = 100_000;
        let hits = (0..n)
            .filter(|_| sample_action([0.7, 0.2, 0.1], &mut r).index == 0)
            .count();
        let f = hits as f64 / n as f64;
        assert!((f - 0.7).abs() <= 0.01, "frequency {f}");
    }

    #[test]
    fn sampling_is_reproducible() {
        let draw = |seed| {
            let mut r = rng(seed);
            (0..50)
                .map(|_| sample_action([0.3, 0.3, 0.4], &mut r).index)
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(5), draw(5));
    }

    #[test]
    fn reward_examples() {
        assert_eq!(compute_reward(0.0, 25.0), 25.0);
        assert_eq!(compute_reward(25.0, 25.0), 0.0);
        assert_eq!(compute_reward(30.0, 25.0), -5.0);
    }

    #[test]
    fn zero_reward_leaves_parameters() {
        let mut c = ctrl(1);
        let before = c.clone();
        let t = vec![
            Trajectory {
                history: vec![0.1; 5],
                index: 0,
                reward: 0.0,
            };
            4
        ];
        c.reinforce_update(&t).unwrap();
        assert!(c.params_bitwise_eq(&before));
        assert!(c.reinforce_update(&[]).is_err());
    }

    #[test]
    fn logit_gradient_at_uniform_policy() {
        // with a zero output layer the output-bias gradient is the logit
        // gradient of -R log p_0, i.e. -(onehot - 1/3)
        let c = ctrl(2);
        let t = [Trajectory {
            history: vec![0.4, 0.3, 0.2, 0.1, 0.0],
            index: 0,
            reward: 1.0,
        }];
        let (_, g) = c.surrogate_loss_and_grads(&t).unwrap();
        let bias = g.last().unwrap().data();
        let expected = [-2.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0];
        for (a, b) in bias.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn surrogate_gradients_match_finite_differences() {
        let mut r = rng(4);
        for inst in 0..20 {
            let mut c = ctrl(inst);
            // non-zero output layer so every gradient path is exercised
            let n = c.params().len();
            let normal = Normal::new(0.0, 0.3).unwrap();
            for k in [n - 2, n - 1] {
                let shape = c.params()[k].shape().to_vec();
                c.params_mut()[k] = Tensor::from_fn(&shape, |_| normal.sample(&mut r));
            }
            let trajs: Vec<Trajectory> = (0..3)
                .map(|_| Trajectory {
                    history: (0..5).map(|_| r.gen_range(0.0..1.0)).collect(),
                    index: r.gen_range(0..3),
                    reward: r.gen_range(-5.0..25.0),
                })
                .collect();
            let (_, grads) = c.surrogate_loss_and_grads(&trajs).unwrap();
            for (k, g) in grads.iter().enumerate() {
                let fd = finite_diff_grad(
                    |t| {
                        let mut probe = c.clone();
                        probe.params_mut()[k] = t.clone();
                        probe.surrogate_loss_and_grads(&trajs).unwrap().0
                    },
                    &c.params()[k],
                    1e-6,
                );
                let err = max_scaled_error(g.data(), fd.data(), 1e-4);
                assert!(err <= 1e-5, "instance {inst} param {k}: {err}");
            }
        }
    }

    #[test]
    fn positive_reward_raises_chosen_log_probability() {
        let h = vec![0.5, 0.4, 0.3, 0.2, 0.1];
        for index in 0..3 {
            let mut c = ctrl(9);
            let before = c.policy_forward(&h).unwrap()[index];
            c.reinforce_update(&[Trajectory {
                history: h.clone(),
                index,
                reward: 2.0,
            }])
            .unwrap();
            assert!(c.policy_forward(&h).unwrap()[index] > before);
        }
    }

    #[test]
    fn frozen_controller_is_invariant() {
        let mut c = ctrl(1);
        c.frozen = true;
        let before = c.clone();
        c.reinforce_update(&[Trajectory {
            history: vec![0.2; 5],
            index: 2,
            reward: 10.0,
        }])
        .unwrap();
        assert_eq!(c, before);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut cs: Vec<_> = (0..3).map(ctrl).collect();
        cs[1].frozen = true;
        cs[2]
            .reinforce_update(&[Trajectory {
                history: vec![0.1; 5],
                index: 1,
                reward: 3.0,
            }])
            .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("controllers.ckpt");
        save_controllers(&path, &cs).unwrap();
        let back = load_controllers(&path, 1e-3).unwrap();
        assert_eq!(back.len(), 3);
        for (a, b) in cs.iter().zip(&back) {
            assert!(a.params_bitwise_eq(b));
            assert_eq!(a.frozen, b.frozen);
        }
    }

    proptest! {
        #[test]
        fn probabilities_sum_to_one(seed in 0u64..1000, h in proptest::collection::vec(0.0f64..10.0, 5)) {
            let mut c = ctrl(seed);
            let mut r = rng(seed);
            let normal = Normal::new(0.0, 1.0).unwrap();
            let n = c.params().len();
            let shape = c.params()[n - 2].shape().to_vec();
            c.params_mut()[n - 2] = Tensor::from_fn(&shape, |_| normal.sample(&mut r));
            let p = c.policy_forward(&h).unwrap();
            prop_assert!(p.iter().all(|&v| v > 0.0));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }
}
