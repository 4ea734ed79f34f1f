//! Dense feed-forward networks with exact reverse-mode gradients.
//!
//! Parameters of an [`Mlp`] live in one flat [`ParamVector`]. Layer `l`
//! occupies `fan_out·fan_in` row-major weights followed by `fan_out` biases.
//! Hidden layers use the spec's activation; the output layer is always
//! linear.

use alloc::vec;
use alloc::vec::Vec;
use core::ops::Deref;

use rand::Rng;

use crate::error::{check_finite, check_len, Error, Result};
use crate::math;
use crate::rng::standard_normal;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    /// Linear hidden layers. Only used to build hand-checkable test networks.
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => math::tanh(x),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the activation's output.
    #[inline]
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
}

impl MlpSpec {
    pub fn new(input_dim: usize, hidden_dims: &[usize], output_dim: usize) -> Result<Self> {
        Self::with_activation(input_dim, hidden_dims, output_dim, Activation::Tanh)
    }

    pub fn with_activation(
        input_dim: usize,
        hidden_dims: &[usize],
        output_dim: usize,
        activation: Activation,
    ) -> Result<Self> {
        let spec = MlpSpec {
            input_dim,
            hidden_dims: hidden_dims.to_vec(),
            output_dim,
            activation,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// A single affine layer `y = W·x + b`, for test builds.
    pub fn linear(input_dim: usize, output_dim: usize) -> Result<Self> {
        Self::with_activation(input_dim, &[], output_dim, Activation::Identity)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::invalid("input_dim", 0, ">= 1"));
        }
        if self.output_dim == 0 {
            return Err(Error::invalid("output_dim", 0, ">= 1"));
        }
        if let Some(pos) = self.hidden_dims.iter().position(|&d| d == 0) {
            return Err(Error::invalid(
                alloc::format!("hidden_dims[{pos}]"),
                0,
                ">= 1",
            ));
        }
        if self.hidden_dims.is_empty() && self.activation != Activation::Identity {
            return Err(Error::invalid(
                "hidden_dims",
                "[]",
                "at least one hidden layer",
            ));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` for each layer, input to output.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 1);
        let mut fan_in = self.input_dim;
        for &h in &self.hidden_dims {
            dims.push((fan_in, h));
            fan_in = h;
        }
        dims.push((fan_in, self.output_dim));
        dims
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims()
            .iter()
            .map(|&(fan_in, fan_out)| (fan_in + 1) * fan_out)
            .sum()
    }
}

/// Flat, ordered trainable scalars of a network or policy.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn zeros(len: usize) -> Self {
        ParamVector(vec![0.0; len])
    }

    pub fn from_vec(values: Vec<f64>) -> Result<Self> {
        check_finite("parameter vector", &values)?;
        Ok(ParamVector(values))
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    /// `self += alpha · other`
    pub fn add_scaled(&mut self, alpha: f64, other: &[f64]) -> Result<()> {
        check_len("parameter vector", self.0.len(), other.len())?;
        for (p, g) in self.0.iter_mut().zip(other) {
            *p += alpha * g;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for p in &mut self.0 {
            *p *= factor;
        }
    }

    pub fn norm(&self) -> f64 {
        math::norm(&self.0)
    }
}

impl Deref for ParamVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    spec: MlpSpec,
    params: ParamVector,
}

impl Mlp {
    pub fn new(spec: MlpSpec, params: ParamVector) -> Result<Self> {
        spec.validate()?;
        check_len("parameter vector", spec.param_count(), params.len())?;
        check_finite("parameter vector", &params)?;
        Ok(Mlp { spec, params })
    }

    pub fn zeros(spec: MlpSpec) -> Result<Self> {
        let n = spec.param_count();
        Self::new(spec, ParamVector::zeros(n))
    }

    /// Uniform `±√(6/(fan_in+fan_out))` weights per layer, zero biases.
    pub fn init<R: Rng + ?Sized>(spec: MlpSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let mut values = Vec::with_capacity(spec.param_count());
        for (fan_in, fan_out) in spec.layer_dims() {
            let limit = math::sqrt(6.0 / (fan_in + fan_out) as f64);
            for _ in 0..fan_in * fan_out {
                values.push(rng.random_range(-limit..=limit));
            }
            values.extend(core::iter::repeat_n(0.0, fan_out));
        }
        Self::new(spec, ParamVector(values))
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn set_params(&mut self, params: ParamVector) -> Result<()> {
        check_len("parameter vector", self.params.len(), params.len())?;
        check_finite("parameter vector", &params)?;
        self.params = params;
        Ok(())
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        check_len("network input", self.spec.input_dim, input.len())?;
        let mut trace = self.trace(input);
        Ok(trace.pop().unwrap_or_default())
    }

    /// Forward pass of a single-output network.
    pub fn forward_scalar(&self, input: &[f64]) -> Result<f64> {
        check_len("network output", 1, self.spec.output_dim)?;
        Ok(self.forward(input)?[0])
    }

    /// Gradient of `upstreamᵀ·forward(input)` with respect to the parameters.
    pub fn backward(&self, input: &[f64], upstream: &[f64]) -> Result<ParamVector> {
        let mut grad = ParamVector::zeros(self.params.len());
        self.accumulate_gradient(input, upstream, 1.0, grad.as_mut_slice())?;
        Ok(grad)
    }

    /// `grad += scale · ∂(upstreamᵀ·forward(input))/∂params`.
    pub fn accumulate_gradient(
        &self,
        input: &[f64],
        upstream: &[f64],
        scale: f64,
        grad: &mut [f64],
    ) -> Result<()> {
        check_len("network input", self.spec.input_dim, input.len())?;
        check_len("upstream gradient", self.spec.output_dim, upstream.len())?;
        check_len("gradient buffer", self.params.len(), grad.len())?;
        let trace = self.trace(input);
        self.backprop(&trace, upstream, scale, grad);
        Ok(())
    }

    /// Activations of every layer, starting with the input itself.
    fn trace(&self, input: &[f64]) -> Vec<Vec<f64>> {
        let dims = self.spec.layer_dims();
        let last = dims.len() - 1;
        let mut trace = Vec::with_capacity(dims.len() + 1);
        trace.push(input.to_vec());
        let mut offset = 0;
        for (l, &(fan_in, fan_out)) in dims.iter().enumerate() {
            let weights = &self.params[offset..offset + fan_in * fan_out];
            let biases = &self.params[offset + fan_in * fan_out..offset + (fan_in + 1) * fan_out];
            let prev = &trace[l];
            let out: Vec<f64> = (0..fan_out)
                .map(|o| {
                    let z = math::dot(&weights[o * fan_in..(o + 1) * fan_in], prev) + biases[o];
                    if l == last {
                        z
                    } else {
                        self.spec.activation.apply(z)
                    }
                })
                .collect();
            trace.push(out);
            offset += (fan_in + 1) * fan_out;
        }
        trace
    }

    fn backprop(&self, trace: &[Vec<f64>], upstream: &[f64], scale: f64, grad: &mut [f64]) {
        let dims = self.spec.layer_dims();
        let mut offsets = Vec::with_capacity(dims.len());
        let mut offset = 0;
        for &(fan_in, fan_out) in &dims {
            offsets.push(offset);
            offset += (fan_in + 1) * fan_out;
        }
        let mut delta: Vec<f64> = upstream.iter().map(|g| g * scale).collect();
        for l in (0..dims.len()).rev() {
            let (fan_in, fan_out) = dims[l];
            let off = offsets[l];
            let prev = &trace[l];
            for o in 0..fan_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                let row = &mut grad[off + o * fan_in..off + (o + 1) * fan_in];
                for (g, x) in row.iter_mut().zip(prev) {
                    *g += d * x;
                }
                grad[off + fan_in * fan_out + o] += d;
            }
            if l == 0 {
                break;
            }
            let weights = &self.params[off..off + fan_in * fan_out];
            let mut next = vec![0.0; fan_in];
            for o in 0..fan_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                for (n, w) in next.iter_mut().zip(&weights[o * fan_in..(o + 1) * fan_in]) {
                    *n += w * d;
                }
            }
            for (n, y) in next.iter_mut().zip(prev) {
                *n *= self.spec.activation.derivative_from_output(*y);
            }
            delta = next;
        }
    }
}

/// `Σ_d [ −(a_d−μ_d)²/(2σ_d²) − ln σ_d − ½ln 2π ]` with `σ = exp(log_std)`.
pub fn gaussian_log_prob(mean: &[f64], log_std: &[f64], action: &[f64]) -> Result<f64> {
    check_len("action", mean.len(), action.len())?;
    check_len("log_std", mean.len(), log_std.len())?;
    let mut total = 0.0;
    for d in 0..mean.len() {
        let std = math::exp(log_std[d]);
        if !std.is_finite() || std <= 0.0 {
            return Err(Error::NonFinite {
                what: "policy std",
                index: d,
            });
        }
        let z = (action[d] - mean[d]) / std;
        total += -0.5 * z * z - log_std[d] - math::HALF_LN_2PI;
    }
    Ok(total)
}

/// Diagonal Gaussian policy with a state-independent `log_std`.
///
/// The flat parameter layout used by optimizers is the mean network's
/// parameters followed by `log_std`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPolicy {
    mean: Mlp,
    log_std: Vec<f64>,
}

impl GaussianPolicy {
    pub fn new(mean: Mlp, log_std: Vec<f64>) -> Result<Self> {
        check_len("log_std", mean.spec().output_dim, log_std.len())?;
        check_finite("log_std", &log_std)?;
        Ok(GaussianPolicy { mean, log_std })
    }

    pub fn init<R: Rng + ?Sized>(spec: MlpSpec, init_std: f64, rng: &mut R) -> Result<Self> {
        if !(init_std.is_finite() && init_std > 0.0) {
            return Err(Error::invalid("init_std", init_std, "> 0"));
        }
        let action_dim = spec.output_dim;
        let mean = Mlp::init(spec, rng)?;
        Self::new(mean, vec![math::ln(init_std); action_dim])
    }

    pub fn mean_net(&self) -> &Mlp {
        &self.mean
    }

    pub fn log_std(&self) -> &[f64] {
        &self.log_std
    }

    pub fn state_dim(&self) -> usize {
        self.mean.spec().input_dim
    }

    pub fn action_dim(&self) -> usize {
        self.log_std.len()
    }

    pub fn param_count(&self) -> usize {
        self.mean.param_count() + self.log_std.len()
    }

    pub fn flat(&self) -> ParamVector {
        let mut values = Vec::with_capacity(self.param_count());
        values.extend_from_slice(self.mean.params());
        values.extend_from_slice(&self.log_std);
        ParamVector(values)
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        check_len("policy parameters", self.param_count(), flat.len())?;
        check_finite("policy parameters", flat)?;
        let split = self.mean.param_count();
        self.mean.params.0.copy_from_slice(&flat[..split]);
        self.log_std.copy_from_slice(&flat[split..]);
        Ok(())
    }

    pub fn with_flat(&self, flat: &[f64]) -> Result<Self> {
        let mut out = self.clone();
        out.set_flat(flat)?;
        Ok(out)
    }

    pub fn mean_action(&self, state: &[f64]) -> Result<Vec<f64>> {
        self.mean.forward(state)
    }

    pub fn log_prob(&self, state: &[f64], action: &[f64]) -> Result<f64> {
        check_len("action", self.action_dim(), action.len())?;
        let mu = self.mean.forward(state)?;
        gaussian_log_prob(&mu, &self.log_std, action)
    }

    /// `action = μ(state) + σ⊙ξ` with `ξ` standard normal, plus its log-density.
    pub fn sample_action<R: Rng + ?Sized>(
        &self,
        state: &[f64],
        rng: &mut R,
    ) -> Result<(Vec<f64>, f64)> {
        let mu = self.mean.forward(state)?;
        let action: Vec<f64> = mu
            .iter()
            .zip(&self.log_std)
            .map(|(m, ls)| m + math::exp(*ls) * standard_normal(rng))
            .collect();
        let lp = gaussian_log_prob(&mu, &self.log_std, &action)?;
        Ok((action, lp))
    }

    /// Returns `log π(action|state)` and adds `scale·∇ log π` to `grad`
    /// (flat layout).
    pub fn accumulate_log_prob_grad(
        &self,
        state: &[f64],
        action: &[f64],
        scale: f64,
        grad: &mut [f64],
    ) -> Result<f64> {
        self.accumulate_log_prob_grad_with(state, action, grad, |_| scale)
    }

    /// Like [`Self::accumulate_log_prob_grad`], with the scale chosen from
    /// the log-prob itself. A zero scale skips the backward pass.
    pub fn accumulate_log_prob_grad_with(
        &self,
        state: &[f64],
        action: &[f64],
        grad: &mut [f64],
        scale_for: impl FnOnce(f64) -> f64,
    ) -> Result<f64> {
        check_len("action", self.action_dim(), action.len())?;
        check_len("gradient buffer", self.param_count(), grad.len())?;
        check_len("network input", self.state_dim(), state.len())?;
        let trace = self.mean.trace(state);
        let mu = &trace[trace.len() - 1];
        let lp = gaussian_log_prob(mu, &self.log_std, action)?;
        let scale = scale_for(lp);
        if scale == 0.0 {
            return Ok(lp);
        }
        let split = self.mean.param_count();
        let mut upstream = vec![0.0; self.action_dim()];
        for d in 0..self.action_dim() {
            let inv_var = math::exp(-2.0 * self.log_std[d]);
            let diff = action[d] - mu[d];
            upstream[d] = diff * inv_var;
            grad[split + d] += scale * (diff * diff * inv_var - 1.0);
        }
        self.mean.backprop(&trace, &upstream, scale, &mut grad[..split]);
        Ok(lp)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Step count plus first and second moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub first: Vec<f64>,
    pub second: Vec<f64>,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            step: 0,
            first: vec![0.0; len],
            second: vec![0.0; len],
        }
    }
}

/// One bias-corrected Adam descent step. A non-finite gradient entry leaves
/// both the parameters and the moments untouched.
pub fn adam_step(
    params: &mut [f64],
    grad: &[f64],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    check_len("gradient", params.len(), grad.len())?;
    check_len("adam moments", params.len(), state.first.len())?;
    check_len("adam moments", params.len(), state.second.len())?;
    check_finite("gradient", grad)?;
    state.step += 1;
    let t = i32::try_from(state.step).unwrap_or(i32::MAX);
    let bias1 = 1.0 - math::powi(cfg.beta1, t);
    let bias2 = 1.0 - math::powi(cfg.beta2, t);
    for i in 0..params.len() {
        let g = grad[i];
        state.first[i] = cfg.beta1 * state.first[i] + (1.0 - cfg.beta1) * g;
        state.second[i] = cfg.beta2 * state.second[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.first[i] / bias1;
        let v_hat = state.second[i] / bias2;
        params[i] -= cfg.lr * m_hat / (math::sqrt(v_hat) + cfg.eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use proptest::prelude::{prop_assert, proptest};

    /// Independent forward pass written directly from the layer formula.
    fn naive_forward(spec: &MlpSpec, params: &[f64], input: &[f64]) -> Vec<f64> {
        let mut x = input.to_vec();
        let mut off = 0;
        let layers = spec.layer_dims();
        for (l, (fi, fo)) in layers.iter().copied().enumerate() {
            let mut y = vec![0.0; fo];
            for o in 0..fo {
                let mut z = params[off + fi * fo + o];
                for i in 0..fi {
                    z += params[off + o * fi + i] * x[i];
                }
                y[o] = if l + 1 == layers.len() {
                    z
                } else {
                    match spec.activation {
                        Activation::Tanh => z.tanh(),
                        Activation::Identity => z,
                    }
                };
            }
            off += (fi + 1) * fo;
            x = y;
        }
        x
    }

    fn finite_difference(net: &Mlp, input: &[f64], upstream: &[f64], h: f64) -> Vec<f64> {
        let base = net.params().to_vec();
        (0..base.len())
            .map(|k| {
                let mut plus = base.clone();
                plus[k] += h;
                let mut minus = base.clone();
                minus[k] -= h;
                let fp = naive_forward(net.spec(), &plus, input);
                let fm = naive_forward(net.spec(), &minus, input);
                (math::dot(&fp, upstream) - math::dot(&fm, upstream)) / (2.0 * h)
            })
            .collect()
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        let scale = math::norm(a).max(math::norm(b)).max(1e-8);
        diff / scale
    }

    #[test]
    fn param_count_matches_layer_formula() {
        let spec = MlpSpec::new(4, &[128, 64], 2).unwrap();
        assert_eq!(spec.param_count(), 5 * 128 + 129 * 64 + 65 * 2);
    }

    #[test]
    fn spec_rejects_zero_dims_and_missing_hidden() {
        assert!(MlpSpec::new(0, &[3], 1).is_err());
        assert!(MlpSpec::new(2, &[3, 0], 1).is_err());
        assert!(MlpSpec::new(2, &[], 1).is_err());
        assert!(MlpSpec::linear(1, 1).is_ok());
    }

    #[test]
    fn zero_network_outputs_zero() {
        let net = Mlp::zeros(MlpSpec::new(3, &[5, 4], 2).unwrap()).unwrap();
        assert_eq!(net.forward(&[1.0, -2.0, 3.5]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn identity_linear_layer_passes_input_through() {
        let spec = MlpSpec::linear(3, 3).unwrap();
        let mut params = vec![0.0; spec.param_count()];
        for i in 0..3 {
            params[i * 3 + i] = 1.0;
        }
        let net = Mlp::new(spec, ParamVector::from_vec(params).unwrap()).unwrap();
        assert_eq!(net.forward(&[0.5, -1.0, 2.0]).unwrap(), vec![0.5, -1.0, 2.0]);
    }

    #[test]
    fn forward_matches_hand_rolled_pass() {
        let spec = MlpSpec::new(3, &[4], 2).unwrap();
        let net = Mlp::init(spec.clone(), &mut seeded(11)).unwrap();
        let got = net.forward(&[1.0, 0.0, 1.0]).unwrap();
        let want = naive_forward(&spec, net.params(), &[1.0, 0.0, 1.0]);
        assert_eq!(got.len(), 2);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-14, "{g} vs {w}");
        }
    }

    #[test]
    fn forward_rejects_wrong_input_length() {
        let net = Mlp::zeros(MlpSpec::new(3, &[4], 2).unwrap()).unwrap();
        let err = net.forward(&[1.0, 2.0]).unwrap_err();
        assert_eq!(
            err,
            Error::DimensionMismatch {
                what: "network input",
                expected: 3,
                actual: 2
            }
        );
        assert!(net.backward(&[1.0, 2.0, 3.0], &[1.0]).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let net = Mlp::init(MlpSpec::new(3, &[4], 2).unwrap(), &mut seeded(1)).unwrap();
        let g = net.backward(&[0.3, -0.2, 0.9], &[0.0, 0.0]).unwrap();
        assert!(g.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn linear_unit_hand_derivative() {
        let spec = MlpSpec::linear(1, 1).unwrap();
        let net = Mlp::new(spec, ParamVector::from_vec(vec![0.7, -0.3]).unwrap()).unwrap();
        let g = net.backward(&[2.0], &[1.0]).unwrap();
        assert_eq!(&*g, &[2.0, 1.0]);
    }

    #[test]
    fn small_net_gradient_matches_finite_differences() {
        let spec = MlpSpec::new(2, &[3], 1).unwrap();
        let mut rng = seeded(5);
        let net = Mlp::init(spec, &mut rng).unwrap();
        let input = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let g = net.backward(&input, &[1.0]).unwrap();
        let fd = finite_difference(&net, &input, &[1.0], 1e-5);
        assert!(rel_err(&g, &fd) < 1e-4);
    }

    #[test]
    fn random_nets_match_finite_differences() {
        let mut rng = seeded(2024);
        for _ in 0..100 {
            let depth = rng.random_range(1..=4);
            let hidden: Vec<usize> = (0..depth).map(|_| rng.random_range(1..=8)).collect();
            let spec =
                MlpSpec::new(rng.random_range(1..=8), &hidden, rng.random_range(1..=8)).unwrap();
            let mut net = Mlp::init(spec.clone(), &mut rng).unwrap();
            let mut p = net.params().to_vec();
            for (i, v) in p.iter_mut().enumerate() {
                if i % 3 == 0 {
                    *v += rng.random_range(-0.1..0.1);
                }
            }
            net.set_params(ParamVector::from_vec(p).unwrap()).unwrap();
            let input: Vec<f64> = (0..spec.input_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let up: Vec<f64> = (0..spec.output_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let g = net.backward(&input, &up).unwrap();
            let fd = finite_difference(&net, &input, &up, 1e-5);
            assert!(rel_err(&g, &fd) < 1e-4, "{spec:?}");
        }
    }

    #[test]
    fn forward_and_backward_are_pure() {
        let net = Mlp::init(MlpSpec::new(3, &[6, 5], 2).unwrap(), &mut seeded(9)).unwrap();
        let x = [0.1, 0.2, -0.4];
        let a = net.forward(&x).unwrap();
        let b = net.forward(&x).unwrap();
        assert!(a.iter().zip(&b).all(|(p, q)| p.to_bits() == q.to_bits()));
        let ga = net.backward(&x, &[1.0, -1.0]).unwrap();
        let gb = net.backward(&x, &[1.0, -1.0]).unwrap();
        assert!(ga.iter().zip(gb.iter()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn init_respects_glorot_bounds_and_zero_bias() {
        let spec = MlpSpec::new(4, &[6], 2).unwrap();
        let net = Mlp::init(spec, &mut seeded(3)).unwrap();
        let limit0 = (6.0f64 / 10.0).sqrt();
        assert!(net.params()[..24].iter().all(|w| w.abs() <= limit0));
        assert!(net.params()[24..30].iter().all(|&b| b == 0.0));
    }

    fn policy_with(mean_out: &[f64], log_std: &[f64]) -> GaussianPolicy {
        // Zero weights, biases carry the mean.
        let spec = MlpSpec::new(1, &[1], mean_out.len()).unwrap();
        let mut p = vec![0.0; spec.param_count()];
        let n = p.len();
        p[n - mean_out.len()..].copy_from_slice(mean_out);
        let mean = Mlp::new(spec, ParamVector::from_vec(p).unwrap()).unwrap();
        GaussianPolicy::new(mean, log_std.to_vec()).unwrap()
    }

    #[test]
    fn log_prob_analytic_cases() {
        let at_mean = policy_with(&[0.4], &[0.0]).log_prob(&[0.0], &[0.4]).unwrap();
        assert!((at_mean - (-0.918_938_5)).abs() < 1e-7);
        let one_off = policy_with(&[0.0], &[0.0]).log_prob(&[0.0], &[1.0]).unwrap();
        assert!((one_off - (-1.418_938_5)).abs() < 1e-7);
        let two_d = policy_with(&[0.0, 0.0], &[0.0, 2f64.ln()])
            .log_prob(&[0.0], &[1.0, 2.0])
            .unwrap();
        // Independent closed form: product of two normal densities.
        let density = |x: f64, s: f64| {
            (-(x * x) / (2.0 * s * s)).exp() / (s * (2.0 * core::f64::consts::PI).sqrt())
        };
        let want = (density(1.0, 1.0) * density(2.0, 2.0)).ln();
        assert!((two_d - want).abs() < 1e-12);
    }

    #[test]
    fn log_prob_rejects_non_finite_std() {
        let mut p = policy_with(&[0.0], &[0.0]);
        p.log_std[0] = 1e6;
        assert!(matches!(
            p.log_prob(&[0.0], &[0.0]),
            Err(Error::NonFinite { what: "policy std", .. })
        ));
    }

    #[test]
    fn density_integrates_to_one() {
        let p = policy_with(&[0.3], &[(0.7f64).ln()]);
        let (mu, sigma) = (0.3, 0.7);
        let n = 20_000;
        let (lo, hi) = (mu - 8.0 * sigma, mu + 8.0 * sigma);
        let h = (hi - lo) / n as f64;
        // Simpson's rule.
        let mut sum = 0.0;
        for i in 0..=n {
            let x = lo + h * i as f64;
            let w = if i == 0 || i == n { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
            sum += w * p.log_prob(&[0.0], &[x]).unwrap().exp();
        }
        let integral = sum * h / 3.0;
        assert!((0.999..=1.001).contains(&integral), "{integral}");
    }

    #[test]
    fn tiny_std_samples_the_mean() {
        let spec = MlpSpec::new(2, &[3], 2).unwrap();
        let p = GaussianPolicy::init(spec, 1e-12, &mut seeded(4)).unwrap();
        let s = [0.5, -0.5];
        let (a, _) = p.sample_action(&s, &mut seeded(8)).unwrap();
        let mu = p.mean_action(&s).unwrap();
        for (x, m) in a.iter().zip(&mu) {
            assert!((x - m).abs() < 1e-9);
        }
    }

    #[test]
    fn sampling_is_seed_deterministic_and_reports_log_prob() {
        let spec = MlpSpec::new(2, &[3], 2).unwrap();
        let p = GaussianPolicy::init(spec, 0.5, &mut seeded(4)).unwrap();
        let s = [0.1, 0.2];
        let (a1, l1) = p.sample_action(&s, &mut seeded(77)).unwrap();
        let (a2, l2) = p.sample_action(&s, &mut seeded(77)).unwrap();
        assert_eq!(a1, a2);
        assert_eq!(l1.to_bits(), l2.to_bits());
        assert_eq!(l1, p.log_prob(&s, &a1).unwrap());
    }

    #[test]
    fn sample_mean_converges_to_policy_mean() {
        let spec = MlpSpec::new(2, &[3], 1).unwrap();
        let p = GaussianPolicy::init(spec, 0.5, &mut seeded(4)).unwrap();
        let s = [0.3, 0.9];
        let mu = p.mean_action(&s).unwrap()[0];
        let mut rng = seeded(99);
        let n = 100_000;
        let total: f64 = (0..n).map(|_| p.sample_action(&s, &mut rng).unwrap().0[0]).sum();
        let tol = 4.0 * 0.5 / (n as f64).sqrt();
        assert!((total / n as f64 - mu).abs() < tol);
    }

    #[test]
    fn log_prob_gradient_matches_finite_differences() {
        let spec = MlpSpec::new(3, &[4, 3], 2).unwrap();
        let mut rng = seeded(12);
        let p = GaussianPolicy::init(spec, 0.6, &mut rng).unwrap();
        let s = [0.2, -0.7, 0.4];
        let a = [0.5, -0.1];
        let mut g = vec![0.0; p.param_count()];
        p.accumulate_log_prob_grad(&s, &a, 1.0, &mut g).unwrap();
        let base = p.flat();
        let h = 1e-5;
        let fd: Vec<f64> = (0..base.len())
            .map(|k| {
                let mut plus = base.to_vec();
                plus[k] += h;
                let mut minus = base.to_vec();
                minus[k] -= h;
                let lp = p.with_flat(&plus).unwrap().log_prob(&s, &a).unwrap();
                let lm = p.with_flat(&minus).unwrap().log_prob(&s, &a).unwrap();
                (lp - lm) / (2.0 * h)
            })
            .collect();
        assert!(rel_err(&g, &fd) < 1e-4);
    }

    #[test]
    fn adam_zero_gradient_is_identity() {
        let mut p = vec![1.0, -2.0];
        let mut st = AdamState::new(2);
        adam_step(&mut p, &[0.0, 0.0], &mut st, &AdamConfig::with_lr(0.1)).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
    }

    #[test]
    fn adam_first_step_hand_computation() {
        let mut p = vec![1.0, -2.0];
        let g = [0.5, -0.02];
        let mut st = AdamState::new(2);
        let cfg = AdamConfig::with_lr(0.01);
        adam_step(&mut p, &g, &mut st, &cfg).unwrap();
        // m̂ = g, v̂ = g², so the step is lr·g/(|g|+eps).
        let want0 = 1.0 - 0.01 * 0.5 / (0.5 + 1e-8);
        let want1 = -2.0 - 0.01 * -0.02 / (0.02 + 1e-8);
        assert!((p[0] - want0).abs() < 1e-15);
        assert!((p[1] - want1).abs() < 1e-15);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn adam_second_step_constant_gradient() {
        let mut p = vec![0.0];
        let g = [0.3];
        let mut st = AdamState::new(1);
        let cfg = AdamConfig::with_lr(0.1);
        adam_step(&mut p, &g, &mut st, &cfg).unwrap();
        let after_one = p[0];
        adam_step(&mut p, &g, &mut st, &cfg).unwrap();
        // m₂ = (0.9·0.1 + 0.1)·g = 0.19g, v₂ = (0.999·0.001 + 0.001)·g².
        let m_hat = 0.19 * 0.3 / (1.0 - 0.81);
        let v_hat: f64 = 0.001_999 * 0.09 / (1.0 - 0.998_001);
        let step = 0.1 * m_hat / (v_hat.sqrt() + 1e-8);
        assert!(((after_one - p[0]) - step).abs() < 1e-14);
    }

    #[test]
    fn adam_rejects_non_finite_gradient_without_mutation() {
        let mut p = vec![1.0, 2.0, 3.0];
        let mut st = AdamState::new(3);
        let err = adam_step(&mut p, &[0.0, f64::NAN, 1.0], &mut st, &AdamConfig::with_lr(0.1))
            .unwrap_err();
        assert_eq!(err, Error::NonFinite { what: "gradient", index: 1 });
        assert_eq!(p, vec![1.0, 2.0, 3.0]);
        assert_eq!(st.step, 0);
    }

    proptest! {
        #[test]
        fn adam_with_zero_lr_is_identity(
            params in proptest::collection::vec(-10.0f64..10.0, 1..20),
            seed in 0u64..1000,
        ) {
            let mut rng = seeded(seed);
            let grad: Vec<f64> = params.iter().map(|_| rng.random_range(-5.0..5.0)).collect();
            let mut p = params.clone();
            let mut st = AdamState::new(p.len());
            for _ in 0..3 {
                adam_step(&mut p, &grad, &mut st, &AdamConfig::with_lr(0.0)).unwrap();
            }
            prop_assert!(p.iter().zip(&params).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}
