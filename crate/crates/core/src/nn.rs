//! Fully connected networks with exact reverse-mode gradients, Adam, and a
//! tanh-squashed Gaussian policy head.
//!
//! Activations are row-major `batch × width` buffers. Parameters live in one
//! flat vector; per layer the weights come first (`fan_in × fan_out`,
//! row-major), then the `fan_out` biases.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const LOG_STD_MIN: f64 = -20.0;
pub const LOG_STD_MAX: f64 = 2.0;

const CHECKPOINT_VERSION: u32 = 1;
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// `c = beta·c + op(a)·op(b)` on row-major buffers, with `op(a)` of shape
/// `m × k` and `op(b)` of shape `k × n`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides above describe matrices that fit inside the slices,
    // checked by the assertion, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Layer widths `(input, hidden…, output)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::validation("widths", "need at least input and output widths"));
        }
        if widths.contains(&0) {
            return Err(Error::validation("widths", "every width must be positive"));
        }
        Ok(MlpSpec { widths })
    }

    /// `input → hidden… → output`.
    pub fn with_hidden(input: usize, hidden: &[usize], output: usize) -> Result<Self> {
        let mut widths = Vec::with_capacity(hidden.len() + 2);
        widths.push(input);
        widths.extend_from_slice(hidden);
        widths.push(output);
        MlpSpec::new(widths)
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().expect("validated non-empty")
    }

    pub fn n_layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn n_params(&self) -> usize {
        self.widths.windows(2).map(|w| (w[0] + 1) * w[1]).sum()
    }

    /// Offset of layer `l`'s weight block in the flat vector.
    fn layer_offset(&self, l: usize) -> usize {
        self.widths[..=l].windows(2).map(|w| (w[0] + 1) * w[1]).sum()
    }
}

/// Activations recorded by a batched forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    batch: usize,
    /// `acts[0]` is the input; `acts[l + 1]` the output of layer `l`.
    acts: Vec<Vec<f64>>,
}

impl Tape {
    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn output(&self) -> &[f64] {
        self.acts.last().expect("tape holds at least the input")
    }
}

/// A multilayer perceptron: ReLU on hidden layers, identity on the output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "NetworkDocument", into = "NetworkDocument")]
pub struct Network {
    spec: MlpSpec,
    params: Vec<f64>,
}

impl Network {
    /// Uniform fan-in initialization, `U(-1/√fan_in, 1/√fan_in)` for weights and biases.
    pub fn new<R: Rng + ?Sized>(spec: MlpSpec, rng: &mut R) -> Self {
        let mut params = Vec::with_capacity(spec.n_params());
        for w in spec.widths.windows(2) {
            let bound = 1.0 / (w[0] as f64).sqrt();
            for _ in 0..(w[0] + 1) * w[1] {
                params.push(rng.random_range(-bound..bound));
            }
        }
        Network { spec, params }
    }

    pub fn zeros(spec: MlpSpec) -> Self {
        let params = vec![0.0; spec.n_params()];
        Network { spec, params }
    }

    pub fn from_params(spec: MlpSpec, params: Vec<f64>) -> Result<Self> {
        if params.len() != spec.n_params() {
            return Err(Error::Shape {
                expected: spec.n_params(),
                actual: params.len(),
            });
        }
        Ok(Network { spec, params })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Weight block and bias vector of layer `l`.
    pub fn layer(&self, l: usize) -> (&[f64], &[f64]) {
        let (fan_in, fan_out) = (self.spec.widths[l], self.spec.widths[l + 1]);
        let off = self.spec.layer_offset(l);
        let (w, rest) = self.params[off..].split_at(fan_in * fan_out);
        (w, &rest[..fan_out])
    }

    pub fn layer_mut(&mut self, l: usize) -> (&mut [f64], &mut [f64]) {
        let (fan_in, fan_out) = (self.spec.widths[l], self.spec.widths[l + 1]);
        let off = self.spec.layer_offset(l);
        let (w, rest) = self.params[off..].split_at_mut(fan_in * fan_out);
        (w, &mut rest[..fan_out])
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        let tape = self.forward_batch(input, 1)?;
        Ok(tape.output().to_vec())
    }

    /// Runs `batch` rows at once and keeps every activation for [`Network::backward`].
    pub fn forward_batch(&self, input: &[f64], batch: usize) -> Result<Tape> {
        let expected = batch * self.spec.input_dim();
        if input.len() != expected {
            return Err(Error::Shape {
                expected,
                actual: input.len(),
            });
        }
        let n_layers = self.spec.n_layers();
        let mut acts = Vec::with_capacity(n_layers + 1);
        acts.push(input.to_vec());
        for l in 0..n_layers {
            let (fan_in, fan_out) = (self.spec.widths[l], self.spec.widths[l + 1]);
            let (w, b) = self.layer(l);
            let mut out = Vec::with_capacity(batch * fan_out);
            for _ in 0..batch {
                out.extend_from_slice(b);
            }
            gemm(batch, fan_in, fan_out, &acts[l], false, w, false, 1.0, &mut out);
            if l + 1 < n_layers {
                for x in out.iter_mut() {
                    if *x < 0.0 {
                        *x = 0.0;
                    }
                }
            }
            acts.push(out);
        }
        Ok(Tape { batch, acts })
    }

    /// Backpropagates `grad_out` (`batch × output_dim`).
    ///
    /// Parameter gradients are *added* to `grad_params`. If `grad_input` is
    /// given it is overwritten with the gradient w.r.t. the input rows. The
    /// ReLU derivative at exactly zero is taken to be zero.
    pub fn backward(
        &self,
        tape: &Tape,
        grad_out: &[f64],
        grad_params: &mut [f64],
        grad_input: Option<&mut [f64]>,
    ) {
        let batch = tape.batch;
        let n_layers = self.spec.n_layers();
        assert_eq!(grad_out.len(), batch * self.spec.output_dim(), "grad_out shape");
        assert_eq!(grad_params.len(), self.params.len(), "grad_params shape");
        let mut g = grad_out.to_vec();
        let mut grad_input = grad_input;
        for l in (0..n_layers).rev() {
            let (fan_in, fan_out) = (self.spec.widths[l], self.spec.widths[l + 1]);
            if l + 1 < n_layers {
                for (gi, &a) in g.iter_mut().zip(&tape.acts[l + 1]) {
                    if a <= 0.0 {
                        *gi = 0.0;
                    }
                }
            }
            let off = self.spec.layer_offset(l);
            let (gw, rest) = grad_params[off..].split_at_mut(fan_in * fan_out);
            gemm(fan_in, batch, fan_out, &tape.acts[l], true, &g, false, 1.0, gw);
            let gb = &mut rest[..fan_out];
            for row in g.chunks_exact(fan_out) {
                for (b, x) in gb.iter_mut().zip(row) {
                    *b += x;
                }
            }
            if l > 0 || grad_input.is_some() {
                let (w, _) = self.layer(l);
                let mut g_prev = vec![0.0; batch * fan_in];
                gemm(batch, fan_out, fan_in, &g, false, w, true, 0.0, &mut g_prev);
                if l == 0 {
                    if let Some(gi) = grad_input.take() {
                        assert_eq!(gi.len(), g_prev.len(), "grad_input shape");
                        gi.copy_from_slice(&g_prev);
                    }
                }
                g = g_prev;
            }
        }
    }

    /// Polyak averaging `self ← tau·online + (1 − tau)·self`.
    pub fn soft_update(&mut self, online: &Network, tau: f64) {
        assert_eq!(self.spec, online.spec, "target and online specs differ");
        if tau == 1.0 {
            self.params.copy_from_slice(&online.params);
            return;
        }
        // Written as t + τ(o − t) so that equal parameters stay bit-identical.
        for (t, &o) in self.params.iter_mut().zip(&online.params) {
            *t += tau * (o - *t);
        }
    }
}

/// Bit-exact encoding of `f64` values as hex strings of their IEEE-754 bit
/// patterns, e.g. `1.0 ↦ "3ff0000000000000"`.
pub mod hex {
    use serde::{Deserialize, Deserializer, Serializer};

    use crate::error::{Error, Result};

    pub fn encode(x: f64) -> String {
        format!("{:016x}", x.to_bits())
    }

    pub fn decode(s: &str) -> Result<f64> {
        u64::from_str_radix(s, 16)
            .map(f64::from_bits)
            .map_err(|e| Error::validation("params", format!("bad hex float {s:?}: {e}")))
    }

    pub fn encode_all(xs: &[f64]) -> Vec<String> {
        xs.iter().map(|&x| encode(x)).collect()
    }

    pub fn decode_all(xs: &[String]) -> Result<Vec<f64>> {
        xs.iter().map(|s| decode(s)).collect()
    }

    /// `#[serde(with = "hex::scalar")]`
    pub mod scalar {
        use super::*;

        pub fn serialize<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
            s.serialize_str(&encode(*x))
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
            let s = String::deserialize(d)?;
            decode(&s).map_err(serde::de::Error::custom)
        }
    }

    /// `#[serde(with = "hex::vec")]`
    pub mod vec {
        use super::*;

        pub fn serialize<S: Serializer>(xs: &[f64], s: S) -> Result<S::Ok, S::Error> {
            s.collect_seq(xs.iter().map(|&x| encode(x)))
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
            let v = Vec::<String>::deserialize(d)?;
            decode_all(&v).map_err(serde::de::Error::custom)
        }
    }
}

/// Checkpoint fragment of a [`Network`].
#[derive(Debug, Clone, Serialize, Deserialize)]
struct NetworkDocument {
    version: u32,
    spec: MlpSpec,
    #[serde(with = "hex::vec")]
    params: Vec<f64>,
}

impl TryFrom<NetworkDocument> for Network {
    type Error = Error;

    fn try_from(doc: NetworkDocument) -> Result<Self> {
        if doc.version != CHECKPOINT_VERSION {
            return Err(Error::validation(
                "version",
                format!("unsupported network format {}", doc.version),
            ));
        }
        let spec = MlpSpec::new(doc.spec.widths)?;
        Network::from_params(spec, doc.params)
    }
}

impl From<Network> for NetworkDocument {
    fn from(net: Network) -> Self {
        NetworkDocument {
            version: CHECKPOINT_VERSION,
            spec: net.spec,
            params: net.params,
        }
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    #[serde(with = "hex::scalar")]
    pub lr: f64,
    #[serde(with = "hex::scalar")]
    pub beta1: f64,
    #[serde(with = "hex::scalar")]
    pub beta2: f64,
    #[serde(with = "hex::scalar")]
    pub eps: f64,
    pub t: u64,
    #[serde(with = "hex::vec")]
    m: Vec<f64>,
    #[serde(with = "hex::vec")]
    v: Vec<f64>,
}

impl Adam {
    pub fn new(n_params: usize, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        for len in [params.len(), grads.len()] {
            if len != self.m.len() {
                return Err(Error::Shape {
                    expected: self.m.len(),
                    actual: len,
                });
            }
        }
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// `ln(1 + eˣ)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `ln(1 − tanh(u)²)`, stable for large `|u|`.
pub fn log_one_minus_tanh_sq(u: f64) -> f64 {
    2.0 * (std::f64::consts::LN_2 - u - softplus(-2.0 * u))
}

/// Log-density of `tanh(mean + exp(log_std)·noise)` summed over dimensions.
pub fn squashed_gaussian_log_prob(mean: &[f64], log_std: &[f64], noise: &[f64]) -> f64 {
    let mut lp = 0.0;
    for i in 0..mean.len() {
        let u = mean[i] + log_std[i].exp() * noise[i];
        lp += -0.5 * noise[i] * noise[i] - log_std[i] - HALF_LN_2PI - log_one_minus_tanh_sq(u);
    }
    lp
}

/// Backbone outputs of a [`GaussianPolicy`] for a batch of observations.
#[derive(Debug, Clone)]
pub struct PolicyHead {
    pub tape: Tape,
    /// `batch × action_dim`.
    pub mean: Vec<f64>,
    /// Clamped to `[LOG_STD_MIN, LOG_STD_MAX]`.
    pub log_std: Vec<f64>,
    /// True where the raw output was outside the clamp range.
    pub clamped: Vec<bool>,
}

/// Reparameterized draws for one batch.
#[derive(Debug, Clone)]
pub struct PolicySample {
    pub noise: Vec<f64>,
    pub pre_tanh: Vec<f64>,
    pub actions: Vec<f64>,
    pub log_probs: Vec<f64>,
}

/// Gaussian policy squashed by `tanh`; the backbone emits
/// `[mean₀…mean_{d−1}, log_std₀…log_std_{d−1}]` per observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Network", into = "Network")]
pub struct GaussianPolicy {
    net: Network,
}

impl TryFrom<Network> for GaussianPolicy {
    type Error = Error;

    fn try_from(net: Network) -> Result<Self> {
        GaussianPolicy::from_network(net)
    }
}

impl From<GaussianPolicy> for Network {
    fn from(p: GaussianPolicy) -> Self {
        p.net
    }
}

impl GaussianPolicy {
    pub fn new<R: Rng + ?Sized>(
        obs_dim: usize,
        hidden: &[usize],
        action_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let spec = MlpSpec::with_hidden(obs_dim, hidden, 2 * action_dim)?;
        Ok(GaussianPolicy {
            net: Network::new(spec, rng),
        })
    }

    pub fn from_network(net: Network) -> Result<Self> {
        if net.spec().output_dim() % 2 != 0 {
            return Err(Error::validation(
                "policy",
                "backbone output width must be even (mean and log_std)",
            ));
        }
        Ok(GaussianPolicy { net })
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn network_mut(&mut self) -> &mut Network {
        &mut self.net
    }

    pub fn obs_dim(&self) -> usize {
        self.net.spec().input_dim()
    }

    pub fn action_dim(&self) -> usize {
        self.net.spec().output_dim() / 2
    }

    pub fn head(&self, obs: &[f64], batch: usize) -> Result<PolicyHead> {
        let tape = self.net.forward_batch(obs, batch)?;
        let d = self.action_dim();
        let mut mean = Vec::with_capacity(batch * d);
        let mut log_std = Vec::with_capacity(batch * d);
        let mut clamped = Vec::with_capacity(batch * d);
        for row in tape.output().chunks_exact(2 * d) {
            mean.extend_from_slice(&row[..d]);
            for &raw in &row[d..] {
                log_std.push(raw.clamp(LOG_STD_MIN, LOG_STD_MAX));
                clamped.push(!(LOG_STD_MIN..=LOG_STD_MAX).contains(&raw));
            }
        }
        Ok(PolicyHead {
            tape,
            mean,
            log_std,
            clamped,
        })
    }

    /// `a = tanh(mean + std ⊙ noise)` with its exact log-density.
    pub fn sample(&self, head: &PolicyHead, noise: &[f64]) -> PolicySample {
        assert_eq!(noise.len(), head.mean.len(), "noise shape");
        let d = self.action_dim();
        let mut pre_tanh = Vec::with_capacity(noise.len());
        let mut actions = Vec::with_capacity(noise.len());
        for i in 0..noise.len() {
            let u = head.mean[i] + head.log_std[i].exp() * noise[i];
            pre_tanh.push(u);
            actions.push(u.tanh());
        }
        let log_probs = (0..head.tape.batch())
            .map(|b| {
                let r = b * d..(b + 1) * d;
                squashed_gaussian_log_prob(&head.mean[r.clone()], &head.log_std[r.clone()], &noise[r])
            })
            .collect();
        PolicySample {
            noise: noise.to_vec(),
            pre_tanh,
            actions,
            log_probs,
        }
    }

    /// Adds the parameter gradient of a loss `L(actions, log_probs)` to `grads`,
    /// given `∂L/∂actions` (`batch × d`) and `∂L/∂log_probs` (`batch`).
    pub fn backward(
        &self,
        head: &PolicyHead,
        sample: &PolicySample,
        grad_actions: &[f64],
        grad_log_probs: &[f64],
        grads: &mut [f64],
    ) {
        let d = self.action_dim();
        let batch = head.tape.batch();
        let mut grad_out = vec![0.0; batch * 2 * d];
        for b in 0..batch {
            let gl = grad_log_probs[b];
            for i in 0..d {
                let k = b * d + i;
                let a = sample.actions[k];
                let sech2 = log_one_minus_tanh_sq(sample.pre_tanh[k]).exp();
                let du = grad_actions[k] * sech2 + gl * 2.0 * a;
                grad_out[b * 2 * d + i] = du;
                grad_out[b * 2 * d + d + i] = if head.clamped[k] {
                    0.0
                } else {
                    du * head.log_std[k].exp() * sample.noise[k] - gl
                };
            }
        }
        self.net.backward(&head.tape, &grad_out, grads, None);
    }

    /// One action for one observation. `deterministic` returns `tanh(mean)`;
    /// its log-probability is the density at zero noise.
    pub fn sample_action(&self, obs: &[f64], noise: &[f64], deterministic: bool) -> Result<(Vec<f64>, f64)> {
        let head = self.head(obs, 1)?;
        let zeros;
        let noise = if deterministic {
            zeros = vec![0.0; self.action_dim()];
            &zeros[..]
        } else {
            noise
        };
        if noise.len() != self.action_dim() {
            return Err(Error::Shape {
                expected: self.action_dim(),
                actual: noise.len(),
            });
        }
        let s = self.sample(&head, noise);
        Ok((s.actions, s.log_probs[0]))
    }

    pub fn deterministic_action(&self, obs: &[f64]) -> Result<Vec<f64>> {
        Ok(self.head(obs, 1)?.mean.iter().map(|m| m.tanh()).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        diff / na.max(nb).max(1e-12)
    }

    fn central_diff(x: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
        let h = 1e-6;
        let mut x = x.to_vec();
        (0..x.len())
            .map(|i| {
                let x0 = x[i];
                x[i] = x0 + h;
                let fp = f(&x);
                x[i] = x0 - h;
                let fm = f(&x);
                x[i] = x0;
                (fp - fm) / (2.0 * h)
            })
            .collect()
    }

    fn normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.sample(StandardNormal)).collect()
    }

    #[test]
    fn param_count_and_layout() {
        let spec = MlpSpec::new(vec![3, 4, 2]).unwrap();
        assert_eq!(spec.n_params(), 4 * 4 + 5 * 2);
        let mut net = Network::zeros(spec);
        net.layer_mut(1).1[1] = 7.0;
        assert_eq!(net.params()[16 + 8 + 1], 7.0);
        assert!(MlpSpec::new(vec![3]).is_err());
        assert!(MlpSpec::new(vec![3, 0, 1]).is_err());
    }

    #[test]
    fn identity_and_bias_only_layers() {
        let mut net = Network::zeros(MlpSpec::new(vec![3, 3]).unwrap());
        for i in 0..3 {
            net.layer_mut(0).0[i * 3 + i] = 1.0;
        }
        assert_eq!(net.forward(&[1.5, -2.0, 0.25]).unwrap(), vec![1.5, -2.0, 0.25]);

        let mut net = Network::zeros(MlpSpec::new(vec![2, 3]).unwrap());
        net.layer_mut(0).1.copy_from_slice(&[0.1, -0.2, 0.3]);
        assert_eq!(net.forward(&[5.0, 6.0]).unwrap(), vec![0.1, -0.2, 0.3]);
        assert!(net.forward(&[1.0]).is_err());
    }

    #[test]
    fn forward_matches_straight_line_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = Network::new(MlpSpec::new(vec![3, 4, 2]).unwrap(), &mut rng);
        let p = net.params();
        let x = [0.3, -1.2, 0.7];
        let mut h = [0.0; 4];
        for (j, hj) in h.iter_mut().enumerate() {
            let mut z = p[12 + j];
            for (i, xi) in x.iter().enumerate() {
                z += xi * p[i * 4 + j];
            }
            *hj = z.max(0.0);
        }
        let mut y = [0.0; 2];
        for (k, yk) in y.iter_mut().enumerate() {
            let mut z = p[16 + 8 + k];
            for (j, hj) in h.iter().enumerate() {
                z += hj * p[16 + j * 2 + k];
            }
            *yk = z;
        }
        let out = net.forward(&x).unwrap();
        for k in 0..2 {
            assert!((out[k] - y[k]).abs() < 1e-14);
        }
    }

    #[test]
    fn batched_rows_are_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = Network::new(MlpSpec::new(vec![2, 5, 5, 3]).unwrap(), &mut rng);
        let x = normals(&mut rng, 8);
        let tape = net.forward_batch(&x, 4).unwrap();
        for b in 0..4 {
            let single = net.forward(&x[b * 2..b * 2 + 2]).unwrap();
            for k in 0..3 {
                assert!((tape.output()[b * 3 + k] - single[k]).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn half_square_loss_on_linear_net() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = Network::new(MlpSpec::new(vec![3, 2]).unwrap(), &mut rng);
        let x = [0.5, -1.0, 2.0];
        let tape = net.forward_batch(&x, 1).unwrap();
        let out = tape.output().to_vec();
        let mut g = vec![0.0; net.n_params()];
        net.backward(&tape, &out, &mut g, None);
        for i in 0..3 {
            for k in 0..2 {
                assert!((g[i * 2 + k] - x[i] * out[k]).abs() < 1e-14);
            }
        }
        assert!((g[6] - out[0]).abs() < 1e-14 && (g[7] - out[1]).abs() < 1e-14);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let net = Network::new(MlpSpec::new(vec![3, 8, 8, 2]).unwrap(), &mut rng);
            let batch = 3;
            let x = normals(&mut rng, batch * 3);
            let w = normals(&mut rng, batch * 2);
            let loss = |n: &Network, x: &[f64]| {
                let t = n.forward_batch(x, batch).unwrap();
                t.output()
                    .iter()
                    .zip(&w)
                    .map(|(o, wi)| wi * o + 0.5 * o * o)
                    .sum::<f64>()
            };
            let tape = net.forward_batch(&x, batch).unwrap();
            let grad_out: Vec<f64> = tape.output().iter().zip(&w).map(|(o, wi)| wi + o).collect();
            let mut g = vec![0.0; net.n_params()];
            let mut gx = vec![0.0; x.len()];
            net.backward(&tape, &grad_out, &mut g, Some(&mut gx));

            let fd = central_diff(net.params(), |p| {
                loss(&Network::from_params(net.spec().clone(), p.to_vec()).unwrap(), &x)
            });
            assert!(rel_err(&g, &fd) < 1e-5, "param grad error {}", rel_err(&g, &fd));
            let fdx = central_diff(&x, |xp| loss(&net, xp));
            assert!(rel_err(&gx, &fdx) < 1e-5, "input grad error {}", rel_err(&gx, &fdx));
        }
    }

    #[test]
    fn relu_derivative_at_zero_is_zero() {
        // All-zero first layer puts every hidden pre-activation at exactly 0.
        let mut net = Network::zeros(MlpSpec::new(vec![2, 3, 1]).unwrap());
        net.layer_mut(1).0.copy_from_slice(&[1.0, 1.0, 1.0]);
        let tape = net.forward_batch(&[1.0, -1.0], 1).unwrap();
        let mut g = vec![0.0; net.n_params()];
        net.backward(&tape, &[1.0], &mut g, None);
        assert!(g[..9].iter().all(|&x| x == 0.0));
        assert_eq!(g[12], 1.0);
    }

    #[test]
    fn soft_update_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let spec = MlpSpec::new(vec![2, 4, 1]).unwrap();
        let online = Network::new(spec.clone(), &mut rng);
        let mut target = Network::new(spec, &mut rng);
        let before = target.clone();
        target.soft_update(&online, 0.0);
        assert_eq!(target, before);
        target.soft_update(&online, 1.0);
        assert_eq!(target, online);
        target.soft_update(&online, 0.3);
        assert_eq!(target, online);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut net = Network::new(MlpSpec::new(vec![3, 5, 2]).unwrap(), &mut rng);
        net.params_mut()[0] = f64::MIN_POSITIVE / 3.0;
        net.params_mut()[1] = -0.0;
        let text = serde_json::to_string(&net).unwrap();
        let back: Network = serde_json::from_str(&text).unwrap();
        let bits = |n: &Network| n.params().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&net));

        let bad = text.replace("\"version\":1", "\"version\":9");
        assert!(serde_json::from_str::<Network>(&bad).is_err());
        assert_eq!(hex::encode(1.0), "3ff0000000000000");
        assert!(hex::decode("zz").is_err());
    }

    #[test]
    fn adam_zero_gradient_and_first_step() {
        let mut adam = Adam::new(3, 3e-4);
        let mut p = vec![1.0, -2.0, 0.5];
        adam.step(&mut p, &[0.0; 3]).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 0.5]);

        let mut adam = Adam::new(3, 3e-4);
        adam.step(&mut p, &[0.7, -3.0, 1e3]).unwrap();
        assert!((p[0] - (1.0 - 3e-4)).abs() < 1e-10);
        assert!((p[1] - (-2.0 + 3e-4)).abs() < 1e-10);
        assert!((p[2] - (0.5 - 3e-4)).abs() < 1e-10);
        assert!(adam.step(&mut p, &[0.0; 2]).is_err());
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut adam = Adam::new(1, 1e-2);
        let mut x = vec![3.0];
        for _ in 0..10_000 {
            let g = vec![2.0 * (x[0] - 1.25)];
            adam.step(&mut x, &g).unwrap();
        }
        assert!((x[0] - 1.25).abs() < 1e-6, "x = {}", x[0]);
    }

    #[test]
    fn log_one_minus_tanh_sq_is_stable() {
        for &u in &[0.0f64, 0.3, -1.7, 5.0] {
            let direct = (1.0 - u.tanh().powi(2)).ln();
            assert!((log_one_minus_tanh_sq(u) - direct).abs() < 1e-12);
        }
        // tanh(30)² rounds to 1 in f64; the stable form stays finite.
        let v = log_one_minus_tanh_sq(30.0);
        assert!(v.is_finite() && (v - (4f64.ln() - 60.0)).abs() < 1e-9);
        assert_eq!(log_one_minus_tanh_sq(-30.0), log_one_minus_tanh_sq(30.0));
    }

    #[test]
    fn origin_log_prob_is_gaussian_density() {
        let mut net = Network::zeros(MlpSpec::new(vec![2, 4]).unwrap());
        net.layer_mut(0).1.copy_from_slice(&[0.0, 0.0, -0.5, 0.3]);
        let policy = GaussianPolicy::from_network(net).unwrap();
        let (a, lp) = policy.sample_action(&[0.2, 0.1], &[0.0, 0.0], false).unwrap();
        assert_eq!(a, vec![0.0, 0.0]);
        let expected = -(-0.5) - 0.3 - 2.0 * HALF_LN_2PI;
        assert!((lp - expected).abs() < 1e-14);
    }

    #[test]
    fn density_integrates_to_one() {
        for &(mean, log_std) in &[(0.3, -0.5), (-1.0, 0.2), (0.0, -2.0)] {
            let n = 400_000;
            let h = 2.0 / n as f64;
            let sigma = f64::exp(log_std);
            let mass: f64 = (0..n)
                .map(|i| {
                    let a: f64 = -1.0 + (i as f64 + 0.5) * h;
                    let eps = (a.atanh() - mean) / sigma;
                    squashed_gaussian_log_prob(&[mean], &[log_std], &[eps]).exp() * h
                })
                .sum();
            assert!((mass - 1.0).abs() < 1e-3, "mass {mass} for ({mean}, {log_std})");
        }
    }

    #[test]
    fn log_prob_and_action_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let policy = GaussianPolicy::new(3, &[8, 8], 2, &mut rng).unwrap();
            let batch = 4;
            let obs = normals(&mut rng, batch * 3);
            let noise = normals(&mut rng, batch * 2);
            let ga = normals(&mut rng, batch * 2);
            let gl = normals(&mut rng, batch);
            let loss = |p: &GaussianPolicy| {
                let head = p.head(&obs, batch).unwrap();
                let s = p.sample(&head, &noise);
                let la: f64 = s.actions.iter().zip(&ga).map(|(a, g)| a * g).sum();
                let ll: f64 = s.log_probs.iter().zip(&gl).map(|(l, g)| l * g).sum();
                la + ll
            };
            let head = policy.head(&obs, batch).unwrap();
            let s = policy.sample(&head, &noise);
            let mut g = vec![0.0; policy.network().n_params()];
            policy.backward(&head, &s, &ga, &gl, &mut g);
            let spec = policy.network().spec().clone();
            let fd = central_diff(policy.network().params(), |p| {
                let net = Network::from_params(spec.clone(), p.to_vec()).unwrap();
                loss(&GaussianPolicy::from_network(net).unwrap())
            });
            assert!(rel_err(&g, &fd) < 1e-5, "policy grad error {}", rel_err(&g, &fd));
        }
    }

    #[test]
    fn clamped_log_std_gets_no_gradient() {
        let mut net = Network::zeros(MlpSpec::new(vec![1, 2]).unwrap());
        net.layer_mut(0).1.copy_from_slice(&[0.1, 5.0]);
        let policy = GaussianPolicy::from_network(net).unwrap();
        let head = policy.head(&[1.0], 1).unwrap();
        assert_eq!(head.log_std, vec![LOG_STD_MAX]);
        assert_eq!(head.clamped, vec![true]);
        let s = policy.sample(&head, &[0.4]);
        let mut g = vec![0.0; 4];
        policy.backward(&head, &s, &[1.0], &[1.0], &mut g);
        assert_eq!(g[1], 0.0);
        assert_eq!(g[3], 0.0);
        assert!(g[2] != 0.0);
    }

    #[test]
    fn sampling_is_pure_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let policy = GaussianPolicy::new(3, &[16], 2, &mut rng).unwrap();
        let obs = [0.1, 0.2, 0.3];
        let noise = [8.0, -8.0];
        let (a1, l1) = policy.sample_action(&obs, &noise, false).unwrap();
        let (a2, l2) = policy.sample_action(&obs, &noise, false).unwrap();
        assert_eq!(a1, a2);
        assert_eq!(l1.to_bits(), l2.to_bits());
        assert!(l1.is_finite());
        assert!(a1.iter().all(|a| a.abs() <= 1.0));
        let (det, _) = policy.sample_action(&obs, &noise, true).unwrap();
        assert_eq!(det, policy.deterministic_action(&obs).unwrap());
    }
}
