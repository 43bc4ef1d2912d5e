//! Small fully connected embedding network with tanh hidden layers, an
//! optional ε-guarded unit-norm output, hand-written reverse mode and a
//! plain-text checkpoint format.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::{self, format_f64, parse_floats};

/// Guard in `v / (‖v‖ + ε)`.
pub const NORM_EPS: f64 = 1e-12;

/// Parameters of a dense network stored flat, layer after layer, each layer
/// as a row-major `out × in` weight block followed by `out` biases.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingModel {
    sizes: Vec<usize>,
    params: Vec<f64>,
    normalize: bool,
}

/// `∂loss/∂params`, shaped like [`EmbeddingModel::params`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradientBuffer(pub Vec<f64>);

impl GradientBuffer {
    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn add_assign(&mut self, other: &GradientBuffer) {
        linalg::axpy(1.0, &other.0, &mut self.0);
    }

    pub fn scaled(&self, s: f64) -> GradientBuffer {
        GradientBuffer(self.0.iter().map(|v| v * s).collect())
    }

    pub fn norm(&self) -> f64 {
        linalg::norm(&self.0)
    }

    pub fn max_abs_diff(&self, other: &GradientBuffer) -> f64 {
        self.0.iter().zip(&other.0).fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }
}

/// Activations recorded by [`EmbeddingModel::forward`].
#[derive(Clone, Debug)]
pub struct Tape {
    /// Input of every layer; entry 0 is the raw input, later entries are tanh outputs.
    layer_inputs: Vec<Vec<f64>>,
    /// Output of the last affine layer before normalization.
    raw_output: Vec<f64>,
}

impl Tape {
    pub fn raw_output(&self) -> &[f64] {
        &self.raw_output
    }

    /// Last hidden activation (the input itself for a purely linear model).
    pub fn penultimate(&self) -> &[f64] {
        self.layer_inputs.last().expect("at least one layer")
    }
}

impl EmbeddingModel {
    /// Glorot-uniform weights in `±√(6/(fan_in+fan_out))`, zero biases.
    pub fn new(sizes: &[usize], normalize: bool, seed: u64) -> Result<Self> {
        validate_sizes(sizes)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(param_count(sizes));
        for w in sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            params.extend((0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)));
            params.extend(std::iter::repeat_n(0.0, fan_out));
        }
        Ok(Self { sizes: sizes.to_vec(), params, normalize })
    }

    pub fn from_params(sizes: &[usize], params: Vec<f64>, normalize: bool) -> Result<Self> {
        validate_sizes(sizes)?;
        if params.len() != param_count(sizes) {
            return Err(Error::dim(format!("{} parameters for layer sizes {sizes:?}", params.len())));
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("model parameters"));
        }
        Ok(Self { sizes: sizes.to_vec(), params, normalize })
    }

    /// Single affine layer with the given `out × in` weights and zero bias.
    pub fn linear(weights: &linalg::Matrix, normalize: bool) -> Result<Self> {
        let mut params = weights.as_slice().to_vec();
        params.extend(std::iter::repeat_n(0.0, weights.rows()));
        Self::from_params(&[weights.cols(), weights.rows()], params, normalize)
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn embedding_dim(&self) -> usize {
        *self.sizes.last().expect("validated")
    }

    pub fn normalize(&self) -> bool {
        self.normalize
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn zero_grad(&self) -> GradientBuffer {
        GradientBuffer::zeros(self.params.len())
    }

    fn same_architecture(&self, other: &EmbeddingModel) -> bool {
        self.sizes == other.sizes && self.normalize == other.normalize
    }

    pub fn forward(&self, input: &[f64]) -> Result<(Vec<f64>, Tape)> {
        if input.len() != self.input_dim() {
            return Err(Error::dim(format!("input has {} entries, model expects {}", input.len(), self.input_dim())));
        }
        let layers = self.sizes.len() - 1;
        let mut layer_inputs = Vec::with_capacity(layers);
        let mut current = input.to_vec();
        let mut offset = 0;
        for l in 0..layers {
            let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
            let w = &self.params[offset..offset + fan_in * fan_out];
            let b = &self.params[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out];
            offset += fan_in * fan_out + fan_out;
            let mut out: Vec<f64> =
                (0..fan_out).map(|o| b[o] + linalg::dot(&w[o * fan_in..(o + 1) * fan_in], &current)).collect();
            if l + 1 < layers {
                out.iter_mut().for_each(|v| *v = v.tanh());
            }
            layer_inputs.push(std::mem::replace(&mut current, out));
        }
        let raw_output = current;
        let embedding = if self.normalize {
            let n = linalg::norm(&raw_output);
            raw_output.iter().map(|v| v / (n + NORM_EPS)).collect()
        } else {
            raw_output.clone()
        };
        Ok((embedding, Tape { layer_inputs, raw_output }))
    }

    /// Convenience wrapper returning only the embedding.
    pub fn embed(&self, input: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(input)?.0)
    }

    /// `∂(cotangent · embedding)/∂params`.
    pub fn backward(&self, tape: &Tape, cotangent: &[f64]) -> Result<GradientBuffer> {
        let mut grad = self.zero_grad();
        self.backward_into(tape, cotangent, &mut grad)?;
        Ok(grad)
    }

    /// Accumulates `∂(cotangent · embedding)/∂params` into `grad`.
    pub fn backward_into(&self, tape: &Tape, cotangent: &[f64], grad: &mut GradientBuffer) -> Result<()> {
        let layers = self.sizes.len() - 1;
        if tape.layer_inputs.len() != layers
            || tape.raw_output.len() != self.embedding_dim()
            || tape.layer_inputs.iter().zip(&self.sizes).any(|(a, &s)| a.len() != s)
        {
            return Err(Error::dim("tape does not match model architecture"));
        }
        if cotangent.len() != self.embedding_dim() {
            return Err(Error::dim("cotangent length differs from embedding dimension"));
        }
        if grad.len() != self.params.len() {
            return Err(Error::dim("gradient buffer does not match model"));
        }
        let mut g = if self.normalize { normalize_backward(&tape.raw_output, cotangent) } else { cotangent.to_vec() };

        let mut offsets = Vec::with_capacity(layers);
        let mut offset = 0;
        for l in 0..layers {
            offsets.push(offset);
            offset += self.sizes[l] * self.sizes[l + 1] + self.sizes[l + 1];
        }
        for l in (0..layers).rev() {
            let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
            let a = &tape.layer_inputs[l];
            let base = offsets[l];
            for o in 0..fan_out {
                let go = g[o];
                if go != 0.0 {
                    linalg::axpy(go, a, &mut grad.0[base + o * fan_in..base + (o + 1) * fan_in]);
                }
                grad.0[base + fan_in * fan_out + o] += go;
            }
            if l == 0 {
                break;
            }
            let w = &self.params[base..base + fan_in * fan_out];
            let mut ga = vec![0.0; fan_in];
            for (o, &go) in g.iter().enumerate() {
                if go != 0.0 {
                    linalg::axpy(go, &w[o * fan_in..(o + 1) * fan_in], &mut ga);
                }
            }
            // a = tanh(pre): d a / d pre = 1 − a²
            for (gi, ai) in ga.iter_mut().zip(a) {
                *gi *= 1.0 - ai * ai;
            }
            g = ga;
        }
        Ok(())
    }

    /// Every parameter becomes `γ·self + (1 − γ)·online`.
    pub fn ema_update(&mut self, online: &EmbeddingModel, gamma: f64) -> Result<()> {
        if !self.same_architecture(online) {
            return Err(Error::dim("EMA between different architectures"));
        }
        if !(0.0..=1.0).contains(&gamma) {
            return Err(Error::Domain(format!("EMA rate {gamma} outside [0, 1]")));
        }
        for (t, &o) in self.params.iter_mut().zip(&online.params) {
            *t = gamma * *t + (1.0 - gamma) * o;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("minc-encoder v1\n");
        let sizes: Vec<String> = self.sizes.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(s, "sizes {}", sizes.join(" "));
        let _ = writeln!(s, "normalize {}", self.normalize);
        let _ = writeln!(s, "params {}", self.params.len());
        for chunk in self.params.chunks(8) {
            let line: Vec<String> = chunk.iter().map(|v| format_f64(*v)).collect();
            let _ = writeln!(s, "{}", line.join(" "));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
        if lines.next() != Some("minc-encoder v1") {
            return Err(Error::Parse("not an encoder checkpoint".into()));
        }
        let sizes: Vec<usize> = field(lines.next(), "sizes")?
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| Error::Parse(format!("bad size {t:?}"))))
            .collect::<Result<_>>()?;
        let normalize = match field(lines.next(), "normalize")? {
            "true" => true,
            "false" => false,
            other => return Err(Error::Parse(format!("bad normalize flag {other:?}"))),
        };
        let count: usize = field(lines.next(), "params")?
            .parse()
            .map_err(|_| Error::Parse("bad parameter count".into()))?;
        let mut params = Vec::with_capacity(count);
        for line in lines {
            params.extend(parse_floats(line)?);
        }
        if params.len() != count {
            return Err(Error::Parse(format!("expected {count} parameters, read {}", params.len())));
        }
        Self::from_params(&sizes, params, normalize)
    }
}

fn field<'a>(line: Option<&'a str>, key: &str) -> Result<&'a str> {
    line.and_then(|l| l.strip_prefix(key))
        .map(str::trim)
        .ok_or_else(|| Error::Parse(format!("missing {key:?} line")))
}

/// Returns a new target with every parameter `γ·target + (1 − γ)·online`.
pub fn ema_blend(target: &EmbeddingModel, online: &EmbeddingModel, gamma: f64) -> Result<EmbeddingModel> {
    let mut out = target.clone();
    out.ema_update(online, gamma)?;
    Ok(out)
}

fn validate_sizes(sizes: &[usize]) -> Result<()> {
    if sizes.len() < 2 || sizes.contains(&0) {
        return Err(Error::pre(format!("layer sizes {sizes:?} need >= 2 positive entries")));
    }
    Ok(())
}

fn param_count(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

/// Vector-Jacobian product of `y = v / (‖v‖ + ε)`:
/// `c/(n+ε) − v·(vᵀc)/(n(n+ε)²)`.
fn normalize_backward(v: &[f64], c: &[f64]) -> Vec<f64> {
    let n = linalg::norm(v);
    let denom = n + NORM_EPS;
    if n == 0.0 {
        return c.iter().map(|ci| ci / denom).collect();
    }
    let radial = linalg::dot(v, c) / (n * denom * denom);
    c.iter().zip(v).map(|(ci, vi)| ci / denom - vi * radial).collect()
}
