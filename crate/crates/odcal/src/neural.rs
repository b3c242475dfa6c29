//! Policy/value network and optimizer, built directly on flat `f64` buffers.
//!
//! The network is a two-hidden-layer tanh MLP with two heads sharing the
//! trunk: per-OD Bernoulli dispatch logits (actor) and a scalar state value
//! (critic). Parameters live in one flat vector so the optimizer, gradient
//! checks, and checkpointing all operate on plain slices. Backpropagation is
//! written out analytically; there is no autodiff anywhere.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NeuralError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("checkpoint format: {0}")]
    Format(String),
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `ln(1 + exp(x))`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `ln(sigmoid(x))`, stable for large negative `x`.
pub fn log_sigmoid(x: f64) -> f64 {
    -softplus(-x)
}

/// Joint log-probability and entropy of independent Bernoulli bits with the
/// given logits. Entropy per bit is `p*softplus(-l) + (1-p)*softplus(l)`,
/// which equals `-p ln p - (1-p) ln(1-p)` without ever forming the logs.
pub fn log_prob_and_entropy(logits: &[f64], bits: &[bool]) -> (f64, f64) {
    assert_eq!(logits.len(), bits.len());
    let mut logp = 0.0;
    let mut entropy = 0.0;
    for (&l, &bit) in logits.iter().zip(bits) {
        logp += if bit { log_sigmoid(l) } else { -softplus(l) };
        let p = sigmoid(l);
        entropy += p * softplus(-l) + (1.0 - p) * softplus(l);
    }
    (logp, entropy)
}

/// Samples one dispatch bit per logit; draw order follows logit order.
pub fn sample_action<R: Rng>(logits: &[f64], rng: &mut R) -> Vec<bool> {
    logits.iter().map(|&l| rng.gen::<f64>() < sigmoid(l)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyOutput {
    pub logits: Vec<f64>,
    pub value: f64,
}

/// Post-activation hidden states kept from a forward pass for backprop.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    a1: Vec<f64>,
    a2: Vec<f64>,
}

/// Flat-parameter MLP: input -> hidden tanh -> hidden tanh -> {logits, value}.
///
/// Layout of `theta`, in order: W1 (hidden x in, row-major), b1, W2
/// (hidden x hidden), b2, Wa (n_od x hidden), ba, wc (hidden), bc.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub in_dim: usize,
    pub hidden_dim: usize,
    pub n_od: usize,
    pub theta: Vec<f64>,
}

impl MlpParams {
    pub fn n_params(in_dim: usize, hidden_dim: usize, n_od: usize) -> usize {
        hidden_dim * in_dim
            + hidden_dim
            + hidden_dim * hidden_dim
            + hidden_dim
            + n_od * hidden_dim
            + n_od
            + hidden_dim
            + 1
    }

    fn off_w1(&self) -> usize {
        0
    }

    fn off_b1(&self) -> usize {
        self.hidden_dim * self.in_dim
    }

    fn off_w2(&self) -> usize {
        self.off_b1() + self.hidden_dim
    }

    fn off_b2(&self) -> usize {
        self.off_w2() + self.hidden_dim * self.hidden_dim
    }

    fn off_wa(&self) -> usize {
        self.off_b2() + self.hidden_dim
    }

    fn off_ba(&self) -> usize {
        self.off_wa() + self.n_od * self.hidden_dim
    }

    fn off_wc(&self) -> usize {
        self.off_ba() + self.n_od
    }

    fn off_bc(&self) -> usize {
        self.off_wc() + self.hidden_dim
    }

    pub fn zeros(in_dim: usize, hidden_dim: usize, n_od: usize) -> Self {
        assert!(in_dim > 0 && hidden_dim > 0 && n_od > 0);
        MlpParams {
            in_dim,
            hidden_dim,
            n_od,
            theta: vec![0.0; Self::n_params(in_dim, hidden_dim, n_od)],
        }
    }

    /// Orthogonal initialization: weight matrices get scaled orthogonal
    /// factors (sqrt(2) on the trunk, 0.01 on the actor head, 1.0 on the
    /// critic head), all biases start at zero.
    pub fn init<R: Rng>(in_dim: usize, hidden_dim: usize, n_od: usize, rng: &mut R) -> Self {
        let mut p = Self::zeros(in_dim, hidden_dim, n_od);
        let g_trunk = 2.0f64.sqrt();
        let w1 = orthogonal(hidden_dim, in_dim, g_trunk, rng);
        let w2 = orthogonal(hidden_dim, hidden_dim, g_trunk, rng);
        let wa = orthogonal(n_od, hidden_dim, 0.01, rng);
        let wc = orthogonal(1, hidden_dim, 1.0, rng);
        p.theta[..w1.len()].copy_from_slice(&w1);
        let o = p.off_w2();
        p.theta[o..o + w2.len()].copy_from_slice(&w2);
        let o = p.off_wa();
        p.theta[o..o + wa.len()].copy_from_slice(&wa);
        let o = p.off_wc();
        p.theta[o..o + wc.len()].copy_from_slice(&wc);
        p
    }

    pub fn forward(&self, x: &[f64]) -> PolicyOutput {
        self.forward_cache(x).0
    }

    pub fn forward_cache(&self, x: &[f64]) -> (PolicyOutput, ForwardCache) {
        assert_eq!(x.len(), self.in_dim, "observation dimension mismatch");
        let t = &self.theta;
        let (h, din, nod) = (self.hidden_dim, self.in_dim, self.n_od);

        let mut a1 = vec![0.0; h];
        for i in 0..h {
            let mut z = t[self.off_b1() + i];
            let row = self.off_w1() + i * din;
            for j in 0..din {
                z += t[row + j] * x[j];
            }
            a1[i] = z.tanh();
        }

        let mut a2 = vec![0.0; h];
        for i in 0..h {
            let mut z = t[self.off_b2() + i];
            let row = self.off_w2() + i * h;
            for j in 0..h {
                z += t[row + j] * a1[j];
            }
            a2[i] = z.tanh();
        }

        let mut logits = vec![0.0; nod];
        for i in 0..nod {
            let mut z = t[self.off_ba() + i];
            let row = self.off_wa() + i * h;
            for j in 0..h {
                z += t[row + j] * a2[j];
            }
            logits[i] = z;
        }

        let mut value = t[self.off_bc()];
        for j in 0..h {
            value += t[self.off_wc() + j] * a2[j];
        }

        (PolicyOutput { logits, value }, ForwardCache { a1, a2 })
    }

    /// Accumulates into `grad` the parameter gradient of
    /// `sum_i dlogits[i] * logit_i + dvalue * value` for this input.
    pub fn backward(
        &self,
        x: &[f64],
        cache: &ForwardCache,
        dlogits: &[f64],
        dvalue: f64,
        grad: &mut [f64],
    ) {
        assert_eq!(grad.len(), self.theta.len());
        assert_eq!(dlogits.len(), self.n_od);
        let t = &self.theta;
        let (h, din, nod) = (self.hidden_dim, self.in_dim, self.n_od);
        let (a1, a2) = (&cache.a1, &cache.a2);

        // Heads.
        let mut da2 = vec![0.0; h];
        for i in 0..nod {
            let g = dlogits[i];
            let row = self.off_wa() + i * h;
            for j in 0..h {
                grad[row + j] += g * a2[j];
                da2[j] += g * t[row + j];
            }
            grad[self.off_ba() + i] += g;
        }
        for j in 0..h {
            grad[self.off_wc() + j] += dvalue * a2[j];
            da2[j] += dvalue * t[self.off_wc() + j];
        }
        grad[self.off_bc()] += dvalue;

        // Second hidden layer.
        let mut da1 = vec![0.0; h];
        for i in 0..h {
            let dz = da2[i] * (1.0 - a2[i] * a2[i]);
            let row = self.off_w2() + i * h;
            for j in 0..h {
                grad[row + j] += dz * a1[j];
                da1[j] += dz * t[row + j];
            }
            grad[self.off_b2() + i] += dz;
        }

        // First hidden layer.
        for i in 0..h {
            let dz = da1[i] * (1.0 - a1[i] * a1[i]);
            let row = self.off_w1() + i * din;
            for j in 0..din {
                grad[row + j] += dz * x[j];
            }
            grad[self.off_b1() + i] += dz;
        }
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<(), NeuralError> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(b"ODCP")?;
        w.write_all(&1u32.to_le_bytes())?;
        w.write_all(&(self.in_dim as u32).to_le_bytes())?;
        w.write_all(&(self.hidden_dim as u32).to_le_bytes())?;
        w.write_all(&(self.n_od as u32).to_le_bytes())?;
        w.write_all(&(self.theta.len() as u64).to_le_bytes())?;
        for &v in &self.theta {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self, NeuralError> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != b"ODCP" {
            return Err(NeuralError::Format("bad magic".into()));
        }
        let mut u32buf = [0u8; 4];
        let mut read_u32 = |r: &mut BufReader<File>| -> Result<u32, NeuralError> {
            r.read_exact(&mut u32buf)?;
            Ok(u32::from_le_bytes(u32buf))
        };
        let version = read_u32(&mut r)?;
        if version != 1 {
            return Err(NeuralError::Format(format!("unsupported version {version}")));
        }
        let in_dim = read_u32(&mut r)? as usize;
        let hidden_dim = read_u32(&mut r)? as usize;
        let n_od = read_u32(&mut r)? as usize;
        let mut u64buf = [0u8; 8];
        r.read_exact(&mut u64buf)?;
        let count = u64::from_le_bytes(u64buf) as usize;
        if count != Self::n_params(in_dim, hidden_dim, n_od) {
            return Err(NeuralError::Format("parameter count mismatch".into()));
        }
        let mut theta = Vec::with_capacity(count);
        for _ in 0..count {
            r.read_exact(&mut u64buf)?;
            theta.push(f64::from_le_bytes(u64buf));
        }
        let p = MlpParams { in_dim, hidden_dim, n_od, theta };
        if p.theta.iter().any(|v| !v.is_finite()) {
            return Err(NeuralError::Format("non-finite parameter".into()));
        }
        Ok(p)
    }
}

/// One standard normal via Box-Muller.
pub(crate) fn gaussian<R: Rng>(rng: &mut R) -> f64 {
    loop {
        let u1: f64 = rng.gen();
        if u1 <= f64::MIN_POSITIVE {
            continue;
        }
        let u2: f64 = rng.gen();
        return (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
    }
}

/// Scaled orthogonal matrix (row-major, rows x cols): modified Gram-Schmidt
/// QR of a Gaussian draw. When rows < cols the rows are orthonormal, when
/// rows >= cols the columns are.
fn orthogonal<R: Rng>(rows: usize, cols: usize, gain: f64, rng: &mut R) -> Vec<f64> {
    let r = rows.max(cols);
    let c = rows.min(cols);
    // Column-major r x c working matrix.
    let mut a = vec![0.0; r * c];
    for v in a.iter_mut() {
        *v = gaussian(rng);
    }
    for j in 0..c {
        for k in 0..j {
            let mut dot = 0.0;
            for i in 0..r {
                dot += a[k * r + i] * a[j * r + i];
            }
            for i in 0..r {
                a[j * r + i] -= dot * a[k * r + i];
            }
        }
        let norm = (0..r).map(|i| a[j * r + i] * a[j * r + i]).sum::<f64>().sqrt();
        assert!(norm > 1e-12, "degenerate Gaussian draw");
        for i in 0..r {
            a[j * r + i] /= norm;
        }
    }
    // Emit row-major rows x cols, transposing when the draw was for the
    // transposed shape.
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            let q = if rows >= cols { a[j * r + i] } else { a[i * r + j] };
            out[i * cols + j] = gain * q;
        }
    }
    out
}

/// Adam moment buffers. `t` counts completed updates.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 3e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }
}

/// One bias-corrected Adam step in place.
pub fn adam_update(params: &mut [f64], grads: &[f64], state: &mut AdamState, cfg: &AdamConfig) {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), state.m.len());
    state.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}
