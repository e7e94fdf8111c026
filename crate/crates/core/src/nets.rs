//! Small tanh multilayer perceptrons with hand-written backpropagation and Adam.
//!
//! Parameters live in one flat `Vec<f64>`. Layer `l` with fan-in `i` and
//! fan-out `o` occupies `i * o` weights stored input-major (`w[k * o + j]`
//! connects input `k` to output `j`) followed by `o` biases.
//!
//! The forward pass accumulates every output over its inputs in a fixed
//! order, so a row evaluated alone and the same row evaluated inside a batch
//! give bit-identical results.

use std::io::{Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hyperbolic tangent through a single `exp`; within about 1e-16 of `f64::tanh`
/// and several times cheaper than the libm routine.
pub fn tanh(x: f64) -> f64 {
    if x.abs() > 20.0 {
        return x.signum();
    }
    let e = (2.0 * x).exp();
    (e - 1.0) / (e + 1.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    dims: Vec<usize>,
    params: Vec<f64>,
}

/// Per-layer activations of a batched forward pass, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct Activations {
    rows: usize,
    layers: Vec<Vec<f64>>,
}

impl Activations {
    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Network output, `rows x out_dim` row-major.
    pub fn output(&self) -> &[f64] {
        self.layers.last().expect("activations always hold the input layer")
    }
}

pub fn param_count(dims: &[usize]) -> usize {
    dims.windows(2).map(|w| (w[0] + 1) * w[1]).sum()
}

impl Mlp {
    /// All-zero network.
    pub fn zeros(dims: &[usize]) -> Result<Self> {
        if dims.len() < 2 || dims.iter().any(|&d| d == 0) {
            return Err(Error::invalid(format!("bad layer dims {dims:?}")));
        }
        Ok(Mlp {
            dims: dims.to_vec(),
            params: vec![0.0; param_count(dims)],
        })
    }

    /// Glorot-uniform weights, zero biases; the last layer's weights are multiplied by `output_scale`.
    pub fn new<R: Rng + ?Sized>(dims: &[usize], output_scale: f64, rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(dims)?;
        let n_layers = dims.len() - 1;
        let mut offset = 0;
        for l in 0..n_layers {
            let (fan_in, fan_out) = (dims[l], dims[l + 1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let scale = if l + 1 == n_layers { output_scale } else { 1.0 };
            for w in &mut net.params[offset..offset + fan_in * fan_out] {
                *w = scale * rng.gen_range(-bound..=bound);
            }
            offset += (fan_in + 1) * fan_out;
        }
        Ok(net)
    }

    pub fn from_params(dims: &[usize], params: Vec<f64>) -> Result<Self> {
        let mut net = Self::zeros(dims)?;
        if params.len() != net.params.len() {
            return Err(Error::invalid(format!(
                "{} parameters supplied for dims {dims:?} (need {})",
                params.len(),
                net.params.len()
            )));
        }
        net.params = params;
        Ok(net)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    fn layer(&self, l: usize, offset: usize) -> (&[f64], &[f64]) {
        let (i, o) = (self.dims[l], self.dims[l + 1]);
        let w = &self.params[offset..offset + i * o];
        let b = &self.params[offset + i * o..offset + (i + 1) * o];
        (w, b)
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        if input.len() != self.input_dim() {
            return Err(Error::invalid(format!(
                "input has {} values, network expects {}",
                input.len(),
                self.input_dim()
            )));
        }
        let acts = self.forward_batch(input, 1)?;
        Ok(acts.layers.into_iter().last().unwrap())
    }

    /// Forward pass over `rows` inputs stored row-major in `inputs`.
    pub fn forward_batch(&self, inputs: &[f64], rows: usize) -> Result<Activations> {
        if inputs.len() != rows * self.input_dim() {
            return Err(Error::invalid(format!(
                "batch holds {} values, expected {rows} x {}",
                inputs.len(),
                self.input_dim()
            )));
        }
        let n_layers = self.dims.len() - 1;
        let mut layers = Vec::with_capacity(n_layers + 1);
        layers.push(inputs.to_vec());
        let mut offset = 0;
        for l in 0..n_layers {
            let (i, o) = (self.dims[l], self.dims[l + 1]);
            let (w, b) = self.layer(l, offset);
            let prev = &layers[l];
            let mut out = vec![0.0; rows * o];
            for r in 0..rows {
                let x = &prev[r * i..(r + 1) * i];
                let z = &mut out[r * o..(r + 1) * o];
                z.copy_from_slice(b);
                // Four inputs per pass, added left to right: the same sum as one
                // input at a time, with fewer loads and stores of `z`.
                let mut k = 0;
                while k + 4 <= i {
                    let (x0, x1, x2, x3) = (x[k], x[k + 1], x[k + 2], x[k + 3]);
                    let w0 = &w[k * o..(k + 1) * o];
                    let w1 = &w[(k + 1) * o..(k + 2) * o];
                    let w2 = &w[(k + 2) * o..(k + 3) * o];
                    let w3 = &w[(k + 3) * o..(k + 4) * o];
                    for j in 0..o {
                        z[j] = z[j] + x0 * w0[j] + x1 * w1[j] + x2 * w2[j] + x3 * w3[j];
                    }
                    k += 4;
                }
                for k in k..i {
                    let xk = x[k];
                    for (zj, wj) in z.iter_mut().zip(&w[k * o..(k + 1) * o]) {
                        *zj += xk * wj;
                    }
                }
                if l + 1 < n_layers {
                    for zj in z.iter_mut() {
                        *zj = tanh(*zj);
                    }
                }
            }
            layers.push(out);
            offset += (i + 1) * o;
        }
        Ok(Activations { rows, layers })
    }

    /// Accumulates parameter gradients of `sum_rows <output_grad_row, output_row>` into `grads`.
    pub fn backward_batch(&self, acts: &Activations, output_grad: &[f64], grads: &mut [f64]) -> Result<()> {
        let rows = acts.rows;
        if output_grad.len() != rows * self.output_dim() {
            return Err(Error::invalid(format!(
                "output gradient holds {} values, expected {rows} x {}",
                output_grad.len(),
                self.output_dim()
            )));
        }
        if grads.len() != self.params.len() {
            return Err(Error::invalid("gradient buffer does not match parameter count"));
        }
        let n_layers = self.dims.len() - 1;
        let mut offsets = Vec::with_capacity(n_layers);
        let mut off = 0;
        for l in 0..n_layers {
            offsets.push(off);
            off += (self.dims[l] + 1) * self.dims[l + 1];
        }

        let mut delta = output_grad.to_vec();
        for l in (0..n_layers).rev() {
            let (i, o) = (self.dims[l], self.dims[l + 1]);
            let offset = offsets[l];
            let (w, _) = self.layer(l, offset);
            let prev = &acts.layers[l];
            {
                let (gw, gb) = grads[offset..offset + (i + 1) * o].split_at_mut(i * o);
                // rows folded in four at a time, still in row order
                for k in 0..i {
                    let g = &mut gw[k * o..(k + 1) * o];
                    let mut r = 0;
                    while r + 4 <= rows {
                        let (x0, x1, x2, x3) = (
                            prev[r * i + k],
                            prev[(r + 1) * i + k],
                            prev[(r + 2) * i + k],
                            prev[(r + 3) * i + k],
                        );
                        let d0 = &delta[r * o..(r + 1) * o];
                        let d1 = &delta[(r + 1) * o..(r + 2) * o];
                        let d2 = &delta[(r + 2) * o..(r + 3) * o];
                        let d3 = &delta[(r + 3) * o..(r + 4) * o];
                        for j in 0..o {
                            g[j] = g[j] + x0 * d0[j] + x1 * d1[j] + x2 * d2[j] + x3 * d3[j];
                        }
                        r += 4;
                    }
                    for r in r..rows {
                        let xk = prev[r * i + k];
                        for (gj, dj) in g.iter_mut().zip(&delta[r * o..(r + 1) * o]) {
                            *gj += xk * dj;
                        }
                    }
                }
                for d in delta.chunks_exact(o) {
                    for (g, dj) in gb.iter_mut().zip(d) {
                        *g += dj;
                    }
                }
            }
            if l == 0 {
                break;
            }
            // propagate through the weights, then through tanh of the previous layer
            let mut next = vec![0.0; rows * i];
            let mut r = 0;
            while r + 4 <= rows {
                let d = [
                    &delta[r * o..(r + 1) * o],
                    &delta[(r + 1) * o..(r + 2) * o],
                    &delta[(r + 2) * o..(r + 3) * o],
                    &delta[(r + 3) * o..(r + 4) * o],
                ];
                for k in 0..i {
                    let s = dot4(&w[k * o..(k + 1) * o], d);
                    for (q, sq) in s.iter().enumerate() {
                        let xk = prev[(r + q) * i + k];
                        next[(r + q) * i + k] = sq * (1.0 - xk * xk);
                    }
                }
                r += 4;
            }
            for r in r..rows {
                let d = &delta[r * o..(r + 1) * o];
                for k in 0..i {
                    let xk = prev[r * i + k];
                    next[r * i + k] = dot(&w[k * o..(k + 1) * o], d) * (1.0 - xk * xk);
                }
            }
            delta = next;
        }
        Ok(())
    }

    /// Parameter gradient of `<output_grad, forward(input)>` for a single input.
    pub fn backward(&self, input: &[f64], output_grad: &[f64]) -> Result<Vec<f64>> {
        if input.len() != self.input_dim() {
            return Err(Error::invalid(format!(
                "input has {} values, network expects {}",
                input.len(),
                self.input_dim()
            )));
        }
        let acts = self.forward_batch(input, 1)?;
        let mut grads = vec![0.0; self.params.len()];
        self.backward_batch(&acts, output_grad, &mut grads)?;
        Ok(grads)
    }

    pub fn write_snapshot<W: Write>(&self, out: W, extra: &[f64]) -> Result<()> {
        write_snapshot(out, &self.dims, &self.params, extra)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        s += x * y;
    }
    s
}

/// `dot(a, b[q])` for four vectors at once, each summed exactly as `dot` would.
fn dot4(a: &[f64], b: [&[f64]; 4]) -> [f64; 4] {
    let n4 = a.len() / 4 * 4;
    let mut acc = [[0.0; 4]; 4];
    let mut j = 0;
    while j < n4 {
        for (q, bq) in b.iter().enumerate() {
            acc[q][0] += a[j] * bq[j];
            acc[q][1] += a[j + 1] * bq[j + 1];
            acc[q][2] += a[j + 2] * bq[j + 2];
            acc[q][3] += a[j + 3] * bq[j + 3];
        }
        j += 4;
    }
    let mut out = [0.0; 4];
    for (q, bq) in b.iter().enumerate() {
        let mut s = (acc[q][0] + acc[q][1]) + (acc[q][2] + acc[q][3]);
        for t in n4..a.len() {
            s += a[t] * bq[t];
        }
        out[q] = s;
    }
    out
}

/// Euclidean norm over several gradient slices.
pub fn global_norm(parts: &[&[f64]]) -> f64 {
    parts
        .iter()
        .flat_map(|p| p.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt()
}

/// Rescales the gradients so their joint norm is at most `max_norm`; returns the pre-clip norm.
pub fn clip_global_norm(parts: &mut [&mut [f64]], max_norm: f64) -> f64 {
    let norm = parts
        .iter()
        .flat_map(|p| p.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for p in parts.iter_mut() {
            for g in p.iter_mut() {
                *g *= scale;
            }
        }
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments for one parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl AdamState {
    pub fn new(n_params: usize, config: AdamConfig) -> Self {
        AdamState {
            config,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[f64], &[f64]) {
        (&self.m, &self.v)
    }

    /// One descent step `params -= lr * m_hat / (sqrt(v_hat) + eps)`.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::invalid(format!(
                "Adam state holds {} moments; got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            eps,
        } = self.config;
        self.step += 1;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= learning_rate * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct SnapshotHeader {
    format: String,
    layer_dims: Vec<usize>,
    n_values: usize,
}

const SNAPSHOT_FORMAT: &str = "mlp-f64le";

/// One JSON header line, then `n_values` little-endian f64s: network parameters followed by `extra`.
pub fn write_snapshot<W: Write>(mut out: W, dims: &[usize], params: &[f64], extra: &[f64]) -> Result<()> {
    let header = SnapshotHeader {
        format: SNAPSHOT_FORMAT.to_string(),
        layer_dims: dims.to_vec(),
        n_values: params.len() + extra.len(),
    };
    let io = |e| Error::io("<snapshot>", e);
    let line = serde_json::to_string(&header).map_err(|e| Error::Parse(e.to_string()))?;
    out.write_all(line.as_bytes()).map_err(io)?;
    out.write_all(b"\n").map_err(io)?;
    let mut buf = Vec::with_capacity(8 * header.n_values);
    for v in params.iter().chain(extra) {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&buf).map_err(io)?;
    Ok(())
}

/// Reads a snapshot back into a network and the trailing extra values.
pub fn read_snapshot<R: Read>(mut input: R) -> Result<(Mlp, Vec<f64>)> {
    let mut bytes = Vec::new();
    input
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io("<snapshot>", e))?;
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Parse("snapshot header is not newline-terminated".into()))?;
    let header: SnapshotHeader =
        serde_json::from_slice(&bytes[..nl]).map_err(|e| Error::Parse(format!("snapshot header: {e}")))?;
    if header.format != SNAPSHOT_FORMAT {
        return Err(Error::Parse(format!("unknown snapshot format '{}'", header.format)));
    }
    let body = &bytes[nl + 1..];
    if body.len() != 8 * header.n_values {
        return Err(Error::Parse(format!(
            "snapshot body has {} bytes, header promises {} values",
            body.len(),
            header.n_values
        )));
    }
    let values: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let n = param_count(&header.layer_dims);
    if n > values.len() {
        return Err(Error::Parse("snapshot shorter than its layer dims".into()));
    }
    let net = Mlp::from_params(&header.layer_dims, values[..n].to_vec())?;
    Ok((net, values[n..].to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_net_outputs_zero() {
        let net = Mlp::zeros(&[3, 5, 2]).unwrap();
        assert_eq!(net.forward(&[1.0, -2.0, 0.5]).unwrap(), vec![0.0, 0.0]);
        assert_eq!(net.n_params(), 4 * 5 + 6 * 2);
    }

    #[test]
    fn identity_linear_layer() {
        let mut params = vec![0.0; 3 * 3 + 3];
        for k in 0..3 {
            params[k * 3 + k] = 1.0;
        }
        let net = Mlp::from_params(&[3, 3], params).unwrap();
        assert_eq!(net.forward(&[0.25, -1.5, 4.0]).unwrap(), vec![0.25, -1.5, 4.0]);
    }

    #[test]
    fn hand_evaluated_tanh_net() {
        // 1-2-1: h1 = tanh(0.5 x + 0.1), h2 = tanh(-0.3 x), y = 2 h1 - h2 + 0.2
        let params = vec![0.5, -0.3, 0.1, 0.0, 2.0, -1.0, 0.2];
        let net = Mlp::from_params(&[1, 2, 1], params).unwrap();
        let x: f64 = 0.8;
        let expected = 2.0 * (0.5 * x + 0.1).tanh() - (-0.3 * x).tanh() + 0.2;
        assert!((net.forward(&[x]).unwrap()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let net = Mlp::zeros(&[2, 2]).unwrap();
        assert!(net.forward(&[1.0]).is_err());
        assert!(net.backward(&[1.0, 2.0], &[1.0]).is_err());
        assert!(Mlp::zeros(&[2]).is_err());
        assert!(Mlp::from_params(&[2, 2], vec![0.0; 5]).is_err());
    }

    #[test]
    fn zero_output_grad_gives_zero_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = Mlp::new(&[3, 4, 2], 1.0, &mut rng).unwrap();
        let g = net.backward(&[0.1, 0.2, 0.3], &[0.0, 0.0]).unwrap();
        assert!(g.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn linear_layer_weight_grad_is_outer_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = Mlp::new(&[3, 2], 1.0, &mut rng).unwrap();
        let x = [0.5, -1.0, 2.0];
        let g = [0.3, -0.7];
        let grads = net.backward(&x, &g).unwrap();
        for k in 0..3 {
            for j in 0..2 {
                assert_eq!(grads[k * 2 + j], x[k] * g[j]);
            }
        }
        assert_eq!(&grads[6..], &g);
    }

    #[test]
    fn batch_rows_match_single_rows_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = Mlp::new(&[4, 16, 16, 3], 0.5, &mut rng).unwrap();
        let inputs: Vec<f64> = (0..4 * 9).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let acts = net.forward_batch(&inputs, 9).unwrap();
        for r in 0..9 {
            let single = net.forward(&inputs[r * 4..(r + 1) * 4]).unwrap();
            assert_eq!(&acts.output()[r * 3..(r + 1) * 3], single.as_slice());
        }
    }

    #[test]
    fn batch_gradient_is_sum_of_row_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let net = Mlp::new(&[2, 5, 2], 1.0, &mut rng).unwrap();
        let inputs: Vec<f64> = (0..2 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let og: Vec<f64> = (0..2 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let acts = net.forward_batch(&inputs, 3).unwrap();
        let mut g = vec![0.0; net.n_params()];
        net.backward_batch(&acts, &og, &mut g).unwrap();
        let mut sum = vec![0.0; net.n_params()];
        for r in 0..3 {
            let gr = net.backward(&inputs[r * 2..r * 2 + 2], &og[r * 2..r * 2 + 2]).unwrap();
            for (s, x) in sum.iter_mut().zip(gr) {
                *s += x;
            }
        }
        for (a, b) in g.iter().zip(&sum) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn adam_first_steps_follow_recurrence() {
        let cfg = AdamConfig {
            learning_rate: 0.1,
            ..Default::default()
        };
        let mut st = AdamState::new(1, cfg);
        let mut p = [1.0];
        st.step(&mut p, &[2.0]).unwrap();
        // step 1: m = 0.2, v = 0.004, m_hat = 2, v_hat = 4 -> delta = 0.1 * 2 / (2 + 1e-8)
        let d1 = 0.1 * 2.0 / (2.0 + 1e-8);
        assert!((p[0] - (1.0 - d1)).abs() < 1e-15);
        st.step(&mut p, &[2.0]).unwrap();
        // step 2: m = 0.38, v = 0.007996, m_hat = 0.38 / 0.19 = 2, v_hat = 0.007996 / 0.001999 = 4
        let m: f64 = 0.9 * 0.2 + 0.1 * 2.0;
        let v: f64 = 0.999 * 0.004 + 0.001 * 4.0;
        let d2 = 0.1 * (m / (1.0 - 0.81)) / ((v / (1.0 - 0.999f64.powi(2))).sqrt() + 1e-8);
        assert!((p[0] - (1.0 - d1 - d2)).abs() < 1e-15);
        assert_eq!(st.step_count(), 2);
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut st = AdamState::new(3, AdamConfig::default());
        let mut p = [0.5, -1.0, 2.0];
        st.step(&mut p, &[0.0; 3]).unwrap();
        assert_eq!(p, [0.5, -1.0, 2.0]);
        assert!(st.step(&mut p, &[0.0; 2]).is_err());
    }

    #[test]
    fn adam_decreases_quadratic() {
        let mut st = AdamState::new(1, AdamConfig::default());
        let mut w = [1.0];
        let before = 0.5 * w[0] * w[0];
        let grad = [w[0]];
        st.step(&mut w, &grad).unwrap();
        assert!(0.5 * w[0] * w[0] < before);
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let a = Mlp::new(&[4, 64, 64, 2], 0.01, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = Mlp::new(&[4, 64, 64, 2], 0.01, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        let bound = (6.0f64 / 68.0).sqrt();
        assert!(a.params()[..4 * 64].iter().all(|w| w.abs() <= bound));
        assert!(a.params()[4 * 64..5 * 64].iter().all(|&b| b == 0.0));
        let last = &a.params()[a.n_params() - (65 * 2)..a.n_params() - 2];
        assert!(last.iter().all(|w| w.abs() <= 0.01 * (6.0f64 / 66.0).sqrt()));
    }

    #[test]
    fn clip_global_norm_scales_jointly() {
        let mut a = vec![3.0];
        let mut b = vec![4.0];
        let n = clip_global_norm(&mut [&mut a, &mut b], 0.5);
        assert_eq!(n, 5.0);
        assert!((global_norm(&[&a, &b]) - 0.5).abs() < 1e-15);
        let n = clip_global_norm(&mut [&mut a, &mut b], 10.0);
        assert!((n - 0.5).abs() < 1e-15);
    }

    #[test]
    fn snapshot_round_trip() {
        let net = Mlp::new(&[3, 4, 1], 1.0, &mut ChaCha8Rng::seed_from_u64(12)).unwrap();
        let mut buf = Vec::new();
        net.write_snapshot(&mut buf, &[-0.5, 0.25]).unwrap();
        let nl = buf.iter().position(|&b| b == b'\n').unwrap();
        let header: serde_json::Value = serde_json::from_slice(&buf[..nl]).unwrap();
        assert_eq!(header["layer_dims"], serde_json::json!([3, 4, 1]));
        assert_eq!(buf.len() - nl - 1, 8 * (net.n_params() + 2));
        assert_eq!(
            f64::from_le_bytes(buf[nl + 1..nl + 9].try_into().unwrap()),
            net.params()[0]
        );
        let (back, extra) = read_snapshot(&buf[..]).unwrap();
        assert_eq!(back, net);
        assert_eq!(extra, vec![-0.5, 0.25]);
        assert!(read_snapshot(&buf[..buf.len() - 3]).is_err());
    }
}
