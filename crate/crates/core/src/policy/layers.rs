//! Building blocks with hand-written forward and backward passes.
//!
//! Every layer reads its weights from a flat parameter slice at fixed offsets
//! and accumulates gradients into a slice of the same length.

/// Valid 1-D convolution over `in_ch x in_len` input, weights `[out][in][kernel]`.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Conv1d {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub in_len: usize,
    pub out_len: usize,
    pub w_off: usize,
    pub b_off: usize,
}

impl Conv1d {
    /// The kernel is clamped to the input length so short lag sets still fit.
    pub fn new(in_ch: usize, out_ch: usize, kernel: usize, stride: usize, in_len: usize, offset: usize) -> Self {
        let kernel = kernel.min(in_len).max(1);
        let out_len = (in_len - kernel) / stride + 1;
        Self {
            in_ch,
            out_ch,
            kernel,
            stride,
            in_len,
            out_len,
            w_off: offset,
            b_off: offset + out_ch * in_ch * kernel,
        }
    }

    pub fn weight_len(&self) -> usize {
        self.out_ch * self.in_ch * self.kernel
    }

    pub fn in_size(&self) -> usize {
        self.in_ch * self.in_len
    }

    pub fn out_size(&self) -> usize {
        self.out_ch * self.out_len
    }

    pub fn forward(&self, p: &[f64], x: &[f64], y: &mut [f64]) {
        let w = &p[self.w_off..self.w_off + self.weight_len()];
        let b = &p[self.b_off..self.b_off + self.out_ch];
        for o in 0..self.out_ch {
            for t in 0..self.out_len {
                let mut acc = b[o];
                let start = t * self.stride;
                for c in 0..self.in_ch {
                    let wk = &w[(o * self.in_ch + c) * self.kernel..][..self.kernel];
                    let xk = &x[c * self.in_len + start..][..self.kernel];
                    acc += wk.iter().zip(xk).map(|(a, b)| a * b).sum::<f64>();
                }
                y[o * self.out_len + t] = acc;
            }
        }
    }

    pub fn backward(&self, p: &[f64], x: &[f64], dy: &[f64], grad: &mut [f64], mut dx: Option<&mut [f64]>) {
        let wl = self.weight_len();
        for o in 0..self.out_ch {
            for t in 0..self.out_len {
                let g = dy[o * self.out_len + t];
                if g == 0.0 {
                    continue;
                }
                grad[self.b_off + o] += g;
                let start = t * self.stride;
                for c in 0..self.in_ch {
                    let base = (o * self.in_ch + c) * self.kernel;
                    for q in 0..self.kernel {
                        let xi = c * self.in_len + start + q;
                        grad[self.w_off + base + q] += g * x[xi];
                        if let Some(dx) = dx.as_deref_mut() {
                            dx[xi] += g * p[self.w_off + base + q];
                        }
                    }
                }
            }
        }
        debug_assert!(self.w_off + wl == self.b_off);
    }
}

/// Fully connected layer, weights `[out][in]`.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub w_off: usize,
    pub b_off: usize,
}

impl Dense {
    pub fn new(inputs: usize, outputs: usize, offset: usize) -> Self {
        Self {
            inputs,
            outputs,
            w_off: offset,
            b_off: offset + inputs * outputs,
        }
    }

    pub fn forward(&self, p: &[f64], x: &[f64], y: &mut [f64]) {
        for o in 0..self.outputs {
            let row = &p[self.w_off + o * self.inputs..][..self.inputs];
            y[o] = p[self.b_off + o] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        }
    }

    pub fn backward(&self, p: &[f64], x: &[f64], dy: &[f64], grad: &mut [f64], dx: &mut [f64]) {
        for o in 0..self.outputs {
            let g = dy[o];
            if g == 0.0 {
                continue;
            }
            grad[self.b_off + o] += g;
            let base = self.w_off + o * self.inputs;
            for i in 0..self.inputs {
                grad[base + i] += g * x[i];
                dx[i] += g * p[base + i];
            }
        }
    }
}

/// Gated recurrent unit:
/// `z = s(Wz x + Uz h + bz)`, `r = s(Wr x + Ur h + br)`,
/// `n = tanh(Wn x + Un (r*h) + bn)`, `h' = (1-z)*n + z*h`.
///
/// Parameters are laid out as input weights `[3H x I]` (z, r, n blocks),
/// recurrent weights `[3H x H]`, then biases `[3H]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GruCell {
    pub inputs: usize,
    pub hidden: usize,
    pub(crate) w_off: usize,
    pub(crate) u_off: usize,
    pub(crate) b_off: usize,
}

/// Intermediate values of one GRU step, kept for backpropagation.
#[derive(Debug, Clone, Default)]
pub(crate) struct GruStep {
    pub x: Vec<f64>,
    pub h_prev: Vec<f64>,
    pub z: Vec<f64>,
    pub r: Vec<f64>,
    pub n: Vec<f64>,
    pub rh: Vec<f64>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl GruCell {
    pub(crate) fn new(inputs: usize, hidden: usize, offset: usize) -> Self {
        let w_off = offset;
        let u_off = w_off + 3 * hidden * inputs;
        let b_off = u_off + 3 * hidden * hidden;
        Self {
            inputs,
            hidden,
            w_off,
            u_off,
            b_off,
        }
    }

    pub fn param_len(&self) -> usize {
        3 * self.hidden * (self.inputs + self.hidden + 1)
    }

    fn w(&self, p: &[f64], gate: usize, row: usize, col: usize) -> f64 {
        p[self.w_off + (gate * self.hidden + row) * self.inputs + col]
    }

    fn u(&self, p: &[f64], gate: usize, row: usize, col: usize) -> f64 {
        p[self.u_off + (gate * self.hidden + row) * self.hidden + col]
    }

    /// One step of the recurrence. `params` is the full flat parameter vector.
    pub fn step(&self, params: &[f64], x: &[f64], h: &[f64]) -> Vec<f64> {
        self.step_cached(params, x, h).0
    }

    pub(crate) fn step_cached(&self, p: &[f64], x: &[f64], h: &[f64]) -> (Vec<f64>, GruStep) {
        let hs = self.hidden;
        let mut z = vec![0.0; hs];
        let mut r = vec![0.0; hs];
        for j in 0..hs {
            let mut az = p[self.b_off + j];
            let mut ar = p[self.b_off + hs + j];
            for i in 0..self.inputs {
                az += self.w(p, 0, j, i) * x[i];
                ar += self.w(p, 1, j, i) * x[i];
            }
            for i in 0..hs {
                az += self.u(p, 0, j, i) * h[i];
                ar += self.u(p, 1, j, i) * h[i];
            }
            z[j] = sigmoid(az);
            r[j] = sigmoid(ar);
        }
        let rh: Vec<f64> = r.iter().zip(h).map(|(a, b)| a * b).collect();
        let mut n = vec![0.0; hs];
        for j in 0..hs {
            let mut an = p[self.b_off + 2 * hs + j];
            for i in 0..self.inputs {
                an += self.w(p, 2, j, i) * x[i];
            }
            for i in 0..hs {
                an += self.u(p, 2, j, i) * rh[i];
            }
            n[j] = an.tanh();
        }
        let h_new = (0..hs).map(|j| (1.0 - z[j]) * n[j] + z[j] * h[j]).collect();
        let cache = GruStep {
            x: x.to_vec(),
            h_prev: h.to_vec(),
            z,
            r,
            n,
            rh,
        };
        (h_new, cache)
    }

    /// Backpropagates `dh` through one step; returns the gradient w.r.t. `h_prev`.
    pub(crate) fn step_backward(&self, p: &[f64], s: &GruStep, dh: &[f64], grad: &mut [f64]) -> Vec<f64> {
        let hs = self.hidden;
        let ni = self.inputs;
        let mut dh_prev: Vec<f64> = (0..hs).map(|j| dh[j] * s.z[j]).collect();
        let mut da_z = vec![0.0; hs];
        let mut da_n = vec![0.0; hs];
        for j in 0..hs {
            let dn = dh[j] * (1.0 - s.z[j]);
            let dz = dh[j] * (s.h_prev[j] - s.n[j]);
            da_n[j] = dn * (1.0 - s.n[j] * s.n[j]);
            da_z[j] = dz * s.z[j] * (1.0 - s.z[j]);
        }
        // candidate gate
        let mut d_rh = vec![0.0; hs];
        for j in 0..hs {
            let g = da_n[j];
            if g == 0.0 {
                continue;
            }
            grad[self.b_off + 2 * hs + j] += g;
            let wrow = self.w_off + (2 * hs + j) * ni;
            for i in 0..ni {
                grad[wrow + i] += g * s.x[i];
            }
            let urow = self.u_off + (2 * hs + j) * hs;
            for i in 0..hs {
                grad[urow + i] += g * s.rh[i];
                d_rh[i] += g * p[urow + i];
            }
        }
        let mut da_r = vec![0.0; hs];
        for i in 0..hs {
            dh_prev[i] += d_rh[i] * s.r[i];
            let dr = d_rh[i] * s.h_prev[i];
            da_r[i] = dr * s.r[i] * (1.0 - s.r[i]);
        }
        for (gate, da) in [(0usize, &da_z), (1, &da_r)] {
            for j in 0..hs {
                let g = da[j];
                if g == 0.0 {
                    continue;
                }
                grad[self.b_off + gate * hs + j] += g;
                let wrow = self.w_off + (gate * hs + j) * ni;
                for i in 0..ni {
                    grad[wrow + i] += g * s.x[i];
                }
                let urow = self.u_off + (gate * hs + j) * hs;
                for i in 0..hs {
                    grad[urow + i] += g * s.h_prev[i];
                    dh_prev[i] += g * p[urow + i];
                }
            }
        }
        dh_prev
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Gradient w.r.t. logits given the gradient w.r.t. softmax outputs `y`.
pub(crate) fn softmax_backward(y: &[f64], dy: &[f64]) -> Vec<f64> {
    let dot: f64 = y.iter().zip(dy).map(|(a, b)| a * b).sum();
    y.iter().zip(dy).map(|(yi, gi)| yi * (gi - dot)).collect()
}
