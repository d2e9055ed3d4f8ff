//! Stacked LSTM with masked steps and hand-written backpropagation through time.
//!
//! Gate pre-activations are packed `[i | f | g | o]`, each block `H` wide.
//! Layer `l` owns `w_x` (`in_l` rows of `4H`), `w_h` (`H` rows of `4H`) and
//! `b` (`4H`). Storing weights input-major makes a sparse input a sum of a
//! few contiguous rows.
//!
//! A masked step copies `(h, c)` through unchanged. This keeps "nothing was
//! logged" (an all-zero input that still advances the state) distinct from
//! "this day does not exist".

use std::ops::Range;

use rand_chacha::ChaCha8Rng;

use super::{axpy, dot, dropout_mask, dsigmoid_from_output, dtanh_from_output, init_uniform, sigmoid};

/// Input of one timestep to the bottom layer.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepInput {
    /// `(index, value)` pairs, indices strictly increasing.
    pub entries: Vec<(u32, f64)>,
}

impl StepInput {
    pub fn from_dense(x: &[f64]) -> Self {
        StepInput {
            entries: x
                .iter()
                .enumerate()
                .filter(|(_, v)| **v != 0.0)
                .map(|(i, v)| (i as u32, *v))
                .collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct LstmStack {
    pub input: usize,
    pub hidden: usize,
    pub layers: usize,
}

/// Forward intermediates of one sequence, consumed by [`LstmStack::backward`].
#[derive(Debug)]
pub struct LstmTape {
    steps: usize,
    mask: Vec<bool>,
    input: Vec<StepInput>,
    layers: Vec<LayerTape>,
}

#[derive(Debug)]
struct LayerTape {
    /// `(T+1) × H`, row 0 is the zero initial state.
    h: Vec<f64>,
    c: Vec<f64>,
    /// `T × 4H` activated gates.
    gates: Vec<f64>,
    /// `T × H` tanh(c_t).
    tanh_c: Vec<f64>,
    /// `T × H` input actually fed to this layer (layers above the first).
    below: Vec<f64>,
    /// `T × H` dropout scale applied to `below`; empty when dropout is off.
    below_scale: Vec<f64>,
}

impl LstmTape {
    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Top-layer hidden state after step `t` (`t < T`).
    pub fn top_hidden(&self, t: usize) -> &[f64] {
        let top = self.layers.last().expect("at least one layer");
        let h = top.h.len() / (self.steps + 1);
        &top.h[(t + 1) * h..(t + 2) * h]
    }

    pub fn final_hidden(&self) -> &[f64] {
        self.top_hidden(self.steps - 1)
    }

    pub fn final_cell(&self) -> &[f64] {
        let top = self.layers.last().expect("at least one layer");
        let h = top.c.len() / (self.steps + 1);
        &top.c[self.steps * h..]
    }
}

impl LstmStack {
    pub fn new(input: usize, hidden: usize, layers: usize) -> Self {
        assert!(input > 0 && hidden > 0 && layers > 0, "empty LSTM");
        LstmStack { input, hidden, layers }
    }

    fn layer_input(&self, l: usize) -> usize {
        if l == 0 {
            self.input
        } else {
            self.hidden
        }
    }

    fn layer_len(&self, l: usize) -> usize {
        (self.layer_input(l) + self.hidden + 1) * 4 * self.hidden
    }

    fn layer_offset(&self, l: usize) -> usize {
        (0..l).map(|k| self.layer_len(k)).sum()
    }

    pub fn param_len(&self) -> usize {
        (0..self.layers).map(|l| self.layer_len(l)).sum()
    }

    /// Ranges of bias entries, relative to the start of this stack's parameters.
    pub fn bias_ranges(&self) -> Vec<Range<usize>> {
        (0..self.layers)
            .map(|l| {
                let end = self.layer_offset(l) + self.layer_len(l);
                end - 4 * self.hidden..end
            })
            .collect()
    }

    /// Splits a layer's parameters into `(w_x, w_h, b)`.
    fn split<'a>(&self, p: &'a [f64], l: usize) -> (&'a [f64], &'a [f64], &'a [f64]) {
        let g = 4 * self.hidden;
        let off = self.layer_offset(l);
        let nx = self.layer_input(l) * g;
        let nh = self.hidden * g;
        (
            &p[off..off + nx],
            &p[off + nx..off + nx + nh],
            &p[off + nx + nh..off + nx + nh + g],
        )
    }

    fn split_mut<'a>(&self, p: &'a mut [f64], l: usize) -> (&'a mut [f64], &'a mut [f64], &'a mut [f64]) {
        let g = 4 * self.hidden;
        let off = self.layer_offset(l);
        let nx = self.layer_input(l) * g;
        let nh = self.hidden * g;
        let layer = &mut p[off..off + nx + nh + g];
        let (wx, rest) = layer.split_at_mut(nx);
        let (wh, b) = rest.split_at_mut(nh);
        (wx, wh, b)
    }

    /// Uniform(±1/√(in+H)) weights, zero biases except the forget gate at 1.0.
    pub fn init(&self, p: &mut [f64], rng: &mut ChaCha8Rng) {
        let h = self.hidden;
        for l in 0..self.layers {
            let fan_in = self.layer_input(l) + h;
            let (wx, wh, b) = self.split_mut(p, l);
            init_uniform(wx, fan_in, rng);
            init_uniform(wh, fan_in, rng);
            b.fill(0.0);
            b[h..2 * h].fill(1.0);
        }
    }

    /// One cell update for a dense input; reference path for tests and tools.
    pub fn cell(&self, p: &[f64], layer: usize, x: &[f64], h_prev: &[f64], c_prev: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let hs = self.hidden;
        let (wx, wh, b) = self.split(p, layer);
        let mut z = b.to_vec();
        for (j, &xj) in x.iter().enumerate() {
            if xj != 0.0 {
                axpy(&mut z, xj, &wx[j * 4 * hs..(j + 1) * 4 * hs]);
            }
        }
        for (k, &hk) in h_prev.iter().enumerate() {
            axpy(&mut z, hk, &wh[k * 4 * hs..(k + 1) * 4 * hs]);
        }
        let mut h = vec![0.0; hs];
        let mut c = vec![0.0; hs];
        for u in 0..hs {
            let i = sigmoid(z[u]);
            let f = sigmoid(z[hs + u]);
            let g = z[2 * hs + u].tanh();
            let o = sigmoid(z[3 * hs + u]);
            c[u] = f * c_prev[u] + i * g;
            h[u] = o * c[u].tanh();
        }
        (h, c)
    }

    /// Runs the stack over `inputs`, starting from zero states.
    ///
    /// `mask[t] == true` passes the state of step `t−1` through. When
    /// `dropout` is given, inputs to layers above the first are dropped out
    /// with the given rate.
    pub fn forward(
        &self,
        p: &[f64],
        inputs: Vec<StepInput>,
        mask: &[bool],
        mut dropout: Option<(f64, &mut ChaCha8Rng)>,
    ) -> LstmTape {
        let t_len = inputs.len();
        assert_eq!(mask.len(), t_len, "mask length");
        let hs = self.hidden;
        let g4 = 4 * hs;
        let mut layers: Vec<LayerTape> = Vec::with_capacity(self.layers);
        let mut z = vec![0.0; g4];
        for l in 0..self.layers {
            let (wx, wh, b) = self.split(p, l);
            let mut tape = LayerTape {
                h: vec![0.0; (t_len + 1) * hs],
                c: vec![0.0; (t_len + 1) * hs],
                gates: vec![0.0; t_len * g4],
                tanh_c: vec![0.0; t_len * hs],
                below: Vec::new(),
                below_scale: Vec::new(),
            };
            if l > 0 {
                let prev = &layers[l - 1];
                tape.below = prev.h[hs..].to_vec();
                if let Some((rate, rng)) = dropout.as_mut() {
                    if *rate > 0.0 {
                        tape.below_scale = dropout_mask(t_len * hs, *rate, rng);
                        for (v, s) in tape.below.iter_mut().zip(&tape.below_scale) {
                            *v *= s;
                        }
                    }
                }
            }
            for t in 0..t_len {
                let (done, rest) = tape.h.split_at_mut((t + 1) * hs);
                let h_prev = &done[t * hs..];
                let h_out = &mut rest[..hs];
                if mask[t] {
                    h_out.copy_from_slice(h_prev);
                    let (cd, cr) = tape.c.split_at_mut((t + 1) * hs);
                    cr[..hs].copy_from_slice(&cd[t * hs..]);
                    continue;
                }
                z.copy_from_slice(b);
                if l == 0 {
                    for &(j, v) in &inputs[t].entries {
                        let j = j as usize;
                        axpy(&mut z, v, &wx[j * g4..(j + 1) * g4]);
                    }
                } else {
                    for (j, &v) in tape.below[t * hs..(t + 1) * hs].iter().enumerate() {
                        if v != 0.0 {
                            axpy(&mut z, v, &wx[j * g4..(j + 1) * g4]);
                        }
                    }
                }
                for (k, &hk) in h_prev.iter().enumerate() {
                    if hk != 0.0 {
                        axpy(&mut z, hk, &wh[k * g4..(k + 1) * g4]);
                    }
                }
                let gates = &mut tape.gates[t * g4..(t + 1) * g4];
                for u in 0..hs {
                    gates[u] = sigmoid(z[u]);
                    gates[hs + u] = sigmoid(z[hs + u]);
                    gates[2 * hs + u] = z[2 * hs + u].tanh();
                    gates[3 * hs + u] = sigmoid(z[3 * hs + u]);
                }
                let (cd, cr) = tape.c.split_at_mut((t + 1) * hs);
                let c_prev = &cd[t * hs..];
                let c_out = &mut cr[..hs];
                let tanh_c = &mut tape.tanh_c[t * hs..(t + 1) * hs];
                for u in 0..hs {
                    let c = gates[hs + u] * c_prev[u] + gates[u] * gates[2 * hs + u];
                    c_out[u] = c;
                    tanh_c[u] = c.tanh();
                    h_out[u] = gates[3 * hs + u] * tanh_c[u];
                }
            }
            layers.push(tape);
        }
        LstmTape {
            steps: t_len,
            mask: mask.to_vec(),
            input: inputs,
            layers,
        }
    }

    /// Backpropagates `dh_top` (`T × H`, gradient w.r.t. each top-layer output)
    /// plus `dc_final` (gradient w.r.t. the last top-layer cell state, if any)
    /// through the recorded sequence.
    ///
    /// Parameter gradients are accumulated into `grad` (same layout as the
    /// parameters). When `input_range` is given, the gradient with respect to
    /// those bottom-layer input coordinates is returned as `T × len`.
    pub fn backward(
        &self,
        p: &[f64],
        tape: LstmTape,
        dh_top: &[f64],
        grad: &mut [f64],
        input_range: Option<Range<usize>>,
    ) -> Option<Vec<f64>> {
        let t_len = tape.steps;
        let hs = self.hidden;
        let g4 = 4 * hs;
        assert_eq!(dh_top.len(), t_len * hs, "dh_top shape");
        let mut dh_ext = dh_top.to_vec();
        let mut input_grad = None;
        let mut dz = vec![0.0; g4];
        let mut dh_next = vec![0.0; hs];
        let mut dc_next = vec![0.0; hs];
        for l in (0..self.layers).rev() {
            let lt = &tape.layers[l];
            let (wx, wh, _) = self.split(p, l);
            let (gwx, gwh, gb) = self.split_mut(grad, l);
            let mut dbelow = if l > 0 { vec![0.0; t_len * hs] } else { Vec::new() };
            let mut dinput = if l == 0 {
                input_range.clone().map(|r| (r.clone(), vec![0.0; t_len * r.len()]))
            } else {
                None
            };
            dh_next.fill(0.0);
            dc_next.fill(0.0);
            for t in (0..t_len).rev() {
                for (dn, e) in dh_next.iter_mut().zip(&dh_ext[t * hs..(t + 1) * hs]) {
                    *dn += e;
                }
                if tape.mask[t] {
                    continue;
                }
                let gates = &lt.gates[t * g4..(t + 1) * g4];
                let tanh_c = &lt.tanh_c[t * hs..(t + 1) * hs];
                let c_prev = &lt.c[t * hs..(t + 1) * hs];
                let h_prev = &lt.h[t * hs..(t + 1) * hs];
                for u in 0..hs {
                    let (i, f, g, o) = (gates[u], gates[hs + u], gates[2 * hs + u], gates[3 * hs + u]);
                    let dh = dh_next[u];
                    let dc = dc_next[u] + dh * o * dtanh_from_output(tanh_c[u]);
                    dz[u] = dc * g * dsigmoid_from_output(i);
                    dz[hs + u] = dc * c_prev[u] * dsigmoid_from_output(f);
                    dz[2 * hs + u] = dc * i * dtanh_from_output(g);
                    dz[3 * hs + u] = dh * tanh_c[u] * dsigmoid_from_output(o);
                    dc_next[u] = dc * f;
                }
                axpy(gb, 1.0, &dz);
                for k in 0..hs {
                    let row = &wh[k * g4..(k + 1) * g4];
                    if h_prev[k] != 0.0 {
                        axpy(&mut gwh[k * g4..(k + 1) * g4], h_prev[k], &dz);
                    }
                    dh_next[k] = dot(row, &dz);
                }
                if l == 0 {
                    for &(j, v) in &tape.input[t].entries {
                        let j = j as usize;
                        axpy(&mut gwx[j * g4..(j + 1) * g4], v, &dz);
                    }
                    if let Some((r, buf)) = dinput.as_mut() {
                        let w = r.len();
                        for (k, j) in r.clone().enumerate() {
                            buf[t * w + k] = dot(&wx[j * g4..(j + 1) * g4], &dz);
                        }
                    }
                } else {
                    let below = &lt.below[t * hs..(t + 1) * hs];
                    for j in 0..hs {
                        if below[j] != 0.0 {
                            axpy(&mut gwx[j * g4..(j + 1) * g4], below[j], &dz);
                        }
                        let mut d = dot(&wx[j * g4..(j + 1) * g4], &dz);
                        if !lt.below_scale.is_empty() {
                            d *= lt.below_scale[t * hs + j];
                        }
                        dbelow[t * hs + j] = d;
                    }
                }
            }
            if l > 0 {
                dh_ext = dbelow;
            } else {
                input_grad = dinput.map(|(_, b)| b);
            }
        }
        input_grad
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_params(stack: &LstmStack, seed: u64, scale: f64) -> Vec<f64> {
        let mut r = rng(seed);
        (0..stack.param_len()).map(|_| r.random_range(-scale..scale)).collect()
    }

    fn random_inputs(n: usize, width: usize, seed: u64) -> Vec<StepInput> {
        let mut r = rng(seed);
        (0..n)
            .map(|_| {
                let x: Vec<f64> = (0..width)
                    .map(|_| if r.random_bool(0.4) { r.random_range(-1.0..1.0) } else { 0.0 })
                    .collect();
                StepInput::from_dense(&x)
            })
            .collect()
    }

    /// Gate equations written out directly on scalars, no packing tricks.
    fn reference_cell(
        input: usize,
        hidden: usize,
        p: &[f64],
        x: &[f64],
        h_prev: &[f64],
        c_prev: &[f64],
    ) -> (Vec<f64>, Vec<f64>) {
        let g4 = 4 * hidden;
        let wx = |j: usize, gate: usize, u: usize| p[j * g4 + gate * hidden + u];
        let wh = |k: usize, gate: usize, u: usize| p[input * g4 + k * g4 + gate * hidden + u];
        let b = |gate: usize, u: usize| p[(input + hidden) * g4 + gate * hidden + u];
        let pre = |gate: usize, u: usize| {
            let mut s = b(gate, u);
            for j in 0..input {
                s += wx(j, gate, u) * x[j];
            }
            for k in 0..hidden {
                s += wh(k, gate, u) * h_prev[k];
            }
            s
        };
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let mut h = vec![0.0; hidden];
        let mut c = vec![0.0; hidden];
        for u in 0..hidden {
            let i = sig(pre(0, u));
            let f = sig(pre(1, u));
            let g = pre(2, u).tanh();
            let o = sig(pre(3, u));
            c[u] = f * c_prev[u] + i * g;
            h[u] = o * c[u].tanh();
        }
        (h, c)
    }

    #[test]
    fn zero_params_give_zero_state() {
        let s = LstmStack::new(5, 3, 1);
        let p = vec![0.0; s.param_len()];
        let (h, c) = s.cell(&p, 0, &[1.0, 0.0, 2.0, 0.0, -1.0], &[0.0; 3], &[0.0; 3]);
        assert_eq!(h, vec![0.0; 3]);
        assert_eq!(c, vec![0.0; 3]);
    }

    #[test]
    fn saturated_forget_keeps_cell() {
        let s = LstmStack::new(2, 3, 1);
        let mut p = vec![0.0; s.param_len()];
        let b0 = s.param_len() - 12;
        p[b0..b0 + 3].fill(-1e3);
        p[b0 + 3..b0 + 6].fill(1e3);
        let c_prev = [0.3, -0.7, 0.1];
        let (_, c) = s.cell(&p, 0, &[1.0, -1.0], &[0.2, 0.1, -0.4], &c_prev);
        assert_eq!(c, c_prev.to_vec());
    }

    #[test]
    fn cell_matches_reference() {
        let s = LstmStack::new(4, 3, 1);
        let p = random_params(&s, 11, 0.8);
        let x = [0.5, -1.0, 0.0, 2.0];
        let hp = [0.1, -0.3, 0.6];
        let cp = [0.4, 0.2, -0.9];
        let (h, c) = s.cell(&p, 0, &x, &hp, &cp);
        let (hr, cr) = reference_cell(4, 3, &p, &x, &hp, &cp);
        for u in 0..3 {
            assert!((h[u] - hr[u]).abs() < 1e-12);
            assert!((c[u] - cr[u]).abs() < 1e-12);
        }
        let tape = s.forward(&p, vec![StepInput::from_dense(&x)], &[false], None);
        let (h0, _) = reference_cell(4, 3, &p, &x, &[0.0; 3], &[0.0; 3]);
        for u in 0..3 {
            assert!((tape.final_hidden()[u] - h0[u]).abs() < 1e-12);
        }
    }

    #[test]
    fn init_sets_forget_bias() {
        let s = LstmStack::new(6, 4, 2);
        let mut p = vec![0.0; s.param_len()];
        s.init(&mut p, &mut rng(3));
        for r in s.bias_ranges() {
            let b = &p[r];
            assert!(b[4..8].iter().all(|v| *v == 1.0));
            assert!(b[..4].iter().chain(&b[8..]).all(|v| *v == 0.0));
        }
        let mut q = vec![0.0; s.param_len()];
        s.init(&mut q, &mut rng(4));
        assert_ne!(p, q);
    }

    #[test]
    fn all_masked_returns_initial_state() {
        let s = LstmStack::new(5, 4, 2);
        let p = random_params(&s, 5, 0.5);
        let tape = s.forward(&p, random_inputs(24, 5, 1), &[true; 24], None);
        assert!(tape.final_hidden().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn masked_tail_equals_shorter_run() {
        let s = LstmStack::new(5, 4, 2);
        let p = random_params(&s, 6, 0.5);
        let inputs = random_inputs(24, 5, 2);
        let mut mask = [false; 24];
        mask[20..].fill(true);
        let full = s.forward(&p, inputs.clone(), &mask, None);
        let short = s.forward(&p, inputs[..20].to_vec(), &[false; 20], None);
        assert_eq!(full.final_hidden(), short.final_hidden());
    }

    #[test]
    fn inserting_masked_steps_is_invariant() {
        let s = LstmStack::new(5, 4, 1);
        let p = random_params(&s, 7, 0.5);
        let inputs = random_inputs(10, 5, 3);
        let base = s.forward(&p, inputs.clone(), &[false; 10], None);
        let mut padded = inputs.clone();
        padded.insert(4, StepInput::default());
        padded.insert(0, StepInput::default());
        let mut mask = vec![false; 12];
        mask[0] = true;
        mask[5] = true;
        let masked = s.forward(&p, padded, &mask, None);
        assert_eq!(base.final_hidden(), masked.final_hidden());
    }

    #[test]
    fn forward_is_deterministic() {
        let s = LstmStack::new(5, 4, 2);
        let p = random_params(&s, 8, 0.5);
        let a = s.forward(&p, random_inputs(24, 5, 4), &[false; 24], None);
        let b = s.forward(&p, random_inputs(24, 5, 4), &[false; 24], None);
        assert_eq!(a.final_hidden(), b.final_hidden());
    }

    #[test]
    fn long_sequences_stay_finite() {
        let s = LstmStack::new(6, 8, 2);
        let p = random_params(&s, 9, 1.0);
        let mut r = rng(10);
        let inputs: Vec<StepInput> = (0..180)
            .map(|_| StepInput::from_dense(&(0..6).map(|_| r.random_range(-1e3..1e3)).collect::<Vec<_>>()))
            .collect();
        let tape = s.forward(&p, inputs, &[false; 180], None);
        for t in 0..180 {
            assert!(tape.top_hidden(t).iter().all(|v| v.is_finite() && v.abs() <= 1.0));
        }
    }

    fn loss_of(s: &LstmStack, p: &[f64], inputs: &[StepInput], mask: &[bool], w: &[f64]) -> f64 {
        let tape = s.forward(p, inputs.to_vec(), mask, None);
        (0..inputs.len())
            .map(|t| dot(tape.top_hidden(t), &w[t * s.hidden..(t + 1) * s.hidden]))
            .sum()
    }

    #[test]
    fn backward_matches_finite_differences() {
        let s = LstmStack::new(5, 4, 2);
        let p = random_params(&s, 12, 0.6);
        let inputs = random_inputs(7, 5, 5);
        let mut mask = vec![false; 7];
        mask[3] = true;
        let mut r = rng(13);
        let w: Vec<f64> = (0..7 * 4).map(|_| r.random_range(-1.0..1.0)).collect();
        let tape = s.forward(&p, inputs.clone(), &mask, None);
        let mut grad = vec![0.0; s.param_len()];
        let dx = s.backward(&p, tape, &w, &mut grad, Some(0..5)).unwrap();
        let h = 1e-5;
        for k in 0..p.len() {
            let mut pp = p.clone();
            pp[k] += h;
            let up = loss_of(&s, &pp, &inputs, &mask, &w);
            pp[k] -= 2.0 * h;
            let down = loss_of(&s, &pp, &inputs, &mask, &w);
            let num = (up - down) / (2.0 * h);
            let err = (num - grad[k]).abs() / (num.abs() + grad[k].abs()).max(1e-6);
            assert!(err < 1e-5, "param {k}: analytic {} numeric {num}", grad[k]);
        }
        for t in 0..7 {
            for j in 0..5 {
                let mut bumped = inputs.clone();
                let dense = |si: &StepInput| {
                    let mut v = vec![0.0; 5];
                    for &(i, x) in &si.entries {
                        v[i as usize] = x;
                    }
                    v
                };
                let mut v = dense(&bumped[t]);
                v[j] += h;
                bumped[t] = StepInput { entries: v.iter().enumerate().map(|(i, x)| (i as u32, *x)).collect() };
                let up = loss_of(&s, &p, &bumped, &mask, &w);
                let mut v = dense(&inputs[t]);
                v[j] -= h;
                bumped[t] = StepInput { entries: v.iter().enumerate().map(|(i, x)| (i as u32, *x)).collect() };
                let down = loss_of(&s, &p, &bumped, &mask, &w);
                let num = (up - down) / (2.0 * h);
                assert!((num - dx[t * 5 + j]).abs() < 1e-7, "input ({t},{j})");
            }
        }
    }

    #[test]
    fn backward_is_linear_in_output_gradient() {
        let s = LstmStack::new(5, 3, 2);
        let p = random_params(&s, 14, 0.6);
        let inputs = random_inputs(6, 5, 6);
        let w: Vec<f64> = (0..18).map(|i| (i as f64 * 0.37).sin()).collect();
        let w2: Vec<f64> = w.iter().map(|x| 2.0 * x).collect();
        let mut g1 = vec![0.0; s.param_len()];
        let mut g2 = vec![0.0; s.param_len()];
        s.backward(&p, s.forward(&p, inputs.clone(), &[false; 6], None), &w, &mut g1, None);
        s.backward(&p, s.forward(&p, inputs, &[false; 6], None), &w2, &mut g2, None);
        for (a, b) in g1.iter().zip(&g2) {
            assert!((2.0 * a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
        let mut g0 = vec![0.0; s.param_len()];
        s.backward(&p, s.forward(&p, random_inputs(6, 5, 6), &[false; 6], None), &[0.0; 18], &mut g0, None);
        assert!(g0.iter().all(|g| *g == 0.0));
    }
}
