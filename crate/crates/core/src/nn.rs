//! Layers, parameter binding onto a [`Tape`], and the Adam optimizer.

use std::collections::HashMap;

use rand::Rng;

use crate::autodiff::{Gradients, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvKind {
    Regular,
    Transposed { out_pad: usize },
}

/// 2-D convolution. Regular weights are `[out, in, k, k]`, transposed
/// weights `[in, out, k, k]`; bias is `[1, out, 1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub pad: usize,
    pub kind: ConvKind,
}

impl Conv {
    pub fn new(rng: &mut impl Rng, cin: usize, cout: usize, kernel: usize, stride: usize) -> Self {
        let fan_in = (cin * kernel * kernel) as f64;
        Self {
            weight: he_uniform(rng, [cout, cin, kernel, kernel], fan_in),
            bias: Tensor::zeros([1, cout, 1, 1]),
            stride,
            pad: kernel / 2,
            kind: ConvKind::Regular,
        }
    }

    /// Transposed convolution that exactly multiplies spatial size by `stride`.
    pub fn transposed(rng: &mut impl Rng, cin: usize, cout: usize, kernel: usize, stride: usize) -> Self {
        let fan_in = (cin * kernel * kernel) as f64 / (stride * stride) as f64;
        Self {
            weight: he_uniform(rng, [cin, cout, kernel, kernel], fan_in),
            bias: Tensor::zeros([1, cout, 1, 1]),
            stride,
            pad: kernel / 2,
            kind: ConvKind::Transposed { out_pad: stride - 1 },
        }
    }

    pub fn pointwise(rng: &mut impl Rng, cin: usize, cout: usize) -> Self {
        Self::new(rng, cin, cout, 1, 1)
    }

    pub fn in_channels(&self) -> usize {
        match self.kind {
            ConvKind::Regular => self.weight.c(),
            ConvKind::Transposed { .. } => self.weight.n(),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.bias.c()
    }

    pub fn kernel(&self) -> usize {
        self.weight.h()
    }

    pub fn forward(&self, b: &mut Binder<'_>, x: Var) -> Var {
        let w = b.param(&self.weight);
        self.forward_with_weight(b, x, w)
    }

    /// Forward pass with a caller-supplied (e.g. masked) weight variable.
    pub fn forward_with_weight(&self, b: &mut Binder<'_>, x: Var, w: Var) -> Var {
        let bias = b.param(&self.bias);
        let tape = b.tape();
        match self.kind {
            ConvKind::Regular => tape.conv2d(x, w, Some(bias), self.stride, self.pad),
            ConvKind::Transposed { out_pad } => tape.conv_transpose2d(x, w, Some(bias), self.stride, self.pad, out_pad),
        }
    }

    pub fn push_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((format!("{prefix}.weight"), &self.weight));
        out.push((format!("{prefix}.bias"), &self.bias));
    }

    pub fn push_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        out.push((format!("{prefix}.weight"), &mut self.weight));
        out.push((format!("{prefix}.bias"), &mut self.bias));
    }
}

fn he_uniform(rng: &mut impl Rng, shape: [usize; 4], fan_in: f64) -> Tensor {
    let bound = (6.0 / fan_in).sqrt();
    let n = crate::tensor::numel(shape);
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-bound..bound)).collect())
}

/// Anything with named parameter tensors.
pub trait Module {
    fn params(&self) -> Vec<(String, &Tensor)>;
    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)>;

    fn num_params(&self) -> usize {
        self.params().iter().map(|(_, t)| t.len()).sum()
    }

    /// SHA-256 over parameter names and the bit patterns of their values.
    fn checksum(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for (name, t) in self.params() {
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Maps parameter tensors onto tape variables for one forward pass.
///
/// Parameters are keyed by address, so the module must not move between the
/// forward pass and the optimizer step that consumes the gradients.
pub struct Binder<'t> {
    tape: &'t Tape,
    trainable: bool,
    bound: HashMap<usize, Var>,
}

impl<'t> Binder<'t> {
    pub fn new(tape: &'t Tape, trainable: bool) -> Self {
        Self {
            tape,
            trainable,
            bound: HashMap::new(),
        }
    }

    /// Parameters bound as constants: gradients still flow to inputs.
    pub fn frozen(tape: &'t Tape) -> Self {
        Self::new(tape, false)
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    pub fn param(&mut self, t: &Tensor) -> Var {
        let key = t as *const Tensor as usize;
        if let Some(&v) = self.bound.get(&key) {
            return v;
        }
        let v = if self.trainable {
            self.tape.leaf(t.clone())
        } else {
            self.tape.constant(t.clone())
        };
        self.bound.insert(key, v);
        v
    }

    pub fn collect(&self, grads: &mut Gradients) -> ParamGrads {
        let mut map = HashMap::new();
        if self.trainable {
            for (&key, &v) in &self.bound {
                if let Some(g) = grads.take(v) {
                    map.insert(key, g);
                }
            }
        }
        ParamGrads { map }
    }
}

#[derive(Default)]
pub struct ParamGrads {
    map: HashMap<usize, Tensor>,
}

impl ParamGrads {
    pub fn get(&self, t: &Tensor) -> Option<&Tensor> {
        self.map.get(&(t as *const Tensor as usize))
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn merge(&mut self, other: ParamGrads) {
        for (k, v) in other.map {
            match self.map.get_mut(&k) {
                Some(acc) => acc.add_assign(&v),
                None => {
                    self.map.insert(k, v);
                }
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.map.values().flat_map(|t| t.data()).map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, c: f64) {
        for t in self.map.values_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= c);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Tensor,
    pub v: Tensor,
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub state: HashMap<String, AdamState>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            state: HashMap::new(),
        }
    }

    /// Updates every parameter that has a gradient; others stay bit-identical.
    pub fn update(&mut self, params: Vec<(String, &mut Tensor)>, grads: &ParamGrads) {
        let lr = self.lr;
        self.update_with(params, grads, |_| lr);
    }

    /// Like [`Adam::update`], with the learning rate chosen per parameter name.
    pub fn update_with(&mut self, params: Vec<(String, &mut Tensor)>, grads: &ParamGrads, lr_for: impl Fn(&str) -> f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, p) in params {
            let Some(g) = grads.get(p) else { continue };
            let lr = lr_for(&name);
            let st = self.state.entry(name).or_insert_with(|| AdamState {
                m: Tensor::zeros(p.shape()),
                v: Tensor::zeros(p.shape()),
            });
            let (m, v) = (st.m.data_mut(), st.v.data_mut());
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                let gi = g.data()[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                *w -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}
