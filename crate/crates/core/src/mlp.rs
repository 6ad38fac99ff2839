//! Small dense networks with hand-written forward/backward passes and Adam.
//!
//! Parameters live in one flat `Vec<f64>` per network; layer `l` stores its
//! `outputs × inputs` weights row-major followed by its bias.

use rand::Rng;

use crate::error::{invalid, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    None,
    Relu,
    Sigmoid,
    Tanh,
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::None => v,
            Activation::Relu => v.max(0.0),
            Activation::Sigmoid => sigmoid(v),
            Activation::Tanh => v.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation `pre` and output `out`.
    fn derivative(self, pre: f64, out: f64) -> f64 {
        match self {
            Activation::None => 1.0,
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => out * (1.0 - out),
            Activation::Tanh => 1.0 - out * out,
        }
    }

    pub(crate) fn tag(self) -> u8 {
        match self {
            Activation::None => 0,
            Activation::Relu => 1,
            Activation::Sigmoid => 2,
            Activation::Tanh => 3,
        }
    }

    pub(crate) fn from_tag(t: u8) -> Option<Self> {
        Some(match t {
            0 => Activation::None,
            1 => Activation::Relu,
            2 => Activation::Sigmoid,
            3 => Activation::Tanh,
            _ => return None,
        })
    }
}

pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerShape {
    pub inputs: usize,
    pub outputs: usize,
    pub activation: Activation,
}

impl LayerShape {
    fn len(&self) -> usize {
        self.inputs * self.outputs + self.outputs
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    layers: Vec<LayerShape>,
    data: Vec<f64>,
}

/// Saved activations of one forward call.
#[derive(Clone, Debug, Default)]
pub struct MlpTape {
    /// Input of every layer, then the network output.
    values: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

impl MlpTape {
    pub fn output(&self) -> &[f64] {
        self.values.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

impl MlpParams {
    /// All-zero network with the given layer chain.
    pub fn zeros(layers: Vec<LayerShape>) -> Result<Self> {
        if layers.is_empty() {
            return invalid("network needs at least one layer");
        }
        for pair in layers.windows(2) {
            if pair[0].outputs != pair[1].inputs {
                return invalid(format!("layer dims do not chain: {} -> {}", pair[0].outputs, pair[1].inputs));
            }
        }
        let n = layers.iter().map(LayerShape::len).sum();
        Ok(Self { layers, data: vec![0.0; n] })
    }

    /// Uniform(−1/√fan_in, 1/√fan_in) initialization of weights and biases.
    pub fn init_uniform<R: Rng>(layers: Vec<LayerShape>, rng: &mut R) -> Result<Self> {
        let mut p = Self::zeros(layers)?;
        let mut off = 0;
        for l in &p.layers {
            let bound = 1.0 / (l.inputs as f64).sqrt();
            for v in &mut p.data[off..off + l.len()] {
                *v = rng.random_range(-bound..bound);
            }
            off += l.len();
        }
        Ok(p)
    }

    /// Two-layer network `inputs → hidden (ReLU) → outputs (out_act)`.
    pub fn two_layer<R: Rng>(inputs: usize, hidden: usize, outputs: usize, out_act: Activation, rng: &mut R) -> Self {
        Self::init_uniform(
            vec![
                LayerShape { inputs, outputs: hidden, activation: Activation::Relu },
                LayerShape { inputs: hidden, outputs, activation: out_act },
            ],
            rng,
        )
        .expect("two-layer shapes always chain")
    }

    pub fn from_parts(layers: Vec<LayerShape>, data: Vec<f64>) -> Result<Self> {
        let p = Self::zeros(layers)?;
        if p.data.len() != data.len() {
            return invalid(format!("expected {} parameters, got {}", p.data.len(), data.len()));
        }
        Ok(Self { data, ..p })
    }

    pub fn layers(&self) -> &[LayerShape] {
        &self.layers
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs
    }

    pub fn zeros_like(&self) -> Self {
        Self { layers: self.layers.clone(), data: vec![0.0; self.data.len()] }
    }

    pub fn same_shape(&self, other: &MlpParams) -> bool {
        self.layers == other.layers
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, MlpTape)> {
        if x.len() != self.input_dim() {
            return invalid(format!("input length {} != {}", x.len(), self.input_dim()));
        }
        let tape = self.forward_tape(x);
        Ok((tape.output().to_vec(), tape))
    }

    pub(crate) fn forward_tape(&self, x: &[f64]) -> MlpTape {
        let mut values = Vec::with_capacity(self.layers.len() + 1);
        let mut pre = Vec::with_capacity(self.layers.len());
        values.push(x.to_vec());
        let mut off = 0;
        for l in &self.layers {
            let w = &self.data[off..off + l.inputs * l.outputs];
            let b = &self.data[off + l.inputs * l.outputs..off + l.len()];
            let input = values.last().unwrap();
            let mut z = b.to_vec();
            for (o, zo) in z.iter_mut().enumerate() {
                let row = &w[o * l.inputs..(o + 1) * l.inputs];
                *zo += dot(row, input);
            }
            let y: Vec<f64> = z.iter().map(|&v| l.activation.apply(v)).collect();
            pre.push(z);
            values.push(y);
            off += l.len();
        }
        MlpTape { values, pre }
    }

    /// Reverse-mode gradients of `yᵀ grad_y`: `(dL/dparams, dL/dx)`.
    pub fn backward(&self, tape: &MlpTape, grad_y: &[f64]) -> Result<(MlpParams, Vec<f64>)> {
        self.check_tape(tape, grad_y)?;
        let mut g = self.zeros_like();
        let gx = self.backward_into(tape, grad_y, &mut g.data);
        Ok((g, gx))
    }

    fn check_tape(&self, tape: &MlpTape, grad_y: &[f64]) -> Result<()> {
        if tape.pre.len() != self.layers.len()
            || tape.values.first().map(Vec::len) != Some(self.input_dim())
            || tape.pre.iter().zip(&self.layers).any(|(p, l)| p.len() != l.outputs)
        {
            return invalid("tape does not match network");
        }
        if grad_y.len() != self.output_dim() {
            return invalid(format!("output gradient length {} != {}", grad_y.len(), self.output_dim()));
        }
        Ok(())
    }

    /// Accumulates parameter gradients into `grad_p` and returns `dL/dx`.
    pub(crate) fn backward_into(&self, tape: &MlpTape, grad_y: &[f64], grad_p: &mut [f64]) -> Vec<f64> {
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut off = 0;
        for l in &self.layers {
            offsets.push(off);
            off += l.len();
        }
        let mut upstream = grad_y.to_vec();
        for (li, l) in self.layers.iter().enumerate().rev() {
            let off = offsets[li];
            let input = &tape.values[li];
            let out = &tape.values[li + 1];
            let pre = &tape.pre[li];
            let gz: Vec<f64> =
                (0..l.outputs).map(|o| upstream[o] * l.activation.derivative(pre[o], out[o])).collect();
            let w = &self.data[off..off + l.inputs * l.outputs];
            let mut gin = vec![0.0; l.inputs];
            for o in 0..l.outputs {
                let go = gz[o];
                if go == 0.0 {
                    continue;
                }
                let row = o * l.inputs;
                let gw = &mut grad_p[off + row..off + row + l.inputs];
                for i in 0..l.inputs {
                    gw[i] += go * input[i];
                    gin[i] += go * w[row + i];
                }
                grad_p[off + l.inputs * l.outputs + o] += go;
            }
            upstream = gin;
        }
        upstream
    }
}

/// Dot product with four independent partial sums (fixed order, so still
/// deterministic).
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, ra) = a.as_chunks::<4>();
    let (cb, rb) = b.as_chunks::<4>();
    for (x, y) in ca.iter().zip(cb) {
        for i in 0..4 {
            acc[i] += x[i] * y[i];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Every weight and bias multiplied by `lambda`.
pub fn scaled_clone(p: &MlpParams, lambda: f64) -> MlpParams {
    MlpParams { layers: p.layers.clone(), data: p.data.iter().map(|v| v * lambda).collect() }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// The gradient contained a non-finite value; nothing was changed.
    SkippedNonFinite,
}

impl AdamState {
    pub fn new(len: usize, lr: f64) -> Self {
        Self { m: vec![0.0; len], v: vec![0.0; len], t: 0, lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    /// Grows the accumulators (new entries start at zero moments).
    pub fn resize(&mut self, len: usize) {
        self.m.resize(len, 0.0);
        self.v.resize(len, 0.0);
    }
}

/// One bias-corrected Adam update applied in place.
pub fn adam_step(params: &mut [f64], grads: &[f64], st: &mut AdamState) -> Result<StepOutcome> {
    if params.len() != grads.len() || st.m.len() != params.len() || st.v.len() != params.len() {
        return invalid("adam: shape mismatch");
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Ok(StepOutcome::SkippedNonFinite);
    }
    st.t += 1;
    let bc1 = 1.0 - st.beta1.powi(st.t as i32);
    let bc2 = 1.0 - st.beta2.powi(st.t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        st.m[i] = st.beta1 * st.m[i] + (1.0 - st.beta1) * g;
        st.v[i] = st.beta2 * st.v[i] + (1.0 - st.beta2) * g * g;
        let m_hat = st.m[i] / bc1;
        let v_hat = st.v[i] / bc2;
        params[i] -= st.lr * m_hat / (v_hat.sqrt() + st.eps);
    }
    Ok(StepOutcome::Applied)
}

/// Rescales all groups jointly so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(groups: &mut [&mut [f64]], max_norm: f64) -> f64 {
    let norm = groups.iter().flat_map(|g| g.iter()).map(|v| v * v).sum::<f64>().sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        for g in groups.iter_mut() {
            for v in g.iter_mut() {
                *v *= s;
            }
        }
    }
    norm
}
