//! Fully-connected networks with hand-written reverse-mode gradients and Adam.
//!
//! Batches are row-major in the usual sense: one sample per row of a
//! `batch × features` matrix. Layer weights are `out × in`.

use nalgebra::DVector;
use rand::Rng as _;

use crate::binio::{ByteReader, ByteWriter};
use crate::error::{dim_err, KeecError, Result};
use crate::numkit::Matrix;
use crate::seed::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Relu,
    None,
}

impl Activation {
    fn code(self) -> u8 {
        match self {
            Activation::Tanh => 1,
            Activation::Relu => 2,
            Activation::None => 0,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(Activation::None),
            1 => Ok(Activation::Tanh),
            2 => Ok(Activation::Relu),
            other => Err(KeecError::Format(format!("unknown activation code {other}"))),
        }
    }

    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            Activation::None => x,
        }
    }

    /// Derivative expressed through the pre-activation `x` and output `y`.
    #[inline]
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::None => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Matrix,
    pub bias: DVector<f64>,
    pub activation: Activation,
}

/// Network parameters. Gradients reuse the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Layer>,
}

/// Per-layer inputs, pre-activations and outputs of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    inputs: Vec<Matrix>,
    pre: Vec<Matrix>,
    outputs: Vec<Matrix>,
}

impl ForwardCache {
    pub fn batch_size(&self) -> usize {
        self.inputs.first().map_or(0, |m| m.nrows())
    }

    /// Network output of the cached pass.
    pub fn output(&self) -> &Matrix {
        self.outputs.last().expect("cache of a non-empty network")
    }
}

impl Mlp {
    /// Glorot-uniform weights, zero biases. `dims` lists layer widths from
    /// input to output; `acts` has one entry per layer.
    pub fn init(dims: &[usize], acts: &[Activation], rng: &mut Rng) -> Result<Self> {
        if dims.len() < 2 || acts.len() != dims.len() - 1 {
            return Err(dim_err(format!(
                "need {} activations for {} widths, got {}",
                dims.len().saturating_sub(1),
                dims.len(),
                acts.len()
            )));
        }
        let layers = dims
            .windows(2)
            .zip(acts)
            .map(|(w, &activation)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let weight = Matrix::from_fn(fan_out, fan_in, |_, _| {
                    rng.random_range(-limit..=limit)
                });
                Layer { weight, bias: DVector::zeros(fan_out), activation }
            })
            .collect();
        Ok(Mlp { layers })
    }

    pub fn in_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.weight.ncols())
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.weight.nrows())
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Mlp {
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    weight: Matrix::zeros(l.weight.nrows(), l.weight.ncols()),
                    bias: DVector::zeros(l.bias.len()),
                    activation: l.activation,
                })
                .collect(),
        }
    }

    fn check_chain(&self) -> Result<()> {
        for w in self.layers.windows(2) {
            if w[0].weight.nrows() != w[1].weight.ncols() {
                return Err(dim_err("consecutive layer widths do not chain"));
            }
        }
        for l in &self.layers {
            if l.bias.len() != l.weight.nrows() {
                return Err(dim_err("bias length differs from layer width"));
            }
        }
        Ok(())
    }

    /// Parameters in a fixed order: per layer, weight (storage order) then bias.
    pub fn params(&self) -> impl Iterator<Item = &f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weight.as_slice().iter().chain(l.bias.as_slice().iter()))
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers.iter_mut().flat_map(|l| {
            l.weight.as_mut_slice().iter_mut().chain(l.bias.as_mut_slice().iter_mut())
        })
    }

    pub fn add_scaled(&mut self, other: &Mlp, scale: f64) {
        for (a, b) in self.params_mut().zip(other.params()) {
            *a += scale * b;
        }
    }

    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, ForwardCache)> {
        if x.ncols() != self.in_dim() {
            return Err(dim_err(format!(
                "network expects {} input features, got {}",
                self.in_dim(),
                x.ncols()
            )));
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut outputs = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for layer in &self.layers {
            let mut z = &h * layer.weight.transpose();
            for mut row in z.row_iter_mut() {
                row += layer.bias.transpose();
            }
            let y = z.map(|v| layer.activation.apply(v));
            inputs.push(h);
            pre.push(z);
            h = y.clone();
            outputs.push(y);
        }
        Ok((h, ForwardCache { inputs, pre, outputs }))
    }

    /// Forward pass without a cache.
    pub fn predict(&self, x: &Matrix) -> Result<Matrix> {
        self.forward(x).map(|(y, _)| y)
    }

    /// Gradients of Σ⟨dY, Y⟩ with respect to the input batch and all parameters.
    pub fn backward(&self, cache: &ForwardCache, dy: &Matrix) -> Result<(Matrix, Mlp)> {
        if cache.pre.len() != self.layers.len() {
            return Err(dim_err("forward cache does not match network depth"));
        }
        let last = cache.outputs.last().ok_or_else(|| dim_err("empty network"))?;
        if dy.shape() != last.shape() {
            return Err(dim_err(format!(
                "output gradient shape {:?} differs from cached output {:?}",
                dy.shape(),
                last.shape()
            )));
        }
        let mut grads = self.zeros_like();
        let mut upstream = dy.clone();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let (z, y) = (&cache.pre[l], &cache.outputs[l]);
            if z.ncols() != layer.weight.nrows() {
                return Err(dim_err("stale forward cache"));
            }
            let dz = Matrix::from_fn(z.nrows(), z.ncols(), |i, j| {
                upstream[(i, j)] * layer.activation.derivative(z[(i, j)], y[(i, j)])
            });
            grads.layers[l].weight = dz.transpose() * &cache.inputs[l];
            grads.layers[l].bias = DVector::from_iterator(
                dz.ncols(),
                dz.column_iter().map(|c| c.sum()),
            );
            upstream = &dz * &layer.weight;
        }
        Ok((upstream, grads))
    }

    /// Gradient of the (scalar-output) network with respect to its input at one point.
    pub fn input_gradient(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let xb = Matrix::from_row_slice(1, x.len(), x.as_slice());
        let (y, cache) = self.forward(&xb)?;
        let (dx, _) = self.backward(&cache, &Matrix::from_element(1, y.ncols(), 1.0))?;
        Ok(DVector::from_row_slice(dx.as_slice()))
    }

    pub fn write(&self, w: &mut ByteWriter) {
        w.u32(self.layers.len() as u32);
        for l in &self.layers {
            w.u32(l.weight.ncols() as u32);
            w.u32(l.weight.nrows() as u32);
            w.u8(l.activation.code());
        }
        for l in &self.layers {
            w.matrix_rows(&l.weight);
            w.f64s(l.bias.iter());
        }
    }

    pub fn read(r: &mut ByteReader<'_>) -> Result<Self> {
        let count = r.u32()? as usize;
        if count == 0 || count > 64 {
            return Err(KeecError::Format(format!("implausible layer count {count}")));
        }
        let mut shapes = Vec::with_capacity(count);
        for _ in 0..count {
            let fan_in = r.u32()? as usize;
            let fan_out = r.u32()? as usize;
            if fan_in == 0 || fan_out == 0 || fan_in > 1 << 16 || fan_out > 1 << 16 {
                return Err(KeecError::Format("implausible layer width".into()));
            }
            shapes.push((fan_in, fan_out, Activation::from_code(r.u8()?)?));
        }
        let mut layers = Vec::with_capacity(count);
        for (fan_in, fan_out, activation) in shapes {
            let weight = r.matrix_rows(fan_out, fan_in)?;
            let bias = DVector::from_vec(r.f64_vec(fan_out)?);
            layers.push(Layer { weight, bias, activation });
        }
        let mlp = Mlp { layers };
        mlp.check_chain().map_err(|e| KeecError::Format(e.to_string()))?;
        Ok(mlp)
    }
}

/// Adam moments and step counter for one parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(num_params: usize) -> Self {
        AdamState {
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn for_net(net: &Mlp) -> Self {
        Self::new(net.num_params())
    }
}

/// One bias-corrected Adam update, descending along `grads`.
pub fn adam_step(params: &mut Mlp, grads: &Mlp, state: &mut AdamState, lr: f64) -> Result<()> {
    if grads.num_params() != params.num_params() {
        return Err(dim_err("adam_step: parameter and gradient sizes differ"));
    }
    let g: Vec<f64> = grads.params().copied().collect();
    adam_update(params.params_mut(), &g, state, lr)
}

/// Adam over any flat parameter sequence; `params` must yield exactly `grads.len()` items.
pub fn adam_update<'a>(
    params: impl Iterator<Item = &'a mut f64>,
    grads: &[f64],
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if state.m.len() != grads.len() {
        return Err(dim_err("adam: gradient and state sizes differ"));
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(KeecError::Numeric("adam: non-finite gradient".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let mut count = 0;
    for (i, (p, g)) in params.zip(grads).enumerate() {
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let mhat = *m / bc1;
        let vhat = *v / bc2;
        *p -= lr * mhat / (vhat.sqrt() + eps);
        count += 1;
    }
    if count != grads.len() {
        return Err(dim_err("adam: fewer parameters than gradients"));
    }
    Ok(())
}
