//! Dense neural-network engine: forward, analytic backward, Adam, and
//! parameter (de)serialization.
//!
//! Two fixed architectures live on top of this: the encoder mapping D-dim
//! inputs to 2D embeddings, and the one-hidden-layer surrogate regressor.
//! Gradients are hand-derived; there is no general autodiff.
//!
//! Layout contract: layer weights are row-major `[out_dim x in_dim]`, and the
//! flat parameter order is, per layer, weights row-major followed by biases.
//! Everything downstream (Adam moments, checkpoints, aggregation) uses this
//! order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write as IoWrite};
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    ReLU,
    Identity,
}

impl Activation {
    fn tag(self) -> u8 {
        match self {
            Activation::ReLU => 0,
            Activation::Identity => 1,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Activation::ReLU),
            1 => Ok(Activation::Identity),
            t => Err(Error::config(format!("unknown activation tag {t}"))),
        }
    }
}

/// Dense affine layer `y = act(W x + b)` with `W` row-major `[out x in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn new(
        in_dim: usize,
        out_dim: usize,
        weights: Vec<f64>,
        biases: Vec<f64>,
        activation: Activation,
    ) -> Result<Self> {
        if weights.len() != in_dim * out_dim || biases.len() != out_dim {
            return Err(Error::dim(format!(
                "layer {in_dim}->{out_dim}: got {} weights, {} biases",
                weights.len(),
                biases.len()
            )));
        }
        Ok(DenseLayer {
            in_dim,
            out_dim,
            weights,
            biases,
            activation,
        })
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.biases.len()
    }
}

/// Stack of dense layers. The final layer must use `Identity` so embedding
/// coordinates / regression outputs stay unbounded.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<DenseLayer>,
}

/// Per-layer shapes and activations; the schema against which flat parameter
/// vectors are interpreted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlpLayout {
    pub layers: Vec<(usize, usize, Activation)>,
}

impl MlpLayout {
    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|&(i, o, _)| i * o + o)
            .sum()
    }
}

/// Flat parameter vector plus the layout needed to rebuild the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    pub flat: Vec<f64>,
    pub layout: MlpLayout,
}

/// Gradient buffer aligned with the flat parameter order.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub flat: Vec<f64>,
}

impl Gradients {
    pub fn zeros(n: usize) -> Self {
        Gradients { flat: vec![0.0; n] }
    }

    pub fn add_scaled(&mut self, other: &Gradients, scale: f64) {
        assert_eq!(self.flat.len(), other.flat.len());
        for (a, b) in self.flat.iter_mut().zip(&other.flat) {
            *a += scale * b;
        }
    }
}

impl Mlp {
    pub fn from_layers(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::config("mlp needs at least one layer"));
        }
        for w in layers.windows(2) {
            if w[0].out_dim != w[1].in_dim {
                return Err(Error::dim(format!(
                    "adjacent layers {}->{} and {}->{} incompatible",
                    w[0].in_dim, w[0].out_dim, w[1].in_dim, w[1].out_dim
                )));
            }
        }
        if layers.last().unwrap().activation != Activation::Identity {
            return Err(Error::config("final layer activation must be Identity"));
        }
        Ok(Mlp { layers })
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.param_count()).sum()
    }

    pub fn layout(&self) -> MlpLayout {
        MlpLayout {
            layers: self
                .layers
                .iter()
                .map(|l| (l.in_dim, l.out_dim, l.activation))
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.layers.iter().all(|l| {
            l.weights.iter().all(|v| v.is_finite()) && l.biases.iter().all(|v| v.is_finite())
        })
    }
}

/// Builds an MLP with the given layer sizes and activation plan. Weights are
/// He-uniform (bound `sqrt(6/fan_in)`), biases zero; the draw order (layer by
/// layer, weights row-major) is part of the reproducibility contract.
pub fn init_mlp(dims: &[usize], activations: &[Activation], seed: u64) -> Result<Mlp> {
    if dims.len() < 2 {
        return Err(Error::config("init_mlp: need at least input and output dims"));
    }
    if activations.len() != dims.len() - 1 {
        return Err(Error::dim(format!(
            "activation plan length {} != layer count {}",
            activations.len(),
            dims.len() - 1
        )));
    }
    if dims.iter().any(|&d| d == 0) {
        return Err(Error::config("init_mlp: zero-sized layer"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::with_capacity(dims.len() - 1);
    for (i, &act) in activations.iter().enumerate() {
        let (fan_in, fan_out) = (dims[i], dims[i + 1]);
        let bound = (6.0 / fan_in as f64).sqrt();
        let weights: Vec<f64> = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        layers.push(DenseLayer::new(fan_in, fan_out, weights, vec![0.0; fan_out], act)?);
    }
    Mlp::from_layers(layers)
}

/// ReLU hidden layers, Identity output — the plan both model families use.
pub fn relu_plan(num_layers: usize) -> Vec<Activation> {
    let mut plan = vec![Activation::ReLU; num_layers.saturating_sub(1)];
    plan.push(Activation::Identity);
    plan
}

/// Encoder dims for an input dimension and hidden widths, ending in 2D.
pub fn encoder_dims(input_dim: usize, hidden: &[usize]) -> Vec<usize> {
    let mut dims = Vec::with_capacity(hidden.len() + 2);
    dims.push(input_dim);
    dims.extend_from_slice(hidden);
    dims.push(2);
    dims
}

fn apply_layer(layer: &DenseLayer, input: &[f64], out: &mut [f64]) {
    for o in 0..layer.out_dim {
        let wrow = &layer.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
        let mut acc = layer.biases[o];
        for i in 0..layer.in_dim {
            acc += wrow[i] * input[i];
        }
        out[o] = acc;
    }
    if layer.activation == Activation::ReLU {
        for v in out.iter_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
    }
}

/// Batched forward pass. Deterministic given parameters.
pub fn forward(model: &Mlp, inputs: &Matrix) -> Result<Matrix> {
    if inputs.cols() != model.input_dim() {
        return Err(Error::dim(format!(
            "forward: input dim {} != model input {}",
            inputs.cols(),
            model.input_dim()
        )));
    }
    let n = inputs.rows();
    let mut cur = inputs.clone();
    for layer in &model.layers {
        let mut next = Matrix::zeros(n, layer.out_dim);
        for r in 0..n {
            apply_layer(layer, cur.row(r), next.row_mut(r));
        }
        cur = next;
    }
    Ok(cur)
}

/// Backward pass: recomputes the forward to cache activations, then
/// backpropagates `output_grads`. Returns parameter gradients (flat order)
/// and gradients with respect to the inputs.
pub fn backward(model: &Mlp, inputs: &Matrix, output_grads: &Matrix) -> Result<(Gradients, Matrix)> {
    if inputs.cols() != model.input_dim() {
        return Err(Error::dim("backward: input dim mismatch"));
    }
    if output_grads.cols() != model.output_dim() || output_grads.rows() != inputs.rows() {
        return Err(Error::dim(format!(
            "backward: output grads {}x{} incompatible with {} rows x {} outputs",
            output_grads.rows(),
            output_grads.cols(),
            inputs.rows(),
            model.output_dim()
        )));
    }
    let n = inputs.rows();
    let num_layers = model.layers.len();

    // Post-activations per layer; acts[0] is the input batch.
    let mut acts: Vec<Matrix> = Vec::with_capacity(num_layers + 1);
    acts.push(inputs.clone());
    for layer in &model.layers {
        let mut next = Matrix::zeros(n, layer.out_dim);
        for r in 0..n {
            apply_layer(layer, acts.last().unwrap().row(r), next.row_mut(r));
        }
        acts.push(next);
    }

    let mut grads = Gradients::zeros(model.param_count());
    let offsets = flat_offsets(model);
    let mut delta = output_grads.clone();

    for l in (0..num_layers).rev() {
        let layer = &model.layers[l];
        // ReLU derivative: pass where the post-activation is positive.
        if layer.activation == Activation::ReLU {
            let out_act = &acts[l + 1];
            for r in 0..n {
                let a = out_act.row(r);
                let d = delta.row_mut(r);
                for o in 0..layer.out_dim {
                    if a[o] <= 0.0 {
                        d[o] = 0.0;
                    }
                }
            }
        }

        let (w_off, b_off) = offsets[l];
        {
            let gw = &mut grads.flat[w_off..w_off + layer.in_dim * layer.out_dim];
            let input_act = &acts[l];
            for r in 0..n {
                let x = input_act.row(r);
                let d = delta.row(r);
                for o in 0..layer.out_dim {
                    let g = d[o];
                    if g != 0.0 {
                        let grow = &mut gw[o * layer.in_dim..(o + 1) * layer.in_dim];
                        for i in 0..layer.in_dim {
                            grow[i] += g * x[i];
                        }
                    }
                }
            }
        }
        {
            let gb = &mut grads.flat[b_off..b_off + layer.out_dim];
            for r in 0..n {
                let d = delta.row(r);
                for o in 0..layer.out_dim {
                    gb[o] += d[o];
                }
            }
        }

        // Input gradient for this layer (skipped for l == 0 only if unused;
        // callers want it, so always compute).
        let mut prev = Matrix::zeros(n, layer.in_dim);
        for r in 0..n {
            let d = delta.row(r);
            let p = prev.row_mut(r);
            for o in 0..layer.out_dim {
                let g = d[o];
                if g != 0.0 {
                    let wrow = &layer.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                    for i in 0..layer.in_dim {
                        p[i] += g * wrow[i];
                    }
                }
            }
        }
        delta = prev;
    }

    Ok((grads, delta))
}

/// (weight offset, bias offset) of each layer inside the flat order.
fn flat_offsets(model: &Mlp) -> Vec<(usize, usize)> {
    let mut offs = Vec::with_capacity(model.layers.len());
    let mut cur = 0;
    for layer in &model.layers {
        let w_off = cur;
        let b_off = cur + layer.in_dim * layer.out_dim;
        cur = b_off + layer.out_dim;
        offs.push((w_off, b_off));
    }
    offs
}

/// Adam optimizer state. Moment buffers are flat, aligned with the parameter
/// order of the model they track.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step_count: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(param_count: usize, lr: f64) -> Self {
        AdamState {
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
            step_count: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One Adam update, in place. Bias-corrected, standard form.
pub fn adam_step(model: &mut Mlp, grads: &Gradients, state: &mut AdamState) -> Result<()> {
    let n = model.param_count();
    if grads.flat.len() != n || state.m.len() != n {
        return Err(Error::dim(format!(
            "adam_step: {} params, {} grads, {} moments",
            n,
            grads.flat.len(),
            state.m.len()
        )));
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let mut idx = 0;
    for layer in &mut model.layers {
        for p in layer.weights.iter_mut().chain(layer.biases.iter_mut()) {
            let g = grads.flat[idx];
            let m = state.beta1 * state.m[idx] + (1.0 - state.beta1) * g;
            let v = state.beta2 * state.v[idx] + (1.0 - state.beta2) * g * g;
            state.m[idx] = m;
            state.v[idx] = v;
            let m_hat = m / bc1;
            let v_hat = v / bc2;
            *p -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
            idx += 1;
        }
    }
    Ok(())
}

/// Flattens a model into `ParamVector` (per layer: weights row-major, then
/// biases).
pub fn flatten(model: &Mlp) -> ParamVector {
    let mut flat = Vec::with_capacity(model.param_count());
    for layer in &model.layers {
        flat.extend_from_slice(&layer.weights);
        flat.extend_from_slice(&layer.biases);
    }
    ParamVector {
        flat,
        layout: model.layout(),
    }
}

/// Rebuilds a model from a flat vector; exact inverse of [`flatten`].
pub fn unflatten(pv: &ParamVector) -> Result<Mlp> {
    if pv.flat.len() != pv.layout.param_count() {
        return Err(Error::dim(format!(
            "unflatten: {} values for layout needing {}",
            pv.flat.len(),
            pv.layout.param_count()
        )));
    }
    let mut layers = Vec::with_capacity(pv.layout.layers.len());
    let mut cur = 0;
    for &(in_dim, out_dim, act) in &pv.layout.layers {
        let w_end = cur + in_dim * out_dim;
        let b_end = w_end + out_dim;
        layers.push(DenseLayer::new(
            in_dim,
            out_dim,
            pv.flat[cur..w_end].to_vec(),
            pv.flat[w_end..b_end].to_vec(),
            act,
        )?);
        cur = b_end;
    }
    Mlp::from_layers(layers)
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"FNE1";

/// Writes the binary parameter checkpoint: magic "FNE1", u32 layer count,
/// per-layer (u32 in, u32 out, u8 activation), then little-endian f64
/// parameters in flat order.
pub fn write_checkpoint<W: IoWrite>(model: &Mlp, w: &mut W) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&(model.layers.len() as u32).to_le_bytes())?;
    for layer in &model.layers {
        w.write_all(&(layer.in_dim as u32).to_le_bytes())?;
        w.write_all(&(layer.out_dim as u32).to_le_bytes())?;
        w.write_all(&[layer.activation.tag()])?;
    }
    for layer in &model.layers {
        for v in layer.weights.iter().chain(layer.biases.iter()) {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Mlp> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::config(format!(
            "bad checkpoint magic {:?}, expected {:?}",
            magic, CHECKPOINT_MAGIC
        )));
    }
    let mut buf4 = [0u8; 4];
    r.read_exact(&mut buf4)?;
    let num_layers = u32::from_le_bytes(buf4) as usize;
    let mut shapes = Vec::with_capacity(num_layers);
    for _ in 0..num_layers {
        r.read_exact(&mut buf4)?;
        let in_dim = u32::from_le_bytes(buf4) as usize;
        r.read_exact(&mut buf4)?;
        let out_dim = u32::from_le_bytes(buf4) as usize;
        let mut tag = [0u8; 1];
        r.read_exact(&mut tag)?;
        shapes.push((in_dim, out_dim, Activation::from_tag(tag[0])?));
    }
    let mut layers = Vec::with_capacity(num_layers);
    let mut buf8 = [0u8; 8];
    for (in_dim, out_dim, act) in shapes {
        let mut weights = vec![0.0; in_dim * out_dim];
        for v in weights.iter_mut() {
            r.read_exact(&mut buf8)?;
            *v = f64::from_le_bytes(buf8);
        }
        let mut biases = vec![0.0; out_dim];
        for v in biases.iter_mut() {
            r.read_exact(&mut buf8)?;
            *v = f64::from_le_bytes(buf8);
        }
        layers.push(DenseLayer::new(in_dim, out_dim, weights, biases, act)?);
    }
    Mlp::from_layers(layers)
}

pub fn save_checkpoint(model: &Mlp, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(model, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Mlp> {
    let mut r = BufReader::new(File::open(path)?);
    read_checkpoint(&mut r)
}

/// Debug-friendly structured text dump of the parameters.
pub fn write_checkpoint_text<W: IoWrite>(model: &Mlp, w: &mut W) -> Result<()> {
    writeln!(w, "layers={}", model.layers.len())?;
    for (li, layer) in model.layers.iter().enumerate() {
        writeln!(
            w,
            "layer={} in={} out={} activation={:?}",
            li, layer.in_dim, layer.out_dim, layer.activation
        )?;
        for o in 0..layer.out_dim {
            let row = &layer.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
            let vals: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
            writeln!(w, "w{o}={}", vals.join(","))?;
        }
        let vals: Vec<String> = layer.biases.iter().map(|v| format!("{v}")).collect();
        writeln!(w, "b={}", vals.join(","))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::Matrix;
    use rand::Rng;

    fn identity_layer(dim: usize, act: Activation) -> DenseLayer {
        let mut weights = vec![0.0; dim * dim];
        for i in 0..dim {
            weights[i * dim + i] = 1.0;
        }
        DenseLayer::new(dim, dim, weights, vec![0.0; dim], act).unwrap()
    }

    #[test]
    fn forward_identity_layer() {
        let model = Mlp::from_layers(vec![identity_layer(2, Activation::Identity)]).unwrap();
        let x = Matrix::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let y = forward(&model, &x).unwrap();
        assert_eq!(y.row(0), &[1.0, 2.0]);
    }

    #[test]
    fn forward_relu_clamps() {
        // ReLU hidden + Identity output (Mlp requires Identity last).
        let model = Mlp::from_layers(vec![
            identity_layer(2, Activation::ReLU),
            identity_layer(2, Activation::Identity),
        ])
        .unwrap();
        let x = Matrix::from_rows(&[vec![-1.0, 2.0]]).unwrap();
        let y = forward(&model, &x).unwrap();
        assert_eq!(y.row(0), &[0.0, 2.0]);
    }

    #[test]
    fn forward_dim_mismatch_errors() {
        let model = init_mlp(&[3, 2], &relu_plan(1), 0).unwrap();
        let x = Matrix::from_rows(&[vec![1.0, 2.0]]).unwrap();
        assert!(forward(&model, &x).is_err());
    }

    /// Independent oracle: per-element matrix-chain evaluation.
    fn forward_oracle(model: &Mlp, input: &[f64]) -> Vec<f64> {
        let mut cur = input.to_vec();
        for layer in model.layers() {
            let mut next = vec![0.0; layer.out_dim];
            for o in 0..layer.out_dim {
                let mut acc = layer.biases[o];
                for i in 0..layer.in_dim {
                    acc += layer.weights[o * layer.in_dim + i] * cur[i];
                }
                next[o] = match layer.activation {
                    Activation::ReLU => acc.max(0.0),
                    Activation::Identity => acc,
                };
            }
            cur = next;
        }
        cur
    }

    #[test]
    fn forward_matches_matrix_chain_oracle() {
        let model = init_mlp(&[5, 7, 4, 3], &relu_plan(3), 42).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let rows: Vec<Vec<f64>> = (0..6)
            .map(|_| (0..5).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect();
        let x = Matrix::from_rows(&rows).unwrap();
        let y = forward(&model, &x).unwrap();
        for (r, row) in rows.iter().enumerate() {
            let expect = forward_oracle(&model, row);
            for (a, b) in y.row(r).iter().zip(&expect) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn linear_forward_is_homogeneous() {
        // Identity activations, zero bias: f(a*x) = a*f(x).
        let mut model = init_mlp(
            &[4, 3, 2],
            &[Activation::Identity, Activation::Identity],
            7,
        )
        .unwrap();
        for layer in model.layers.iter_mut() {
            for b in layer.biases.iter_mut() {
                *b = 0.0;
            }
        }
        let x = Matrix::from_rows(&[vec![0.3, -1.2, 0.8, 2.0]]).unwrap();
        let ax = Matrix::from_rows(&[vec![0.3 * 2.5, -1.2 * 2.5, 0.8 * 2.5, 2.0 * 2.5]]).unwrap();
        let y = forward(&model, &x).unwrap();
        let ay = forward(&model, &ax).unwrap();
        for (a, b) in ay.row(0).iter().zip(y.row(0)) {
            assert!((a - 2.5 * b).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_identity_sum_loss() {
        // Single identity-activation layer, loss = sum of outputs:
        // dL/dW = ones ⊗ input, dL/db = ones.
        let model = Mlp::from_layers(vec![identity_layer(2, Activation::Identity)]).unwrap();
        let x = Matrix::from_rows(&[vec![3.0, -1.5]]).unwrap();
        let g = Matrix::from_rows(&[vec![1.0, 1.0]]).unwrap();
        let (grads, _) = backward(&model, &x, &g).unwrap();
        // flat order: w00 w01 w10 w11 b0 b1
        assert_eq!(grads.flat, vec![3.0, -1.5, 3.0, -1.5, 1.0, 1.0]);
    }

    #[test]
    fn backward_zero_grads_gives_zero() {
        let model = init_mlp(&[3, 4, 2], &relu_plan(2), 1).unwrap();
        let x = Matrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![-1.0, 0.5, 0.1]]).unwrap();
        let g = Matrix::zeros(2, 2);
        let (grads, xg) = backward(&model, &x, &g).unwrap();
        assert!(grads.flat.iter().all(|&v| v == 0.0));
        assert!(xg.data().iter().all(|&v| v == 0.0));
    }

    /// Central finite differences against a scalar loss over the flat params.
    pub(crate) fn fd_param_grads(
        model: &Mlp,
        loss: &mut dyn FnMut(&Mlp) -> f64,
        h: f64,
    ) -> Vec<f64> {
        let pv = flatten(model);
        let mut out = vec![0.0; pv.flat.len()];
        for i in 0..pv.flat.len() {
            let mut plus = pv.clone();
            plus.flat[i] += h;
            let mut minus = pv.clone();
            minus.flat[i] -= h;
            let lp = loss(&unflatten(&plus).unwrap());
            let lm = loss(&unflatten(&minus).unwrap());
            out[i] = (lp - lm) / (2.0 * h);
        }
        out
    }

    pub(crate) fn grad_close(analytic: f64, fd: f64) -> bool {
        let denom = analytic.abs().max(fd.abs());
        if denom < 1e-6 {
            (analytic - fd).abs() < 1e-7
        } else {
            (analytic - fd).abs() / denom < 1e-4
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let model = init_mlp(&[4, 6, 5, 3], &relu_plan(3), 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let rows: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..4).map(|_| rng.random_range(-1.5..1.5)).collect())
            .collect();
        let x = Matrix::from_rows(&rows).unwrap();
        // Loss = sum of squares of outputs; output grad = 2*y.
        let y = forward(&model, &x).unwrap();
        let mut og = Matrix::zeros(y.rows(), y.cols());
        for r in 0..y.rows() {
            for c in 0..y.cols() {
                og.set(r, c, 2.0 * y.get(r, c));
            }
        }
        let (grads, _) = backward(&model, &x, &og).unwrap();
        let fd = fd_param_grads(
            &model,
            &mut |m| {
                let y = forward(m, &x).unwrap();
                y.data().iter().map(|v| v * v).sum()
            },
            1e-5,
        );
        for (i, (&a, &f)) in grads.flat.iter().zip(&fd).enumerate() {
            assert!(grad_close(a, f), "param {i}: analytic {a} vs fd {f}");
        }
    }

    #[test]
    fn input_grads_match_finite_differences() {
        let model = init_mlp(&[3, 5, 2], &relu_plan(2), 5).unwrap();
        let x0 = vec![0.4, -0.7, 1.1];
        let x = Matrix::from_rows(&[x0.clone()]).unwrap();
        let y = forward(&model, &x).unwrap();
        let mut og = Matrix::zeros(1, 2);
        for c in 0..2 {
            og.set(0, c, 2.0 * y.get(0, c));
        }
        let (_, xg) = backward(&model, &x, &og).unwrap();
        let h = 1e-5;
        for i in 0..3 {
            let mut xp = x0.clone();
            xp[i] += h;
            let mut xm = x0.clone();
            xm[i] -= h;
            let lp: f64 = forward(&model, &Matrix::from_rows(&[xp]).unwrap())
                .unwrap()
                .data()
                .iter()
                .map(|v| v * v)
                .sum();
            let lm: f64 = forward(&model, &Matrix::from_rows(&[xm]).unwrap())
                .unwrap()
                .data()
                .iter()
                .map(|v| v * v)
                .sum();
            let fd = (lp - lm) / (2.0 * h);
            assert!(grad_close(xg.get(0, i), fd), "{} vs {}", xg.get(0, i), fd);
        }
    }

    #[test]
    fn adam_zero_grad_fresh_state_keeps_params() {
        let mut model = init_mlp(&[2, 3, 1], &relu_plan(2), 3).unwrap();
        let before = flatten(&model);
        let mut state = AdamState::new(model.param_count(), 0.01);
        let grads = Gradients::zeros(model.param_count());
        adam_step(&mut model, &grads, &mut state).unwrap();
        assert_eq!(flatten(&model).flat, before.flat);
        assert!(state.m.iter().all(|&v| v == 0.0));
        assert_eq!(state.step_count, 1);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        // Scalar parameter p=0, grad 1, defaults: first bias-corrected step
        // moves ~lr in the negative gradient direction.
        let layer = DenseLayer::new(1, 1, vec![0.0], vec![0.0], Activation::Identity).unwrap();
        let mut model = Mlp::from_layers(vec![layer]).unwrap();
        let mut state = AdamState::new(2, 0.001);
        let grads = Gradients {
            flat: vec![1.0, 0.0],
        };
        adam_step(&mut model, &grads, &mut state).unwrap();
        let p = model.layers()[0].weights[0];
        assert!((p + 0.001).abs() < 1e-9, "p = {p}");
    }

    #[test]
    fn adam_is_deterministic() {
        let mut m1 = init_mlp(&[3, 4, 2], &relu_plan(2), 17).unwrap();
        let mut m2 = m1.clone();
        let mut s1 = AdamState::new(m1.param_count(), 0.01);
        let mut s2 = s1.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let grads = Gradients {
            flat: (0..m1.param_count())
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
        };
        for _ in 0..5 {
            adam_step(&mut m1, &grads, &mut s1).unwrap();
            adam_step(&mut m2, &grads, &mut s2).unwrap();
        }
        assert_eq!(flatten(&m1).flat, flatten(&m2).flat);
        assert_eq!(s1, s2);
    }

    #[test]
    fn init_same_seed_is_bit_identical() {
        let a = init_mlp(&[10, 8, 2], &relu_plan(2), 99).unwrap();
        let b = init_mlp(&[10, 8, 2], &relu_plan(2), 99).unwrap();
        assert_eq!(flatten(&a).flat, flatten(&b).flat);
    }

    #[test]
    fn init_layer_shapes() {
        let m = init_mlp(&[784, 256, 256, 256, 2], &relu_plan(4), 0).unwrap();
        assert_eq!(m.layers().len(), 4);
        assert_eq!(m.input_dim(), 784);
        assert_eq!(m.output_dim(), 2);
        let m2 = init_mlp(&[50, 128, 128, 2], &relu_plan(3), 0).unwrap();
        assert_eq!(m2.layers().len(), 3);
        for layer in m2.layers() {
            assert!(layer.biases.iter().all(|&b| b == 0.0));
        }
    }

    #[test]
    fn init_rejects_short_dims() {
        assert!(init_mlp(&[5], &[], 0).is_err());
        assert!(init_mlp(&[], &[], 0).is_err());
    }

    #[test]
    fn flatten_layout_definition() {
        let layer =
            DenseLayer::new(2, 1, vec![1.0, 2.0], vec![3.0], Activation::Identity).unwrap();
        let model = Mlp::from_layers(vec![layer]).unwrap();
        assert_eq!(flatten(&model).flat, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn flatten_unflatten_roundtrip() {
        let model = init_mlp(&[6, 5, 4, 2], &relu_plan(3), 123).unwrap();
        let pv = flatten(&model);
        let back = unflatten(&pv).unwrap();
        assert_eq!(model, back);
    }

    #[test]
    fn unflatten_length_mismatch_errors() {
        let model = init_mlp(&[3, 2], &relu_plan(1), 0).unwrap();
        let mut pv = flatten(&model);
        pv.flat.pop();
        assert!(unflatten(&pv).is_err());
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let model = init_mlp(&[7, 5, 2], &relu_plan(2), 77).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&model, &mut buf).unwrap();
        assert_eq!(&buf[0..4], b"FNE1");
        let back = read_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(model, back);
    }

    #[test]
    fn checkpoint_bad_magic_rejected() {
        let buf = b"XXXX\x01\x00\x00\x00".to_vec();
        assert!(read_checkpoint(&mut buf.as_slice()).is_err());
    }
}
