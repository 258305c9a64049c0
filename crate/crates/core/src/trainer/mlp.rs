//! ReLU MLP encoder with a representation-normalization stage and manual backprop.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::methods::NormMode;
use crate::numerics::{dot, norm2, DenseMatrix, FeatureBatch, EPS_NORM};

/// Widths after the input layer: a two-layer encoder followed by a three-layer projector.
pub const HIDDEN_WIDTHS: [usize; 4] = [64, 64, 64, 64];
pub const OUTPUT_DIM: usize = 32;

pub fn default_dims(input_dim: usize) -> Vec<usize> {
    let mut dims = vec![input_dim];
    dims.extend(HIDDEN_WIDTHS);
    dims.push(OUTPUT_DIM);
    dims
}

/// `y = W x + b` with `W` stored `out × in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weight: DenseMatrix,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    fn zeros_like(&self) -> Self {
        Layer {
            weight: DenseMatrix::zeros(self.out_dim(), self.in_dim()),
            bias: vec![0.0; self.bias.len()],
        }
    }
}

/// Layers with ReLU between them and none after the last.
///
/// `generation` changes on every mutation so a stale forward cache is detectable;
/// equality compares the weights only.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MlpParams {
    layers: Vec<Layer>,
    #[serde(skip)]
    generation: u64,
}

impl PartialEq for MlpParams {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
    }
}

/// Per-layer gradients, shaped like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub layers: Vec<Layer>,
    /// `∂L/∂x` for the network input (not used by the optimizer)
    pub input: DenseMatrix,
}

impl MlpGrads {
    pub fn add_assign(&mut self, other: &MlpGrads) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return Err(Error::dim("gradient depth mismatch"));
        }
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight = a.weight.add(&b.weight)?;
            a.bias.iter_mut().zip(&b.bias).for_each(|(x, y)| *x += y);
        }
        Ok(())
    }

    pub fn is_zero(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.as_slice().iter().chain(&l.bias).all(|&x| x == 0.0))
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.is_finite() && l.bias.iter().all(|x| x.is_finite()))
    }
}

impl MlpParams {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::param("layers", "need at least one layer"));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.out_dim() {
                return Err(Error::dim(format!("layer {i}: bias length {} vs {} outputs", l.bias.len(), l.out_dim())));
            }
            if i > 0 && layers[i - 1].out_dim() != l.in_dim() {
                return Err(Error::dim(format!(
                    "layer {i} takes {} inputs but layer {} emits {}",
                    l.in_dim(),
                    i - 1,
                    layers[i - 1].out_dim()
                )));
            }
        }
        Ok(Self {
            layers,
            generation: 0,
        })
    }

    /// He-normal weights, zero biases.
    pub fn random<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::param("dims", "need at least two positive widths"));
        }
        let layers = dims
            .windows(2)
            .map(|w| {
                let normal = Normal::new(0.0, (2.0 / w[0] as f64).sqrt()).expect("positive std");
                Layer {
                    weight: DenseMatrix::from_fn(w[1], w[0], |_, _| normal.sample(rng)),
                    bias: vec![0.0; w[1]],
                }
            })
            .collect();
        Self::new(layers)
    }

    pub fn identity(dim: usize) -> Self {
        Self::new(vec![Layer {
            weight: DenseMatrix::identity(dim),
            bias: vec![0.0; dim],
        }])
        .expect("square layer chains")
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.as_slice().len() + l.bias.len()).sum()
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn zero_grads(&self) -> MlpGrads {
        MlpGrads {
            layers: self.layers.iter().map(Layer::zeros_like).collect(),
            input: DenseMatrix::zeros(0, self.input_dim()),
        }
    }

    /// Flat view over all parameters, layer by layer (weights then bias).
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(l.weight.as_slice());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    /// Visit every parameter with the matching gradient entry.
    pub fn update_with(&mut self, grads: &MlpGrads, mut f: impl FnMut(usize, &mut f64, f64)) -> Result<()> {
        if grads.layers.len() != self.layers.len() {
            return Err(Error::dim("gradient depth mismatch"));
        }
        let mut idx = 0;
        for (l, g) in self.layers.iter_mut().zip(&grads.layers) {
            if l.weight.shape() != g.weight.shape() || l.bias.len() != g.bias.len() {
                return Err(Error::dim("gradient shape mismatch"));
            }
            for (p, &d) in l.weight.as_mut_slice().iter_mut().zip(g.weight.as_slice()) {
                f(idx, p, d);
                idx += 1;
            }
            for (p, &d) in l.bias.iter_mut().zip(&g.bias) {
                f(idx, p, d);
                idx += 1;
            }
        }
        self.generation += 1;
        Ok(())
    }

    /// `self ← m·self + (1 − m)·other`
    pub fn blend_toward(&mut self, other: &MlpParams, m: f64) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return Err(Error::dim("cannot blend networks of different depth"));
        }
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            if a.weight.shape() != b.weight.shape() {
                return Err(Error::dim("cannot blend networks of different shape"));
            }
            for (x, y) in a.weight.as_mut_slice().iter_mut().zip(b.weight.as_slice()) {
                *x = m * *x + (1.0 - m) * y;
            }
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x = m * *x + (1.0 - m) * y;
            }
        }
        self.generation += 1;
        Ok(())
    }

    /// Copy `other` into `self`, marking existing caches stale.
    pub fn copy_from(&mut self, other: &MlpParams) {
        self.layers.clone_from(&other.layers);
        self.generation += 1;
    }

    /// Mutable access to one raw parameter (for finite-difference probes).
    pub fn param_mut(&mut self, mut idx: usize) -> Option<&mut f64> {
        self.generation += 1;
        for l in &mut self.layers {
            let nw = l.weight.as_slice().len();
            if idx < nw {
                return Some(&mut l.weight.as_mut_slice()[idx]);
            }
            idx -= nw;
            if idx < l.bias.len() {
                return Some(&mut l.bias[idx]);
            }
            idx -= l.bias.len();
        }
        None
    }
}

impl MlpGrads {
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend_from_slice(l.weight.as_slice());
            out.extend_from_slice(&l.bias);
        }
        out
    }
}

#[derive(Debug, Clone)]
enum NormCache {
    /// row norms of the pre-normalization output
    L2 { norms: Vec<f64>, out: DenseMatrix },
    /// per-column `1/√(var + ε²)`; statistics are treated as constants in backward
    BatchNorm { inv_std: Vec<f64> },
    None,
}

/// Everything backward needs from one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    generation: u64,
    /// input to each layer
    inputs: Vec<DenseMatrix>,
    /// pre-activation of each layer
    pre: Vec<DenseMatrix>,
    norm: NormCache,
}

fn affine(x: &DenseMatrix, layer: &Layer) -> Result<DenseMatrix> {
    let mut y = x.matmul_t(&layer.weight)?;
    for i in 0..y.rows() {
        y.row_mut(i).iter_mut().zip(&layer.bias).for_each(|(v, b)| *v += b);
    }
    Ok(y)
}

/// Encoder output before the normalization stage.
pub fn forward_raw(params: &MlpParams, batch: &DenseMatrix) -> Result<DenseMatrix> {
    Ok(forward_cached(params, batch)?.0)
}

fn forward_cached(params: &MlpParams, batch: &DenseMatrix) -> Result<(DenseMatrix, Vec<DenseMatrix>, Vec<DenseMatrix>)> {
    if batch.cols() != params.input_dim() {
        return Err(Error::dim(format!(
            "input width {} but network expects {}",
            batch.cols(),
            params.input_dim()
        )));
    }
    let depth = params.layers.len();
    let mut inputs = Vec::with_capacity(depth);
    let mut pre = Vec::with_capacity(depth);
    let mut x = batch.clone();
    for (i, layer) in params.layers.iter().enumerate() {
        let z = affine(&x, layer)?;
        inputs.push(x);
        x = if i + 1 < depth { z.map(|v| v.max(0.0)) } else { z.clone() };
        pre.push(z);
    }
    Ok((x, inputs, pre))
}

/// MLP followed by the normalization stage; the cache feeds [`backward`].
pub fn forward(params: &MlpParams, batch: &DenseMatrix, norm: NormMode) -> Result<(FeatureBatch, ForwardCache)> {
    let (z, inputs, pre) = forward_cached(params, batch)?;
    let (out, norm_cache) = match norm {
        NormMode::L2 => {
            let norms: Vec<f64> = z.row_iter().map(norm2).collect();
            let u = FeatureBatch::l2_normalized(z);
            let out = u.matrix().clone();
            (u, NormCache::L2 { norms, out })
        }
        NormMode::BatchNorm => {
            let v = crate::numerics::batch_norm_cols(&FeatureBatch::raw(z.clone()))?;
            let n = z.rows() as f64;
            let inv_std = (0..z.cols())
                .map(|k| {
                    let col = z.col(k);
                    let mean = col.iter().sum::<f64>() / n;
                    let var = col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
                    1.0 / (var + EPS_NORM * EPS_NORM).sqrt()
                })
                .collect();
            (v, NormCache::BatchNorm { inv_std })
        }
        NormMode::None => (FeatureBatch::raw(z), NormCache::None),
    };
    Ok((
        out,
        ForwardCache {
            generation: params.generation,
            inputs,
            pre,
            norm: norm_cache,
        },
    ))
}

/// Backpropagate `∂L/∂u` through the normalization stage and every layer.
pub fn backward(params: &MlpParams, cache: &ForwardCache, grad_u: &DenseMatrix) -> Result<MlpGrads> {
    if cache.generation != params.generation || cache.pre.len() != params.layers.len() {
        return Err(Error::param("cache", "stale: parameters changed since the forward pass"));
    }
    let n = cache.inputs[0].rows();
    if grad_u.shape() != (n, params.output_dim()) {
        return Err(Error::dim(format!(
            "output gradient is {:?}, expected ({n}, {})",
            grad_u.shape(),
            params.output_dim()
        )));
    }
    // (I − uuᵀ)/‖z‖ for ℓ₂; diagonal rescale for batch norm with frozen statistics
    let mut g = match &cache.norm {
        NormCache::L2 { norms, out } => {
            let mut g = grad_u.clone();
            for i in 0..n {
                let u = out.row(i);
                let along = dot(u, grad_u.row(i));
                let inv = 1.0 / norms[i].max(EPS_NORM);
                for (gk, uk) in g.row_mut(i).iter_mut().zip(u) {
                    *gk = (*gk - along * uk) * inv;
                }
            }
            g
        }
        NormCache::BatchNorm { inv_std } => DenseMatrix::from_fn(n, grad_u.cols(), |i, k| grad_u[(i, k)] * inv_std[k]),
        NormCache::None => grad_u.clone(),
    };

    let depth = params.layers.len();
    let mut grads: Vec<Layer> = Vec::with_capacity(depth);
    for l in (0..depth).rev() {
        if l + 1 < depth {
            let pre = &cache.pre[l];
            for (gv, &p) in g.as_mut_slice().iter_mut().zip(pre.as_slice()) {
                if p <= 0.0 {
                    *gv = 0.0;
                }
            }
        }
        let weight = g.t_matmul(&cache.inputs[l])?;
        let mut bias = vec![0.0; g.cols()];
        for row in g.row_iter() {
            bias.iter_mut().zip(row).for_each(|(b, v)| *b += v);
        }
        g = g.matmul(&params.layers[l].weight)?;
        grads.push(Layer { weight, bias });
    }
    grads.reverse();
    Ok(MlpGrads { layers: grads, input: g })
}
