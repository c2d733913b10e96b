//! The gaussian feature field: a Fourier positional encoding of the (bbox-
//! normalized) splat position concatenated with the splat color, fed through
//! a 3-layer perceptron that emits the low-dimensional semantic feature of
//! each splat. Forward is embarrassingly parallel over splats; backward
//! reduces per-block parameter gradients in a fixed order so results do not
//! depend on thread count.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::math::Real;
use crate::rng::{stream_rng, Stream};
use crate::scene::SceneModel;
use rand::Rng;

/// Fourier positional encoding with frequencies 2^0 .. 2^(n_freq-1) (times
/// pi), applied per axis after the caller has normalized positions to
/// [-1, 1]^3. Raw coordinates are kept alongside the sin/cos terms, so the
/// output length is 3 + 6 * n_freq.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FourierEncoder {
    pub n_freq: usize,
}

impl FourierEncoder {
    pub fn output_dim(&self) -> usize {
        3 + 6 * self.n_freq
    }

    /// Appends [p, sin(2^0 pi p), cos(2^0 pi p), ..., sin(2^(F-1) pi p),
    /// cos(2^(F-1) pi p)] to `out`, each term covering all three axes.
    pub fn encode<T: Real>(&self, p: [T; 3], out: &mut Vec<T>) {
        out.extend_from_slice(&p);
        let mut freq = T::of(std::f64::consts::PI);
        for _ in 0..self.n_freq {
            for a in 0..3 {
                out.push((p[a] * freq).sin());
            }
            for a in 0..3 {
                out.push((p[a] * freq).cos());
            }
            freq = freq + freq;
        }
    }
}

/// Axis-aligned normalization box mapping scene positions into [-1, 1]^3.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneBounds {
    pub lo: [f32; 3],
    pub hi: [f32; 3],
}

impl SceneBounds {
    pub fn of_scene(scene: &SceneModel) -> SceneBounds {
        let (lo, hi) = scene.bounds();
        SceneBounds { lo, hi }
    }

    pub fn normalize(&self, p: [f32; 3]) -> [f32; 3] {
        let mut out = [0.0f32; 3];
        for a in 0..3 {
            let extent = self.hi[a] - self.lo[a];
            out[a] = if extent < 1e-6 {
                0.0
            } else {
                2.0 * (p[a] - self.lo[a]) / extent - 1.0
            };
        }
        out
    }
}

/// One affine layer, weights row-major out_dim x in_dim.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    pub w: Vec<T>,
    pub b: Vec<T>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl<T: Real> Dense<T> {
    fn zeros(in_dim: usize, out_dim: usize) -> Dense<T> {
        Dense {
            w: vec![T::zero(); in_dim * out_dim],
            b: vec![T::zero(); out_dim],
            in_dim,
            out_dim,
        }
    }

    pub(crate) fn apply(&self, x: &[T], out: &mut [T]) {
        for (o, (row, &b)) in out
            .iter_mut()
            .zip(self.w.chunks_exact(self.in_dim).zip(&self.b))
        {
            let mut acc = b;
            for (&wv, &xv) in row.iter().zip(x) {
                acc = acc + wv * xv;
            }
            *o = acc;
        }
    }
}

/// Three affine layers with ReLU between them (linear output).
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T> {
    pub layers: Vec<Dense<T>>,
}

impl<T: Real> Mlp<T> {
    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim
    }

    pub fn zeros_like(&self) -> Mlp<T> {
        Mlp {
            layers: self
                .layers
                .iter()
                .map(|l| Dense::zeros(l.in_dim, l.out_dim))
                .collect(),
        }
    }

    pub fn accumulate(&mut self, other: &Mlp<T>) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, &y) in a.w.iter_mut().zip(&b.w) {
                *x = *x + y;
            }
            for (x, &y) in a.b.iter_mut().zip(&b.b) {
                *x = *x + y;
            }
        }
    }

    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend_from_slice(&l.w);
            out.extend_from_slice(&l.b);
        }
        out
    }

    pub fn load_flat(&mut self, flat: &[T]) -> Result<()> {
        let total: usize = self.layers.iter().map(|l| l.w.len() + l.b.len()).sum();
        if flat.len() != total {
            return Err(Error::validation(format!(
                "expected {total} mlp parameters, got {}",
                flat.len()
            )));
        }
        let mut off = 0;
        for l in &mut self.layers {
            let (wn, bn) = (l.w.len(), l.b.len());
            l.w.copy_from_slice(&flat[off..off + wn]);
            off += wn;
            l.b.copy_from_slice(&flat[off..off + bn]);
            off += bn;
        }
        Ok(())
    }
}

/// Xavier-uniform initialization: weights ~ U(-a, a) with
/// a = sqrt(6 / (fan_in + fan_out)), biases zero. Deterministic per seed.
pub fn init_mlp<T: Real>(seed: u64, dims: &[usize]) -> Mlp<T> {
    assert!(dims.len() >= 2, "need at least one layer");
    let mut rng = stream_rng(seed, Stream::MlpInit);
    let mut layers = Vec::with_capacity(dims.len() - 1);
    for win in dims.windows(2) {
        let (fan_in, fan_out) = (win[0], win[1]);
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w = (0..fan_in * fan_out)
            .map(|_| T::of(a * (2.0 * rng.gen::<f64>() - 1.0)))
            .collect();
        layers.push(Dense {
            w,
            b: vec![T::zero(); fan_out],
            in_dim: fan_in,
            out_dim: fan_out,
        });
    }
    Mlp { layers }
}

/// Activations retained for the backward pass.
#[derive(Debug, Clone)]
pub struct FieldCache<T> {
    pub n: usize,
    /// n x in_dim inputs (encoded position followed by color).
    pub inputs: Vec<T>,
    /// Post-ReLU hidden activations per layer boundary.
    pub hidden: Vec<Vec<T>>,
}

/// Evaluate the MLP on pre-assembled inputs (n x in_dim). Returns the
/// n x out_dim features and the activation cache. Rows are processed in
/// parallel blocks; each row's result is independent of the block layout.
pub fn mlp_forward<T: Real>(mlp: &Mlp<T>, inputs: Vec<T>) -> (Vec<T>, FieldCache<T>) {
    let in_dim = mlp.in_dim();
    assert_eq!(inputs.len() % in_dim, 0);
    let n = inputs.len() / in_dim;
    let n_hidden = mlp.layers.len() - 1;
    let out_dim = mlp.out_dim();

    const BLOCK: usize = 256;
    let blocks: Vec<(usize, usize)> = (0..n.max(1))
        .step_by(BLOCK)
        .map(|s| (s, (s + BLOCK).min(n)))
        .collect();

    struct BlockOut<T> {
        hidden: Vec<Vec<T>>,
        output: Vec<T>,
    }

    let results: Vec<BlockOut<T>> = blocks
        .par_iter()
        .map(|&(lo, hi)| {
            let rows = hi - lo;
            let mut hidden: Vec<Vec<T>> = mlp.layers[..n_hidden]
                .iter()
                .map(|l| vec![T::zero(); rows * l.out_dim])
                .collect();
            let mut output = vec![T::zero(); rows * out_dim];
            for j in 0..rows {
                let i = lo + j;
                for li in 0..n_hidden {
                    let layer = &mlp.layers[li];
                    let (head, tail) = hidden.split_at_mut(li);
                    let dst = &mut tail[0][j * layer.out_dim..(j + 1) * layer.out_dim];
                    let src: &[T] = if li == 0 {
                        &inputs[i * in_dim..(i + 1) * in_dim]
                    } else {
                        &head[li - 1][j * layer.in_dim..(j + 1) * layer.in_dim]
                    };
                    layer.apply(src, dst);
                    for v in dst.iter_mut() {
                        if *v < T::zero() {
                            *v = T::zero();
                        }
                    }
                }
                let last = &mlp.layers[n_hidden];
                let src: &[T] = if n_hidden == 0 {
                    &inputs[i * in_dim..(i + 1) * in_dim]
                } else {
                    &hidden[n_hidden - 1][j * last.in_dim..(j + 1) * last.in_dim]
                };
                last.apply(src, &mut output[j * out_dim..(j + 1) * out_dim]);
            }
            BlockOut { hidden, output }
        })
        .collect();

    let mut hidden: Vec<Vec<T>> = mlp.layers[..n_hidden]
        .iter()
        .map(|l| Vec::with_capacity(n * l.out_dim))
        .collect();
    let mut output = Vec::with_capacity(n * out_dim);
    for blk in results {
        for (acc, part) in hidden.iter_mut().zip(blk.hidden) {
            acc.extend(part);
        }
        output.extend(blk.output);
    }

    (output, FieldCache { n, inputs, hidden })
}

/// Exact adjoint of [`mlp_forward`]: accumulates parameter gradients across
/// all rows (in fixed block order) and optionally returns per-row input
/// gradients.
pub fn mlp_backward<T: Real>(
    mlp: &Mlp<T>,
    cache: &FieldCache<T>,
    grad_out: &[T],
    want_input_grads: bool,
) -> Result<(Mlp<T>, Option<Vec<T>>)> {
    let out_dim = mlp.out_dim();
    let in_dim = mlp.in_dim();
    if grad_out.len() != cache.n * out_dim {
        return Err(Error::validation("grad_out has wrong shape for cache"));
    }
    let n_hidden = mlp.layers.len() - 1;

    const BLOCK: usize = 256;
    let blocks: Vec<(usize, usize)> = (0..cache.n)
        .step_by(BLOCK)
        .map(|s| (s, (s + BLOCK).min(cache.n)))
        .collect();

    struct BlockResult<T> {
        grads: Mlp<T>,
        input_grads: Option<Vec<T>>,
    }

    let results: Vec<BlockResult<T>> = blocks
        .par_iter()
        .map(|&(lo, hi)| {
            let mut grads = mlp.zeros_like();
            let mut input_grads =
                want_input_grads.then(|| vec![T::zero(); (hi - lo) * in_dim]);
            let mut dbuf: Vec<Vec<T>> = mlp.layers.iter().map(|l| vec![T::zero(); l.out_dim]).collect();
            for i in lo..hi {
                // Output layer delta.
                dbuf[n_hidden].copy_from_slice(&grad_out[i * out_dim..(i + 1) * out_dim]);
                // Walk layers backwards.
                for li in (0..mlp.layers.len()).rev() {
                    let layer = &mlp.layers[li];
                    let x: &[T] = if li == 0 {
                        &cache.inputs[i * in_dim..(i + 1) * in_dim]
                    } else {
                        let h = &cache.hidden[li - 1];
                        &h[i * layer.in_dim..(i + 1) * layer.in_dim]
                    };
                    let (head, tail) = dbuf.split_at_mut(li);
                    let delta: &[T] = &tail[0];
                    let g = &mut grads.layers[li];
                    for (r, &dv) in delta.iter().enumerate() {
                        g.b[r] = g.b[r] + dv;
                        let row = &mut g.w[r * layer.in_dim..(r + 1) * layer.in_dim];
                        for (gw, &xv) in row.iter_mut().zip(x) {
                            *gw = *gw + dv * xv;
                        }
                    }
                    if li > 0 {
                        // Propagate delta through W^T and the ReLU mask.
                        let prev = &mut head[li - 1];
                        for v in prev.iter_mut() {
                            *v = T::zero();
                        }
                        for (r, &dv) in delta.iter().enumerate() {
                            let row = &layer.w[r * layer.in_dim..(r + 1) * layer.in_dim];
                            for (p, &wv) in prev.iter_mut().zip(row) {
                                *p = *p + dv * wv;
                            }
                        }
                        for (p, &hx) in prev.iter_mut().zip(x) {
                            if hx <= T::zero() {
                                *p = T::zero();
                            }
                        }
                    } else if let Some(ig) = input_grads.as_mut() {
                        let row = &mut ig[(i - lo) * in_dim..(i - lo + 1) * in_dim];
                        for (r, &dv) in delta.iter().enumerate() {
                            let wrow = &layer.w[r * layer.in_dim..(r + 1) * layer.in_dim];
                            for (o, &wv) in row.iter_mut().zip(wrow) {
                                *o = *o + dv * wv;
                            }
                        }
                    }
                }
            }
            BlockResult { grads, input_grads }
        })
        .collect();

    let mut grads = mlp.zeros_like();
    let mut input_grads = want_input_grads.then(|| Vec::with_capacity(cache.n * in_dim));
    for r in results {
        grads.accumulate(&r.grads);
        if let (Some(all), Some(blk)) = (input_grads.as_mut(), r.input_grads) {
            all.extend(blk);
        }
    }
    Ok((grads, input_grads))
}

/// The full feature field: encoder, normalization box, and MLP.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureField {
    pub encoder: FourierEncoder,
    pub bounds: SceneBounds,
    pub mlp: Mlp<f32>,
}

impl FeatureField {
    pub fn new(seed: u64, n_freq: usize, hidden: usize, d: usize, bounds: SceneBounds) -> FeatureField {
        let encoder = FourierEncoder { n_freq };
        let in_dim = encoder.output_dim() + 3;
        FeatureField {
            encoder,
            bounds,
            mlp: init_mlp(seed, &[in_dim, hidden, hidden, d]),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.mlp.out_dim()
    }

    /// Assemble the n x in_dim input matrix for a list of splats.
    pub fn assemble_inputs(&self, splats: &[crate::scene::GaussianSplat]) -> Vec<f32> {
        let in_dim = self.mlp.in_dim();
        let mut inputs = Vec::with_capacity(splats.len() * in_dim);
        for s in splats {
            self.encoder.encode(self.bounds.normalize(s.mu), &mut inputs);
            inputs.extend_from_slice(&s.color);
        }
        inputs
    }

    /// Per-splat LD features m_i = MLP([phi(norm(mu_i)); c_i]).
    pub fn forward(&self, splats: &[crate::scene::GaussianSplat]) -> (Vec<f32>, FieldCache<f32>) {
        mlp_forward(&self.mlp, self.assemble_inputs(splats))
    }

    /// Parameter gradients for upstream per-splat feature gradients; also
    /// returns per-splat color gradients when `want_color_grads` is set
    /// (the last three input dimensions).
    pub fn backward(
        &self,
        cache: &FieldCache<f32>,
        grad_features: &[f32],
        want_color_grads: bool,
    ) -> Result<(Mlp<f32>, Option<Vec<f32>>)> {
        let (grads, input_grads) = mlp_backward(&self.mlp, cache, grad_features, want_color_grads)?;
        let color_grads = input_grads.map(|ig| {
            let in_dim = self.mlp.in_dim();
            let mut out = Vec::with_capacity(cache.n * 3);
            for i in 0..cache.n {
                out.extend_from_slice(&ig[i * in_dim + in_dim - 3..(i + 1) * in_dim]);
            }
            out
        });
        Ok((grads, color_grads))
    }
}
