//! Fully connected rectifier network with hand-written reverse accumulation.

use ndarray::{Array1, Array2, Axis};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{GofarError, Result};
use crate::mdp::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum OutputAct {
    Identity,
    Tanh,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// `out × in`
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

/// `in → hidden → … → out`, rectifiers between affine maps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Layer>,
    pub output: OutputAct,
    /// Inputs enter as `(x − shift) · scale`; gradients and penalties refer to
    /// the standardised input.
    pub shift: Array1<f64>,
    pub scale: Array1<f64>,
}

/// Activations kept from a forward pass; `inputs[l]` feeds layer `l`.
#[derive(Clone, Debug)]
pub struct Cache {
    pub inputs: Vec<Array2<f64>>,
    pub out: Array2<f64>,
}

impl Mlp {
    /// He-normal weights, zero biases.
    pub fn new(sizes: &[usize], output: OutputAct, rng: &mut Rng) -> Self {
        assert!(sizes.len() >= 2, "need input and output sizes");
        let layers = sizes
            .windows(2)
            .map(|io| {
                let std = (2.0 / io[0] as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("positive deviation");
                Layer {
                    w: Array2::from_shape_fn((io[1], io[0]), |_| normal.sample(rng)),
                    b: Array1::zeros(io[1]),
                }
            })
            .collect();
        Self { layers, output, shift: Array1::zeros(sizes[0]), scale: Array1::ones(sizes[0]) }
    }

    pub fn with_standardization(mut self, mean: &[f64], std: &[f64]) -> Self {
        assert_eq!(mean.len(), self.in_dim());
        assert_eq!(std.len(), self.in_dim());
        self.shift = Array1::from(mean.to_vec());
        self.scale = std.iter().map(|&s| if s > 1e-12 { 1.0 / s } else { 1.0 }).collect();
        self
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].w.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("nonempty").w.nrows()
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    /// Row-major weights then bias, layer by layer.
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for l in &self.layers {
            out.extend(l.w.iter());
            out.extend(l.b.iter());
        }
        out
    }

    pub fn set_flat(&mut self, p: &[f64]) {
        assert_eq!(p.len(), self.n_params(), "parameter count mismatch");
        let mut k = 0;
        for l in &mut self.layers {
            for x in l.w.iter_mut().chain(l.b.iter_mut()) {
                *x = p[k];
                k += 1;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.w.iter().chain(l.b.iter()).all(|x| x.is_finite()))
    }

    /// Hex digest of the exact parameter bits.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for x in self.flat() {
            h.update(x.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn check_input(&self, x: &Array2<f64>) -> Result<()> {
        if x.ncols() != self.in_dim() {
            return Err(GofarError::Shape(format!("input has {} columns, network expects {}", x.ncols(), self.in_dim())));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Array2<f64>) -> Result<Cache> {
        self.check_input(x)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut h = (x - &self.shift) * &self.scale;
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            let mut z = h.dot(&l.w.t());
            z += &l.b;
            inputs.push(h);
            if i < last {
                z.mapv_inplace(|v| v.max(0.0));
            } else if self.output == OutputAct::Tanh {
                z.mapv_inplace(f64::tanh);
            }
            h = z;
        }
        Ok(Cache { inputs, out: h })
    }

    pub fn predict(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        Ok(self.forward(x)?.out)
    }

    /// Parameter gradient (flat layout) and the gradient of `Σ dout ⊙ out`
    /// with respect to the standardised input.
    pub fn backward(&self, cache: &Cache, dout: &Array2<f64>) -> Result<(Vec<f64>, Array2<f64>)> {
        if dout.dim() != cache.out.dim() {
            return Err(GofarError::Shape(format!("upstream {:?} vs output {:?}", dout.dim(), cache.out.dim())));
        }
        let mut delta = match self.output {
            OutputAct::Identity => dout.clone(),
            OutputAct::Tanh => dout * &cache.out.mapv(|y| 1.0 - y * y),
        };
        let mut grads: Vec<(Array2<f64>, Array1<f64>)> = Vec::with_capacity(self.layers.len());
        for i in (0..self.layers.len()).rev() {
            let l = &self.layers[i];
            let input = &cache.inputs[i];
            grads.push((delta.t().dot(input), delta.sum_axis(Axis(0))));
            let mut back = delta.dot(&l.w);
            if i > 0 {
                back.zip_mut_with(input, |d, &h| {
                    if h <= 0.0 {
                        *d = 0.0
                    }
                });
            }
            delta = back;
        }
        grads.reverse();
        let mut flat = Vec::with_capacity(self.n_params());
        for (gw, gb) in grads {
            flat.extend(gw.iter());
            flat.extend(gb.iter());
        }
        Ok((flat, delta))
    }

    /// `mean_b ‖∂out_b/∂x_b‖²` for a scalar identity-output network, and its
    /// parameter gradient (rectifier masks are locally constant).
    pub fn input_grad_penalty(&self, cache: &Cache) -> Result<(f64, Vec<f64>)> {
        if self.out_dim() != 1 || self.output != OutputAct::Identity {
            return Err(GofarError::Shape("gradient penalty needs a scalar identity output".into()));
        }
        let n = self.layers.len();
        let batch = cache.out.nrows();
        let masks: Vec<Array2<f64>> =
            (1..n).map(|i| cache.inputs[i].mapv(|h| if h > 0.0 { 1.0 } else { 0.0 })).collect();
        // u[i] = ∂out/∂(input of layer i), v[i] = u[i] masked (i ≥ 1)
        let last = &self.layers[n - 1].w;
        let mut u: Vec<Array2<f64>> = vec![Array2::zeros((0, 0)); n];
        let mut v: Vec<Array2<f64>> = vec![Array2::zeros((0, 0)); n];
        u[n - 1] = Array2::from_shape_fn((batch, last.ncols()), |(_, j)| last[[0, j]]);
        for i in (1..n).rev() {
            v[i] = &u[i] * &masks[i - 1];
            u[i - 1] = v[i].dot(&self.layers[i - 1].w);
        }
        let penalty = u[0].iter().map(|x| x * x).sum::<f64>() / batch as f64;
        let mut gw: Vec<Array2<f64>> = self.layers.iter().map(|l| Array2::zeros(l.w.dim())).collect();
        let mut ubar = u[0].mapv(|x| 2.0 * x / batch as f64);
        for i in 1..n {
            gw[i - 1] = v[i].t().dot(&ubar);
            let vbar = ubar.dot(&self.layers[i - 1].w.t());
            ubar = vbar * &masks[i - 1];
        }
        gw[n - 1] = ubar.sum_axis(Axis(0)).insert_axis(Axis(0));
        let mut flat = Vec::with_capacity(self.n_params());
        for (g, l) in gw.iter().zip(&self.layers) {
            flat.extend(g.iter());
            flat.extend(std::iter::repeat_n(0.0, l.b.len()));
        }
        Ok((penalty, flat))
    }
}

/// Rows of `xs` concatenated column-wise.
pub fn concat_cols(parts: &[&Array2<f64>]) -> Array2<f64> {
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    ndarray::concatenate(Axis(1), &views).expect("row counts agree")
}
