//! Time/step conditioning: sinusoidal features of a scalar, a small MLP embedding, and
//! the zero-initialized per-block modulation head (adaLN-zero style).

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// Sinusoidal feature map `[cos(τω₁), sin(τω₁), ..., cos(τω_K), sin(τω_K)]`, `K = width/2`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FourierSpec {
    pub width: usize,
    pub max_period: f64,
}

impl Default for FourierSpec {
    fn default() -> Self {
        Self { width: 256, max_period: 10_000.0 }
    }
}

impl FourierSpec {
    pub fn new(width: usize, max_period: f64) -> Result<Self> {
        let spec = Self { width, max_period };
        spec.check()?;
        Ok(spec)
    }

    pub fn check(&self) -> Result<()> {
        if self.width == 0 || !self.width.is_multiple_of(2) {
            return Err(Error::Config(format!("fourier width {} must be even and positive", self.width)));
        }
        if !(self.max_period > 1.0) {
            return Err(Error::Config(format!("max period {} must exceed 1", self.max_period)));
        }
        Ok(())
    }

    /// `ω_k = exp(-(k-1)/(width/2) · ln max_period)` for `k = 1..width/2`.
    pub fn frequencies(&self) -> Vec<f64> {
        let half = self.width / 2;
        let ln_period = self.max_period.ln();
        (0..half).map(|k| (-(k as f64) / half as f64 * ln_period).exp()).collect()
    }

    /// Interleaved cosine/sine pairs. `tau` is not clamped.
    pub fn features(&self, tau: f64) -> Vec<f64> {
        self.frequencies()
            .into_iter()
            .flat_map(|w| [(tau * w).cos(), (tau * w).sin()])
            .collect()
    }
}

pub(crate) fn normal_tensor<T: Scalar, R: Rng + ?Sized>(
    shape: &[usize],
    std: f64,
    rng: &mut R,
) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("finite positive std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::of(dist.sample(rng))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches element count")
}

/// `φ(τ) = W₂ · silu(W₁ · fourier(τ) + b₁) + b₂`, mapping a scalar to a `d`-vector.
#[derive(Clone, Debug)]
pub struct ScalarEmbedder {
    pub fourier: FourierSpec,
    pub fc1_weight: ParamId,
    pub fc1_bias: ParamId,
    pub fc2_weight: ParamId,
    pub fc2_bias: ParamId,
    dim: usize,
}

impl ScalarEmbedder {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        fourier: FourierSpec,
        dim: usize,
        init_std: f64,
        rng: &mut R,
    ) -> Self {
        let fc1_weight =
            store.add(format!("{prefix}.fc1.weight"), normal_tensor(&[fourier.width, dim], init_std, rng));
        let fc1_bias = store.add(format!("{prefix}.fc1.bias"), Tensor::zeros([dim]));
        let fc2_weight = store.add(format!("{prefix}.fc2.weight"), normal_tensor(&[dim, dim], init_std, rng));
        let fc2_bias = store.add(format!("{prefix}.fc2.bias"), Tensor::zeros([dim]));
        Self { fourier, fc1_weight, fc1_bias, fc2_weight, fc2_bias, dim }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Embeds each scalar of `taus`, returning `[taus.len(), d]`.
    pub fn embed<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, taus: &[f64]) -> Result<Var> {
        let feats: Vec<f64> = taus.iter().flat_map(|&t| self.fourier.features(t)).collect();
        let x = g.constant(Tensor::from_f64([taus.len(), self.fourier.width], &feats)?);
        let (w1, b1) = (g.param(store, self.fc1_weight), g.param(store, self.fc1_bias));
        let (w2, b2) = (g.param(store, self.fc2_weight), g.param(store, self.fc2_bias));
        let h = g.linear(x, w1, Some(b1))?;
        let h = g.silu(h);
        g.linear(h, w2, Some(b2))
    }
}

/// `c = φ_time(t) + φ_step(Δ)` as a `[1, d]` row shared by the whole batch.
pub fn conditioning_signal<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    t: f64,
    delta: f64,
    time_emb: &ScalarEmbedder,
    step_emb: &ScalarEmbedder,
) -> Result<Var> {
    let et = time_emb.embed(g, store, &[t])?;
    let ed = step_emb.embed(g, store, &[delta])?;
    g.add(et, ed)
}

/// Per-block modulation: `silu` then an affine map `d -> 4d`, zero at initialization.
#[derive(Clone, Debug)]
pub struct ModulationHead {
    pub weight: ParamId,
    pub bias: ParamId,
    dim: usize,
}

/// Residual gates and norm scales for one block, each `[B, d]`.
#[derive(Clone, Copy, Debug)]
pub struct ModulationParams {
    pub gate_msa: Var,
    pub gate_mlp: Var,
    pub scale_msa: Var,
    pub scale_mlp: Var,
}

impl ModulationHead {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, dim: usize) -> Self {
        let weight = store.add(format!("{prefix}.weight"), Tensor::zeros([dim, 4 * dim]));
        let bias = store.add(format!("{prefix}.bias"), Tensor::zeros([4 * dim]));
        Self { weight, bias, dim }
    }

    /// Splits the head output into `(gate_msa, gate_mlp, scale_msa, scale_mlp)` in that order.
    pub fn modulate<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, c: Var) -> Result<ModulationParams> {
        if g.value(c).last_dim() != self.dim {
            return Err(Error::Shape(format!(
                "conditioning signal {:?} does not match head width {}",
                g.shape(c),
                self.dim
            )));
        }
        let (w, b) = (g.param(store, self.weight), g.param(store, self.bias));
        let act = g.silu(c);
        let out = g.linear(act, w, Some(b))?;
        let d = self.dim;
        Ok(ModulationParams {
            gate_msa: g.narrow_lastdim(out, 0, d)?,
            gate_mlp: g.narrow_lastdim(out, d, d)?,
            scale_msa: g.narrow_lastdim(out, 2 * d, d)?,
            scale_mlp: g.narrow_lastdim(out, 3 * d, d)?,
        })
    }
}
