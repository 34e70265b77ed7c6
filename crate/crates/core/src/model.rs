//! The looped decoder: embeddings, a `k`-block stack shared across loops, and the LM head.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::conditioning::{
    conditioning_signal, normal_tensor, FourierSpec, ModulationHead, ModulationParams, ScalarEmbedder,
};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};
use crate::trajectory::Trajectory;

/// How each loop iteration is conditioned.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Conditioned on `(t_{i-1}, Δ_i)` of the trajectory.
    #[serde(rename = "loopformer")]
    LoopFormer,
    /// Conditioned on the loop index only.
    Tmlt,
    /// Shared stack, no conditioning.
    BaseLoop,
    /// `k·L` unshared blocks applied once.
    Base,
}

impl Variant {
    pub fn name(&self) -> &'static str {
        match self {
            Variant::LoopFormer => "loopformer",
            Variant::Tmlt => "tmlt",
            Variant::BaseLoop => "base_loop",
            Variant::Base => "base",
        }
    }

    pub fn is_looped(&self) -> bool {
        !matches!(self, Variant::Base)
    }

    pub fn is_modulated(&self) -> bool {
        matches!(self, Variant::LoopFormer | Variant::Tmlt)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "loopformer" => Ok(Variant::LoopFormer),
            "tmlt" => Ok(Variant::Tmlt),
            "base_loop" => Ok(Variant::BaseLoop),
            "base" => Ok(Variant::Base),
            other => Err(Error::Config(format!("unknown variant {other:?}"))),
        }
    }
}

/// Time input the loop-index baseline feeds its time embedder.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoopIndexMode {
    /// `i / L` for zero-based loop index `i`.
    #[default]
    Normalized,
    /// The raw zero-based index `i`.
    Raw,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub context_length: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub blocks_per_loop: usize,
    pub max_loops: usize,
    pub fourier_width: usize,
    pub max_period: f64,
    pub rmsnorm_eps: f64,
    pub weight_tying: bool,
    pub variant: Variant,
    pub tmlt_index: LoopIndexMode,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// Laptop-sized defaults: `(2 ⊗ 4)`, `d = 128`, byte-level vocabulary.
    pub fn desk() -> Self {
        Self {
            vocab_size: 256,
            context_length: 256,
            d_model: 128,
            n_heads: 4,
            d_ff: 320,
            blocks_per_loop: 2,
            max_loops: 4,
            fourier_width: 256,
            max_period: 10_000.0,
            rmsnorm_eps: 1e-5,
            weight_tying: true,
            variant: Variant::LoopFormer,
            tmlt_index: LoopIndexMode::Normalized,
            init_std: 0.02,
        }
    }

    /// The ~1B-parameter setting: `d = 2048`, 32 heads, `d_ff = 5120`, `(3 ⊗ 8)`.
    pub fn large_1b() -> Self {
        Self {
            vocab_size: 50_304,
            context_length: 1024,
            d_model: 2048,
            n_heads: 32,
            d_ff: 5120,
            blocks_per_loop: 3,
            max_loops: 8,
            ..Self::desk()
        }
    }

    pub fn fourier(&self) -> FourierSpec {
        FourierSpec { width: self.fourier_width, max_period: self.max_period }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("context_length", self.context_length),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("blocks_per_loop", self.blocks_per_loop),
            ("max_loops", self.max_loops),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(self.rmsnorm_eps > 0.0) {
            return Err(Error::Config("rmsnorm_eps must be positive".into()));
        }
        if !(self.init_std > 0.0) {
            return Err(Error::Config("init_std must be positive".into()));
        }
        self.fourier().check()
    }

    /// Number of blocks that hold distinct parameters.
    pub fn distinct_blocks(&self) -> usize {
        match self.variant {
            Variant::Base => self.blocks_per_loop * self.max_loops,
            _ => self.blocks_per_loop,
        }
    }

    /// Largest budget a forward pass accepts.
    pub fn max_budget(&self) -> usize {
        if self.variant.is_looped() {
            self.max_loops
        } else {
            1
        }
    }
}

/// Parameters of one pre-norm block. `modulation` is absent for unconditioned variants.
#[derive(Clone, Debug)]
pub struct BlockParams {
    pub qkv_weight: ParamId,
    pub qkv_bias: ParamId,
    pub attn_proj_weight: ParamId,
    pub attn_proj_bias: ParamId,
    pub fc_weight: ParamId,
    pub fc_bias: ParamId,
    pub mlp_proj_weight: ParamId,
    pub mlp_proj_bias: ParamId,
    pub modulation: Option<ModulationHead>,
}

/// Position of one loop iteration inside a trajectory.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LoopStep {
    /// Zero-based loop index.
    pub index: usize,
    /// Start time `t_{i-1}`.
    pub t: f64,
    /// Step size `Δ_i`.
    pub delta: f64,
}

pub struct ForwardOutput {
    /// `h^(0)..h^(M)`, or only `h^(M)` when hiddens were not retained.
    pub hiddens: Vec<Var>,
    pub logits: Var,
}

/// Token ids of a `[batch, seq_len]` batch in row-major order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenBatch {
    pub ids: Vec<usize>,
    pub batch: usize,
    pub seq_len: usize,
}

impl TokenBatch {
    pub fn new(ids: Vec<usize>, batch: usize, seq_len: usize) -> Result<Self> {
        if ids.len() != batch * seq_len || batch == 0 || seq_len == 0 {
            return Err(Error::Shape(format!("{} ids for a [{batch}, {seq_len}] batch", ids.len())));
        }
        Ok(Self { ids, batch, seq_len })
    }

    pub fn single(ids: Vec<usize>) -> Result<Self> {
        let n = ids.len();
        Self::new(ids, 1, n)
    }
}

/// A looped decoder with its parameters.
#[derive(Clone, Debug)]
pub struct LoopedModel<T: Scalar = f32> {
    config: ModelConfig,
    pub params: ParamStore<T>,
    tok_emb: ParamId,
    pos_emb: ParamId,
    head: ParamId,
    time_emb: Option<ScalarEmbedder>,
    step_emb: Option<ScalarEmbedder>,
    blocks: Vec<BlockParams>,
}

impl LoopedModel<f32> {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::init_with(config, seed)
    }
}

impl<T: Scalar> LoopedModel<T> {
    /// Deterministic initialization from `seed`. Modulation heads start at exactly zero.
    pub fn init_with(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let (d, std) = (config.d_model, config.init_std);
        let residual_std = std / ((2 * config.blocks_per_loop * config.max_loops) as f64).sqrt();

        let tok_emb = params.add("tok_emb", normal_tensor(&[config.vocab_size, d], std, &mut rng));
        let pos_emb = params.add("pos_emb", normal_tensor(&[config.context_length, d], std, &mut rng));
        let head = if config.weight_tying {
            tok_emb
        } else {
            params.add("head.weight", normal_tensor(&[d, config.vocab_size], std, &mut rng))
        };
        let fourier = config.fourier();
        let time_emb = config
            .variant
            .is_modulated()
            .then(|| ScalarEmbedder::new(&mut params, "time_emb", fourier, d, std, &mut rng));
        let step_emb = (config.variant == Variant::LoopFormer)
            .then(|| ScalarEmbedder::new(&mut params, "step_emb", fourier, d, std, &mut rng));

        let blocks = (0..config.distinct_blocks())
            .map(|i| {
                let p = format!("blocks.{i}");
                let mut add = |name: &str, t: Tensor<T>| params.add(format!("{p}.{name}"), t);
                let qkv_weight = add("attn.qkv.weight", normal_tensor(&[d, 3 * d], std, &mut rng));
                let qkv_bias = add("attn.qkv.bias", Tensor::zeros([3 * d]));
                let attn_proj_weight = add("attn.proj.weight", normal_tensor(&[d, d], residual_std, &mut rng));
                let attn_proj_bias = add("attn.proj.bias", Tensor::zeros([d]));
                let fc_weight = add("mlp.fc.weight", normal_tensor(&[d, config.d_ff], std, &mut rng));
                let fc_bias = add("mlp.fc.bias", Tensor::zeros([config.d_ff]));
                let mlp_proj_weight =
                    add("mlp.proj.weight", normal_tensor(&[config.d_ff, d], residual_std, &mut rng));
                let mlp_proj_bias = add("mlp.proj.bias", Tensor::zeros([d]));
                let modulation = config
                    .variant
                    .is_modulated()
                    .then(|| ModulationHead::new(&mut params, &format!("{p}.modulation"), d));
                BlockParams {
                    qkv_weight,
                    qkv_bias,
                    attn_proj_weight,
                    attn_proj_bias,
                    fc_weight,
                    fc_bias,
                    mlp_proj_weight,
                    mlp_proj_bias,
                    modulation,
                }
            })
            .collect();

        Ok(Self { config, params, tok_emb, pos_emb, head, time_emb, step_emb, blocks })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn blocks(&self) -> &[BlockParams] {
        &self.blocks
    }

    pub fn time_embedder(&self) -> Option<&ScalarEmbedder> {
        self.time_emb.as_ref()
    }

    pub fn step_embedder(&self) -> Option<&ScalarEmbedder> {
        self.step_emb.as_ref()
    }

    pub fn token_embedding(&self) -> ParamId {
        self.tok_emb
    }

    pub fn head_weight(&self) -> ParamId {
        self.head
    }

    pub fn num_params(&self) -> usize {
        self.params.num_elements()
    }

    /// Scalars belonging to the time/step embedders and the modulation heads.
    pub fn conditioning_param_count(&self) -> usize {
        self.params
            .iter()
            .filter(|(_, p)| {
                p.name.starts_with("time_emb.") || p.name.starts_with("step_emb.") || p.name.contains(".modulation.")
            })
            .map(|(_, p)| p.value.numel())
            .sum()
    }

    /// Same architecture and values in another element type.
    pub fn cast<U: Scalar>(&self) -> LoopedModel<U> {
        LoopedModel {
            config: self.config.clone(),
            params: self.params.cast(),
            tok_emb: self.tok_emb,
            pos_emb: self.pos_emb,
            head: self.head,
            time_emb: self.time_emb.clone(),
            step_emb: self.step_emb.clone(),
            blocks: self.blocks.clone(),
        }
    }

    /// `h^(0) = E_tok(X) + E_pos[0..T]`.
    pub fn embed(&self, g: &mut Graph<T>, tokens: &TokenBatch) -> Result<Var> {
        if tokens.seq_len > self.config.context_length {
            return Err(Error::Shape(format!(
                "sequence of {} tokens exceeds context length {}",
                tokens.seq_len, self.config.context_length
            )));
        }
        let table = g.param(&self.params, self.tok_emb);
        let tok = g.gather_rows(table, &tokens.ids, &[tokens.batch, tokens.seq_len])?;
        let pos_table = g.param(&self.params, self.pos_emb);
        let positions: Vec<usize> = (0..tokens.seq_len).collect();
        let pos = g.gather_rows(pos_table, &positions, &[tokens.seq_len])?;
        g.add(tok, pos)
    }

    /// One pre-norm block with optional gated, scaled residual branches.
    pub fn block_forward(
        &self,
        g: &mut Graph<T>,
        block: &BlockParams,
        x: Var,
        modulation: Option<&ModulationParams>,
    ) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 3 || shape[2] != self.config.d_model {
            return Err(Error::Shape(format!("block input {:?} is not [B, T, {}]", shape, self.config.d_model)));
        }
        let p = &self.params;
        let eps = self.config.rmsnorm_eps;
        // Modulation rows are [B', d] with B' = 1 or B; view them as [B', 1, d].
        let broadcast = |g: &mut Graph<T>, v: Var| -> Result<Var> {
            let rows = g.shape(v)[0];
            g.reshape(v, &[rows, 1, shape[2]])
        };

        let mut h = g.rmsnorm(x, eps)?;
        if let Some(m) = modulation {
            let s = broadcast(g, m.scale_msa)?;
            let s = g.add_scalar(s, 1.0);
            h = g.mul(h, s)?;
        }
        let (w, b) = (g.param(p, block.qkv_weight), g.param(p, block.qkv_bias));
        let qkv = g.linear(h, w, Some(b))?;
        let attn = g.causal_attention(qkv, self.config.n_heads)?;
        let (w, b) = (g.param(p, block.attn_proj_weight), g.param(p, block.attn_proj_bias));
        let mut attn = g.linear(attn, w, Some(b))?;
        if let Some(m) = modulation {
            let gate = broadcast(g, m.gate_msa)?;
            attn = g.mul(attn, gate)?;
        }
        let x = g.add(x, attn)?;

        let mut h = g.rmsnorm(x, eps)?;
        if let Some(m) = modulation {
            let s = broadcast(g, m.scale_mlp)?;
            let s = g.add_scalar(s, 1.0);
            h = g.mul(h, s)?;
        }
        let (w, b) = (g.param(p, block.fc_weight), g.param(p, block.fc_bias));
        let h = g.linear(h, w, Some(b))?;
        let h = g.gelu(h);
        let (w, b) = (g.param(p, block.mlp_proj_weight), g.param(p, block.mlp_proj_bias));
        let mut mlp = g.linear(h, w, Some(b))?;
        if let Some(m) = modulation {
            let gate = broadcast(g, m.gate_mlp)?;
            mlp = g.mul(mlp, gate)?;
        }
        g.add(x, mlp)
    }

    /// Conditioning vector `c` for one loop, or `None` for unconditioned variants.
    pub fn loop_condition(&self, g: &mut Graph<T>, step: LoopStep) -> Result<Option<Var>> {
        match self.config.variant {
            Variant::LoopFormer => {
                let (te, se) = (self.time_emb.as_ref().unwrap(), self.step_emb.as_ref().unwrap());
                conditioning_signal(g, &self.params, step.t, step.delta, te, se).map(Some)
            }
            Variant::Tmlt => {
                let tau = match self.config.tmlt_index {
                    LoopIndexMode::Normalized => step.index as f64 / self.config.max_loops as f64,
                    LoopIndexMode::Raw => step.index as f64,
                };
                self.time_emb.as_ref().unwrap().embed(g, &self.params, &[tau]).map(Some)
            }
            Variant::BaseLoop | Variant::Base => Ok(None),
        }
    }

    /// `Φ_k(h; t, Δ)`: the conditioning is computed once and read by every block's head.
    pub fn stack_forward(&self, g: &mut Graph<T>, h: Var, step: LoopStep) -> Result<Var> {
        let c = self.loop_condition(g, step)?;
        self.apply_blocks(g, h, &self.blocks, c)
    }

    fn apply_blocks(&self, g: &mut Graph<T>, mut h: Var, blocks: &[BlockParams], c: Option<Var>) -> Result<Var> {
        for block in blocks {
            let m = match (&block.modulation, c) {
                (Some(head), Some(c)) => Some(head.modulate(g, &self.params, c)?),
                _ => None,
            };
            h = self.block_forward(g, block, h, m.as_ref())?;
        }
        Ok(h)
    }

    pub fn check_budget(&self, trajectory: &Trajectory) -> Result<()> {
        let m = trajectory.budget();
        let max = self.config.max_budget();
        if m > max {
            return Err(Error::Budget(format!(
                "budget {m} exceeds the {} variant's maximum of {max}",
                self.config.variant
            )));
        }
        Ok(())
    }

    /// Applies the trajectory's loops to `h0`. Returns `h^(0)..h^(M)`, or just `h^(M)`
    /// when `retain_hiddens` is false.
    pub fn run_loops(&self, g: &mut Graph<T>, h0: Var, trajectory: &Trajectory, retain_hiddens: bool) -> Result<Vec<Var>> {
        self.check_budget(trajectory)?;
        if self.config.variant == Variant::Base {
            let h = self.apply_blocks(g, h0, &self.blocks, None)?;
            return Ok(if retain_hiddens { vec![h0, h] } else { vec![h] });
        }
        let mut hiddens = vec![h0];
        let mut h = h0;
        for (index, (t, delta)) in trajectory.loop_inputs().enumerate() {
            h = self.stack_forward(g, h, LoopStep { index, t, delta })?;
            if retain_hiddens {
                hiddens.push(h);
            }
        }
        if !retain_hiddens {
            hiddens = vec![h];
        }
        Ok(hiddens)
    }

    /// Unembedding `head(RMSNorm(h))`, tied to the token embedding when configured.
    pub fn lm_head(&self, g: &mut Graph<T>, h: Var) -> Result<Var> {
        let hn = g.rmsnorm(h, self.config.rmsnorm_eps)?;
        let w = g.param(&self.params, self.head);
        if self.config.weight_tying {
            g.matmul_t(hn, w)
        } else {
            g.matmul(hn, w)
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph<T>,
        tokens: &TokenBatch,
        trajectory: &Trajectory,
        retain_hiddens: bool,
    ) -> Result<ForwardOutput> {
        self.check_budget(trajectory)?;
        let h0 = self.embed(g, tokens)?;
        let hiddens = self.run_loops(g, h0, trajectory, retain_hiddens)?;
        let logits = self.lm_head(g, *hiddens.last().unwrap())?;
        Ok(ForwardOutput { hiddens, logits })
    }

    /// Logits of a value-only forward pass.
    pub fn logits(&self, tokens: &TokenBatch, trajectory: &Trajectory) -> Result<Tensor<T>> {
        let mut g = Graph::inference();
        let out = self.forward(&mut g, tokens, trajectory, false)?;
        Ok(g.value(out.logits).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(variant: Variant) -> ModelConfig {
        ModelConfig {
            vocab_size: 11,
            context_length: 8,
            d_model: 8,
            n_heads: 2,
            d_ff: 12,
            blocks_per_loop: 2,
            max_loops: 3,
            fourier_width: 8,
            variant,
            ..ModelConfig::desk()
        }
    }

    #[test]
    fn config_validation() {
        let mut c = tiny(Variant::LoopFormer);
        c.n_heads = 3;
        assert!(matches!(LoopedModel::init(c, 0), Err(Error::Config(_))));
        let mut c = tiny(Variant::LoopFormer);
        c.max_loops = 0;
        assert!(c.validate().is_err());
        assert!("nope".parse::<Variant>().is_err());
        assert_eq!("base_loop".parse::<Variant>().unwrap(), Variant::BaseLoop);
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = LoopedModel::init(tiny(Variant::LoopFormer), 9).unwrap();
        let b = LoopedModel::init(tiny(Variant::LoopFormer), 9).unwrap();
        for ((_, pa), (_, pb)) in a.params.iter().zip(b.params.iter()) {
            assert_eq!(pa.name, pb.name);
            assert!(pa.value.data().iter().zip(pb.value.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn modulation_heads_start_at_zero() {
        let m = LoopedModel::init(tiny(Variant::LoopFormer), 1).unwrap();
        let mut n = 0;
        for (_, p) in m.params.iter().filter(|(_, p)| p.name.contains(".modulation.")) {
            assert!(p.value.data().iter().all(|&v| v == 0.0), "{}", p.name);
            n += 1;
        }
        assert_eq!(n, 2 * m.config().blocks_per_loop);
    }

    #[test]
    fn parameter_count_independent_of_loops() {
        let mut a = ModelConfig { max_loops: 8, blocks_per_loop: 3, ..tiny(Variant::LoopFormer) };
        let pa = LoopedModel::init(a.clone(), 0).unwrap().num_params();
        a.max_loops = 24;
        let pb = LoopedModel::init(a, 0).unwrap().num_params();
        assert_eq!(pa, pb);
    }

    #[test]
    fn tying_shares_the_table() {
        let m = LoopedModel::init(tiny(Variant::LoopFormer), 0).unwrap();
        assert_eq!(m.head_weight(), m.token_embedding());
        let untied = LoopedModel::init(ModelConfig { weight_tying: false, ..tiny(Variant::LoopFormer) }, 0).unwrap();
        assert_ne!(untied.head_weight(), untied.token_embedding());
    }

    #[test]
    fn budget_and_token_errors() {
        let m = LoopedModel::init(tiny(Variant::LoopFormer), 0).unwrap();
        let toks = TokenBatch::single(vec![1, 2, 3]).unwrap();
        let too_long = Trajectory::uniform(4).unwrap();
        assert!(matches!(m.logits(&toks, &too_long), Err(Error::Budget(_))));
        let bad = TokenBatch::single(vec![1, 11]).unwrap();
        assert!(matches!(m.logits(&bad, &Trajectory::uniform(1).unwrap()), Err(Error::Index(_))));
        let long = TokenBatch::single(vec![0; 9]).unwrap();
        assert!(matches!(m.logits(&long, &Trajectory::uniform(1).unwrap()), Err(Error::Shape(_))));

        let base = LoopedModel::init(tiny(Variant::Base), 0).unwrap();
        assert!(base.logits(&toks, &Trajectory::uniform(1).unwrap()).is_ok());
        assert!(matches!(base.logits(&toks, &Trajectory::uniform(2).unwrap()), Err(Error::Budget(_))));
        assert_eq!(base.blocks().len(), 6);
    }

    #[test]
    fn hiddens_contract() {
        let m = LoopedModel::init(tiny(Variant::LoopFormer), 0).unwrap();
        let toks = TokenBatch::new(vec![1, 2, 3, 4, 5, 6], 2, 3).unwrap();
        let traj: Trajectory = "0.5,0.25,0.25".parse().unwrap();
        let mut g = Graph::new();
        let out = m.forward(&mut g, &toks, &traj, true).unwrap();
        assert_eq!(out.hiddens.len(), 4);
        let h0 = out.hiddens[0];
        let mut g2 = Graph::new();
        let e = m.embed(&mut g2, &toks).unwrap();
        assert_eq!(g.value(h0), g2.value(e));
        assert_eq!(g.shape(out.logits), &[2, 3, 11]);
        let mut g3 = Graph::inference();
        let out = m.forward(&mut g3, &toks, &traj, false).unwrap();
        assert_eq!(out.hiddens.len(), 1);
    }
}
