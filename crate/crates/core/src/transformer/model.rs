use std::collections::BTreeMap;
use std::sync::RwLock;

use super::config::{ModelConfig, Projection};
use super::layers::{apply_rope, causal_attention, rmsnorm};
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::hdpl::{HdplLayer, LatentMode};
use crate::params::{ParamId, ParamStore};
use crate::rng::{RngState, INIT_STREAM, NOISE_STREAM_BASE};
use crate::tensor::{Scalar, Tensor};

/// Standard deviation of the token embedding and output head.
const EMBED_STD: f64 = 0.02;

#[derive(Clone, Debug)]
pub enum ProjectionLayer {
    Dense(ParamId),
    /// HDPL layer and its index among all hybrid layers of the model.
    Hybrid(HdplLayer, usize),
}

#[derive(Clone, Debug)]
pub struct Block {
    pub attn_norm: ParamId,
    pub ffn_norm: ParamId,
    /// Indexed in [`Projection::ALL`] order.
    pub projections: Vec<ProjectionLayer>,
}

impl Block {
    pub fn projection(&self, p: Projection) -> &ProjectionLayer {
        let i = Projection::ALL.iter().position(|&x| x == p).expect("known projection");
        &self.projections[i]
    }
}

/// Latent statistics of one hybrid layer on one forward pass.
#[derive(Clone, Debug)]
pub struct LatentRecord<T> {
    pub layer_id: usize,
    pub block: usize,
    pub projection: Projection,
    pub mu: Tensor<T>,
    pub logvar: Tensor<T>,
    pub z: Tensor<T>,
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardOptions {
    pub training: bool,
    pub record_latents: bool,
    /// Counter state for the latent noise; unused in eval mode.
    pub rng: RngState,
}

impl ForwardOptions {
    pub fn eval() -> Self {
        Self {
            training: false,
            record_latents: false,
            rng: RngState::new(0),
        }
    }

    pub fn train(rng: RngState) -> Self {
        Self {
            training: true,
            record_latents: false,
            rng,
        }
    }

    pub fn with_latents(mut self) -> Self {
        self.record_latents = true;
        self
    }
}

pub struct ForwardResult<'t, T: Scalar> {
    /// `[B, L, vocab]`
    pub logits: Var<'t, T>,
    pub ce_loss: Option<Var<'t, T>>,
    /// Sum of every hybrid layer's auxiliary loss; zero in eval mode.
    pub aux_total: Var<'t, T>,
    latents: Option<Vec<LatentRecord<T>>>,
}

impl<'t, T: Scalar> ForwardResult<'t, T> {
    /// `ce + Σ aux`. Requires targets.
    pub fn total_loss(&self) -> Result<Var<'t, T>> {
        let ce = self
            .ce_loss
            .ok_or_else(|| Error::config("total loss needs targets"))?;
        ce.add(&self.aux_total)
    }
}

/// Read-only snapshot of every hybrid layer's latents, in layer order.
pub fn tap_latents<'a, T: Scalar>(result: &'a ForwardResult<'_, T>) -> Result<&'a [LatentRecord<T>]> {
    result.latents.as_deref().ok_or(Error::LatentsNotRecorded)
}

/// Llama-style decoder: RMSNorm, rotary attention, SiLU-gated FFN, untied
/// embedding and head. Projections named in the config's hybrid set are
/// HDPL layers.
pub struct TransformerModel<T: Scalar> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub tok_embedding: ParamId,
    pub blocks: Vec<Block>,
    pub final_norm: ParamId,
    pub lm_head: ParamId,
    hybrid_shapes: Vec<(usize, Projection)>,
    overrides: RwLock<BTreeMap<usize, Tensor<T>>>,
}

impl<T: Scalar> TransformerModel<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = RngState::new(seed).stream(INIT_STREAM);
        let mut params = ParamStore::new();
        let (d, v) = (config.d_model, config.vocab_size);
        let tok_embedding = params.insert_normal("tok_embedding", &[v, d], EMBED_STD, &mut rng);
        let mut blocks = Vec::with_capacity(config.n_layers);
        let mut hybrid_shapes = Vec::new();
        for b in 0..config.n_layers {
            let mut attn_norm = None;
            let mut ffn_norm = None;
            let mut projections = Vec::with_capacity(Projection::ALL.len());
            for p in Projection::ALL {
                match p {
                    Projection::Q => attn_norm = Some(params.insert(format!("blocks.{b}.attn_norm"), Tensor::full(&[d], T::one()))),
                    Projection::Gate => ffn_norm = Some(params.insert(format!("blocks.{b}.ffn_norm"), Tensor::full(&[d], T::one()))),
                    _ => {}
                }
                let name = format!("blocks.{b}.{p}");
                let layer = if config.is_hybrid(p) {
                    let id = hybrid_shapes.len();
                    hybrid_shapes.push((b, p));
                    let stream = NOISE_STREAM_BASE + id as u64;
                    ProjectionLayer::Hybrid(HdplLayer::init(&mut params, &name, config.hdpl_config(p), stream, &mut rng)?, id)
                } else {
                    let (d_in, d_out) = p.dims(d, config.d_hidden);
                    let std = 1.0 / (d_in as f64).sqrt();
                    ProjectionLayer::Dense(params.insert_normal(name, &[d_out, d_in], std, &mut rng))
                };
                projections.push(layer);
            }
            blocks.push(Block {
                attn_norm: attn_norm.expect("attention norm"),
                ffn_norm: ffn_norm.expect("ffn norm"),
                projections,
            });
        }
        let final_norm = params.insert("final_norm", Tensor::full(&[d], T::one()));
        let lm_head = params.insert_normal("lm_head", &[v, d], EMBED_STD, &mut rng);
        Ok(Self {
            config,
            params,
            tok_embedding,
            blocks,
            final_norm,
            lm_head,
            hybrid_shapes,
            overrides: RwLock::new(BTreeMap::new()),
        })
    }

    /// Same architecture with parameters converted to another precision.
    pub fn cast<U: Scalar>(&self) -> TransformerModel<U> {
        TransformerModel {
            config: self.config.clone(),
            params: self.params.cast(),
            tok_embedding: self.tok_embedding,
            blocks: self.blocks.clone(),
            final_norm: self.final_norm,
            lm_head: self.lm_head,
            hybrid_shapes: self.hybrid_shapes.clone(),
            overrides: RwLock::new(BTreeMap::new()),
        }
    }

    pub fn num_params(&self) -> usize {
        self.params.numel()
    }

    /// `(block, projection)` of each hybrid layer id.
    pub fn hybrid_layers(&self) -> &[(usize, Projection)] {
        &self.hybrid_shapes
    }

    /// Substitutes `z` for the latent of hybrid layer `layer_id` on eval
    /// passes until the returned guard is dropped.
    pub fn override_latent(&self, layer_id: usize, z: Tensor<T>) -> Result<LatentOverride<'_, T>> {
        if layer_id >= self.hybrid_shapes.len() {
            return Err(Error::UnknownLayer(layer_id));
        }
        let shape = z.shape();
        if shape.len() != 3 || shape[2] != self.config.rank {
            return Err(Error::ShapeMismatch {
                op: "latent override",
                lhs: shape.to_vec(),
                rhs: vec![0, 0, self.config.rank],
            });
        }
        self.overrides.write().expect("override lock").insert(layer_id, z);
        Ok(LatentOverride { model: self, layer_id })
    }

    /// Full forward pass over `batch` rows of `tokens` (row-major `[B, L]`).
    pub fn forward<'t>(
        &self,
        params: &[Var<'t, T>],
        tokens: &[usize],
        batch: usize,
        targets: Option<&[usize]>,
        opts: &ForwardOptions,
    ) -> Result<ForwardResult<'t, T>> {
        let cfg = &self.config;
        if batch == 0 || tokens.is_empty() || tokens.len() % batch != 0 {
            return Err(Error::ShapeMismatch {
                op: "forward",
                lhs: vec![tokens.len()],
                rhs: vec![batch],
            });
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= cfg.vocab_size) {
            return Err(Error::IndexOutOfRange {
                what: "vocabulary",
                index: bad,
                size: cfg.vocab_size,
            });
        }
        if let Some(t) = targets {
            if t.len() != tokens.len() {
                return Err(Error::ShapeMismatch {
                    op: "targets",
                    lhs: vec![tokens.len()],
                    rhs: vec![t.len()],
                });
            }
        }
        let overrides = self.overrides.read().expect("override lock");
        if opts.training && !overrides.is_empty() {
            return Err(Error::OverrideInTraining);
        }
        let len = tokens.len() / batch;
        let tape = params[0].tape();
        let mut pass = Pass {
            params,
            opts,
            overrides: &overrides,
            latents: opts.record_latents.then(Vec::new),
            aux: Vec::new(),
        };

        let mut x = tape
            .embedding(&params[self.tok_embedding.0], tokens)?
            .reshape(&[batch, len, cfg.d_model])?;
        for (b, block) in self.blocks.iter().enumerate() {
            x = self.attention_block(&mut pass, b, block, &x)?;
            x = self.ffn_block(&mut pass, b, block, &x)?;
        }
        let h = rmsnorm(&x, &params[self.final_norm.0], cfg.rms_eps)?;
        let logits = h.linear(&params[self.lm_head.0])?;
        let ce_loss = match targets {
            Some(t) => Some(logits.reshape(&[batch * len, cfg.vocab_size])?.cross_entropy(t)?),
            None => None,
        };
        let mut aux_total = tape.constant(Tensor::scalar(T::zero()));
        for a in &pass.aux {
            aux_total = aux_total.add(a)?;
        }
        Ok(ForwardResult {
            logits,
            ce_loss,
            aux_total,
            latents: pass.latents,
        })
    }

    /// Pre-norm attention with residual; returns the new residual stream.
    fn attention_block<'t>(&self, pass: &mut Pass<'_, 't, T>, b: usize, block: &Block, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        let cfg = &self.config;
        let shape = x.shape();
        let (batch, len) = (shape[0], shape[1]);
        let h = rmsnorm(x, &pass.params[block.attn_norm.0], cfg.rms_eps)?;
        let heads = |v: Var<'t, T>| -> Result<Var<'t, T>> {
            v.reshape(&[batch, len, cfg.n_heads, cfg.head_dim])?.permute(&[0, 2, 1, 3])
        };
        let q = heads(pass.project(b, block, Projection::Q, &h)?)?;
        let k = heads(pass.project(b, block, Projection::K, &h)?)?;
        let v = heads(pass.project(b, block, Projection::V, &h)?)?;
        let q = apply_rope(&q, cfg.rope_base)?;
        let k = apply_rope(&k, cfg.rope_base)?;
        let ctx = causal_attention(&q, &k, &v)?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[batch, len, cfg.d_model])?;
        let out = pass.project(b, block, Projection::O, &ctx)?;
        x.add(&out)
    }

    /// Pre-norm gated FFN with residual: `x + W_down(SiLU(g) ⊙ u)`.
    fn ffn_block<'t>(&self, pass: &mut Pass<'_, 't, T>, b: usize, block: &Block, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        let h = rmsnorm(x, &pass.params[block.ffn_norm.0], self.config.rms_eps)?;
        let g = pass.project(b, block, Projection::Gate, &h)?;
        let u = pass.project(b, block, Projection::Up, &h)?;
        let out = pass.project(b, block, Projection::Down, &g.silu().mul(&u)?)?;
        x.add(&out)
    }

    /// One attention sub-block on its own: returns the residual output and
    /// the summed auxiliary loss of its q/k/v (and o) projections.
    pub fn attention_block_forward<'t>(
        &self,
        params: &[Var<'t, T>],
        block: usize,
        x: &Var<'t, T>,
        opts: &ForwardOptions,
    ) -> Result<(Var<'t, T>, Var<'t, T>)> {
        self.sub_block(params, opts, |m, pass| m.attention_block(pass, block, &m.blocks[block], x))
    }

    /// One FFN sub-block on its own, with its summed auxiliary loss.
    pub fn ffn_block_forward<'t>(
        &self,
        params: &[Var<'t, T>],
        block: usize,
        x: &Var<'t, T>,
        opts: &ForwardOptions,
    ) -> Result<(Var<'t, T>, Var<'t, T>)> {
        self.sub_block(params, opts, |m, pass| m.ffn_block(pass, block, &m.blocks[block], x))
    }

    fn sub_block<'t>(
        &self,
        params: &[Var<'t, T>],
        opts: &ForwardOptions,
        f: impl FnOnce(&Self, &mut Pass<'_, 't, T>) -> Result<Var<'t, T>>,
    ) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let overrides = self.overrides.read().expect("override lock");
        let mut pass = Pass {
            params,
            opts,
            overrides: &overrides,
            latents: None,
            aux: Vec::new(),
        };
        let y = f(self, &mut pass)?;
        let mut aux = params[0].tape().constant(Tensor::scalar(T::zero()));
        for a in &pass.aux {
            aux = aux.add(a)?;
        }
        Ok((y, aux))
    }
}

struct Pass<'a, 't, T: Scalar> {
    params: &'a [Var<'t, T>],
    opts: &'a ForwardOptions,
    overrides: &'a BTreeMap<usize, Tensor<T>>,
    latents: Option<Vec<LatentRecord<T>>>,
    aux: Vec<Var<'t, T>>,
}

impl<'t, T: Scalar> Pass<'_, 't, T> {
    fn project(&mut self, b: usize, block: &Block, projection: Projection, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        match block.projection(projection) {
            ProjectionLayer::Dense(w) => x.linear(&self.params[w.0]),
            ProjectionLayer::Hybrid(hdpl, id) => {
                let mode = match (self.opts.training, self.overrides.get(id)) {
                    (true, _) => LatentMode::Train(self.opts.rng),
                    (false, Some(z)) => LatentMode::Override(z),
                    (false, None) => LatentMode::Eval,
                };
                let out = hdpl.forward(self.params, x, mode)?;
                if self.opts.training {
                    self.aux.push(out.aux_loss);
                }
                if let Some(latents) = self.latents.as_mut() {
                    latents.push(LatentRecord {
                        layer_id: *id,
                        block: b,
                        projection,
                        mu: (*out.mu.value()).clone(),
                        logvar: (*out.logvar.value()).clone(),
                        z: (*out.z.value()).clone(),
                    });
                }
                Ok(out.y)
            }
        }
    }
}

/// Active latent substitution; dropping it restores normal behaviour.
pub struct LatentOverride<'m, T: Scalar> {
    model: &'m TransformerModel<T>,
    layer_id: usize,
}

impl<T: Scalar> LatentOverride<'_, T> {
    pub fn layer_id(&self) -> usize {
        self.layer_id
    }
}

impl<T: Scalar> Drop for LatentOverride<'_, T> {
    fn drop(&mut self) {
        if let Ok(mut map) = self.model.overrides.write() {
            map.remove(&self.layer_id);
        }
    }
}
