//! The hybrid dual-path linear operator.
//!
//! An HDPL layer replaces a dense `d_out × d_in` projection with the sum of
//! two paths:
//!
//! * a **local path**: a block-diagonal matrix `diag(W₁ … W_K)` whose blocks
//!   are `(d_out/K) × (d_in/K)`. Input feature group `k` only ever reaches
//!   output group `k`.
//! * a **global path**: a variational bottleneck of rank `R`. The input is
//!   encoded to a diagonal Gaussian `N(μ, diag(exp(logvar)))`, sampled with the
//!   reparameterisation trick while training (`z = μ` otherwise), passed
//!   through SiLU and decoded back to `d_out`.
//!
//! ```text
//! y = x·W_blockᵀ + SiLU(z)·W_decᵀ,    z = μ + exp(½·logvar) ⊙ ε
//! ```
//!
//! While training, the layer also returns an auxiliary loss: the per-element
//! Gaussian KL to the standard normal prior, clamped at `ln 2`, averaged and
//! scaled by `β`. It is therefore always in `[0, β·ln 2]`. No sub-projection
//! carries a bias.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::rng::{normals, RngState, INIT_STREAM};
use crate::tensor::{Scalar, Tensor};

/// Ceiling of every clamped KL term.
pub const KL_CAP: f64 = std::f64::consts::LN_2;

/// Over which index set the KL clamp is applied before averaging.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KlGranularity {
    /// Clamp each latent element, then average over all `B·L·R` elements.
    #[default]
    Element,
    /// Sum the KL over the `R` latent dims of each token, clamp, then average
    /// over the `B·L` tokens.
    Token,
}

impl std::str::FromStr for KlGranularity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "element" => Ok(Self::Element),
            "token" => Ok(Self::Token),
            other => Err(Error::config(format!("unknown kl granularity {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HdplConfig {
    pub d_in: usize,
    pub d_out: usize,
    pub k_groups: usize,
    pub rank: usize,
    pub beta: f64,
    #[serde(default)]
    pub kl_granularity: KlGranularity,
}

impl HdplConfig {
    pub fn new(d_in: usize, d_out: usize, k_groups: usize, rank: usize, beta: f64) -> Self {
        Self {
            d_in,
            d_out,
            k_groups,
            rank,
            beta,
            kl_granularity: KlGranularity::Element,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_dims(self.d_in, self.d_out, self.k_groups, self.rank)?;
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::config(format!("beta must be finite and non-negative, got {}", self.beta)));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        hdpl_param_formula(self.d_in, self.d_out, self.k_groups, self.rank)
    }
}

fn check_dims(d_in: usize, d_out: usize, k: usize, rank: usize) -> Result<()> {
    if d_in == 0 || d_out == 0 || k == 0 {
        return Err(Error::config("HDPL widths and group count must be positive"));
    }
    if d_in % k != 0 || d_out % k != 0 {
        return Err(Error::config(format!(
            "HDPL widths {d_in}→{d_out} are not divisible by {k} groups"
        )));
    }
    if rank == 0 || rank >= d_in {
        return Err(Error::config(format!(
            "HDPL rank must satisfy 1 ≤ R < d_in, got R={rank}, d_in={d_in}"
        )));
    }
    Ok(())
}

fn hdpl_param_formula(d_in: usize, d_out: usize, k: usize, rank: usize) -> usize {
    d_in * d_out / k + 2 * d_in * rank + d_out * rank
}

/// Stored floats of one HDPL layer: `d_in·d_out/K + 2·d_in·R + d_out·R`.
pub fn count_hdpl_params(d_in: usize, d_out: usize, k_groups: usize, rank: usize) -> Result<usize> {
    check_dims(d_in, d_out, k_groups, rank)?;
    Ok(hdpl_param_formula(d_in, d_out, k_groups, rank))
}

/// Parameter handles of one HDPL layer inside a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct HdplLayer {
    pub config: HdplConfig,
    /// `[K, d_out/K, d_in/K]`
    pub w_blocks: ParamId,
    /// `[R, d_in]`
    pub w_mu: ParamId,
    /// `[R, d_in]`
    pub w_logvar: ParamId,
    /// `[d_out, R]`
    pub w_dec: ParamId,
    /// Noise stream owned by this layer instance.
    pub stream: u64,
}

/// Everything one HDPL forward pass produces.
#[derive(Clone, Copy, Debug)]
pub struct HdplOutput<'t, T: Scalar> {
    pub y: Var<'t, T>,
    /// `β`-scaled bounded KL while training, exactly zero otherwise.
    pub aux_loss: Var<'t, T>,
    pub mu: Var<'t, T>,
    pub logvar: Var<'t, T>,
    pub z: Var<'t, T>,
}

/// How the latent is produced on a given pass.
#[derive(Clone, Copy, Debug)]
pub enum LatentMode<'a, T> {
    /// `z = μ`, no noise, no auxiliary loss.
    Eval,
    /// `z = μ + σ ⊙ ε` with `ε` drawn from the layer's stream at `rng`.
    Train(RngState),
    /// Eval pass with `z` replaced by a caller-supplied tensor.
    Override(&'a Tensor<T>),
}

impl HdplLayer {
    /// Allocates and initialises a layer: blocks and encoders are drawn from
    /// `N(0, 1/d_in)`, the decoder from `N(0, 1/R)`.
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        config: HdplConfig,
        stream: u64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let HdplConfig {
            d_in,
            d_out,
            k_groups: k,
            rank,
            ..
        } = config;
        let in_std = 1.0 / (d_in as f64).sqrt();
        let dec_std = 1.0 / (rank as f64).sqrt();
        Ok(Self {
            config,
            w_blocks: store.insert_normal(format!("{prefix}.blocks"), &[k, d_out / k, d_in / k], in_std, rng),
            w_mu: store.insert_normal(format!("{prefix}.w_mu"), &[rank, d_in], in_std, rng),
            w_logvar: store.insert_normal(format!("{prefix}.w_logvar"), &[rank, d_in], in_std, rng),
            w_dec: store.insert_normal(format!("{prefix}.w_dec"), &[d_out, rank], dec_std, rng),
            stream,
        })
    }

    pub fn param_ids(&self) -> [ParamId; 4] {
        [self.w_blocks, self.w_mu, self.w_logvar, self.w_dec]
    }

    fn check_input<T: Scalar>(&self, x: &Var<'_, T>) -> Result<()> {
        let shape = x.shape();
        if shape.last() != Some(&self.config.d_in) {
            return Err(Error::ShapeMismatch {
                op: "hdpl",
                lhs: shape,
                rhs: vec![self.config.d_in],
            });
        }
        Ok(())
    }

    /// Local path: input split into `K` contiguous feature groups, group `k`
    /// multiplied by `W_kᵀ`, results concatenated.
    pub fn block_diag_forward<'t, T: Scalar>(&self, params: &[Var<'t, T>], x: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.check_input(x)?;
        let HdplConfig {
            d_in,
            d_out,
            k_groups: k,
            ..
        } = self.config;
        let (gi, go) = (d_in / k, d_out / k);
        let blocks = &params[self.w_blocks.0];
        if k == 1 {
            return x.linear(&blocks.reshape(&[d_out, d_in])?);
        }
        let last = x.shape().len() - 1;
        let parts = (0..k)
            .map(|g| {
                let w = blocks.slice(0, g, 1)?.reshape(&[go, gi])?;
                x.slice(last, g * gi, gi)?.linear(&w)
            })
            .collect::<Result<Vec<_>>>()?;
        x.tape().concat(&parts, last)
    }

    /// Posterior parameters `(μ, logvar)`; pure linear maps.
    pub fn vae_encode<'t, T: Scalar>(&self, params: &[Var<'t, T>], x: &Var<'t, T>) -> Result<(Var<'t, T>, Var<'t, T>)> {
        self.check_input(x)?;
        Ok((x.linear(&params[self.w_mu.0])?, x.linear(&params[self.w_logvar.0])?))
    }

    pub fn forward<'t, T: Scalar>(
        &self,
        params: &[Var<'t, T>],
        x: &Var<'t, T>,
        mode: LatentMode<'_, T>,
    ) -> Result<HdplOutput<'t, T>> {
        let local = self.block_diag_forward(params, x)?;
        let (mu, logvar) = self.vae_encode(params, x)?;
        let tape = x.tape();
        let (z, aux_loss) = match mode {
            LatentMode::Eval => (mu, tape.constant(Tensor::scalar(T::zero()))),
            LatentMode::Train(rng) => {
                let z = reparameterize(&mu, &logvar, &rng, self.stream, true)?;
                let aux = bounded_kl(&mu, &logvar, self.config.beta, self.config.kl_granularity)?;
                (z, aux)
            }
            LatentMode::Override(z) => {
                if z.shape() != mu.shape().as_slice() {
                    return Err(Error::ShapeMismatch {
                        op: "latent override",
                        lhs: mu.shape(),
                        rhs: z.shape().to_vec(),
                    });
                }
                (tape.constant(z.clone()), tape.constant(Tensor::scalar(T::zero())))
            }
        };
        let global = z.silu().linear(&params[self.w_dec.0])?;
        Ok(HdplOutput {
            y: local.add(&global)?,
            aux_loss,
            mu,
            logvar,
            z,
        })
    }
}

/// Standalone layer with its own parameter store, initialised from `seed`.
pub fn init_hdpl<T: Scalar>(config: HdplConfig, seed: u64) -> Result<(ParamStore<T>, HdplLayer)> {
    let mut store = ParamStore::new();
    let mut rng = RngState::new(seed).stream(INIT_STREAM);
    let layer = HdplLayer::init(&mut store, "hdpl", config, 0, &mut rng)?;
    Ok((store, layer))
}

/// The noise a training pass at `rng` draws for `stream`, shaped like `shape`.
pub fn latent_noise<T: Scalar>(rng: &RngState, stream: u64, shape: &[usize]) -> Tensor<T> {
    let n = shape.iter().product();
    Tensor::new(shape, normals(&mut rng.stream(stream), n)).expect("noise length matches shape")
}

/// `z = μ + exp(½·logvar) ⊙ ε` while training; `z = μ` otherwise, without
/// touching the generator.
pub fn reparameterize<'t, T: Scalar>(
    mu: &Var<'t, T>,
    logvar: &Var<'t, T>,
    rng: &RngState,
    stream: u64,
    training: bool,
) -> Result<Var<'t, T>> {
    let shape = mu.shape();
    if shape != logvar.shape() {
        return Err(Error::ShapeMismatch {
            op: "reparameterize",
            lhs: shape,
            rhs: logvar.shape(),
        });
    }
    if !training {
        return Ok(*mu);
    }
    let eps = mu.tape().constant(latent_noise(rng, stream, &shape));
    reparameterize_with(mu, logvar, &eps)
}

/// Reparameterisation with explicit noise.
pub fn reparameterize_with<'t, T: Scalar>(mu: &Var<'t, T>, logvar: &Var<'t, T>, eps: &Var<'t, T>) -> Result<Var<'t, T>> {
    let sigma = logvar.scale(0.5).exp();
    mu.add(&sigma.mul(eps)?)
}

/// `β · mean(clamp(KL, ln 2))`, with KL the Gaussian divergence to `N(0, I)`.
///
/// The per-element KL is evaluated as `½(μ² + (e^{logvar} − 1) − logvar)`,
/// which is the usual `−½(1 + logvar − μ² − e^{logvar})` rearranged so that
/// every term is non-negative in floating point.
pub fn bounded_kl<'t, T: Scalar>(
    mu: &Var<'t, T>,
    logvar: &Var<'t, T>,
    beta: f64,
    granularity: KlGranularity,
) -> Result<Var<'t, T>> {
    let kl = mu.mul(mu)?.add(&logvar.expm1().sub(logvar)?)?.scale(0.5);
    let terms = match granularity {
        KlGranularity::Element => kl,
        KlGranularity::Token => {
            let last = kl.shape().len().saturating_sub(1);
            kl.sum_axis(last)?
        }
    };
    Ok(terms.clamp_max(KL_CAP).mean().scale(beta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    fn scalar_kl(mu: f64, logvar: f64, beta: f64) -> f64 {
        let tape = Tape::<f64>::new();
        let m = tape.constant(Tensor::from_f64(&[1, 1, 1], &[mu]).unwrap());
        let l = tape.constant(Tensor::from_f64(&[1, 1, 1], &[logvar]).unwrap());
        bounded_kl(&m, &l, beta, KlGranularity::Element).unwrap().item()
    }

    #[test]
    fn kl_hand_cases() {
        assert_eq!(scalar_kl(0.0, 0.0, 1.0), 0.0);
        assert!((scalar_kl(1.0, 0.0, 1.0) - 0.5).abs() < 1e-12);
        assert!((scalar_kl(2.0, 0.0, 1.0) - KL_CAP).abs() < 1e-12);
        assert!((scalar_kl(2.0, 0.0, 0.001) - 0.001 * KL_CAP).abs() < 1e-15);
    }

    #[test]
    fn token_granularity_sums_before_clamping() {
        let tape = Tape::<f64>::new();
        // two latent dims at μ=0.5: element KL 0.125 each, token KL 0.25
        let m = tape.constant(Tensor::from_f64(&[1, 1, 2], &[0.5, 0.5]).unwrap());
        let l = tape.constant(Tensor::from_f64(&[1, 1, 2], &[0.0, 0.0]).unwrap());
        let e = bounded_kl(&m, &l, 1.0, KlGranularity::Element).unwrap().item();
        let t = bounded_kl(&m, &l, 1.0, KlGranularity::Token).unwrap().item();
        assert!((e - 0.125).abs() < 1e-12);
        assert!((t - 0.25).abs() < 1e-12);
    }

    #[test]
    fn param_count_examples() {
        assert_eq!(count_hdpl_params(512, 512, 8, 128).unwrap(), 229_376);
        assert_eq!(count_hdpl_params(512, 2048, 8, 128).unwrap(), 524_288);
        assert_eq!(count_hdpl_params(64, 64, 1, 8).unwrap(), 64 * 64 + 3 * 64 * 8);
        assert!(count_hdpl_params(512, 510, 8, 128).is_err());
        assert!(count_hdpl_params(16, 16, 2, 16).is_err());
        assert!(count_hdpl_params(16, 16, 2, 0).is_err());
    }

    #[test]
    fn eval_mode_has_zero_aux_and_z_equals_mu() {
        let cfg = HdplConfig::new(8, 4, 2, 3, 0.5);
        let (store, layer) = init_hdpl::<f64>(cfg, 1).unwrap();
        let tape = Tape::new();
        let p = store.bind(&tape);
        let x = tape.constant(Tensor::full(&[2, 3, 8], 0.3));
        let out = layer.forward(&p, &x, LatentMode::Eval).unwrap();
        assert_eq!(out.aux_loss.item(), 0.0);
        assert_eq!(out.z.value().data(), out.mu.value().data());
        assert_eq!(out.y.shape(), vec![2, 3, 4]);
    }

    #[test]
    fn rejects_wrong_input_width() {
        let (store, layer) = init_hdpl::<f32>(HdplConfig::new(8, 8, 2, 2, 0.1), 0).unwrap();
        let tape = Tape::new();
        let p = store.bind(&tape);
        let x = tape.constant(Tensor::zeros(&[1, 1, 6]));
        assert!(matches!(
            layer.forward(&p, &x, LatentMode::Eval),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn override_shape_is_checked() {
        let (store, layer) = init_hdpl::<f32>(HdplConfig::new(8, 8, 2, 2, 0.1), 0).unwrap();
        let tape = Tape::new();
        let p = store.bind(&tape);
        let x = tape.constant(Tensor::zeros(&[1, 3, 8]));
        let bad = Tensor::zeros(&[1, 3, 3]);
        assert!(layer.forward(&p, &x, LatentMode::Override(&bad)).is_err());
    }
}
