use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hdpl::{HdplConfig, KlGranularity};

/// The seven linear projections of a decoder block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Projection {
    Q,
    K,
    V,
    O,
    Gate,
    Up,
    Down,
}

impl Projection {
    pub const ALL: [Projection; 7] = [
        Projection::Q,
        Projection::K,
        Projection::V,
        Projection::O,
        Projection::Gate,
        Projection::Up,
        Projection::Down,
    ];

    /// Projections replaced by HDPL in the reference configuration. The
    /// aggregation points `o` and `down` stay dense.
    pub const SURGICAL: [Projection; 5] = [
        Projection::Q,
        Projection::K,
        Projection::V,
        Projection::Gate,
        Projection::Up,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Projection::Q => "q",
            Projection::K => "k",
            Projection::V => "v",
            Projection::O => "o",
            Projection::Gate => "gate",
            Projection::Up => "up",
            Projection::Down => "down",
        }
    }

    /// `(d_in, d_out)` of this projection.
    pub fn dims(self, d_model: usize, d_hidden: usize) -> (usize, usize) {
        match self {
            Projection::Q | Projection::K | Projection::V | Projection::O => (d_model, d_model),
            Projection::Gate | Projection::Up => (d_model, d_hidden),
            Projection::Down => (d_hidden, d_model),
        }
    }
}

impl fmt::Display for Projection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Projection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Projection::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::config(format!("unknown projection {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Every projection dense.
    Baseline,
    /// Projections in `hybrid_set` are HDPL layers.
    #[default]
    Hybrid,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Mode::Baseline),
            "hybrid" => Ok(Mode::Hybrid),
            other => Err(Error::config(format!("unknown mode {other:?}"))),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Baseline => "baseline",
            Mode::Hybrid => "hybrid",
        })
    }
}

/// Architecture of a Llama-style decoder with optional HDPL projections.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub d_hidden: usize,
    pub vocab_size: usize,
    pub seq_len: usize,
    pub rank: usize,
    pub k_groups: usize,
    pub beta: f64,
    pub hybrid_set: BTreeSet<Projection>,
    pub mode: Mode,
    pub kl_granularity: KlGranularity,
    pub rms_eps: f64,
    pub rope_base: f64,
}

impl ModelConfig {
    /// The 4-layer, 512-wide reference configuration with a 49,152-token
    /// vocabulary.
    pub fn reference(mode: Mode) -> Self {
        Self {
            d_model: 512,
            n_layers: 4,
            n_heads: 8,
            head_dim: 64,
            d_hidden: 2048,
            vocab_size: 49_152,
            seq_len: 2048,
            rank: 128,
            k_groups: 8,
            beta: 0.001,
            hybrid_set: Projection::SURGICAL.into_iter().collect(),
            mode,
            kl_granularity: KlGranularity::Element,
            rms_eps: 1e-5,
            rope_base: 10_000.0,
        }
    }

    /// Tiny byte-level model used for gradient checks: `d_model = 16`, one
    /// layer, vocabulary 11, `L = 4`, `R = 4`, `K = 2`.
    pub fn micro(mode: Mode) -> Self {
        Self {
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            head_dim: 8,
            d_hidden: 32,
            vocab_size: 11,
            seq_len: 4,
            rank: 4,
            k_groups: 2,
            beta: 0.001,
            hybrid_set: Projection::SURGICAL.into_iter().collect(),
            mode,
            kl_granularity: KlGranularity::Element,
            rms_eps: 1e-5,
            rope_base: 10_000.0,
        }
    }

    /// Projections that are HDPL layers under the current mode.
    pub fn effective_hybrid_set(&self) -> BTreeSet<Projection> {
        match self.mode {
            Mode::Baseline => BTreeSet::new(),
            Mode::Hybrid => self.hybrid_set.clone(),
        }
    }

    pub fn is_hybrid(&self, p: Projection) -> bool {
        self.mode == Mode::Hybrid && self.hybrid_set.contains(&p)
    }

    pub fn hdpl_config(&self, p: Projection) -> HdplConfig {
        let (d_in, d_out) = p.dims(self.d_model, self.d_hidden);
        HdplConfig {
            d_in,
            d_out,
            k_groups: self.k_groups,
            rank: self.rank,
            beta: self.beta,
            kl_granularity: self.kl_granularity,
        }
    }

    /// Number of HDPL layers in the whole model.
    pub fn hybrid_layer_count(&self) -> usize {
        self.effective_hybrid_set().len() * self.n_layers
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("head_dim", self.head_dim),
            ("d_hidden", self.d_hidden),
            ("vocab_size", self.vocab_size),
            ("seq_len", self.seq_len),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("{name} must be positive")));
        }
        if self.n_heads * self.head_dim != self.d_model {
            return Err(Error::config(format!(
                "n_heads·head_dim = {}·{} does not equal d_model = {}",
                self.n_heads, self.head_dim, self.d_model
            )));
        }
        if self.head_dim % 2 != 0 {
            return Err(Error::config(format!("rotary embeddings need an even head_dim, got {}", self.head_dim)));
        }
        if !(self.rms_eps >= 0.0) || !(self.rope_base > 0.0) {
            return Err(Error::config("rms_eps must be ≥ 0 and rope_base > 0"));
        }
        for p in self.effective_hybrid_set() {
            self.hdpl_config(p)
                .validate()
                .map_err(|e| Error::config(format!("projection {p}: {e}")))?;
        }
        Ok(())
    }
}
