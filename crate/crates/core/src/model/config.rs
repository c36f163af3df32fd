use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::norm::{NormKind, DEFAULT_EPSILON};

/// Where normalization sits around each sublayer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlacementKind {
    /// `Norm(x + Module(x))`
    PostLn,
    /// `x + Module(Norm(x))`
    PreLn,
    /// `x + Norm(Module(Norm(x)))`
    PeriLn,
    /// `x + Norm(Module(x))` with Q/K normalized inside attention.
    PeriLnQkNorm,
}

impl PlacementKind {
    pub const ALL: [PlacementKind; 4] = [Self::PostLn, Self::PreLn, Self::PeriLn, Self::PeriLnQkNorm];

    pub fn label(self) -> &'static str {
        match self {
            Self::PostLn => "post_ln",
            Self::PreLn => "pre_ln",
            Self::PeriLn => "peri_ln",
            Self::PeriLnQkNorm => "peri_ln_qk_norm",
        }
    }

    pub fn has_output_norm(self) -> bool {
        matches!(self, Self::PeriLn | Self::PeriLnQkNorm)
    }
}

impl std::fmt::Display for PlacementKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

impl std::str::FromStr for PlacementKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.label() == s)
            .ok_or_else(|| Error::Config(format!("unknown strategy kind `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlacementStrategy {
    pub kind: PlacementKind,
    pub embedding_ln: bool,
    pub final_ln: bool,
    /// Freeze gamma of every output (module-side) normalization at 1.
    pub output_ln_frozen: bool,
    pub norm_kind: NormKind,
    #[serde(default = "default_eps")]
    pub epsilon: f64,
    /// QK-Norm variant only: normalize before applying RoPE (otherwise after).
    #[serde(default = "default_true")]
    pub qk_norm_before_rope: bool,
}

fn default_eps() -> f64 {
    DEFAULT_EPSILON
}

fn default_true() -> bool {
    true
}

impl PlacementStrategy {
    /// Standard wiring for each kind.
    pub fn new(kind: PlacementKind) -> Self {
        let (embedding_ln, final_ln) = match kind {
            PlacementKind::PostLn => (false, false),
            PlacementKind::PreLn => (false, true),
            PlacementKind::PeriLn => (true, true),
            PlacementKind::PeriLnQkNorm => (false, true),
        };
        Self {
            kind,
            embedding_ln,
            final_ln,
            output_ln_frozen: false,
            norm_kind: NormKind::RmsNorm,
            epsilon: DEFAULT_EPSILON,
            qk_norm_before_rope: true,
        }
    }

    pub fn post_ln() -> Self {
        Self::new(PlacementKind::PostLn)
    }

    pub fn pre_ln() -> Self {
        Self::new(PlacementKind::PreLn)
    }

    pub fn peri_ln() -> Self {
        Self::new(PlacementKind::PeriLn)
    }

    pub fn peri_ln_qk_norm() -> Self {
        Self::new(PlacementKind::PeriLnQkNorm)
    }

    pub fn with_norm(mut self, kind: NormKind) -> Self {
        self.norm_kind = kind;
        self
    }

    pub fn with_embedding_ln(mut self, on: bool) -> Self {
        self.embedding_ln = on;
        self
    }

    pub fn with_frozen_output_ln(mut self, frozen: bool) -> Self {
        self.output_ln_frozen = frozen;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        match self.kind {
            PlacementKind::PostLn if self.embedding_ln || self.final_ln => Err(Error::Config(
                "post_ln normalizes the main path; embedding_ln and final_ln must be false".into(),
            )),
            PlacementKind::PreLn if !self.final_ln => Err(Error::Config("pre_ln requires final_ln = true".into())),
            PlacementKind::PostLn | PlacementKind::PreLn if self.output_ln_frozen => Err(Error::Config(format!(
                "{} has no output normalization to freeze",
                self.kind
            ))),
            _ => Ok(()),
        }
    }

    /// Short human label, e.g. `peri_ln+frozen` or `pre_ln/layer_norm`.
    pub fn label(&self) -> String {
        let mut s = self.kind.label().to_string();
        let default = Self::new(self.kind);
        if self.embedding_ln != default.embedding_ln {
            s.push_str(if self.embedding_ln { "+emb_ln" } else { "-emb_ln" });
        }
        if self.output_ln_frozen {
            s.push_str("+frozen");
        }
        if self.norm_kind == NormKind::LayerNorm {
            s.push_str("/layer_norm");
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MlpKind {
    SwiGlu,
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionKind {
    Rope,
    None,
}

pub const BYTE_VOCAB: usize = 256;
/// Byte vocabulary plus one end-of-text marker.
pub const DEFAULT_VOCAB: usize = BYTE_VOCAB + 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformerConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    /// Hidden width of the MLP.
    pub d_ff: usize,
    pub vocab_size: usize,
    pub seq_len: usize,
    pub mlp: MlpKind,
    pub tie_embeddings: bool,
    pub position: PositionKind,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
}

fn default_rope_base() -> f64 {
    10_000.0
}

fn default_init_std() -> f64 {
    0.02
}

/// SwiGLU hidden width: 8/3 of the model width, rounded up to a multiple of 32.
pub fn swiglu_width(d_model: usize) -> usize {
    (8 * d_model).div_ceil(3).div_ceil(32) * 32
}

impl TransformerConfig {
    /// Four layers of width 128: large enough to show the depth trends,
    /// small enough for a laptop CPU.
    pub fn desk() -> Self {
        Self {
            n_layers: 4,
            n_heads: 4,
            d_model: 128,
            d_head: 32,
            d_ff: swiglu_width(128),
            vocab_size: DEFAULT_VOCAB,
            seq_len: 256,
            mlp: MlpKind::SwiGlu,
            tie_embeddings: false,
            position: PositionKind::Rope,
            rope_base: default_rope_base(),
            init_std: default_init_std(),
        }
    }

    /// Minimal model for unit tests.
    pub fn tiny() -> Self {
        Self {
            n_layers: 2,
            n_heads: 2,
            d_model: 16,
            d_head: 8,
            d_ff: swiglu_width(16),
            vocab_size: DEFAULT_VOCAB,
            seq_len: 8,
            mlp: MlpKind::SwiGlu,
            tie_embeddings: false,
            position: PositionKind::Rope,
            rope_base: default_rope_base(),
            init_std: default_init_std(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_head", self.d_head),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("seq_len", self.seq_len),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if self.n_heads * self.d_head != self.d_model {
            return Err(Error::Config(format!(
                "d_model {} != n_heads {} x d_head {}",
                self.d_model, self.n_heads, self.d_head
            )));
        }
        if self.position == PositionKind::Rope && !self.d_head.is_multiple_of(2) {
            return Err(Error::Config("rope needs an even d_head".into()));
        }
        if !(self.init_std > 0.0) {
            return Err(Error::Config("init_std must be positive".into()));
        }
        Ok(())
    }
}
