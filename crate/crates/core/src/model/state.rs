use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::config::{MlpKind, PlacementKind, PlacementStrategy, TransformerConfig};
use crate::error::{Error, Result};
use crate::norm::{NormKind, NormLayer};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamRole {
    Embedding,
    Unembedding,
    Weight,
    Bias,
    Gamma,
    Beta,
}

impl ParamRole {
    /// Roles excluded from decoupled weight decay.
    pub fn skips_decay(self) -> bool {
        matches!(self, Self::Gamma | Self::Beta | Self::Bias)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub role: ParamRole,
    /// Transformer layer that owns the parameter, if any.
    pub layer: Option<usize>,
    pub frozen: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormPosition {
    Input,
    Output,
    Post,
}

/// Normalization site: which params hold its gamma/beta.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NormSite {
    pub kind: NormKind,
    pub gamma: ParamId,
    pub beta: Option<ParamId>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SublayerNorms {
    pub input: Option<NormSite>,
    pub output: Option<NormSite>,
    pub post: Option<NormSite>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionLayout {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub q_norm: Option<NormSite>,
    pub k_norm: Option<NormSite>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MlpLayout {
    SwiGlu {
        gate: ParamId,
        up: ParamId,
        down: ParamId,
    },
    Relu {
        w1: ParamId,
        b1: ParamId,
        w2: ParamId,
        b2: ParamId,
    },
}

impl MlpLayout {
    /// Projection whose output is the module output.
    pub fn output_weight(&self) -> ParamId {
        match *self {
            Self::SwiGlu { down, .. } => down,
            Self::Relu { w2, .. } => w2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerLayout {
    pub attn: AttentionLayout,
    pub mlp: MlpLayout,
    pub attn_norms: SublayerNorms,
    pub mlp_norms: SublayerNorms,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub embedding: ParamId,
    pub embed_norm: Option<NormSite>,
    pub layers: Vec<LayerLayout>,
    pub final_norm: Option<NormSite>,
    /// `None` when tied to the embedding.
    pub unembedding: Option<ParamId>,
}

/// All weights of one model, plus where each sits in the architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState<T> {
    pub config: TransformerConfig,
    pub strategy: PlacementStrategy,
    pub params: Vec<Param<T>>,
    pub layout: Layout,
}

struct Builder<'a, T> {
    params: Vec<Param<T>>,
    config: &'a TransformerConfig,
    strategy: &'a PlacementStrategy,
    seed: u64,
}

/// FNV-1a, used to give every parameter its own RNG stream.
fn name_hash(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

/// `N(0, std^2)` truncated at three standard deviations by rejection.
pub(crate) fn truncated_normal(rng: &mut impl Rng, std: f64) -> f64 {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 3.0 {
            return z * std;
        }
    }
}

impl<T: Scalar> Builder<'_, T> {
    fn push(&mut self, name: String, value: Tensor<T>, role: ParamRole, layer: Option<usize>, frozen: bool) -> ParamId {
        self.params.push(Param {
            name,
            value,
            role,
            layer,
            frozen,
        });
        ParamId(self.params.len() - 1)
    }

    /// Weights are drawn from a stream keyed by (seed, name): the same seed
    /// gives the same projections under every placement strategy.
    fn weight(&mut self, name: String, shape: Vec<usize>, role: ParamRole, layer: Option<usize>) -> ParamId {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(name_hash(&name));
        let n: usize = shape.iter().product();
        let std = self.config.init_std;
        let data = (0..n)
            .map(|_| T::from_f64_lossy(truncated_normal(&mut rng, std)))
            .collect();
        let t = Tensor::new(shape, data).expect("shape matches");
        self.push(name, t, role, layer, false)
    }

    fn zeros(&mut self, name: String, len: usize, role: ParamRole, layer: Option<usize>) -> ParamId {
        self.push(name, Tensor::zeros(vec![len]), role, layer, false)
    }

    fn norm(&mut self, name: String, dim: usize, layer: Option<usize>, frozen: bool) -> NormSite {
        let kind = self.strategy.norm_kind;
        let gamma = self.push(
            format!("{name}.gamma"),
            Tensor::full(vec![dim], T::one()),
            ParamRole::Gamma,
            layer,
            frozen,
        );
        let beta = (kind == NormKind::LayerNorm).then(|| {
            self.push(
                format!("{name}.beta"),
                Tensor::zeros(vec![dim]),
                ParamRole::Beta,
                layer,
                false,
            )
        });
        NormSite { kind, gamma, beta }
    }

    fn sublayer_norms(&mut self, prefix: &str, layer: usize) -> SublayerNorms {
        let frozen = self.strategy.output_ln_frozen;
        let d = self.config.d_model;
        let l = Some(layer);
        match self.strategy.kind {
            PlacementKind::PostLn => SublayerNorms {
                post: Some(self.norm(format!("{prefix}.post_norm"), d, l, false)),
                ..Default::default()
            },
            PlacementKind::PreLn => SublayerNorms {
                input: Some(self.norm(format!("{prefix}.in_norm"), d, l, false)),
                ..Default::default()
            },
            PlacementKind::PeriLn => SublayerNorms {
                input: Some(self.norm(format!("{prefix}.in_norm"), d, l, false)),
                output: Some(self.norm(format!("{prefix}.out_norm"), d, l, frozen)),
                post: None,
            },
            PlacementKind::PeriLnQkNorm => SublayerNorms {
                output: Some(self.norm(format!("{prefix}.out_norm"), d, l, frozen)),
                ..Default::default()
            },
        }
    }
}

/// Fresh model: projections ~ N(0, init_std^2) truncated at 3 sigma, all
/// gamma = 1, beta and biases 0. Deterministic in `seed`.
pub fn init_parameters<T: Scalar>(
    config: &TransformerConfig,
    strategy: &PlacementStrategy,
    seed: u64,
) -> Result<ModelState<T>> {
    config.validate()?;
    strategy.validate()?;
    let mut b = Builder {
        params: Vec::new(),
        config,
        strategy,
        seed,
    };
    let d = config.d_model;
    let embedding = b.weight(
        "embedding".into(),
        vec![config.vocab_size, d],
        ParamRole::Embedding,
        None,
    );
    let embed_norm = strategy
        .embedding_ln
        .then(|| b.norm("embed_norm".into(), d, None, false));
    let mut layers = Vec::with_capacity(config.n_layers);
    for l in 0..config.n_layers {
        let p = format!("layers.{l}");
        let attn_norms = b.sublayer_norms(&format!("{p}.attn"), l);
        let lw = Some(l);
        let w = ParamRole::Weight;
        let wq = b.weight(format!("{p}.attn.wq"), vec![d, d], w, lw);
        let wk = b.weight(format!("{p}.attn.wk"), vec![d, d], w, lw);
        let wv = b.weight(format!("{p}.attn.wv"), vec![d, d], w, lw);
        let wo = b.weight(format!("{p}.attn.wo"), vec![d, d], w, lw);
        let (q_norm, k_norm) = if strategy.kind == PlacementKind::PeriLnQkNorm {
            (
                Some(b.norm(format!("{p}.attn.q_norm"), config.d_head, lw, false)),
                Some(b.norm(format!("{p}.attn.k_norm"), config.d_head, lw, false)),
            )
        } else {
            (None, None)
        };
        let mlp_norms = b.sublayer_norms(&format!("{p}.mlp"), l);
        let f = config.d_ff;
        let mlp = match config.mlp {
            MlpKind::SwiGlu => MlpLayout::SwiGlu {
                gate: b.weight(format!("{p}.mlp.w_gate"), vec![d, f], w, lw),
                up: b.weight(format!("{p}.mlp.w_up"), vec![d, f], w, lw),
                down: b.weight(format!("{p}.mlp.w_down"), vec![f, d], w, lw),
            },
            MlpKind::Relu => MlpLayout::Relu {
                w1: b.weight(format!("{p}.mlp.w1"), vec![d, f], w, lw),
                b1: b.zeros(format!("{p}.mlp.b1"), f, ParamRole::Bias, lw),
                w2: b.weight(format!("{p}.mlp.w2"), vec![f, d], w, lw),
                b2: b.zeros(format!("{p}.mlp.b2"), d, ParamRole::Bias, lw),
            },
        };
        layers.push(LayerLayout {
            attn: AttentionLayout {
                wq,
                wk,
                wv,
                wo,
                q_norm,
                k_norm,
            },
            mlp,
            attn_norms,
            mlp_norms,
        });
    }
    let final_norm = strategy.final_ln.then(|| b.norm("final_norm".into(), d, None, false));
    let unembedding = (!config.tie_embeddings).then(|| {
        b.weight(
            "unembedding".into(),
            vec![d, config.vocab_size],
            ParamRole::Unembedding,
            None,
        )
    });
    Ok(ModelState {
        config: *config,
        strategy: *strategy,
        params: b.params,
        layout: Layout {
            embedding,
            embed_norm,
            layers,
            final_norm,
            unembedding,
        },
    })
}

impl<T: Scalar> ModelState<T> {
    pub fn param(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Materializes a site as a standalone [`NormLayer`].
    pub fn norm_layer(&self, site: NormSite) -> NormLayer<T> {
        let g = self.param(site.gamma);
        NormLayer {
            kind: site.kind,
            gamma: g.value.clone(),
            beta: site.beta.map(|b| self.tensor(b).clone()),
            epsilon: self.strategy.epsilon,
            frozen_gamma: g.frozen,
        }
    }

    /// Output-normalization sites of every layer as `(layer, attn, mlp)`.
    pub fn output_norms(&self) -> Result<Vec<(usize, NormSite, NormSite)>> {
        if !self.strategy.kind.has_output_norm() {
            return Err(Error::NoOutputNorm(self.strategy.kind.to_string()));
        }
        Ok(self
            .layout
            .layers
            .iter()
            .enumerate()
            .map(|(l, ly)| (l, ly.attn_norms.output.unwrap(), ly.mlp_norms.output.unwrap()))
            .collect())
    }

    pub fn clear_grads(&mut self) {
        self.params.iter_mut().for_each(|p| p.value.grad = None);
    }

    /// Converts every parameter to another scalar type.
    pub fn cast<U: Scalar>(&self) -> ModelState<U> {
        ModelState {
            config: self.config,
            strategy: self.strategy,
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    role: p.role,
                    layer: p.layer,
                    frozen: p.frozen,
                })
                .collect(),
            layout: self.layout.clone(),
        }
    }
}
