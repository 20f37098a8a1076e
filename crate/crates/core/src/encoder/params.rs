use rand::Rng;

use super::config::EncoderConfig;
use crate::error::{Error, Result};
use crate::params::{truncated_normal, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Prefix of every task-head parameter name.
pub const HEAD_PREFIX: &str = "head.";

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingIds {
    pub word: ParamId,
    pub segment: ParamId,
    pub position: ParamId,
    pub text_ln_gamma: ParamId,
    pub text_ln_beta: ParamId,
    pub img_feature: ParamId,
    pub object_proj_w: ParamId,
    pub object_proj_b: ParamId,
    pub object_ln_gamma: ParamId,
    pub object_ln_beta: ParamId,
}

/// Multi-head attention sublayer (projections, output, residual norm).
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionIds {
    pub q_w: ParamId,
    pub q_b: ParamId,
    pub k_w: ParamId,
    pub k_b: ParamId,
    pub v_w: ParamId,
    pub v_b: ParamId,
    pub o_w: ParamId,
    pub o_b: ParamId,
    pub ln_gamma: ParamId,
    pub ln_beta: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FfnIds {
    pub inter_w: ParamId,
    pub inter_b: ParamId,
    pub out_w: ParamId,
    pub out_b: ParamId,
    pub ln_gamma: ParamId,
    pub ln_beta: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerIds {
    pub self_attn: AttentionIds,
    pub ffn: FfnIds,
    /// Present only above the split layer.
    pub cross_attn: Option<AttentionIds>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayout {
    pub embeddings: EmbeddingIds,
    /// `layers[l - 1]` holds layer `l`.
    pub layers: Vec<LayerIds>,
}

/// The single parameter store: encoder weights read by both modes plus any
/// task heads registered on top.
#[derive(Debug, Clone, PartialEq)]
pub struct SharedParams {
    pub config: EncoderConfig,
    pub store: ParamStore,
    pub layout: EncoderLayout,
}

struct Builder<'a, R> {
    store: &'a mut ParamStore,
    rng: &'a mut R,
    std: f64,
}

impl<R: Rng> Builder<'_, R> {
    fn weight(&mut self, name: String, shape: &[usize]) -> Result<ParamId> {
        let t = truncated_normal(shape, self.std, self.rng);
        self.store.insert(name, t)
    }

    fn zeros(&mut self, name: String, shape: &[usize]) -> Result<ParamId> {
        self.store.insert(name, Tensor::zeros(shape))
    }

    fn ones(&mut self, name: String, shape: &[usize]) -> Result<ParamId> {
        self.store.insert(name, Tensor::full(shape, 1.0))
    }

    fn attention(&mut self, prefix: &str, d: usize) -> Result<AttentionIds> {
        let lin = |b: &mut Self, p: &str| -> Result<(ParamId, ParamId)> {
            Ok((
                b.weight(format!("{prefix}.{p}.weight"), &[d, d])?,
                b.zeros(format!("{prefix}.{p}.bias"), &[d])?,
            ))
        };
        let (q_w, q_b) = lin(self, "query")?;
        let (k_w, k_b) = lin(self, "key")?;
        let (v_w, v_b) = lin(self, "value")?;
        let (o_w, o_b) = lin(self, "output")?;
        Ok(AttentionIds {
            q_w,
            q_b,
            k_w,
            k_b,
            v_w,
            v_b,
            o_w,
            o_b,
            ln_gamma: self.ones(format!("{prefix}.ln.gamma"), &[d])?,
            ln_beta: self.zeros(format!("{prefix}.ln.beta"), &[d])?,
        })
    }
}

impl SharedParams {
    /// Fresh parameters: truncated-normal weights, zero biases, unit gains.
    pub fn init(config: &EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let d = config.hidden_dim;
        let f = config.ffn_dim;
        let obj_in = config.object_feature_dim + 4;
        let mut store = ParamStore::new();
        let mut b = Builder {
            store: &mut store,
            rng,
            std: config.init_std,
        };
        let embeddings = EmbeddingIds {
            word: b.weight("embeddings.word".into(), &[config.vocab_size, d])?,
            segment: b.weight("embeddings.segment".into(), &[2, d])?,
            position: b.weight("embeddings.position".into(), &[config.max_positions(), d])?,
            text_ln_gamma: b.ones("embeddings.text_ln.gamma".into(), &[d])?,
            text_ln_beta: b.zeros("embeddings.text_ln.beta".into(), &[d])?,
            img_feature: b.weight("embeddings.img_feature".into(), &[1, obj_in])?,
            object_proj_w: b.weight("embeddings.object_proj.weight".into(), &[obj_in, d])?,
            object_proj_b: b.zeros("embeddings.object_proj.bias".into(), &[d])?,
            object_ln_gamma: b.ones("embeddings.object_ln.gamma".into(), &[d])?,
            object_ln_beta: b.zeros("embeddings.object_ln.beta".into(), &[d])?,
        };
        let mut layers = Vec::with_capacity(config.num_layers);
        for l in 1..=config.num_layers {
            let self_attn = b.attention(&format!("layer.{l}.self_attn"), d)?;
            let ffn = FfnIds {
                inter_w: b.weight(format!("layer.{l}.ffn.inter.weight"), &[d, f])?,
                inter_b: b.zeros(format!("layer.{l}.ffn.inter.bias"), &[f])?,
                out_w: b.weight(format!("layer.{l}.ffn.output.weight"), &[f, d])?,
                out_b: b.zeros(format!("layer.{l}.ffn.output.bias"), &[d])?,
                ln_gamma: b.ones(format!("layer.{l}.ffn.ln.gamma"), &[d])?,
                ln_beta: b.zeros(format!("layer.{l}.ffn.ln.beta"), &[d])?,
            };
            let cross_attn = if config.has_cross_attention(l) {
                Some(b.attention(&format!("layer.{l}.cross_attn"), d)?)
            } else {
                None
            };
            layers.push(LayerIds {
                self_attn,
                ffn,
                cross_attn,
            });
        }
        Ok(SharedParams {
            config: config.clone(),
            store,
            layout: EncoderLayout { embeddings, layers },
        })
    }

    /// Rebuilds the layout from a store loaded from disk.
    pub fn from_store(config: EncoderConfig, store: ParamStore) -> Result<Self> {
        config.validate()?;
        let id = |n: String| store.id(&n);
        let attention = |p: &str| -> Result<AttentionIds> {
            Ok(AttentionIds {
                q_w: id(format!("{p}.query.weight"))?,
                q_b: id(format!("{p}.query.bias"))?,
                k_w: id(format!("{p}.key.weight"))?,
                k_b: id(format!("{p}.key.bias"))?,
                v_w: id(format!("{p}.value.weight"))?,
                v_b: id(format!("{p}.value.bias"))?,
                o_w: id(format!("{p}.output.weight"))?,
                o_b: id(format!("{p}.output.bias"))?,
                ln_gamma: id(format!("{p}.ln.gamma"))?,
                ln_beta: id(format!("{p}.ln.beta"))?,
            })
        };
        let embeddings = EmbeddingIds {
            word: id("embeddings.word".into())?,
            segment: id("embeddings.segment".into())?,
            position: id("embeddings.position".into())?,
            text_ln_gamma: id("embeddings.text_ln.gamma".into())?,
            text_ln_beta: id("embeddings.text_ln.beta".into())?,
            img_feature: id("embeddings.img_feature".into())?,
            object_proj_w: id("embeddings.object_proj.weight".into())?,
            object_proj_b: id("embeddings.object_proj.bias".into())?,
            object_ln_gamma: id("embeddings.object_ln.gamma".into())?,
            object_ln_beta: id("embeddings.object_ln.beta".into())?,
        };
        let mut layers = Vec::new();
        for l in 1..=config.num_layers {
            let cross_name = format!("layer.{l}.cross_attn");
            let has_cross = store.contains(&format!("{cross_name}.query.weight"));
            if has_cross != config.has_cross_attention(l) {
                return Err(Error::Checkpoint(format!(
                    "layer {l}: cross-attention presence disagrees with split_layer {}",
                    config.split_layer
                )));
            }
            layers.push(LayerIds {
                self_attn: attention(&format!("layer.{l}.self_attn"))?,
                ffn: FfnIds {
                    inter_w: id(format!("layer.{l}.ffn.inter.weight"))?,
                    inter_b: id(format!("layer.{l}.ffn.inter.bias"))?,
                    out_w: id(format!("layer.{l}.ffn.output.weight"))?,
                    out_b: id(format!("layer.{l}.ffn.output.bias"))?,
                    ln_gamma: id(format!("layer.{l}.ffn.ln.gamma"))?,
                    ln_beta: id(format!("layer.{l}.ffn.ln.beta"))?,
                },
                cross_attn: if has_cross { Some(attention(&cross_name)?) } else { None },
            });
        }
        if store.contains(&format!("layer.{}.self_attn.query.weight", config.num_layers + 1)) {
            return Err(Error::Checkpoint("store holds more layers than config".into()));
        }
        let shared = SharedParams {
            config,
            store,
            layout: EncoderLayout { embeddings, layers },
        };
        shared.check_shapes()?;
        Ok(shared)
    }

    fn check_shapes(&self) -> Result<()> {
        let fresh = SharedParams::init(&self.config, &mut crate::seed::rng(0))?;
        for (_, name, t) in fresh.store.iter() {
            let have = self.store.by_name(name)?;
            if have.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "{name}: shape {:?} does not match config shape {:?}",
                    have.shape(),
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    /// Registers a task-head parameter unless one with that name exists.
    pub fn ensure_head(&mut self, name: &str, shape: &[usize], init: HeadInit, rng: &mut impl Rng) -> Result<ParamId> {
        let full = format!("{HEAD_PREFIX}{name}");
        if let Ok(id) = self.store.id(&full) {
            if self.store.get(id).shape() != shape {
                return Err(Error::shape("ensure_head", self.store.get(id).shape(), shape));
            }
            return Ok(id);
        }
        let t = match init {
            HeadInit::Normal => truncated_normal(shape, self.config.init_std, rng),
            HeadInit::Zeros => Tensor::zeros(shape),
            HeadInit::Ones => Tensor::full(shape, 1.0),
        };
        self.store.insert(full, t)
    }

    /// Scalar count of the encoder part (everything except task heads).
    pub fn encoder_param_count(&self) -> usize {
        self.store.count_where(|n| !n.starts_with(HEAD_PREFIX))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadInit {
    Normal,
    Zeros,
    Ones,
}
