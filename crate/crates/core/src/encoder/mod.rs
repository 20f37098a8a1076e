//! Input embeddings and the shared Transformer encoder.
//!
//! Every layer `l` owns one self-attention block and one feed-forward block;
//! both modes read the same copy. Layers above `split_layer` additionally own
//! a cross-attention block that only the two-stream image path uses.
//!
//! Single-stream sequence layout: `[IMG] o_1 … o_n [CLS] w_1 … w_m [SEP]`.

mod attention;
pub mod config;
pub mod input;
pub mod params;

pub use attention::{multi_head_attention, AttentionWeights};
pub use config::EncoderConfig;
pub use input::{location_vector, ObjectInput, TextInput};
pub use params::{AttentionIds, EncoderLayout, HeadInit, LayerIds, SharedParams, HEAD_PREFIX};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::params::ParamId;
use crate::seed::{self, SeededRng};
use crate::tensor::{Graph, Tensor, Var};
use config::IMAGE_SEGMENT;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    SingleStream,
    TwoStream,
}

impl Mode {
    pub const BOTH: [Mode; 2] = [Mode::SingleStream, Mode::TwoStream];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::SingleStream => "single_stream",
            Mode::TwoStream => "two_stream",
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    SelfAttention,
    CrossAttention,
}

/// Which token set a side of an attention map ranges over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenSet {
    /// Concatenated image + text sequence.
    Joint,
    Text,
    Image,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AttentionLabel {
    pub mode: Mode,
    pub layer: usize,
    pub head: usize,
    pub kind: AttentionKind,
    pub queries: TokenSet,
    pub keys: TokenSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionMap {
    pub label: AttentionLabel,
    pub weights: Tensor,
}

/// Graph-level encoder result.
#[derive(Debug, Clone)]
pub struct Encoded<'g> {
    pub mode: Mode,
    /// `H^L`, `(m + 2) × d`.
    pub text: Var<'g>,
    /// `O^L`, `(n + 1) × d`, row 0 is [IMG].
    pub objects: Var<'g>,
    /// `1 × d`: [CLS] row (single stream) or [IMG] row (two stream).
    pub pooled: Var<'g>,
    pub attention: Vec<(AttentionLabel, Var<'g>)>,
}

/// Plain-value encoder result.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodingOutput {
    pub mode: Mode,
    pub text: Tensor,
    pub objects: Tensor,
    pub pooled: Vec<f64>,
    pub attention: Vec<AttentionMap>,
}

impl Encoded<'_> {
    pub fn to_output(&self) -> EncodingOutput {
        EncodingOutput {
            mode: self.mode,
            text: self.text.value(),
            objects: self.objects.value(),
            pooled: self.pooled.value().into_data(),
            attention: self
                .attention
                .iter()
                .map(|(label, v)| AttentionMap {
                    label: *label,
                    weights: v.value(),
                })
                .collect(),
        }
    }
}

/// Dropout source for one forward pass. [`Dropout::off`] is deterministic
/// and records no extra nodes.
#[derive(Debug)]
pub struct Dropout {
    rate: f64,
    rng: Option<SeededRng>,
}

impl Dropout {
    pub fn off() -> Self {
        Dropout { rate: 0.0, rng: None }
    }

    pub fn train(rate: f64, seed: u64) -> Self {
        Dropout {
            rate,
            rng: (rate > 0.0).then(|| seed::rng(seed)),
        }
    }

    fn apply<'g>(&mut self, x: Var<'g>) -> Result<Var<'g>> {
        match self.rng.as_mut() {
            Some(rng) => x.dropout(self.rate, rng),
            None => Ok(x),
        }
    }
}

impl SharedParams {
    pub fn var<'g>(&self, g: &'g Graph, id: ParamId) -> Var<'g> {
        g.param(id, self.store.get(id))
    }

    fn attention_weights<'g>(&self, g: &'g Graph, ids: &AttentionIds) -> AttentionWeights<'g> {
        AttentionWeights {
            q_w: self.var(g, ids.q_w),
            q_b: self.var(g, ids.q_b),
            k_w: self.var(g, ids.k_w),
            k_b: self.var(g, ids.k_b),
            v_w: self.var(g, ids.v_w),
            v_b: self.var(g, ids.v_b),
            o_w: self.var(g, ids.o_w),
            o_b: self.var(g, ids.o_b),
        }
    }

    /// `e_i = word[id_i] + segment[seg_i] + position[i]`, then layer norm.
    pub fn embed_text<'g>(&self, g: &'g Graph, text: &TextInput) -> Result<Var<'g>> {
        text.validate(&self.config)?;
        let e = &self.layout.embeddings;
        let positions: Vec<usize> = (0..text.len()).collect();
        let words = self.var(g, e.word).gather_rows(&text.token_ids)?;
        let segments = self.var(g, e.segment).gather_rows(&text.segment_ids)?;
        let pos = self.var(g, e.position).gather_rows(&positions)?;
        words.add(&segments)?.add(&pos)?.layer_norm(
            &self.var(g, e.text_ln_gamma),
            &self.var(g, e.text_ln_beta),
            self.config.layer_norm_eps,
        )
    }

    /// Row 0 projects the learned [IMG] feature; row `j` projects
    /// `f_j ⊕ l_j`. Image rows get segment 1 and no position embedding.
    pub fn embed_objects<'g>(&self, g: &'g Graph, objects: &ObjectInput) -> Result<Var<'g>> {
        objects.validate(&self.config)?;
        let e = &self.layout.embeddings;
        let width = self.config.object_feature_dim + 4;
        let img = self.var(g, e.img_feature);
        let rows = if objects.is_empty() {
            img
        } else {
            let raw = Tensor::new(vec![objects.len(), width], objects.projected_inputs()?)?;
            g.concat_rows(&[img, g.constant(raw)])?
        };
        let projected = rows
            .matmul(&self.var(g, e.object_proj_w))?
            .add_row(&self.var(g, e.object_proj_b))?;
        let segments = self.var(g, e.segment).gather_rows(&vec![IMAGE_SEGMENT; objects.len() + 1])?;
        projected.add(&segments)?.layer_norm(
            &self.var(g, e.object_ln_gamma),
            &self.var(g, e.object_ln_beta),
            self.config.layer_norm_eps,
        )
    }

    /// `LN(x + Attn(x, kv))`
    #[allow(clippy::too_many_arguments)]
    fn attention_sublayer<'g>(
        &self,
        g: &'g Graph,
        ids: &AttentionIds,
        x: Var<'g>,
        kv: Var<'g>,
        dropout: &mut Dropout,
        label: AttentionLabel,
        record: &mut Vec<(AttentionLabel, Var<'g>)>,
    ) -> Result<Var<'g>> {
        let w = self.attention_weights(g, ids);
        let (out, maps) = multi_head_attention(x, kv, None, &w, self.config.num_heads)?;
        record.extend(
            maps.into_iter()
                .enumerate()
                .map(|(h, m)| (AttentionLabel { head: h, ..label }, m)),
        );
        let out = dropout.apply(out)?;
        x.add(&out)?.layer_norm(
            &self.var(g, ids.ln_gamma),
            &self.var(g, ids.ln_beta),
            self.config.layer_norm_eps,
        )
    }

    /// `LN(x + W₂·GELU(W₁x + b₁) + b₂)`
    fn ffn_sublayer<'g>(&self, g: &'g Graph, layer: &LayerIds, x: Var<'g>, dropout: &mut Dropout) -> Result<Var<'g>> {
        let f = &layer.ffn;
        let h = x.matmul(&self.var(g, f.inter_w))?.add_row(&self.var(g, f.inter_b))?.gelu()?;
        let out = h.matmul(&self.var(g, f.out_w))?.add_row(&self.var(g, f.out_b))?;
        let out = dropout.apply(out)?;
        x.add(&out)?
            .layer_norm(&self.var(g, f.ln_gamma), &self.var(g, f.ln_beta), self.config.layer_norm_eps)
    }

    pub fn forward<'g>(
        &self,
        g: &'g Graph,
        mode: Mode,
        text: &TextInput,
        objects: &ObjectInput,
        dropout: &mut Dropout,
    ) -> Result<Encoded<'g>> {
        match mode {
            Mode::SingleStream => self.forward_single(g, text, objects, dropout),
            Mode::TwoStream => self.forward_two(g, text, objects, dropout),
        }
    }

    fn forward_single<'g>(
        &self,
        g: &'g Graph,
        text: &TextInput,
        objects: &ObjectInput,
        dropout: &mut Dropout,
    ) -> Result<Encoded<'g>> {
        let img = dropout.apply(self.embed_objects(g, objects)?)?;
        let txt = dropout.apply(self.embed_text(g, text)?)?;
        let n_img = objects.len() + 1;
        let total = n_img + text.len();
        let mut x = g.concat_rows(&[img, txt])?;
        let mut attention = Vec::new();
        for (i, layer) in self.layout.layers.iter().enumerate() {
            let label = AttentionLabel {
                mode: Mode::SingleStream,
                layer: i + 1,
                head: 0,
                kind: AttentionKind::SelfAttention,
                queries: TokenSet::Joint,
                keys: TokenSet::Joint,
            };
            x = self.attention_sublayer(g, &layer.self_attn, x, x, dropout, label, &mut attention)?;
            x = self.ffn_sublayer(g, layer, x, dropout)?;
        }
        let objects_out = x.slice_rows(0, n_img)?;
        let text_out = x.slice_rows(n_img, total)?;
        let pooled = x.slice_rows(n_img, n_img + 1)?;
        Ok(Encoded {
            mode: Mode::SingleStream,
            text: text_out,
            objects: objects_out,
            pooled,
            attention,
        })
    }

    fn forward_two<'g>(
        &self,
        g: &'g Graph,
        text: &TextInput,
        objects: &ObjectInput,
        dropout: &mut Dropout,
    ) -> Result<Encoded<'g>> {
        let mut attention = Vec::new();
        let base = AttentionLabel {
            mode: Mode::TwoStream,
            layer: 0,
            head: 0,
            kind: AttentionKind::SelfAttention,
            queries: TokenSet::Text,
            keys: TokenSet::Text,
        };

        let mut h = dropout.apply(self.embed_text(g, text)?)?;
        for (i, layer) in self.layout.layers.iter().enumerate() {
            let label = AttentionLabel { layer: i + 1, ..base };
            h = self.attention_sublayer(g, &layer.self_attn, h, h, dropout, label, &mut attention)?;
            h = self.ffn_sublayer(g, layer, h, dropout)?;
        }

        let mut o = dropout.apply(self.embed_objects(g, objects)?)?;
        for (i, layer) in self.layout.layers.iter().enumerate() {
            let label = AttentionLabel {
                layer: i + 1,
                queries: TokenSet::Image,
                keys: TokenSet::Image,
                ..base
            };
            o = self.attention_sublayer(g, &layer.self_attn, o, o, dropout, label, &mut attention)?;
            if let Some(cross) = &layer.cross_attn {
                let label = AttentionLabel {
                    kind: AttentionKind::CrossAttention,
                    keys: TokenSet::Text,
                    ..label
                };
                o = self.attention_sublayer(g, cross, o, h, dropout, label, &mut attention)?;
            }
            o = self.ffn_sublayer(g, layer, o, dropout)?;
        }
        let pooled = o.slice_rows(0, 1)?;
        Ok(Encoded {
            mode: Mode::TwoStream,
            text: h,
            objects: o,
            pooled,
            attention,
        })
    }

    /// Draws a dropout source for a training forward pass.
    pub fn training_dropout(&self, rng: &mut impl Rng) -> Dropout {
        Dropout::train(self.config.dropout_rate, rng.random())
    }
}

/// Encodes the concatenated sequence through all layers; pooled = `h^L_CLS`.
pub fn encode_single_stream(text: &TextInput, objects: &ObjectInput, params: &SharedParams) -> Result<EncodingOutput> {
    let g = Graph::new();
    let enc = params.forward(&g, Mode::SingleStream, text, objects, &mut Dropout::off())?;
    Ok(enc.to_output())
}

/// Encodes text alone, then the image stream with cross attention to the
/// final text states above the split layer; pooled = `o^L_IMG`.
pub fn encode_two_stream(text: &TextInput, objects: &ObjectInput, params: &SharedParams) -> Result<EncodingOutput> {
    let g = Graph::new();
    let enc = params.forward(&g, Mode::TwoStream, text, objects, &mut Dropout::off())?;
    Ok(enc.to_output())
}

pub fn encode(mode: Mode, text: &TextInput, objects: &ObjectInput, params: &SharedParams) -> Result<EncodingOutput> {
    match mode {
        Mode::SingleStream => encode_single_stream(text, objects, params),
        Mode::TwoStream => encode_two_stream(text, objects, params),
    }
}
