//! Attention-map export.

use serde::{Deserialize, Serialize};

use semvlp_core::encoder::{AttentionKind, Dropout, Mode, SharedParams, TokenSet};
use semvlp_core::synthworld::{Record, Vocab};
use semvlp_core::tensor::Graph;

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DumpedMap {
    /// 1-based layer index.
    pub layer: usize,
    pub head: usize,
    pub kind: AttentionKind,
    pub queries: TokenSet,
    pub keys: TokenSet,
    pub row_labels: Vec<String>,
    pub col_labels: Vec<String>,
    pub weights: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionDump {
    pub mode: Mode,
    pub scene_id: u64,
    /// Caption tokens, [CLS] and [SEP] included.
    pub text_labels: Vec<String>,
    /// `[IMG]` followed by one label per object.
    pub object_labels: Vec<String>,
    pub maps: Vec<DumpedMap>,
}

/// Layer/head restriction of a dump; `None` keeps everything.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DumpFilter {
    pub layer: Option<usize>,
    pub head: Option<usize>,
}

fn labels(set: TokenSet, text: &[String], objects: &[String]) -> Vec<String> {
    match set {
        TokenSet::Text => text.to_vec(),
        TokenSet::Image => objects.to_vec(),
        TokenSet::Joint => objects.iter().chain(text).cloned().collect(),
    }
}

/// Every attention matrix of one forward pass on `record`'s fine caption.
pub fn dump_attention(
    params: &SharedParams,
    vocab: &Vocab,
    record: &Record,
    mode: Mode,
    filter: DumpFilter,
) -> Result<AttentionDump> {
    let cfg = &params.config;
    if let Some(l) = filter.layer.filter(|l| *l == 0 || *l > cfg.num_layers) {
        return Err(HarnessError::Usage(format!("layer {l} outside 1..={}", cfg.num_layers)));
    }
    if let Some(h) = filter.head.filter(|h| *h >= cfg.num_heads) {
        return Err(HarnessError::Usage(format!("head {h} outside 0..{}", cfg.num_heads)));
    }
    let text = &record.fine;
    let text_labels = vocab.decode(text);
    let object_labels: Vec<String> = std::iter::once("[IMG]".to_string())
        .chain((1..=record.objects.len()).map(|i| format!("obj{i}")))
        .collect();
    let g = Graph::new();
    let enc = params.forward(&g, mode, text, &record.objects, &mut Dropout::off())?;
    let maps = enc
        .attention
        .iter()
        .filter(|(l, _)| filter.layer.is_none_or(|x| x == l.layer) && filter.head.is_none_or(|x| x == l.head))
        .map(|(l, w)| DumpedMap {
            layer: l.layer,
            head: l.head,
            kind: l.kind,
            queries: l.queries,
            keys: l.keys,
            row_labels: labels(l.queries, &text_labels, &object_labels),
            col_labels: labels(l.keys, &text_labels, &object_labels),
            weights: w.value().to_rows(),
        })
        .collect();
    Ok(AttentionDump {
        mode,
        scene_id: record.scene.scene_id,
        text_labels,
        object_labels,
        maps,
    })
}

impl AttentionDump {
    /// Image-query, text-key weights at (layer, head): the image rows and
    /// text columns of the joint map in single stream, the cross-attention
    /// map in two stream. `None` where no such block exists.
    pub fn image_to_text(&self, layer: usize, head: usize) -> Option<Vec<Vec<f64>>> {
        let n_img = self.object_labels.len();
        self.maps
            .iter()
            .filter(|m| m.layer == layer && m.head == head)
            .find_map(|m| match (m.queries, m.keys) {
                (TokenSet::Joint, TokenSet::Joint) => Some(m.weights[..n_img].iter().map(|r| r[n_img..].to_vec()).collect()),
                (TokenSet::Image, TokenSet::Text) => Some(m.weights.clone()),
                _ => None,
            })
    }
}
