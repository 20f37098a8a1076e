use crate::error::{Error, Result};
use crate::tensor::Var;

/// Projection weights of one attention block, already on the graph.
#[derive(Debug, Clone, Copy)]
pub struct AttentionWeights<'g> {
    pub q_w: Var<'g>,
    pub q_b: Var<'g>,
    pub k_w: Var<'g>,
    pub k_b: Var<'g>,
    pub v_w: Var<'g>,
    pub v_b: Var<'g>,
    pub o_w: Var<'g>,
    pub o_b: Var<'g>,
}

/// Scaled dot-product attention with `num_heads` heads.
///
/// `mask`, when given, is row-major `queries × keys`; `false` entries get
/// exactly zero weight. Returns the output-projected context and the
/// per-head attention matrices.
pub fn multi_head_attention<'g>(
    queries: Var<'g>,
    keys_values: Var<'g>,
    mask: Option<&[bool]>,
    w: &AttentionWeights<'g>,
    num_heads: usize,
) -> Result<(Var<'g>, Vec<Var<'g>>)> {
    let qs = queries.shape();
    let ks = keys_values.shape();
    let d = w.q_w.shape()[0];
    if qs.len() != 2 || ks.len() != 2 || qs[1] != d || ks[1] != d {
        return Err(Error::shape("multi_head_attention", &qs, &ks));
    }
    if num_heads == 0 || !d.is_multiple_of(num_heads) {
        return Err(Error::invalid(
            "multi_head_attention",
            format!("{d} not divisible into {num_heads} heads"),
        ));
    }
    let head_dim = d / num_heads;
    let scale = 1.0 / (head_dim as f64).sqrt();

    let q = queries.matmul(&w.q_w)?.add_row(&w.q_b)?;
    let k = keys_values.matmul(&w.k_w)?.add_row(&w.k_b)?;
    let v = keys_values.matmul(&w.v_w)?.add_row(&w.v_b)?;

    let mut contexts = Vec::with_capacity(num_heads);
    let mut maps = Vec::with_capacity(num_heads);
    for h in 0..num_heads {
        let (lo, hi) = (h * head_dim, (h + 1) * head_dim);
        let (qh, kh, vh) = if num_heads == 1 {
            (q, k, v)
        } else {
            (q.slice_cols(lo, hi)?, k.slice_cols(lo, hi)?, v.slice_cols(lo, hi)?)
        };
        let scores = qh.matmul_bt(&kh)?.scale(scale)?;
        let weights = match mask {
            Some(m) => scores.masked_softmax_rows(m)?,
            None => scores.softmax_rows()?,
        };
        contexts.push(weights.matmul(&vh)?);
        maps.push(weights);
    }
    let context = if num_heads == 1 {
        contexts[0]
    } else {
        queries.graph().concat_cols(&contexts)?
    };
    let out = context.matmul(&w.o_w)?.add_row(&w.o_b)?;
    Ok((out, maps))
}
