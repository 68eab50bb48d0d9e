use crate::encoders::{ClipFeatures, VitEncoder};
use crate::error::{Error, Result};
use crate::numerics::concat;
use crate::Tensor;

use super::MASK_OFF;

/// Additive bias over the grid keys for one (query, head): logits > 0 attend
/// freely, the rest are pushed to -1e9. A row with nothing allowed is opened
/// back up instead of producing a NaN softmax.
pub(crate) fn bias_from_logit_row(logits: impl Iterator<Item = f64>, out: &mut [f64]) {
    let mut any_open = false;
    for (slot, l) in out.iter_mut().zip(logits) {
        if l > 0.0 {
            *slot = 0.0;
            any_open = true;
        } else {
            *slot = MASK_OFF;
        }
    }
    if !any_open {
        for slot in out.iter_mut() {
            *slot = 0.0;
        }
    }
}

/// Run the frozen semantic tail over `[queries ∥ tokens]` with per-head
/// attention masks, and project the query rows to unit-norm embeddings.
///
/// Wiring: each query attends to itself and to the grid tokens (per its
/// mask); it never sees the original CLS token or the other queries. The
/// token rows attend among themselves exactly as a plain forward pass would,
/// and never read from the queries.
pub fn mask_attention_decode(
    clip: &VitEncoder,
    feats: &ClipFeatures,
    attention_masks: &Tensor,
    proj_weight: &Tensor,
    proj_bias: &Tensor,
) -> Result<Tensor> {
    if attention_masks.ndim() != 4 {
        return Err(Error::Shape {
            op: "mask_attention_decode",
            detail: format!("attention masks must be H×W×heads×N, got {:?}", attention_masks.shape()),
        });
    }
    let heads = clip.cfg.heads;
    if attention_masks.shape()[2] != heads {
        return Err(Error::Shape {
            op: "mask_attention_decode",
            detail: format!(
                "mask head count {} does not match encoder heads {heads}",
                attention_masks.shape()[2]
            ),
        });
    }
    let n = attention_masks.shape()[3];
    let (gh, gw) = feats.grid;
    let cells = gh * gw;
    let seq = n + 1 + cells;

    // Resize the mask logits to the token grid, off the tape, then binarize.
    let (mh, mw) = (attention_masks.shape()[0], attention_masks.shape()[1]);
    let resized = attention_masks
        .detach()
        .reshape(vec![mh, mw, heads * n])?
        .bilinear_resize(gh, gw)?;
    let md = resized.data();

    let mut bias = vec![0.0f64; heads * seq * seq];
    for head in 0..heads {
        let plane = &mut bias[head * seq * seq..(head + 1) * seq * seq];
        for q in 0..n {
            let row = &mut plane[q * seq..(q + 1) * seq];
            for (other, slot) in row.iter_mut().enumerate().take(n) {
                *slot = if other == q { 0.0 } else { MASK_OFF };
            }
            row[n] = MASK_OFF; // original CLS token
            bias_from_logit_row(
                (0..cells).map(|cell| md[cell * heads * n + head * n + q]),
                &mut row[n + 1..],
            );
        }
        for token_row in n..seq {
            let row = &mut plane[token_row * seq..(token_row + 1) * seq];
            for slot in row.iter_mut().take(n) {
                *slot = MASK_OFF;
            }
        }
    }
    drop(md);
    let bias = Tensor::from_vec(vec![heads, seq, seq], bias)?;

    let cls = feats.mid_tokens.narrow(0, 0, 1)?;
    let mut rows: Vec<Tensor> = vec![cls; n];
    rows.push(feats.mid_tokens.clone());
    let sequence = concat(&rows, 0)?;

    let out = clip.forward_tail(&sequence, Some(&bias))?;
    out.narrow(0, 0, n)?
        .matmul(proj_weight)?
        .add_bias(proj_bias)?
        .l2_normalize_rows()
}
