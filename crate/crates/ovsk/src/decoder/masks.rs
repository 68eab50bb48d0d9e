use crate::error::{Error, Result};
use crate::numerics::concat;
use crate::Tensor;

/// Mask logits from per-query embeddings: out[h,w,q] = feat[h,w,:]·emb[q,:].
pub fn compute_masks(mask_features: &Tensor, embeddings: &Tensor) -> Result<Tensor> {
    if mask_features.ndim() != 3 || embeddings.ndim() != 2 {
        return Err(Error::Shape {
            op: "compute_masks",
            detail: format!("features {:?}, embeddings {:?}", mask_features.shape(), embeddings.shape()),
        });
    }
    let (h, w, c) = (
        mask_features.shape()[0],
        mask_features.shape()[1],
        mask_features.shape()[2],
    );
    if embeddings.shape()[1] != c {
        return Err(Error::Shape {
            op: "compute_masks",
            detail: format!("channel dims disagree: {c} vs {}", embeddings.shape()[1]),
        });
    }
    let n = embeddings.shape()[0];
    mask_features
        .reshape(vec![h * w, c])?
        .matmul(&embeddings.transpose2d()?)?
        .reshape(vec![h, w, n])
}

/// Per-head mask logits. `per_head` is N×(C·heads); head `h` of query `q`
/// uses the h-th C-chunk of its row, with the same dot-product rule as the
/// plain masks. Output is H×W×heads×N.
pub fn compute_attention_masks(mask_features: &Tensor, per_head: &Tensor, heads: usize) -> Result<Tensor> {
    if mask_features.ndim() != 3 || per_head.ndim() != 2 {
        return Err(Error::Shape {
            op: "compute_attention_masks",
            detail: format!("features {:?}, per-head {:?}", mask_features.shape(), per_head.shape()),
        });
    }
    let (h, w, c) = (
        mask_features.shape()[0],
        mask_features.shape()[1],
        mask_features.shape()[2],
    );
    if per_head.shape()[1] != c * heads {
        return Err(Error::Shape {
            op: "compute_attention_masks",
            detail: format!(
                "per-head dim {} is not embed dim {c} × heads {heads}",
                per_head.shape()[1]
            ),
        });
    }
    let n = per_head.shape()[0];
    let flat = mask_features.reshape(vec![h * w, c])?;
    let mut slices = Vec::with_capacity(heads);
    for head in 0..heads {
        let chunk = per_head.narrow(1, head * c, c)?;
        let logits = flat.matmul(&chunk.transpose2d()?)?; // HW×N
        slices.push(logits.reshape(vec![h * w, 1, n])?);
    }
    concat(&slices, 1)?.reshape(vec![h, w, heads, n])
}

/// Soft mask pooling of a frozen feature grid, outside the gradient tape:
/// weights = sigmoid(resize(masks → feature grid)), one weighted mean per
/// query, then L2-normalized rows. Near-empty weight maps fall back to the
/// uniform average.
pub fn mask_pooling(masks: &Tensor, frozen_grid: &Tensor) -> Result<Tensor> {
    if masks.ndim() != 3 || frozen_grid.ndim() != 3 {
        return Err(Error::Shape {
            op: "mask_pooling",
            detail: format!("masks {:?}, grid {:?}", masks.shape(), frozen_grid.shape()),
        });
    }
    let n = masks.shape()[2];
    let (gh, gw, c) = (
        frozen_grid.shape()[0],
        frozen_grid.shape()[1],
        frozen_grid.shape()[2],
    );
    let resized = masks.detach().bilinear_resize(gh, gw)?;
    let weights = resized.sigmoid()?;
    let wd = weights.data();
    let fd = frozen_grid.data();
    let cells = gh * gw;
    let mut out = vec![0.0f64; n * c];
    for q in 0..n {
        let mut denom = 0.0;
        for cell in 0..cells {
            denom += wd[cell * n + q];
        }
        let row = &mut out[q * c..(q + 1) * c];
        if denom < 1e-6 {
            for cell in 0..cells {
                for ch in 0..c {
                    row[ch] += fd[cell * c + ch];
                }
            }
            for v in row.iter_mut() {
                *v /= cells as f64;
            }
        } else {
            for cell in 0..cells {
                let wq = wd[cell * n + q];
                for ch in 0..c {
                    row[ch] += wq * fd[cell * c + ch];
                }
            }
            for v in row.iter_mut() {
                *v /= denom;
            }
        }
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-12 {
            return Err(Error::Degenerate { op: "mask_pooling" });
        }
        for v in row.iter_mut() {
            *v /= norm;
        }
    }
    drop(wd);
    drop(fd);
    Tensor::from_vec(vec![n, c], out)
}
