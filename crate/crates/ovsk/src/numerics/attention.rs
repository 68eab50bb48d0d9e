//! Multi-head attention with an optional additive bias per head. The bias is
//! how attention masks enter: allowed positions carry 0, disallowed carry a
//! large negative value, and the bias is always treated as a constant.

use crate::error::{Error, Result};

use super::ops::{mm, mm_at, mm_bt};
use super::scalar::Scalar;
use super::tensor::Tensor;

impl<T: Scalar> Tensor<T> {
    /// [s, h·d] -> [h, s, d]
    pub fn split_heads(&self, heads: usize) -> Result<Tensor<T>> {
        if self.ndim() != 2 || !self.shape()[1].is_multiple_of(heads) {
            return Err(Error::Shape {
                op: "split_heads",
                detail: format!("cannot split {:?} into {heads} heads", self.shape()),
            });
        }
        let (s, width) = (self.shape()[0], self.shape()[1]);
        let d = width / heads;
        let src = self.data();
        let mut data = vec![T::zero(); s * width];
        for hd in 0..heads {
            for i in 0..s {
                for j in 0..d {
                    data[(hd * s + i) * d + j] = src[i * width + hd * d + j];
                }
            }
        }
        drop(src);
        let x = self.clone();
        Tensor::from_op(
            "split_heads",
            vec![heads, s, d],
            data,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut delta = vec![T::zero(); s * width];
                for hd in 0..heads {
                    for i in 0..s {
                        for j in 0..d {
                            delta[i * width + hd * d + j] = g[(hd * s + i) * d + j];
                        }
                    }
                }
                x.accum_grad(&delta);
            }),
        )
    }

    /// [h, s, d] -> [s, h·d]
    pub fn merge_heads(&self) -> Result<Tensor<T>> {
        if self.ndim() != 3 {
            return Err(Error::Shape {
                op: "merge_heads",
                detail: format!("expects [h,s,d] operand, got {:?}", self.shape()),
            });
        }
        let (heads, s, d) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        let width = heads * d;
        let src = self.data();
        let mut data = vec![T::zero(); s * width];
        for hd in 0..heads {
            for i in 0..s {
                for j in 0..d {
                    data[i * width + hd * d + j] = src[(hd * s + i) * d + j];
                }
            }
        }
        drop(src);
        let x = self.clone();
        Tensor::from_op(
            "merge_heads",
            vec![s, width],
            data,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut delta = vec![T::zero(); s * width];
                for hd in 0..heads {
                    for i in 0..s {
                        for j in 0..d {
                            delta[(hd * s + i) * d + j] = g[i * width + hd * d + j];
                        }
                    }
                }
                x.accum_grad(&delta);
            }),
        )
    }
}

/// Scaled dot-product attention over per-head batches with an optional
/// additive score bias. `q`: [h,sq,d], `k`/`v`: [h,sk,d], `bias`: [h,sq,sk].
pub fn scaled_dot_product_attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    if q.ndim() != 3 || k.ndim() != 3 || v.ndim() != 3 {
        return Err(Error::Shape {
            op: "attention",
            detail: "q, k, v must be [heads, seq, dim]".into(),
        });
    }
    let (h, sq, d) = (q.shape()[0], q.shape()[1], q.shape()[2]);
    let (hk, sk, dk) = (k.shape()[0], k.shape()[1], k.shape()[2]);
    if hk != h || dk != d || v.shape() != [h, sk, d] {
        return Err(Error::Shape {
            op: "attention",
            detail: format!("incompatible q/k/v shapes {:?} {:?} {:?}", q.shape(), k.shape(), v.shape()),
        });
    }
    if let Some(b) = bias {
        if b.shape() != [h, sq, sk] {
            return Err(Error::Shape {
                op: "attention",
                detail: format!("bias {:?}, expected [{h}, {sq}, {sk}]", b.shape()),
            });
        }
        if b.requires_grad() {
            return Err(Error::Shape {
                op: "attention",
                detail: "additive bias must be a constant".into(),
            });
        }
    }
    let scale = T::one() / T::cast(d as f64).sqrt();
    let qd = q.data();
    let kd = k.data();
    let vd = v.data();
    let bd = bias.map(|b| b.to_vec());

    let mut probs = vec![T::zero(); h * sq * sk];
    let mut out = vec![T::zero(); h * sq * d];
    for hd in 0..h {
        let qh = &qd[hd * sq * d..(hd + 1) * sq * d];
        let kh = &kd[hd * sk * d..(hd + 1) * sk * d];
        let vh = &vd[hd * sk * d..(hd + 1) * sk * d];
        let mut scores = mm_bt(qh, kh, sq, sk, d);
        for sval in scores.iter_mut() {
            *sval *= scale;
        }
        if let Some(bd) = &bd {
            let bh = &bd[hd * sq * sk..(hd + 1) * sq * sk];
            for (sval, &bv) in scores.iter_mut().zip(bh) {
                *sval += bv;
            }
        }
        let ph = &mut probs[hd * sq * sk..(hd + 1) * sq * sk];
        for i in 0..sq {
            let row = &mut scores[i * sk..(i + 1) * sk];
            let mx = row.iter().copied().fold(row[0], T::max);
            let mut denom = T::zero();
            for val in row.iter_mut() {
                *val = (*val - mx).exp();
                denom += *val;
            }
            for (j, val) in row.iter().enumerate() {
                ph[i * sk + j] = *val / denom;
            }
        }
        let oh = mm(ph, vh, sq, sk, d);
        out[hd * sq * d..(hd + 1) * sq * d].copy_from_slice(&oh);
    }
    drop(qd);
    drop(kd);
    drop(vd);

    let (qc, kc, vc) = (q.clone(), k.clone(), v.clone());
    Tensor::from_op(
        "attention",
        vec![h, sq, d],
        out,
        vec![q.clone(), k.clone(), v.clone()],
        Box::new(move |g, _| {
            let qd = qc.data();
            let kd = kc.data();
            let vd = vc.data();
            let mut dq = vec![T::zero(); h * sq * d];
            let mut dkk = vec![T::zero(); h * sk * d];
            let mut dv = vec![T::zero(); h * sk * d];
            for hd in 0..h {
                let qh = &qd[hd * sq * d..(hd + 1) * sq * d];
                let kh = &kd[hd * sk * d..(hd + 1) * sk * d];
                let vh = &vd[hd * sk * d..(hd + 1) * sk * d];
                let ph = &probs[hd * sq * sk..(hd + 1) * sq * sk];
                let gh = &g[hd * sq * d..(hd + 1) * sq * d];

                dv[hd * sk * d..(hd + 1) * sk * d].copy_from_slice(&mm_at(ph, gh, sq, sk, d));
                let dp = mm_bt(gh, vh, sq, sk, d);
                let mut ds = vec![T::zero(); sq * sk];
                for i in 0..sq {
                    let mut dot = T::zero();
                    for j in 0..sk {
                        dot += dp[i * sk + j] * ph[i * sk + j];
                    }
                    for j in 0..sk {
                        ds[i * sk + j] = ph[i * sk + j] * (dp[i * sk + j] - dot) * scale;
                    }
                }
                let dqh = mm(&ds, kh, sq, sk, d);
                dq[hd * sq * d..(hd + 1) * sq * d].copy_from_slice(&dqh);
                let dkh = mm_at(&ds, qh, sq, sk, d);
                dkk[hd * sk * d..(hd + 1) * sk * d].copy_from_slice(&dkh);
            }
            drop(qd);
            drop(kd);
            drop(vd);
            qc.accum_grad(&dq);
            kc.accum_grad(&dkk);
            vc.accum_grad(&dv);
        }),
    )
}

/// Projection weights for one multi-head attention layer.
pub struct AttentionParams<T: Scalar> {
    pub heads: usize,
    pub wq: Tensor<T>,
    pub bq: Tensor<T>,
    pub wk: Tensor<T>,
    pub bk: Tensor<T>,
    pub wv: Tensor<T>,
    pub bv: Tensor<T>,
    pub wo: Tensor<T>,
    pub bo: Tensor<T>,
}

impl<T: Scalar> AttentionParams<T> {
    pub fn tensors(&self) -> [&Tensor<T>; 8] {
        [&self.wq, &self.bq, &self.wk, &self.bk, &self.wv, &self.bv, &self.wo, &self.bo]
    }
}

/// Multi-head attention where queries come from `queries` and keys/values
/// from `memory`. Self-attention is the `memory == queries` case. `bias`,
/// when given, is a per-head additive score mask of shape
/// [heads, len(queries), len(memory)].
pub fn multi_head_attention<T: Scalar>(
    queries: &Tensor<T>,
    memory: &Tensor<T>,
    params: &AttentionParams<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let q = queries.matmul(&params.wq)?.add_bias(&params.bq)?.split_heads(params.heads)?;
    let k = memory.matmul(&params.wk)?.add_bias(&params.bk)?.split_heads(params.heads)?;
    let v = memory.matmul(&params.wv)?.add_bias(&params.bv)?.split_heads(params.heads)?;
    let attended = scaled_dot_product_attention(&q, &k, &v, bias)?;
    attended.merge_heads()?.matmul(&params.wo)?.add_bias(&params.bo)
}
