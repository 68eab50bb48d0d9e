//! Spatial operations on H×W×C tensors: bilinear resampling, 2x nearest
//! upsampling, and a stride-1 same-padded 3x3 convolution.

use crate::error::{Error, Result};

use super::scalar::Scalar;
use super::tensor::Tensor;

/// Per-output-index sampling taps for one axis, align-corners-false:
/// `src = (dst + 0.5) * s/d - 0.5`, edge-clamped. Stored as (lo, hi, t) and
/// applied in lerp form `lo + t·(hi − lo)`, which keeps constants constant
/// to the last bit.
fn resize_taps<T: Scalar>(src: usize, dst: usize) -> Vec<(usize, usize, T)> {
    let ratio = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let pos = (o as f64 + 0.5) * ratio - 0.5;
            let floor = pos.floor();
            let frac = pos - floor;
            let i0 = (floor as isize).clamp(0, src as isize - 1) as usize;
            let i1 = (floor as isize + 1).clamp(0, src as isize - 1) as usize;
            (i0, i1, T::cast(frac))
        })
        .collect()
}

impl<T: Scalar> Tensor<T> {
    /// Bilinear resample of an H×W×C tensor to `oh`×`ow`. Identity when the
    /// size is unchanged; constants stay constant for any size.
    pub fn bilinear_resize(&self, oh: usize, ow: usize) -> Result<Tensor<T>> {
        if self.ndim() != 3 {
            return Err(Error::Shape {
                op: "bilinear_resize",
                detail: format!("expects H×W×C operand, got {:?}", self.shape()),
            });
        }
        if oh == 0 || ow == 0 {
            return Err(Error::Shape {
                op: "bilinear_resize",
                detail: "target extents must be positive".into(),
            });
        }
        let (h, w, c) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        if (h, w) == (oh, ow) {
            // Exact identity, still differentiable.
            return self.reshape(vec![h, w, c]);
        }
        let ytaps = resize_taps::<T>(h, oh);
        let xtaps = resize_taps::<T>(w, ow);
        let src = self.data();
        let mut data = vec![T::zero(); oh * ow * c];
        for (oy, &(y0, y1, ty)) in ytaps.iter().enumerate() {
            for (ox, &(x0, x1, tx)) in xtaps.iter().enumerate() {
                let out = &mut data[(oy * ow + ox) * c..(oy * ow + ox + 1) * c];
                let r00 = &src[(y0 * w + x0) * c..(y0 * w + x0 + 1) * c];
                let r01 = &src[(y0 * w + x1) * c..(y0 * w + x1 + 1) * c];
                let r10 = &src[(y1 * w + x0) * c..(y1 * w + x0 + 1) * c];
                let r11 = &src[(y1 * w + x1) * c..(y1 * w + x1 + 1) * c];
                for ch in 0..c {
                    let top = r00[ch] + tx * (r01[ch] - r00[ch]);
                    let bottom = r10[ch] + tx * (r11[ch] - r10[ch]);
                    out[ch] = top + ty * (bottom - top);
                }
            }
        }
        drop(src);
        let x = self.clone();
        Tensor::from_op(
            "bilinear_resize",
            vec![oh, ow, c],
            data,
            vec![self.clone()],
            Box::new(move |g, _| {
                let one = T::one();
                let mut delta = vec![T::zero(); h * w * c];
                for (oy, &(y0, y1, ty)) in ytaps.iter().enumerate() {
                    let (wy0, wy1) = (one - ty, ty);
                    for (ox, &(x0, x1, tx)) in xtaps.iter().enumerate() {
                        let (wx0, wx1) = (one - tx, tx);
                        let grow = &g[(oy * ow + ox) * c..(oy * ow + ox + 1) * c];
                        for ch in 0..c {
                            let gv = grow[ch];
                            delta[(y0 * w + x0) * c + ch] += wy0 * wx0 * gv;
                            delta[(y0 * w + x1) * c + ch] += wy0 * wx1 * gv;
                            delta[(y1 * w + x0) * c + ch] += wy1 * wx0 * gv;
                            delta[(y1 * w + x1) * c + ch] += wy1 * wx1 * gv;
                        }
                    }
                }
                x.accum_grad(&delta);
            }),
        )
    }

    /// Nearest-neighbour 2x upsample of an H×W×C tensor.
    pub fn nearest_upsample2x(&self) -> Result<Tensor<T>> {
        if self.ndim() != 3 {
            return Err(Error::Shape {
                op: "nearest_upsample2x",
                detail: format!("expects H×W×C operand, got {:?}", self.shape()),
            });
        }
        let (h, w, c) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        let (oh, ow) = (2 * h, 2 * w);
        let src = self.data();
        let mut data = vec![T::zero(); oh * ow * c];
        for oy in 0..oh {
            for ox in 0..ow {
                let sp = ((oy / 2) * w + ox / 2) * c;
                let dp = (oy * ow + ox) * c;
                data[dp..dp + c].copy_from_slice(&src[sp..sp + c]);
            }
        }
        drop(src);
        let x = self.clone();
        Tensor::from_op(
            "nearest_upsample2x",
            vec![oh, ow, c],
            data,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut delta = vec![T::zero(); h * w * c];
                for oy in 0..oh {
                    for ox in 0..ow {
                        let sp = ((oy / 2) * w + ox / 2) * c;
                        let dp = (oy * ow + ox) * c;
                        for ch in 0..c {
                            delta[sp + ch] += g[dp + ch];
                        }
                    }
                }
                x.accum_grad(&delta);
            }),
        )
    }

    /// 3x3 convolution, stride 1, same padding. Input H×W×Ci, kernel
    /// [3,3,Ci,Co], bias [Co].
    pub fn conv3x3(&self, kernel: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
        if self.ndim() != 3 {
            return Err(Error::Shape {
                op: "conv3x3",
                detail: format!("expects H×W×C input, got {:?}", self.shape()),
            });
        }
        let (h, w, ci) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        if kernel.ndim() != 4 || kernel.shape()[0] != 3 || kernel.shape()[1] != 3 || kernel.shape()[2] != ci {
            return Err(Error::Shape {
                op: "conv3x3",
                detail: format!("kernel {:?} does not match input channels {ci}", kernel.shape()),
            });
        }
        let co = kernel.shape()[3];
        if bias.shape() != [co] {
            return Err(Error::Shape {
                op: "conv3x3",
                detail: format!("bias {:?} does not match {co} output channels", bias.shape()),
            });
        }
        let src = self.data();
        let kd = kernel.data();
        let bd = bias.data();
        let mut data = vec![T::zero(); h * w * co];
        for y in 0..h {
            for x in 0..w {
                let out = &mut data[(y * w + x) * co..(y * w + x + 1) * co];
                out.copy_from_slice(&bd);
                for ky in 0..3usize {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..3usize {
                        let sx = x as isize + kx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let xrow = &src[((sy as usize) * w + sx as usize) * ci..][..ci];
                        for cin in 0..ci {
                            let xv = xrow[cin];
                            if xv == T::zero() {
                                continue;
                            }
                            let krow = &kd[((ky * 3 + kx) * ci + cin) * co..][..co];
                            for cout in 0..co {
                                out[cout] += xv * krow[cout];
                            }
                        }
                    }
                }
            }
        }
        drop(src);
        drop(kd);
        drop(bd);
        let (xh, kh, bh) = (self.clone(), kernel.clone(), bias.clone());
        Tensor::from_op(
            "conv3x3",
            vec![h, w, co],
            data,
            vec![self.clone(), kernel.clone(), bias.clone()],
            Box::new(move |g, _| {
                let src = xh.data();
                let kd = kh.data();
                let mut dx = vec![T::zero(); h * w * ci];
                let mut dk = vec![T::zero(); 9 * ci * co];
                let mut db = vec![T::zero(); co];
                for y in 0..h {
                    for x in 0..w {
                        let grow = &g[(y * w + x) * co..(y * w + x + 1) * co];
                        for cout in 0..co {
                            db[cout] += grow[cout];
                        }
                        for ky in 0..3usize {
                            let sy = y as isize + ky as isize - 1;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            for kx in 0..3usize {
                                let sx = x as isize + kx as isize - 1;
                                if sx < 0 || sx >= w as isize {
                                    continue;
                                }
                                let sp = ((sy as usize) * w + sx as usize) * ci;
                                for cin in 0..ci {
                                    let xv = src[sp + cin];
                                    let kbase = ((ky * 3 + kx) * ci + cin) * co;
                                    let mut acc = T::zero();
                                    for cout in 0..co {
                                        let gv = grow[cout];
                                        acc += gv * kd[kbase + cout];
                                        dk[kbase + cout] += gv * xv;
                                    }
                                    dx[sp + cin] += acc;
                                }
                            }
                        }
                    }
                }
                drop(src);
                drop(kd);
                xh.accum_grad(&dx);
                kh.accum_grad(&dk);
                bh.accum_grad(&db);
            }),
        )
    }
}
