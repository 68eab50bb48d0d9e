use crate::error::{Error, Result};

use super::scalar::Scalar;
use super::tensor::Tensor;

// ── Matmul kernels ────────────────────────────────────────────────────

/// c[m×n] = a[m×k] · b[k×n], ikj order so the inner loop runs over
/// contiguous rows of `b` and `c`.
pub(crate) fn mm<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += aip * brow[j];
            }
        }
    }
    c
}

/// aᵀ·g where a is m×k and g is m×n: result k×n.
pub(crate) fn mm_at<T: Scalar>(a: &[T], g: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); k * n];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += aip * grow[j];
            }
        }
    }
    out
}

/// g·bᵀ where g is m×n and b is k×n: result m×k.
pub(crate) fn mm_bt<T: Scalar>(g: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * k];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = T::zero();
            for j in 0..n {
                acc += grow[j] * brow[j];
            }
            out[i * k + p] = acc;
        }
    }
    out
}

// ── Shared helpers ────────────────────────────────────────────────────

fn require_same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op,
            detail: format!("operand shapes differ: {:?} vs {:?}", a.shape(), b.shape()),
        });
    }
    Ok(())
}

fn unary<T, Fwd, Dfdx>(x: &Tensor<T>, op: &'static str, fwd: Fwd, dfdx: Dfdx) -> Result<Tensor<T>>
where
    T: Scalar,
    Fwd: Fn(T) -> T,
    Dfdx: Fn(T, T) -> T + 'static,
{
    let data: Vec<T> = x.data().iter().map(|&v| fwd(v)).collect();
    let xc = x.clone();
    Tensor::from_op(
        op,
        x.shape().to_vec(),
        data,
        vec![x.clone()],
        Box::new(move |g, y| {
            let delta: Vec<T> = {
                let xd = xc.data();
                g.iter()
                    .zip(xd.iter().zip(y.iter()))
                    .map(|(&gi, (&xi, &yi))| gi * dfdx(xi, yi))
                    .collect()
            };
            xc.accum_grad(&delta);
        }),
    )
}

// ── Elementwise and scalar ops ────────────────────────────────────────

impl<T: Scalar> Tensor<T> {
    pub fn add(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        require_same_shape("add", self, rhs)?;
        let data: Vec<T> = self.data().iter().zip(rhs.data().iter()).map(|(&a, &b)| a + b).collect();
        let (a, b) = (self.clone(), rhs.clone());
        Tensor::from_op(
            "add",
            self.shape().to_vec(),
            data,
            vec![self.clone(), rhs.clone()],
            Box::new(move |g, _| {
                a.accum_grad(g);
                b.accum_grad(g);
            }),
        )
    }

    pub fn sub(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        require_same_shape("sub", self, rhs)?;
        let data: Vec<T> = self.data().iter().zip(rhs.data().iter()).map(|(&a, &b)| a - b).collect();
        let (a, b) = (self.clone(), rhs.clone());
        Tensor::from_op(
            "sub",
            self.shape().to_vec(),
            data,
            vec![self.clone(), rhs.clone()],
            Box::new(move |g, _| {
                a.accum_grad(g);
                let neg: Vec<T> = g.iter().map(|&v| -v).collect();
                b.accum_grad(&neg);
            }),
        )
    }

    pub fn mul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        require_same_shape("mul", self, rhs)?;
        let data: Vec<T> = self.data().iter().zip(rhs.data().iter()).map(|(&a, &b)| a * b).collect();
        let (a, b) = (self.clone(), rhs.clone());
        Tensor::from_op(
            "mul",
            self.shape().to_vec(),
            data,
            vec![self.clone(), rhs.clone()],
            Box::new(move |g, _| {
                let da: Vec<T> = g.iter().zip(b.data().iter()).map(|(&gi, &bi)| gi * bi).collect();
                let db: Vec<T> = g.iter().zip(a.data().iter()).map(|(&gi, &ai)| gi * ai).collect();
                a.accum_grad(&da);
                b.accum_grad(&db);
            }),
        )
    }

    pub fn div(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        require_same_shape("div", self, rhs)?;
        let data: Vec<T> = self.data().iter().zip(rhs.data().iter()).map(|(&a, &b)| a / b).collect();
        let (a, b) = (self.clone(), rhs.clone());
        Tensor::from_op(
            "div",
            self.shape().to_vec(),
            data,
            vec![self.clone(), rhs.clone()],
            Box::new(move |g, _| {
                let bd = b.data().to_vec();
                let da: Vec<T> = g.iter().zip(bd.iter()).map(|(&gi, &bi)| gi / bi).collect();
                let db: Vec<T> = g
                    .iter()
                    .zip(a.data().iter().zip(bd.iter()))
                    .map(|(&gi, (&ai, &bi))| -gi * ai / (bi * bi))
                    .collect();
                a.accum_grad(&da);
                b.accum_grad(&db);
            }),
        )
    }

    pub fn scale(&self, factor: T) -> Result<Tensor<T>> {
        let data: Vec<T> = self.data().iter().map(|&v| v * factor).collect();
        let x = self.clone();
        Tensor::from_op(
            "scale",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g, _| {
                let delta: Vec<T> = g.iter().map(|&v| v * factor).collect();
                x.accum_grad(&delta);
            }),
        )
    }

    pub fn neg(&self) -> Result<Tensor<T>> {
        self.scale(-T::one())
    }

    pub fn add_scalar(&self, value: T) -> Result<Tensor<T>> {
        unary(self, "add_scalar", |v| v + value, |_, _| T::one())
    }

    pub fn abs(&self) -> Result<Tensor<T>> {
        unary(
            self,
            "abs",
            |v| v.abs(),
            |x, _| {
                if x > T::zero() {
                    T::one()
                } else if x < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                }
            },
        )
    }

    pub fn relu(&self) -> Result<Tensor<T>> {
        unary(
            self,
            "relu",
            |v| if v > T::zero() { v } else { T::zero() },
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    /// GELU in the tanh approximation.
    pub fn gelu(&self) -> Result<Tensor<T>> {
        let k = T::cast(std::f64::consts::FRAC_2_PI).sqrt();
        let a = T::cast(0.044715);
        let half = T::cast(0.5);
        let three = T::cast(3.0);
        unary(
            self,
            "gelu",
            move |x| {
                let u = k * (x + a * x * x * x);
                half * x * (T::one() + u.tanh())
            },
            move |x, _| {
                let u = k * (x + a * x * x * x);
                let t = u.tanh();
                let sech2 = T::one() - t * t;
                half * (T::one() + t) + half * x * sech2 * k * (T::one() + three * a * x * x)
            },
        )
    }

    pub fn sigmoid(&self) -> Result<Tensor<T>> {
        unary(
            self,
            "sigmoid",
            |x| {
                // Split on sign so exp never overflows.
                if x >= T::zero() {
                    T::one() / (T::one() + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (T::one() + e)
                }
            },
            |_, y| y * (T::one() - y),
        )
    }

    /// Broadcast-add a vector over the last dimension.
    pub fn add_bias(&self, bias: &Tensor<T>) -> Result<Tensor<T>> {
        let c = *self.shape().last().unwrap();
        if bias.shape() != [c] {
            return Err(Error::Shape {
                op: "add_bias",
                detail: format!("bias shape {:?} does not match last dim {c}", bias.shape()),
            });
        }
        let bd = bias.to_vec();
        let data: Vec<T> = self
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bd[i % c])
            .collect();
        let (x, b) = (self.clone(), bias.clone());
        Tensor::from_op(
            "add_bias",
            self.shape().to_vec(),
            data,
            vec![self.clone(), bias.clone()],
            Box::new(move |g, _| {
                x.accum_grad(g);
                let mut db = vec![T::zero(); c];
                for (i, &gi) in g.iter().enumerate() {
                    db[i % c] += gi;
                }
                b.accum_grad(&db);
            }),
        )
    }

    // ── Linear algebra ────────────────────────────────────────────────

    pub fn matmul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        if self.ndim() != 2 || rhs.ndim() != 2 {
            return Err(Error::Shape {
                op: "matmul",
                detail: format!("expects 2-d operands, got {:?} and {:?}", self.shape(), rhs.shape()),
            });
        }
        let (m, k) = (self.shape()[0], self.shape()[1]);
        let (k2, n) = (rhs.shape()[0], rhs.shape()[1]);
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                detail: format!("inner extents differ: {:?} · {:?}", self.shape(), rhs.shape()),
            });
        }
        let data = mm(&self.data(), &rhs.data(), m, k, n);
        let (a, b) = (self.clone(), rhs.clone());
        Tensor::from_op(
            "matmul",
            vec![m, n],
            data,
            vec![self.clone(), rhs.clone()],
            Box::new(move |g, _| {
                if a.requires_grad() {
                    let da = mm_bt(g, &b.data(), m, k, n);
                    a.accum_grad(&da);
                }
                if b.requires_grad() {
                    let db = mm_at(&a.data(), g, m, k, n);
                    b.accum_grad(&db);
                }
            }),
        )
    }

    pub fn transpose2d(&self) -> Result<Tensor<T>> {
        if self.ndim() != 2 {
            return Err(Error::Shape {
                op: "transpose",
                detail: format!("expects 2-d operand, got {:?}", self.shape()),
            });
        }
        let (r, c) = (self.shape()[0], self.shape()[1]);
        let src = self.data();
        let mut data = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        drop(src);
        let x = self.clone();
        Tensor::from_op(
            "transpose",
            vec![c, r],
            data,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut delta = vec![T::zero(); r * c];
                for j in 0..c {
                    for i in 0..r {
                        delta[i * c + j] = g[j * r + i];
                    }
                }
                x.accum_grad(&delta);
            }),
        )
    }

    pub fn reshape(&self, new_shape: Vec<usize>) -> Result<Tensor<T>> {
        let numel: usize = new_shape.iter().product();
        if numel != self.numel() || new_shape.contains(&0) {
            return Err(Error::Shape {
                op: "reshape",
                detail: format!("cannot view {:?} as {:?}", self.shape(), new_shape),
            });
        }
        let x = self.clone();
        Tensor::from_op(
            "reshape",
            new_shape,
            self.to_vec(),
            vec![self.clone()],
            Box::new(move |g, _| x.accum_grad(g)),
        )
    }

    /// Contiguous sub-range along one axis.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
        if axis >= self.ndim() || start + len > self.shape()[axis] || len == 0 {
            return Err(Error::Shape {
                op: "narrow",
                detail: format!(
                    "range {start}..{} out of bounds for axis {axis} of {:?}",
                    start + len,
                    self.shape()
                ),
            });
        }
        let shape = self.shape().to_vec();
        let outer: usize = shape[..axis].iter().product();
        let extent = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * extent + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        drop(src);
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let x = self.clone();
        let full = self.numel();
        Tensor::from_op(
            "narrow",
            out_shape,
            data,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut delta = vec![T::zero(); full];
                for o in 0..outer {
                    let dst = (o * extent + start) * inner;
                    let srcb = o * len * inner;
                    delta[dst..dst + len * inner].copy_from_slice(&g[srcb..srcb + len * inner]);
                }
                x.accum_grad(&delta);
            }),
        )
    }

    // ── Reductions ────────────────────────────────────────────────────

    pub fn sum_all(&self) -> Result<Tensor<T>> {
        let total: T = self.data().iter().copied().sum();
        let x = self.clone();
        let n = self.numel();
        Tensor::from_op(
            "sum",
            vec![1],
            vec![total],
            vec![self.clone()],
            Box::new(move |g, _| {
                let delta = vec![g[0]; n];
                x.accum_grad(&delta);
            }),
        )
    }

    pub fn mean_all(&self) -> Result<Tensor<T>> {
        let n = T::cast(self.numel() as f64);
        self.sum_all()?.scale(T::one() / n)
    }

    // ── Normalisation ─────────────────────────────────────────────────

    pub fn softmax(&self, axis: usize) -> Result<Tensor<T>> {
        if axis >= self.ndim() {
            return Err(Error::Shape {
                op: "softmax",
                detail: format!("axis {axis} out of range for {:?}", self.shape()),
            });
        }
        let shape = self.shape().to_vec();
        let outer: usize = shape[..axis].iter().product();
        let lane = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.data();
        let mut data = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * lane + l) * inner + i;
                let mut mx = src[at(0)];
                for l in 1..lane {
                    mx = mx.max(src[at(l)]);
                }
                let mut denom = T::zero();
                for l in 0..lane {
                    let e = (src[at(l)] - mx).exp();
                    data[at(l)] = e;
                    denom += e;
                }
                for l in 0..lane {
                    data[at(l)] = data[at(l)] / denom;
                }
            }
        }
        drop(src);
        let x = self.clone();
        Tensor::from_op(
            "softmax",
            shape,
            data,
            vec![self.clone()],
            Box::new(move |g, y| {
                let mut delta = vec![T::zero(); g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |l: usize| (o * lane + l) * inner + i;
                        let mut dot = T::zero();
                        for l in 0..lane {
                            dot += g[at(l)] * y[at(l)];
                        }
                        for l in 0..lane {
                            delta[at(l)] = y[at(l)] * (g[at(l)] - dot);
                        }
                    }
                }
                x.accum_grad(&delta);
            }),
        )
    }

    /// Layer normalisation over the last dimension with affine parameters.
    pub fn layer_norm(&self, gamma: &Tensor<T>, beta: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
        let c = *self.shape().last().unwrap();
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(Error::Shape {
                op: "layer_norm",
                detail: format!(
                    "affine shapes {:?}/{:?} do not match last dim {c}",
                    gamma.shape(),
                    beta.shape()
                ),
            });
        }
        let rows = self.numel() / c;
        let epsilon = T::cast(eps);
        let nc = T::cast(c as f64);
        let src = self.data();
        let gd = gamma.to_vec();
        let bd = beta.to_vec();
        let mut data = vec![T::zero(); src.len()];
        for r in 0..rows {
            let row = &src[r * c..(r + 1) * c];
            let mean: T = row.iter().copied().sum::<T>() / nc;
            let var: T = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nc;
            let s = (var + epsilon).sqrt();
            for j in 0..c {
                data[r * c + j] = (row[j] - mean) / s * gd[j] + bd[j];
            }
        }
        drop(src);
        let (x, gm, bt) = (self.clone(), gamma.clone(), beta.clone());
        Tensor::from_op(
            "layer_norm",
            self.shape().to_vec(),
            data,
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |g, _| {
                let src = x.data();
                let gd = gm.data();
                let mut dx = vec![T::zero(); src.len()];
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for r in 0..rows {
                    let row = &src[r * c..(r + 1) * c];
                    let grow = &g[r * c..(r + 1) * c];
                    let mean: T = row.iter().copied().sum::<T>() / nc;
                    let var: T = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nc;
                    let s = (var + epsilon).sqrt();
                    let mut m1 = T::zero();
                    let mut m2 = T::zero();
                    for j in 0..c {
                        let xhat = (row[j] - mean) / s;
                        let dxhat = grow[j] * gd[j];
                        dgamma[j] += grow[j] * xhat;
                        dbeta[j] += grow[j];
                        m1 += dxhat;
                        m2 += dxhat * xhat;
                    }
                    m1 /= nc;
                    m2 /= nc;
                    for j in 0..c {
                        let xhat = (row[j] - mean) / s;
                        let dxhat = grow[j] * gd[j];
                        dx[r * c + j] = (dxhat - m1 - xhat * m2) / s;
                    }
                }
                drop(src);
                drop(gd);
                x.accum_grad(&dx);
                gm.accum_grad(&dgamma);
                bt.accum_grad(&dbeta);
            }),
        )
    }

    /// Scale every row of a 2-d tensor to unit L2 norm.
    pub fn l2_normalize_rows(&self) -> Result<Tensor<T>> {
        if self.ndim() != 2 {
            return Err(Error::Shape {
                op: "l2_normalize_rows",
                detail: format!("expects 2-d operand, got {:?}", self.shape()),
            });
        }
        let (r, c) = (self.shape()[0], self.shape()[1]);
        let src = self.data();
        let mut data = vec![T::zero(); r * c];
        let mut norms = vec![T::zero(); r];
        let floor = T::cast(1e-12);
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if norm < floor {
                return Err(Error::Degenerate { op: "l2_normalize_rows" });
            }
            norms[i] = norm;
            for j in 0..c {
                data[i * c + j] = row[j] / norm;
            }
        }
        drop(src);
        let x = self.clone();
        Tensor::from_op(
            "l2_normalize_rows",
            vec![r, c],
            data,
            vec![self.clone()],
            Box::new(move |g, y| {
                let mut delta = vec![T::zero(); r * c];
                for i in 0..r {
                    let grow = &g[i * c..(i + 1) * c];
                    let yrow = &y[i * c..(i + 1) * c];
                    let mut dot = T::zero();
                    for j in 0..c {
                        dot += grow[j] * yrow[j];
                    }
                    for j in 0..c {
                        delta[i * c + j] = (grow[j] - dot * yrow[j]) / norms[i];
                    }
                }
                x.accum_grad(&delta);
            }),
        )
    }

    // ── Loss primitives ───────────────────────────────────────────────

    /// Mean over rows of `-log softmax(row)[target]`, numerically stable.
    pub fn cross_entropy_rows(&self, targets: &[usize]) -> Result<Tensor<T>> {
        if self.ndim() != 2 {
            return Err(Error::Shape {
                op: "cross_entropy",
                detail: format!("expects 2-d logits, got {:?}", self.shape()),
            });
        }
        let (r, c) = (self.shape()[0], self.shape()[1]);
        if targets.len() != r {
            return Err(Error::Shape {
                op: "cross_entropy",
                detail: format!("{} targets for {r} rows", targets.len()),
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Shape {
                op: "cross_entropy",
                detail: format!("target {bad} out of range for {c} classes"),
            });
        }
        let src = self.data();
        let mut total = T::zero();
        for (i, &t) in targets.iter().enumerate() {
            let row = &src[i * c..(i + 1) * c];
            let mx = row.iter().copied().fold(row[0], T::max);
            let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<T>().ln();
            total += lse - row[t];
        }
        drop(src);
        let nr = T::cast(r as f64);
        let mean = total / nr;
        let x = self.clone();
        let targets = targets.to_vec();
        Tensor::from_op(
            "cross_entropy",
            vec![1],
            vec![mean],
            vec![self.clone()],
            Box::new(move |g, _| {
                let src = x.data();
                let scale = g[0] / nr;
                let mut delta = vec![T::zero(); r * c];
                for (i, &t) in targets.iter().enumerate() {
                    let row = &src[i * c..(i + 1) * c];
                    let mx = row.iter().copied().fold(row[0], T::max);
                    let denom: T = row.iter().map(|&v| (v - mx).exp()).sum();
                    for j in 0..c {
                        let p = (row[j] - mx).exp() / denom;
                        let ind = if j == t { T::one() } else { T::zero() };
                        delta[i * c + j] = (p - ind) * scale;
                    }
                }
                drop(src);
                x.accum_grad(&delta);
            }),
        )
    }

    /// Mean binary cross-entropy between logits and {0,1} targets, in the
    /// stable `max(x,0) - x·t + ln(1+exp(-|x|))` form.
    pub fn bce_with_logits(&self, targets: &[T]) -> Result<Tensor<T>> {
        if targets.len() != self.numel() {
            return Err(Error::Shape {
                op: "bce_with_logits",
                detail: format!("{} targets for {} logits", targets.len(), self.numel()),
            });
        }
        let src = self.data();
        let mut total = T::zero();
        for (&x, &t) in src.iter().zip(targets.iter()) {
            total += x.max(T::zero()) - x * t + (T::one() + (-x.abs()).exp()).ln();
        }
        drop(src);
        let n = T::cast(self.numel() as f64);
        let mean = total / n;
        let x = self.clone();
        let targets = targets.to_vec();
        Tensor::from_op(
            "bce_with_logits",
            vec![1],
            vec![mean],
            vec![self.clone()],
            Box::new(move |g, _| {
                let src = x.data();
                let scale = g[0] / n;
                let delta: Vec<T> = src
                    .iter()
                    .zip(targets.iter())
                    .map(|(&v, &t)| {
                        let s = if v >= T::zero() {
                            T::one() / (T::one() + (-v).exp())
                        } else {
                            let e = v.exp();
                            e / (T::one() + e)
                        };
                        (s - t) * scale
                    })
                    .collect();
                drop(src);
                x.accum_grad(&delta);
            }),
        )
    }
}

// ── Free functions ────────────────────────────────────────────────────

/// Concatenate tensors along `axis`. All other extents must agree.
pub fn concat<T: Scalar>(parts: &[Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    if parts.is_empty() {
        return Err(Error::Shape { op: "concat", detail: "no operands".into() });
    }
    let first = parts[0].shape().to_vec();
    if axis >= first.len() {
        return Err(Error::Shape {
            op: "concat",
            detail: format!("axis {axis} out of range for {first:?}"),
        });
    }
    let mut axis_total = 0;
    for p in parts {
        if p.ndim() != first.len()
            || p.shape()[..axis] != first[..axis]
            || p.shape()[axis + 1..] != first[axis + 1..]
        {
            return Err(Error::Shape {
                op: "concat",
                detail: format!("shape {:?} incompatible with {first:?} along axis {axis}", p.shape()),
            });
        }
        axis_total += p.shape()[axis];
    }
    let outer: usize = first[..axis].iter().product();
    let inner: usize = first[axis + 1..].iter().product();
    let mut out_shape = first.clone();
    out_shape[axis] = axis_total;
    let mut data = Vec::with_capacity(outer * axis_total * inner);
    for o in 0..outer {
        for p in parts {
            let len = p.shape()[axis] * inner;
            let src = p.data();
            data.extend_from_slice(&src[o * len..(o + 1) * len]);
        }
    }
    let handles: Vec<Tensor<T>> = parts.to_vec();
    let extents: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
    Tensor::from_op(
        "concat",
        out_shape,
        data,
        handles.clone(),
        Box::new(move |g, _| {
            for (idx, h) in handles.iter().enumerate() {
                if !h.requires_grad() {
                    continue;
                }
                let len = extents[idx] * inner;
                let offset: usize = extents[..idx].iter().sum::<usize>() * inner;
                let stride = axis_total * inner;
                let mut delta = Vec::with_capacity(outer * len);
                for o in 0..outer {
                    let base = o * stride + offset;
                    delta.extend_from_slice(&g[base..base + len]);
                }
                h.accum_grad(&delta);
            }
        }),
    )
}

/// Cosine similarity of two 1-d tensors. Errors if either norm < 1e-12.
pub fn cosine_similarity<T: Scalar>(u: &Tensor<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
    if u.ndim() != 1 || v.ndim() != 1 || u.shape() != v.shape() {
        return Err(Error::Shape {
            op: "cosine_similarity",
            detail: format!("expects equal-length vectors, got {:?} and {:?}", u.shape(), v.shape()),
        });
    }
    let ud = u.to_vec();
    let vd = v.to_vec();
    let nu = ud.iter().map(|&a| a * a).sum::<T>().sqrt();
    let nv = vd.iter().map(|&a| a * a).sum::<T>().sqrt();
    let floor = T::cast(1e-12);
    if nu < floor || nv < floor {
        return Err(Error::Degenerate { op: "cosine_similarity" });
    }
    let dot: T = ud.iter().zip(vd.iter()).map(|(&a, &b)| a * b).sum();
    let cos = dot / (nu * nv);
    let (uh, vh) = (u.clone(), v.clone());
    Tensor::from_op(
        "cosine_similarity",
        vec![1],
        vec![cos],
        vec![u.clone(), v.clone()],
        Box::new(move |g, _| {
            let g0 = g[0];
            let du: Vec<T> = ud
                .iter()
                .zip(vd.iter())
                .map(|(&a, &b)| g0 * (b / (nu * nv) - cos * a / (nu * nu)))
                .collect();
            let dv: Vec<T> = ud
                .iter()
                .zip(vd.iter())
                .map(|(&a, &b)| g0 * (a / (nu * nv) - cos * b / (nv * nv)))
                .collect();
            uh.accum_grad(&du);
            vh.accum_grad(&dv);
        }),
    )
}
