use std::collections::HashSet;

use crate::error::{Error, Result};

use super::scalar::Scalar;
use super::tensor::Tensor;

/// The recorded history of differentiable operations that lead to one output:
/// every tracked node reachable from the root, in execution order. Replaying
/// it in reverse propagates gradients so that each `requires_grad` leaf is
/// filled exactly once per consumer edge.
pub struct GradTape<T: Scalar> {
    nodes: Vec<Tensor<T>>,
}

impl<T: Scalar> GradTape<T> {
    /// Collect the tracked ancestors of `root` (including `root`), sorted by
    /// creation order. Creation order is a valid topological order because an
    /// operation can only consume tensors that already exist.
    pub fn trace(root: &Tensor<T>) -> Self {
        let mut seen: HashSet<u64> = HashSet::new();
        let mut nodes: Vec<Tensor<T>> = Vec::new();
        let mut stack: Vec<Tensor<T>> = vec![root.clone()];
        while let Some(t) = stack.pop() {
            if !t.requires_grad() || !seen.insert(t.id()) {
                continue;
            }
            if let Some(op) = t.inner.op.as_ref() {
                for p in &op.parents {
                    stack.push(p.clone());
                }
            }
            nodes.push(t);
        }
        nodes.sort_by_key(|t| t.id());
        GradTape { nodes }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

/// Reverse-mode sweep from a scalar loss: fills `grad` of every tracked leaf
/// that the loss depends on. Call once per forward graph.
pub fn backward<T: Scalar>(loss: &Tensor<T>) -> Result<()> {
    if loss.numel() != 1 {
        return Err(Error::Shape {
            op: "backward",
            detail: format!("loss must be scalar, got shape {:?}", loss.shape()),
        });
    }
    if !loss.requires_grad() {
        return Err(Error::Shape {
            op: "backward",
            detail: "loss is not on the tape (nothing requires gradients)".into(),
        });
    }
    let tape = GradTape::trace(loss);
    loss.seed_grad(T::one());
    for node in tape.nodes.iter().rev() {
        let Some(op) = node.inner.op.as_ref() else { continue };
        let grad = node
            .take_grad_for_backward()
            .expect("tape node missing gradient during reverse sweep");
        let data = node.data();
        (op.backward)(&grad, &data);
    }
    Ok(())
}

/// Compare the tape gradient of `f` at `x` against central finite
/// differences. Returns the maximum elementwise relative error, with the
/// denominator floored at `max(|g|, 1e-8)`.
pub fn finite_diff_check<T, F>(f: F, x: &Tensor<T>, eps: f64) -> Result<T>
where
    T: Scalar,
    F: Fn(&Tensor<T>) -> Result<Tensor<T>>,
{
    let base = x.to_vec();
    let shape = x.shape().to_vec();

    let leaf = Tensor::param(shape.clone(), base.clone())?;
    let out = f(&leaf)?;
    if out.numel() != 1 {
        return Err(Error::Shape {
            op: "finite_diff_check",
            detail: format!("f must return a scalar, got shape {:?}", out.shape()),
        });
    }
    backward(&out)?;
    let analytic = leaf.grad().unwrap_or_else(|| vec![T::zero(); base.len()]);

    let step = T::cast(eps);
    let floor = T::cast(1e-8);
    let mut max_rel = T::zero();
    for i in 0..base.len() {
        let eval = |v: T| -> Result<T> {
            let mut probe = base.clone();
            probe[i] = v;
            Ok(f(&Tensor::from_vec(shape.clone(), probe)?)?.item())
        };
        let plus = eval(base[i] + step)?;
        let minus = eval(base[i] - step)?;
        let numeric = (plus - minus) / (T::cast(2.0) * step);
        let denom = analytic[i].abs().max(numeric.abs()).max(floor);
        let rel = (analytic[i] - numeric).abs() / denom;
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}
