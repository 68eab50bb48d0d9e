//! Matched segmentation losses: Hungarian assignment of ground-truth masks
//! to queries, binary cross-entropy + dice over matched masks, cross-entropy
//! over matched class logits, the semantic-structure consistency term that
//! aligns pairwise image-embedding cosines with text-embedding cosines, and
//! the per-layer total objective.

mod matching;

pub use matching::{assignment_cost, brute_force_assignment, hungarian};

use crate::error::{Error, Result};
use crate::numerics::concat;
use crate::Tensor;

/// Denominator smoothing of the dice loss.
pub const DICE_EPS: f64 = 1.0;

/// Per-term loss weights. The same weights drive both the matching costs and
/// the training losses.
#[derive(Debug, Clone)]
pub struct LossWeights {
    pub bce: f64,
    pub dice: f64,
    pub cls: f64,
    pub ssc: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { bce: 5.0, dice: 5.0, cls: 2.0, ssc: 10.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.bce < 0.0 || self.dice < 0.0 || self.cls < 0.0 || self.ssc < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

/// Ground truth for one image: `k` binary masks at quarter resolution and
/// their class indices into the training vocabulary.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub masks: Vec<Vec<f64>>,
    pub class_ids: Vec<usize>,
}

impl GroundTruth {
    pub fn validate(&self, cells: usize, train_classes: usize) -> Result<()> {
        if self.masks.is_empty() || self.masks.len() != self.class_ids.len() {
            return Err(Error::Shape {
                op: "ground_truth",
                detail: format!("{} masks vs {} class ids", self.masks.len(), self.class_ids.len()),
            });
        }
        for (i, m) in self.masks.iter().enumerate() {
            if m.len() != cells {
                return Err(Error::Shape {
                    op: "ground_truth",
                    detail: format!("mask {i} has {} cells, expected {cells}", m.len()),
                });
            }
            if !m.iter().any(|&v| v > 0.0) {
                return Err(Error::Shape {
                    op: "ground_truth",
                    detail: format!("mask {i} is empty"),
                });
            }
        }
        if let Some(&bad) = self.class_ids.iter().find(|&&c| c >= train_classes) {
            return Err(Error::Vocabulary(format!(
                "ground-truth class {bad} outside the {train_classes} training classes"
            )));
        }
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.masks.len()
    }
}

/// Injective map from ground-truth items to query slots, plus its cost.
#[derive(Debug, Clone)]
pub struct Assignment {
    pub query_for_gt: Vec<usize>,
    pub cost: f64,
}

// ── Differentiable loss terms ─────────────────────────────────────────

/// Mean stable binary cross-entropy between mask logits and a {0,1} target.
pub fn bce_loss(mask_logits: &Tensor, target: &[f64]) -> Result<Tensor> {
    mask_logits.bce_with_logits(target)
}

/// `1 − 2Σpg / (Σp + Σg + ε)` with `p = sigmoid(logits)` and ε = 1.
pub fn dice_loss(mask_logits: &Tensor, target: &[f64]) -> Result<Tensor> {
    if target.len() != mask_logits.numel() {
        return Err(Error::Shape {
            op: "dice_loss",
            detail: format!("{} targets for {} logits", target.len(), mask_logits.numel()),
        });
    }
    let p = mask_logits.reshape(vec![mask_logits.numel()])?.sigmoid()?;
    let g = Tensor::from_vec(vec![target.len()], target.to_vec())?;
    let intersection = p.mul(&g)?.sum_all()?;
    let gsum: f64 = target.iter().sum();
    let denom = p.sum_all()?.add_scalar(gsum + DICE_EPS)?;
    intersection.scale(2.0)?.div(&denom)?.neg()?.add_scalar(1.0)
}

/// Mean cross-entropy of matched class logits against target class indices.
pub fn cls_loss(class_logits: &Tensor, targets: &[usize]) -> Result<Tensor> {
    class_logits.cross_entropy_rows(targets)
}

/// Semantic-structure consistency: mean absolute difference between the k×k
/// cosine matrix of the image embeddings and that of the text embeddings.
/// Zero exactly when the two cosine structures coincide.
pub fn ssc_loss(image_embeddings: &Tensor, text_embeddings: &Tensor) -> Result<Tensor> {
    if image_embeddings.ndim() != 2 || image_embeddings.shape() != text_embeddings.shape() {
        return Err(Error::Shape {
            op: "ssc_loss",
            detail: format!(
                "embedding shapes differ: {:?} vs {:?}",
                image_embeddings.shape(),
                text_embeddings.shape()
            ),
        });
    }
    let img = image_embeddings.l2_normalize_rows()?;
    let txt = text_embeddings.l2_normalize_rows()?;
    let cs_image = img.matmul(&img.transpose2d()?)?;
    let cs_text = txt.matmul(&txt.transpose2d()?)?;
    cs_text.sub(&cs_image)?.abs()?.mean_all()
}

// ── Matching ──────────────────────────────────────────────────────────

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Plain-scalar BCE, the same formula as [`bce_loss`]; used for match costs.
pub fn bce_cost(logits: &[f64], target: &[f64]) -> f64 {
    let n = logits.len() as f64;
    logits
        .iter()
        .zip(target)
        .map(|(&x, &t)| x.max(0.0) - x * t + (1.0 + (-x.abs()).exp()).ln())
        .sum::<f64>()
        / n
}

/// Plain-scalar dice, the same formula as [`dice_loss`].
pub fn dice_cost(logits: &[f64], target: &[f64]) -> f64 {
    let mut inter = 0.0;
    let mut psum = 0.0;
    for (&x, &t) in logits.iter().zip(target) {
        let p = sigmoid(x);
        inter += p * t;
        psum += p;
    }
    let gsum: f64 = target.iter().sum();
    1.0 - 2.0 * inter / (psum + gsum + DICE_EPS)
}

/// Hungarian matching of ground-truth masks to prediction slots. The pair
/// cost is `w.bce·bce + w.dice·dice + w.cls·(−log softmax(logits)[class])`,
/// evaluated densely on the quarter-resolution masks.
pub fn match_predictions(
    masks: &Tensor,
    class_logits: &Tensor,
    gt: &GroundTruth,
    weights: &LossWeights,
) -> Result<Assignment> {
    if masks.ndim() != 3 {
        return Err(Error::Shape {
            op: "match",
            detail: format!("masks must be H×W×N, got {:?}", masks.shape()),
        });
    }
    let n = masks.shape()[2];
    let cells = masks.shape()[0] * masks.shape()[1];
    let f = class_logits.shape()[1];
    gt.validate(cells, f)?;
    let k = gt.k();
    if k > n {
        return Err(Error::Capacity { needed: k, available: n });
    }

    // Contiguous per-query mask columns and per-query log-probabilities.
    let md = masks.data();
    let mut query_masks = vec![vec![0.0f64; cells]; n];
    for cell in 0..cells {
        for q in 0..n {
            query_masks[q][cell] = md[cell * n + q];
        }
    }
    drop(md);
    let ld = class_logits.data();
    let mut log_probs = vec![vec![0.0f64; f]; n];
    for q in 0..n {
        let row = &ld[q * f..(q + 1) * f];
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<f64>().ln();
        for j in 0..f {
            log_probs[q][j] = row[j] - lse;
        }
    }
    drop(ld);

    let mut cost = vec![0.0f64; k * n];
    for (i, (mask, &class)) in gt.masks.iter().zip(&gt.class_ids).enumerate() {
        for q in 0..n {
            cost[i * n + q] = weights.bce * bce_cost(&query_masks[q], mask)
                + weights.dice * dice_cost(&query_masks[q], mask)
                + weights.cls * -log_probs[q][class];
        }
    }
    let query_for_gt = hungarian(&cost, k, n)?;
    let cost = assignment_cost(&cost, n, &query_for_gt);
    Ok(Assignment { query_for_gt, cost })
}

// ── Total objective ───────────────────────────────────────────────────

/// Where the semantic-structure term applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SscPlacement {
    None,
    /// Supervised embeddings from the last `n` layers (0 = all layers).
    SupervisedLast(usize),
    /// Mask-attention embeddings (final layer only).
    MaskAttention,
    /// Independent terms on both streams, final layer.
    Both,
}

impl SscPlacement {
    pub fn parse(token: &str) -> Result<Self> {
        Ok(match token {
            "none" => SscPlacement::None,
            "a_last1" => SscPlacement::SupervisedLast(1),
            "a_last3" => SscPlacement::SupervisedLast(3),
            "a_all" => SscPlacement::SupervisedLast(0),
            "b_last1" => SscPlacement::MaskAttention,
            "ab_last1" => SscPlacement::Both,
            other => {
                return Err(Error::Config(format!(
                    "unknown ssc placement {other:?} (expected a_last1|a_last3|a_all|b_last1|ab_last1|none)"
                )))
            }
        })
    }

    pub fn token(&self) -> &'static str {
        match self {
            SscPlacement::None => "none",
            SscPlacement::SupervisedLast(1) => "a_last1",
            SscPlacement::SupervisedLast(3) => "a_last3",
            SscPlacement::SupervisedLast(_) => "a_all",
            SscPlacement::MaskAttention => "b_last1",
            SscPlacement::Both => "ab_last1",
        }
    }
}

/// One decoder layer's predictions, as consumed by the loss.
pub struct LayerPrediction {
    /// Mask logits, H/4×W/4×N.
    pub masks: Tensor,
    /// Unit-norm query embeddings, N×C.
    pub embeddings: Tensor,
    /// Cosine class logits against the training text embeddings, N×f.
    pub class_logits: Tensor,
}

/// Full prediction set for one image.
pub struct Predictions {
    pub layers: Vec<LayerPrediction>,
    /// Mask-attention embeddings B, N×C.
    pub mask_attention: Tensor,
    /// B's class logits, N×f.
    pub mask_attention_logits: Tensor,
}

pub struct LossBreakdown {
    pub total: Tensor,
    /// Matched segmentation loss summed over layers (value only).
    pub sem_seg: f64,
    /// Unweighted semantic-structure term (value only).
    pub ssc: f64,
}

fn gather_rows(t: &Tensor, rows: &[usize]) -> Result<Tensor> {
    let parts: Vec<Tensor> = rows.iter().map(|&r| t.narrow(0, r, 1)).collect::<Result<_>>()?;
    concat(&parts, 0)
}

fn matched_sem_seg(
    layer: &LayerPrediction,
    assignment: &Assignment,
    gt: &GroundTruth,
    weights: &LossWeights,
) -> Result<Tensor> {
    let k = gt.k();
    let scale = 1.0 / k as f64;
    let mut mask_terms: Option<Tensor> = None;
    for (i, &q) in assignment.query_for_gt.iter().enumerate() {
        let column = layer.masks.narrow(2, q, 1)?;
        let bce = bce_loss(&column, &gt.masks[i])?.scale(weights.bce * scale)?;
        let dice = dice_loss(&column, &gt.masks[i])?.scale(weights.dice * scale)?;
        let pair = bce.add(&dice)?;
        mask_terms = Some(match mask_terms {
            Some(acc) => acc.add(&pair)?,
            None => pair,
        });
    }
    let matched_logits = gather_rows(&layer.class_logits, &assignment.query_for_gt)?;
    let ce = cls_loss(&matched_logits, &gt.class_ids)?.scale(weights.cls)?;
    mask_terms.unwrap().add(&ce)
}

/// Total objective over all decoder layers: every layer contributes its
/// matched segmentation loss (each layer matched independently), the final
/// layer adds the mask-attention classification term, and the
/// semantic-structure term applies where `placement` says, scaled by
/// `weights.ssc`.
pub fn total_loss(
    pred: &Predictions,
    gt: &GroundTruth,
    train_text: &Tensor,
    weights: &LossWeights,
    placement: SscPlacement,
) -> Result<LossBreakdown> {
    weights.validate()?;
    if pred.layers.is_empty() {
        return Err(Error::Shape { op: "total_loss", detail: "no layer predictions".into() });
    }
    let depth = pred.layers.len();
    let mut sem: Option<Tensor> = None;
    let mut assignments = Vec::with_capacity(depth);
    for layer in &pred.layers {
        let assignment = match_predictions(&layer.masks, &layer.class_logits, gt, weights)?;
        let term = matched_sem_seg(layer, &assignment, gt, weights)?;
        sem = Some(match sem {
            Some(acc) => acc.add(&term)?,
            None => term,
        });
        assignments.push(assignment);
    }
    let final_assignment = assignments.last().unwrap();
    // Classification supervision applies to both embedding streams.
    let b_logits = gather_rows(&pred.mask_attention_logits, &final_assignment.query_for_gt)?;
    let b_ce = cls_loss(&b_logits, &gt.class_ids)?.scale(weights.cls)?;
    let sem = sem.unwrap().add(&b_ce)?;
    let sem_value = sem.item();

    let text_k = gather_rows(train_text, &gt.class_ids)?;
    let mut ssc: Option<Tensor> = None;
    let add_ssc = |term: Tensor, acc: &mut Option<Tensor>| -> Result<()> {
        *acc = Some(match acc.take() {
            Some(prev) => prev.add(&term)?,
            None => term,
        });
        Ok(())
    };
    match placement {
        SscPlacement::None => {}
        SscPlacement::SupervisedLast(n) => {
            let span = if n == 0 { depth } else { n.min(depth) };
            #[allow(clippy::needless_range_loop)]
        for i in depth - span..depth {
                let matched = gather_rows(&pred.layers[i].embeddings, &assignments[i].query_for_gt)?;
                add_ssc(ssc_loss(&matched, &text_k)?, &mut ssc)?;
            }
        }
        SscPlacement::MaskAttention => {
            let matched = gather_rows(&pred.mask_attention, &final_assignment.query_for_gt)?;
            add_ssc(ssc_loss(&matched, &text_k)?, &mut ssc)?;
        }
        SscPlacement::Both => {
            let a = gather_rows(pred.layers.last().map(|l| &l.embeddings).unwrap(), &final_assignment.query_for_gt)?;
            add_ssc(ssc_loss(&a, &text_k)?, &mut ssc)?;
            let b = gather_rows(&pred.mask_attention, &final_assignment.query_for_gt)?;
            add_ssc(ssc_loss(&b, &text_k)?, &mut ssc)?;
        }
    }
    let (total, ssc_value) = match ssc {
        Some(term) if weights.ssc > 0.0 => {
            let v = term.item();
            (sem.add(&term.scale(weights.ssc)?)?, v)
        }
        Some(term) => (sem, term.item()),
        None => (sem, 0.0),
    };
    Ok(LossBreakdown { total, sem_seg: sem_value, ssc: ssc_value })
}
