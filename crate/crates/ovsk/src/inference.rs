//! Balanced open-vocabulary inference: combine the three embedding streams
//! with per-split weights (arithmetic on embeddings or geometric on
//! class probabilities), classify masks against text embeddings, assemble
//! the semantic map, and accumulate mean intersection-over-union.
//!
//! Everything here is pure read-only arithmetic on finished tensors; nothing
//! touches the gradient tape.

use std::io::Write;

use crate::decoder::EmbeddingStreams;
use crate::error::{Error, Result};
use crate::Tensor;

/// Test-time class list: names, unit-norm text embeddings, and the
/// train/new membership flags.
pub struct ClassVocabulary {
    pub names: Vec<String>,
    /// K×C, unit-norm rows.
    pub embeddings: Tensor,
    pub is_train: Vec<bool>,
}

impl ClassVocabulary {
    pub fn new(names: Vec<String>, embeddings: Tensor, is_train: Vec<bool>) -> Result<Self> {
        let k = names.len();
        if k == 0 {
            return Err(Error::Vocabulary("empty class list".into()));
        }
        if embeddings.ndim() != 2 || embeddings.shape()[0] != k || is_train.len() != k {
            return Err(Error::Vocabulary(format!(
                "vocabulary sizes disagree: {k} names, {:?} embeddings, {} flags",
                embeddings.shape(),
                is_train.len()
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for n in &names {
            if n == "mean" {
                return Err(Error::Vocabulary("class name \"mean\" is reserved for metric rows".into()));
            }
            if !seen.insert(n.as_str()) {
                return Err(Error::Vocabulary(format!("duplicate class name {n:?}")));
            }
        }
        let c = embeddings.shape()[1];
        let d = embeddings.data();
        for row in 0..k {
            let norm: f64 = d[row * c..(row + 1) * c].iter().map(|v| v * v).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-6 {
                return Err(Error::Vocabulary(format!("embedding row {row} is not unit norm ({norm})")));
            }
        }
        drop(d);
        Ok(ClassVocabulary { names, embeddings, is_train })
    }

    pub fn num_classes(&self) -> usize {
        self.names.len()
    }

    pub fn train_count(&self) -> usize {
        self.is_train.iter().filter(|&&t| t).count()
    }

    pub fn embed_dim(&self) -> usize {
        self.embeddings.shape()[1]
    }

    /// Ignore label: one past the last class index.
    pub fn ignore_label(&self) -> usize {
        self.num_classes()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BalanceMode {
    Arithmetic,
    Geometric,
}

impl BalanceMode {
    pub fn parse(token: &str) -> Result<Self> {
        match token {
            "arithmetic" => Ok(BalanceMode::Arithmetic),
            "geometric" => Ok(BalanceMode::Geometric),
            other => Err(Error::Config(format!("unknown balance mode {other:?}"))),
        }
    }

    pub fn token(&self) -> &'static str {
        match self {
            BalanceMode::Arithmetic => "arithmetic",
            BalanceMode::Geometric => "geometric",
        }
    }
}

/// The per-split balancing weights: training classes combine the streams
/// with (α, β, 1−α−β), new classes with (γ, β, 1−γ−β).
#[derive(Debug, Clone, Copy)]
pub struct BalanceWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub mode: BalanceMode,
}

impl BalanceWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = self.alpha >= 0.0
            && self.beta >= 0.0
            && self.gamma >= 0.0
            && self.alpha + self.beta <= 1.0 + 1e-12
            && self.gamma + self.beta <= 1.0 + 1e-12;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "balance weights out of range: alpha={} beta={} gamma={}",
                self.alpha, self.beta, self.gamma
            )))
        }
    }

    /// Stream coefficients (supervised, mask-attention, frozen) for one split.
    pub fn coefficients(&self, train_split: bool) -> [f64; 3] {
        let lead = if train_split { self.alpha } else { self.gamma };
        [lead, self.beta, 1.0 - lead - self.beta]
    }
}

/// Which embedding streams participate at inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamSubset {
    pub supervised: bool,
    pub mask_attention: bool,
    pub frozen: bool,
}

impl StreamSubset {
    pub const ALL: StreamSubset =
        StreamSubset { supervised: true, mask_attention: true, frozen: true };

    /// Parse subset tokens like `a`, `b`, `d`, `ab`, `abd`.
    pub fn parse(token: &str) -> Result<Self> {
        let mut subset = StreamSubset { supervised: false, mask_attention: false, frozen: false };
        if token.is_empty() {
            return Err(Error::Config("empty embedding subset".into()));
        }
        for ch in token.chars() {
            let slot = match ch {
                'a' => &mut subset.supervised,
                'b' => &mut subset.mask_attention,
                'd' => &mut subset.frozen,
                other => return Err(Error::Config(format!("unknown embedding stream {other:?}"))),
            };
            if *slot {
                return Err(Error::Config(format!("duplicate stream {ch:?} in subset {token:?}")));
            }
            *slot = true;
        }
        Ok(subset)
    }

    pub fn token(&self) -> String {
        let mut s = String::new();
        if self.supervised {
            s.push('a');
        }
        if self.mask_attention {
            s.push('b');
        }
        if self.frozen {
            s.push('d');
        }
        s
    }

    fn mask(&self) -> [bool; 3] {
        [self.supervised, self.mask_attention, self.frozen]
    }

    /// Restrict a coefficient triple to this subset and renormalize to sum 1.
    /// If every included coefficient is zero, the included streams share the
    /// weight uniformly.
    pub fn restrict(&self, base: [f64; 3]) -> [f64; 3] {
        let mask = self.mask();
        let mut out = [0.0; 3];
        let mut sum = 0.0;
        for i in 0..3 {
            if mask[i] {
                out[i] = base[i];
                sum += base[i];
            }
        }
        if sum <= 1e-12 {
            let count = mask.iter().filter(|&&m| m).count() as f64;
            for i in 0..3 {
                out[i] = if mask[i] { 1.0 / count } else { 0.0 };
            }
        } else {
            for v in out.iter_mut() {
                *v /= sum;
            }
        }
        out
    }
}

fn expect_streams(streams: &EmbeddingStreams) -> Result<(usize, usize)> {
    let shape = streams.supervised.shape();
    if streams.mask_attention.shape() != shape || streams.frozen.shape() != shape || shape.len() != 2 {
        return Err(Error::Shape {
            op: "balance",
            detail: format!(
                "stream shapes disagree: {:?} / {:?} / {:?}",
                streams.supervised.shape(),
                streams.mask_attention.shape(),
                streams.frozen.shape()
            ),
        });
    }
    Ok((shape[0], shape[1]))
}

/// Weighted sums of the three streams with explicit per-split coefficient
/// triples (supervised, mask-attention, frozen).
pub fn balance_arithmetic_with(
    streams: &EmbeddingStreams,
    coeff_train: [f64; 3],
    coeff_new: [f64; 3],
) -> Result<(Tensor, Tensor)> {
    let (n, c) = expect_streams(streams)?;
    let a = streams.supervised.data();
    let b = streams.mask_attention.data();
    let d = streams.frozen.data();
    let split = |coeff: [f64; 3]| -> Vec<f64> {
        (0..n * c).map(|i| coeff[0] * a[i] + coeff[1] * b[i] + coeff[2] * d[i]).collect()
    };
    let train = split(coeff_train);
    let new = split(coeff_new);
    drop((a, b, d));
    Ok((
        Tensor::from_vec(vec![n, c], train)?,
        Tensor::from_vec(vec![n, c], new)?,
    ))
}

/// Weighted sums of the three streams: one embedding set for training
/// classes, one for new classes.
pub fn balance_arithmetic(streams: &EmbeddingStreams, weights: &BalanceWeights) -> Result<(Tensor, Tensor)> {
    weights.validate()?;
    balance_arithmetic_with(streams, weights.coefficients(true), weights.coefficients(false))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cosine class scores: training columns from the train embeddings, new
/// columns from the new embeddings, in the vocabulary's class order.
pub fn classify(e_train: &Tensor, e_new: &Tensor, vocab: &ClassVocabulary) -> Result<Tensor> {
    let (n, c) = (e_train.shape()[0], e_train.shape()[1]);
    if e_new.shape() != [n, c] || c != vocab.embed_dim() {
        return Err(Error::Shape {
            op: "classify",
            detail: format!(
                "embeddings {:?}/{:?} vs vocabulary dim {}",
                e_train.shape(),
                e_new.shape(),
                vocab.embed_dim()
            ),
        });
    }
    let k = vocab.num_classes();
    let tr = e_train.data();
    let nw = e_new.data();
    let te = vocab.embeddings.data();
    let mut p = vec![0.0f64; n * k];
    for q in 0..n {
        for class in 0..k {
            let e = if vocab.is_train[class] { &tr[q * c..(q + 1) * c] } else { &nw[q * c..(q + 1) * c] };
            p[q * k + class] = dot(e, &te[class * c..(class + 1) * c]);
        }
    }
    drop((tr, nw, te));
    Tensor::from_vec(vec![n, k], p)
}

/// Geometric balancing with explicit per-split exponent triples.
pub fn balance_geometric_with(
    streams: &EmbeddingStreams,
    vocab: &ClassVocabulary,
    exp_train: [f64; 3],
    exp_new: [f64; 3],
    temperature: f64,
) -> Result<Tensor> {
    if temperature <= 0.0 {
        return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
    }
    let (n, c) = expect_streams(streams)?;
    if c != vocab.embed_dim() {
        return Err(Error::Shape {
            op: "balance_geometric",
            detail: format!("stream dim {c} vs vocabulary dim {}", vocab.embed_dim()),
        });
    }
    let k = vocab.num_classes();
    let te = vocab.embeddings.data();
    let stream_logits = |s: &Tensor| -> Vec<f64> {
        let d = s.data();
        let mut out = vec![0.0f64; n * k];
        for q in 0..n {
            for class in 0..k {
                out[q * k + class] = dot(&d[q * c..(q + 1) * c], &te[class * c..(class + 1) * c]);
            }
        }
        out
    };
    let logits = [
        stream_logits(&streams.supervised),
        stream_logits(&streams.mask_attention),
        stream_logits(&streams.frozen),
    ];
    drop(te);

    let train_idx: Vec<usize> = (0..k).filter(|&i| vocab.is_train[i]).collect();
    let new_idx: Vec<usize> = (0..k).filter(|&i| !vocab.is_train[i]).collect();
    let mut p = vec![0.0f64; n * k];
    for (subset, exps) in [(&train_idx, exp_train), (&new_idx, exp_new)] {
        if subset.is_empty() {
            continue;
        }
        for q in 0..n {
            let mut combined = vec![1.0f64; subset.len()];
            for (s, logit) in logits.iter().enumerate() {
                let row: Vec<f64> = subset.iter().map(|&cls| logit[q * k + cls] / temperature).collect();
                let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let denom: f64 = row.iter().map(|&v| (v - mx).exp()).sum();
                for (j, &v) in row.iter().enumerate() {
                    let prob = (v - mx).exp() / denom;
                    combined[j] *= prob.powf(exps[s]);
                }
            }
            for (j, &cls) in subset.iter().enumerate() {
                p[q * k + cls] = combined[j];
            }
        }
    }
    Tensor::from_vec(vec![n, k], p)
}

/// Geometric balancing on class probabilities: per stream, cosine logits are
/// converted to probabilities with a temperature softmax over each class
/// subset, then combined by exponent-weighted products. Output is N×K with
/// train columns from the train exponents and new columns from the new ones.
pub fn balance_geometric(
    streams: &EmbeddingStreams,
    vocab: &ClassVocabulary,
    weights: &BalanceWeights,
    temperature: f64,
) -> Result<Tensor> {
    weights.validate()?;
    balance_geometric_with(
        streams,
        vocab,
        weights.coefficients(true),
        weights.coefficients(false),
        temperature,
    )
}

/// Per-query class scores for the configured mode.
pub fn balanced_predictions(
    streams: &EmbeddingStreams,
    vocab: &ClassVocabulary,
    weights: &BalanceWeights,
    temperature: f64,
) -> Result<Tensor> {
    subset_predictions(streams, vocab, weights, StreamSubset::ALL, temperature)
}

/// Scores with only a subset of streams participating: the per-split
/// coefficients are restricted to the subset and renormalized, so `b` alone
/// puts full weight on the mask-attention stream for both splits.
pub fn subset_predictions(
    streams: &EmbeddingStreams,
    vocab: &ClassVocabulary,
    weights: &BalanceWeights,
    subset: StreamSubset,
    temperature: f64,
) -> Result<Tensor> {
    weights.validate()?;
    let coeff_train = subset.restrict(weights.coefficients(true));
    let coeff_new = subset.restrict(weights.coefficients(false));
    match weights.mode {
        BalanceMode::Arithmetic => {
            let (e_train, e_new) = balance_arithmetic_with(streams, coeff_train, coeff_new)?;
            classify(&e_train, &e_new, vocab)
        }
        BalanceMode::Geometric => {
            balance_geometric_with(streams, vocab, coeff_train, coeff_new, temperature)
        }
    }
}

/// Dense class scores and the upsampled argmax label map.
pub struct SegmentationResult {
    /// Quarter-resolution class scores, H/4×W/4×K.
    pub scores: Tensor,
    /// Argmax class index per output pixel, row-major H×W.
    pub label_map: Vec<usize>,
    pub size: (usize, usize),
}

/// `S[h,w,c] = Σ_q sigmoid(M[h,w,q]) · softmax_row(P)[q,c]`, bilinearly
/// upsampled to `out_hw` before the per-pixel argmax.
pub fn segment(masks: &Tensor, predictions: &Tensor, out_hw: (usize, usize)) -> Result<SegmentationResult> {
    if masks.ndim() != 3 || predictions.ndim() != 2 || masks.shape()[2] != predictions.shape()[0] {
        return Err(Error::Shape {
            op: "segment",
            detail: format!("masks {:?} vs predictions {:?}", masks.shape(), predictions.shape()),
        });
    }
    let (h, w, n) = (masks.shape()[0], masks.shape()[1], masks.shape()[2]);
    let k = predictions.shape()[1];
    let md = masks.data();
    let pd = predictions.data();
    // Row-softmax of the query class scores.
    let mut probs = vec![0.0f64; n * k];
    for q in 0..n {
        let row = &pd[q * k..(q + 1) * k];
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = row.iter().map(|&v| (v - mx).exp()).sum();
        for j in 0..k {
            probs[q * k + j] = (row[j] - mx).exp() / denom;
        }
    }
    let mut scores = vec![0.0f64; h * w * k];
    for cell in 0..h * w {
        let out = &mut scores[cell * k..(cell + 1) * k];
        for q in 0..n {
            let x = md[cell * n + q];
            let weight = if x >= 0.0 { 1.0 / (1.0 + (-x).exp()) } else { x.exp() / (1.0 + x.exp()) };
            if weight == 0.0 {
                continue;
            }
            for j in 0..k {
                out[j] += weight * probs[q * k + j];
            }
        }
    }
    drop(md);
    drop(pd);
    let scores = Tensor::from_vec(vec![h, w, k], scores)?;
    let upsampled = scores.bilinear_resize(out_hw.0, out_hw.1)?;
    let ud = upsampled.data();
    let mut label_map = vec![0usize; out_hw.0 * out_hw.1];
    for cell in 0..out_hw.0 * out_hw.1 {
        let row = &ud[cell * k..(cell + 1) * k];
        let mut best = 0usize;
        for j in 1..k {
            if row[j] > row[best] {
                best = j;
            }
        }
        label_map[cell] = best;
    }
    drop(ud);
    Ok(SegmentationResult { scores, label_map, size: out_hw })
}

// ── mIoU ──────────────────────────────────────────────────────────────

/// Per-class intersection/union counters, mergeable across images.
#[derive(Debug, Clone)]
pub struct IouAccumulator {
    pub classes: usize,
    intersection: Vec<u64>,
    union: Vec<u64>,
    present: Vec<bool>,
}

/// Split means; a split that never occurs in the ground truth has no mean.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MiouSummary {
    pub all: Option<f64>,
    pub train: Option<f64>,
    pub new: Option<f64>,
}

impl IouAccumulator {
    pub fn new(classes: usize) -> Self {
        IouAccumulator {
            classes,
            intersection: vec![0; classes],
            union: vec![0; classes],
            present: vec![false; classes],
        }
    }

    /// Accumulate one image. Ground-truth pixels equal to `classes` are
    /// ignored; any other out-of-range value is an error.
    pub fn update(&mut self, predicted: &[usize], truth: &[usize]) -> Result<()> {
        if predicted.len() != truth.len() {
            return Err(Error::Shape {
                op: "miou",
                detail: format!("map sizes differ: {} vs {}", predicted.len(), truth.len()),
            });
        }
        for (&p, &t) in predicted.iter().zip(truth) {
            if t == self.classes {
                continue; // ignore label
            }
            if t > self.classes || p >= self.classes {
                return Err(Error::Shape {
                    op: "miou",
                    detail: format!("label out of range: pred {p}, gt {t}, classes {}", self.classes),
                });
            }
            self.present[t] = true;
            if p == t {
                self.intersection[t] += 1;
                self.union[t] += 1;
            } else {
                self.union[t] += 1;
                self.union[p] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &IouAccumulator) {
        for c in 0..self.classes {
            self.intersection[c] += other.intersection[c];
            self.union[c] += other.union[c];
            self.present[c] |= other.present[c];
        }
    }

    /// IoU per class present in the ground truth.
    pub fn class_iou(&self, class: usize) -> Option<f64> {
        if class < self.classes && self.present[class] && self.union[class] > 0 {
            Some(self.intersection[class] as f64 / self.union[class] as f64)
        } else {
            None
        }
    }

    #[allow(clippy::needless_range_loop)]
    pub fn summary(&self, is_train: &[bool]) -> MiouSummary {
        let mut sums = [(0.0, 0usize); 3]; // all, train, new
        for c in 0..self.classes {
            if let Some(iou) = self.class_iou(c) {
                sums[0].0 += iou;
                sums[0].1 += 1;
                let bucket = if is_train[c] { 1 } else { 2 };
                sums[bucket].0 += iou;
                sums[bucket].1 += 1;
            }
        }
        let mean = |(s, n): (f64, usize)| if n > 0 { Some(s / n as f64) } else { None };
        MiouSummary { all: mean(sums[0]), train: mean(sums[1]), new: mean(sums[2]) }
    }
}

/// Single-map convenience wrapper around [`IouAccumulator`].
pub fn miou(predicted: &[usize], truth: &[usize], vocab: &ClassVocabulary) -> Result<MiouSummary> {
    let mut acc = IouAccumulator::new(vocab.num_classes());
    acc.update(predicted, truth)?;
    Ok(acc.summary(&vocab.is_train))
}

/// Metrics CSV: header `class,iou,split`, one row per class present in the
/// ground truth, then one `mean` summary row per split.
pub fn write_metrics_csv<W: Write>(out: &mut W, vocab: &ClassVocabulary, acc: &IouAccumulator) -> Result<()> {
    writeln!(out, "class,iou,split")?;
    for c in 0..vocab.num_classes() {
        if let Some(iou) = acc.class_iou(c) {
            let split = if vocab.is_train[c] { "train" } else { "new" };
            writeln!(out, "{},{},{}", vocab.names[c], iou, split)?;
        }
    }
    let summary = acc.summary(&vocab.is_train);
    if let Some(v) = summary.train {
        writeln!(out, "mean,{v},train")?;
    }
    if let Some(v) = summary.new {
        writeln!(out, "mean,{v},new")?;
    }
    if let Some(v) = summary.all {
        writeln!(out, "mean,{v},all")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn rand_unit_rows(seed: u64, rows: usize, cols: usize) -> Tensor {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_vec(vec![rows, cols], data).unwrap().l2_normalize_rows().unwrap()
    }

    fn toy_vocab(seed: u64, k: usize, f: usize, c: usize) -> ClassVocabulary {
        let names = (0..k).map(|i| format!("class{i:02}")).collect();
        let flags = (0..k).map(|i| i < f).collect();
        ClassVocabulary::new(names, rand_unit_rows(seed, k, c), flags).unwrap()
    }

    fn toy_streams(seed: u64, n: usize, c: usize) -> EmbeddingStreams {
        EmbeddingStreams {
            supervised: rand_unit_rows(seed, n, c),
            mask_attention: rand_unit_rows(seed + 1, n, c),
            frozen: rand_unit_rows(seed + 2, n, c),
        }
    }

    const ARITH: BalanceMode = BalanceMode::Arithmetic;

    #[test]
    fn arithmetic_vertex_recovers_supervised_stream() {
        let streams = toy_streams(1, 5, 8);
        let w = BalanceWeights { alpha: 1.0, beta: 0.0, gamma: 1.0, mode: ARITH };
        let (e_train, e_new) = balance_arithmetic(&streams, &w).unwrap();
        assert_eq!(e_train.to_vec(), streams.supervised.to_vec());
        assert_eq!(e_new.to_vec(), streams.supervised.to_vec());
    }

    #[test]
    fn arithmetic_hand_case() {
        let streams = EmbeddingStreams {
            supervised: Tensor::from_vec(vec![1, 2], vec![1.0, 0.0]).unwrap(),
            mask_attention: Tensor::from_vec(vec![1, 2], vec![0.0, 1.0]).unwrap(),
            frozen: Tensor::from_vec(vec![1, 2], vec![1.0, 1.0]).unwrap(),
        };
        let w = BalanceWeights { alpha: 0.2, beta: 0.7, gamma: 0.0, mode: ARITH };
        let (e_train, _) = balance_arithmetic(&streams, &w).unwrap();
        let got = e_train.to_vec();
        assert!((got[0] - 0.3).abs() < 1e-12 && (got[1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn arithmetic_matches_scalar_loop_oracle() {
        let streams = toy_streams(3, 4, 6);
        let w = BalanceWeights { alpha: 0.25, beta: 0.5, gamma: 0.1, mode: ARITH };
        let (e_train, e_new) = balance_arithmetic(&streams, &w).unwrap();
        let (a, b, d) = (
            streams.supervised.to_vec(),
            streams.mask_attention.to_vec(),
            streams.frozen.to_vec(),
        );
        for i in 0..24 {
            let t = 0.25 * a[i] + 0.5 * b[i] + 0.25 * d[i];
            let n = 0.1 * a[i] + 0.5 * b[i] + 0.4 * d[i];
            assert!((e_train.to_vec()[i] - t).abs() <= 1e-12);
            assert!((e_new.to_vec()[i] - n).abs() <= 1e-12);
        }
    }

    #[test]
    fn invalid_weights_are_rejected() {
        let streams = toy_streams(4, 2, 4);
        let w = BalanceWeights { alpha: 0.6, beta: 0.6, gamma: 0.0, mode: ARITH };
        assert!(balance_arithmetic(&streams, &w).is_err());
        let w = BalanceWeights { alpha: -0.1, beta: 0.5, gamma: 0.0, mode: ARITH };
        assert!(balance_arithmetic(&streams, &w).is_err());
    }

    #[test]
    fn geometric_beta_one_is_mask_attention_only() {
        let streams = toy_streams(5, 3, 8);
        let vocab = toy_vocab(6, 5, 3, 8);
        let w = BalanceWeights { alpha: 0.0, beta: 1.0, gamma: 0.0, mode: BalanceMode::Geometric };
        let p = balance_geometric(&streams, &vocab, &w, 0.01).unwrap();
        // Expected: per-subset temperature softmax of B's cosine scores.
        let b = streams.mask_attention.to_vec();
        let te = vocab.embeddings.to_vec();
        let pd = p.to_vec();
        for q in 0..3 {
            let cos: Vec<f64> = (0..5)
                .map(|cls| (0..8).map(|j| b[q * 8 + j] * te[cls * 8 + j]).sum::<f64>())
                .collect();
            for (subset, flag) in [(vec![0usize, 1, 2], true), (vec![3usize, 4], false)] {
                let _ = flag;
                let mx = subset.iter().map(|&i| cos[i] / 0.01).fold(f64::NEG_INFINITY, f64::max);
                let denom: f64 = subset.iter().map(|&i| (cos[i] / 0.01 - mx).exp()).sum();
                for &i in &subset {
                    let want = (cos[i] / 0.01 - mx).exp() / denom;
                    assert!((pd[q * 5 + i] - want).abs() <= 1e-9);
                }
            }
        }
    }

    #[test]
    fn geometric_is_idempotent_for_identical_streams() {
        let shared = rand_unit_rows(7, 3, 8);
        let streams = EmbeddingStreams {
            supervised: shared.clone(),
            mask_attention: shared.clone(),
            frozen: shared.clone(),
        };
        let vocab = toy_vocab(8, 4, 2, 8);
        let w1 = BalanceWeights { alpha: 0.2, beta: 0.7, gamma: 0.0, mode: BalanceMode::Geometric };
        let w2 = BalanceWeights { alpha: 0.0, beta: 1.0, gamma: 0.0, mode: BalanceMode::Geometric };
        let p1 = balance_geometric(&streams, &vocab, &w1, 0.05).unwrap().to_vec();
        let p2 = balance_geometric(&streams, &vocab, &w2, 0.05).unwrap().to_vec();
        for (x, y) in p1.iter().zip(&p2) {
            assert!((x - y).abs() <= 1e-9);
        }
    }

    #[test]
    fn geometric_matches_scalar_oracle() {
        let streams = toy_streams(9, 2, 6);
        let vocab = toy_vocab(10, 3, 2, 6);
        let w = BalanceWeights { alpha: 0.2, beta: 0.7, gamma: 0.0, mode: BalanceMode::Geometric };
        let tau = 0.03;
        let p = balance_geometric(&streams, &vocab, &w, tau).unwrap().to_vec();
        let te = vocab.embeddings.to_vec();
        let layers = [
            (streams.supervised.to_vec(), [0.2, 0.0]),
            (streams.mask_attention.to_vec(), [0.7, 0.7]),
            (streams.frozen.to_vec(), [0.1, 0.3]),
        ];
        for q in 0..2 {
            for (subset, split) in [(vec![0usize, 1], 0usize), (vec![2usize], 1)] {
                let mut combined = vec![1.0f64; subset.len()];
                for (sd, exps) in &layers {
                    let cos: Vec<f64> = subset
                        .iter()
                        .map(|&cls| (0..6).map(|j| sd[q * 6 + j] * te[cls * 6 + j]).sum::<f64>() / tau)
                        .collect();
                    let mx = cos.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let denom: f64 = cos.iter().map(|&v| (v - mx).exp()).sum();
                    for (j, &v) in cos.iter().enumerate() {
                        combined[j] *= ((v - mx).exp() / denom).powf(exps[split]);
                    }
                }
                for (j, &cls) in subset.iter().enumerate() {
                    assert!((p[q * 3 + cls] - combined[j]).abs() <= 1e-9);
                }
            }
        }
    }

    #[test]
    fn non_positive_temperature_is_an_error() {
        let streams = toy_streams(11, 2, 4);
        let vocab = toy_vocab(12, 3, 1, 4);
        let w = BalanceWeights { alpha: 0.2, beta: 0.7, gamma: 0.0, mode: BalanceMode::Geometric };
        assert!(balance_geometric(&streams, &vocab, &w, 0.0).is_err());
    }

    #[test]
    fn classify_degenerate_splits() {
        let c = 6;
        let e_train = rand_unit_rows(13, 4, c);
        let e_new = rand_unit_rows(14, 4, c);
        let all_train = toy_vocab(15, 3, 3, c);
        let p = classify(&e_train, &e_new, &all_train).unwrap();
        let td = e_train.to_vec();
        let te = all_train.embeddings.to_vec();
        for q in 0..4 {
            for cls in 0..3 {
                let want: f64 = (0..c).map(|j| td[q * c + j] * te[cls * c + j]).sum();
                assert!((p.to_vec()[q * 3 + cls] - want).abs() <= 1e-12);
            }
        }
        let all_new = toy_vocab(16, 3, 0, c);
        let p = classify(&e_train, &e_new, &all_new).unwrap();
        let nd = e_new.to_vec();
        let te = all_new.embeddings.to_vec();
        for q in 0..4 {
            for cls in 0..3 {
                let want: f64 = (0..c).map(|j| nd[q * c + j] * te[cls * c + j]).sum();
                assert!((p.to_vec()[q * 3 + cls] - want).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn classify_scatter_matches_index_map_oracle() {
        let c = 5;
        let k = 6;
        // Interleaved split: train = {0, 2, 5}.
        let names = (0..k).map(|i| format!("c{i}")).collect();
        let flags = vec![true, false, true, false, false, true];
        let vocab = ClassVocabulary::new(names, rand_unit_rows(17, k, c), flags.clone()).unwrap();
        let e_train = rand_unit_rows(18, 3, c);
        let e_new = rand_unit_rows(19, 3, c);
        let p = classify(&e_train, &e_new, &vocab).unwrap().to_vec();

        // Oracle: build the two column blocks, concatenate, rearrange.
        let te = vocab.embeddings.to_vec();
        let train_idx: Vec<usize> = (0..k).filter(|&i| flags[i]).collect();
        let new_idx: Vec<usize> = (0..k).filter(|&i| !flags[i]).collect();
        let td = e_train.to_vec();
        let nd = e_new.to_vec();
        for q in 0..3 {
            let mut concat_cols = Vec::new();
            for &cls in &train_idx {
                concat_cols.push((cls, (0..c).map(|j| td[q * c + j] * te[cls * c + j]).sum::<f64>()));
            }
            for &cls in &new_idx {
                concat_cols.push((cls, (0..c).map(|j| nd[q * c + j] * te[cls * c + j]).sum::<f64>()));
            }
            for (cls, want) in concat_cols {
                assert!((p[q * k + cls] - want).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn segment_single_confident_query_labels_everything() {
        let masks = Tensor::full(vec![4, 4, 1], 5.0);
        let p = Tensor::from_vec(vec![1, 3], vec![3.0, -1.0, 0.0]).unwrap();
        let out = segment(&masks, &p, (8, 8)).unwrap();
        assert!(out.label_map.iter().all(|&l| l == 0));
    }

    #[test]
    fn segment_two_disjoint_masks_give_two_regions() {
        let mut md = vec![0.0f64; 4 * 4 * 2];
        for y in 0..4 {
            for x in 0..4 {
                md[(y * 4 + x) * 2] = if x < 2 { 1000.0 } else { -1000.0 };
                md[(y * 4 + x) * 2 + 1] = if x >= 2 { 1000.0 } else { -1000.0 };
            }
        }
        let masks = Tensor::from_vec(vec![4, 4, 2], md).unwrap();
        let p = Tensor::from_vec(vec![2, 2], vec![5.0, -5.0, -5.0, 5.0]).unwrap();
        let out = segment(&masks, &p, (4, 4)).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                assert_eq!(out.label_map[y * 4 + x], usize::from(x >= 2));
            }
        }
    }

    #[test]
    fn segment_matches_triple_loop_oracle() {
        let mut rng = ChaCha20Rng::seed_from_u64(20);
        let masks = Tensor::from_vec(
            vec![3, 4, 5],
            (0..60).map(|_| rng.gen_range(-3.0..3.0)).collect(),
        )
        .unwrap();
        let p = rand_unit_rows(21, 5, 4); // N=5 queries, K=4 classes (unit rows fine as scores)
        let out = segment(&masks, &p, (3, 4)).unwrap();
        let sd = out.scores.to_vec();
        let md = masks.to_vec();
        let pd = p.to_vec();
        let mut probs = [0.0f64; 5 * 4];
        for q in 0..5 {
            let row = &pd[q * 4..(q + 1) * 4];
            let denom: f64 = row.iter().map(|v| v.exp()).sum();
            for j in 0..4 {
                probs[q * 4 + j] = row[j].exp() / denom;
            }
        }
        for cell in 0..12 {
            for j in 0..4 {
                let mut want = 0.0;
                for q in 0..5 {
                    want += (1.0 / (1.0 + (-md[cell * 5 + q]).exp())) * probs[q * 4 + j];
                }
                assert!((sd[cell * 4 + j] - want).abs() <= 1e-9);
                assert!(sd[cell * 4 + j] >= 0.0 && sd[cell * 4 + j] <= 5.0 + 1e-12);
            }
        }
    }

    #[test]
    fn miou_perfect_and_disjoint() {
        let vocab = toy_vocab(22, 3, 2, 4);
        let gt = vec![0, 0, 1, 1, 2, 2];
        let perfect = miou(&gt, &gt, &vocab).unwrap();
        assert_eq!(perfect.all, Some(1.0));
        assert_eq!(perfect.train, Some(1.0));
        assert_eq!(perfect.new, Some(1.0));

        let pred = vec![1, 1, 0, 0, 2, 2]; // classes 0/1 disjoint from gt
        let got = miou(&pred, &gt, &vocab).unwrap();
        assert_eq!(got.all, Some(1.0 / 3.0));
        assert_eq!(got.new, Some(1.0));
        assert_eq!(got.train, Some(0.0));
    }

    #[test]
    fn miou_matches_counting_oracle_and_respects_ignore() {
        let mut rng = ChaCha20Rng::seed_from_u64(23);
        let k = 4;
        let vocab = toy_vocab(24, k, 2, 4);
        let pred: Vec<usize> = (0..64).map(|_| rng.gen_range(0..k)).collect();
        let gt: Vec<usize> = (0..64).map(|_| rng.gen_range(0..=k)).collect(); // k = ignore
        let got = miou(&pred, &gt, &vocab).unwrap();

        let mut inter = vec![0u64; k];
        let mut uni = vec![0u64; k];
        let mut present = vec![false; k];
        for (&p, &t) in pred.iter().zip(&gt) {
            if t == k {
                continue;
            }
            present[t] = true;
            if p == t {
                inter[t] += 1;
                uni[t] += 1;
            } else {
                uni[t] += 1;
                uni[p] += 1;
            }
        }
        let mut all = (0.0, 0);
        for c in 0..k {
            if present[c] && uni[c] > 0 {
                all.0 += inter[c] as f64 / uni[c] as f64;
                all.1 += 1;
            }
        }
        assert_eq!(got.all, Some(all.0 / all.1 as f64));
    }

    #[test]
    fn miou_is_invariant_to_class_relabeling() {
        let vocab = toy_vocab(25, 3, 2, 4);
        let pred = vec![0, 1, 2, 0, 1, 2, 0, 0];
        let gt = vec![0, 1, 1, 0, 2, 2, 1, 0];
        let base = miou(&pred, &gt, &vocab).unwrap();
        // Swap labels 0 and 2 everywhere (and the matching vocab flags).
        let swap = |v: &[usize]| v.iter().map(|&x| match x {
            0 => 2,
            2 => 0,
            other => other,
        }).collect::<Vec<_>>();
        let names = vec!["c0".into(), "c1".into(), "c2".into()];
        let flags = vec![vocab.is_train[2], vocab.is_train[1], vocab.is_train[0]];
        let swapped_vocab = ClassVocabulary::new(names, rand_unit_rows(26, 3, 4), flags).unwrap();
        let swapped = miou(&swap(&pred), &swap(&gt), &swapped_vocab).unwrap();
        assert_eq!(base.all, swapped.all);
    }

    #[test]
    fn modes_agree_on_argmax_for_identical_streams() {
        let shared = rand_unit_rows(27, 4, 8);
        let streams = EmbeddingStreams {
            supervised: shared.clone(),
            mask_attention: shared.clone(),
            frozen: shared,
        };
        let vocab = toy_vocab(28, 5, 3, 8);
        let wa = BalanceWeights { alpha: 0.2, beta: 0.7, gamma: 0.0, mode: ARITH };
        let wg = BalanceWeights { alpha: 0.2, beta: 0.7, gamma: 0.0, mode: BalanceMode::Geometric };
        let pa = balanced_predictions(&streams, &vocab, &wa, 0.01).unwrap().to_vec();
        let pg = balanced_predictions(&streams, &vocab, &wg, 0.01).unwrap().to_vec();
        let argmax_subset = |p: &[f64], q: usize, subset: &[usize]| {
            subset
                .iter()
                .copied()
                .max_by(|&a, &b| p[q * 5 + a].partial_cmp(&p[q * 5 + b]).unwrap())
                .unwrap()
        };
        for q in 0..4 {
            for subset in [vec![0usize, 1, 2], vec![3usize, 4]] {
                assert_eq!(argmax_subset(&pa, q, &subset), argmax_subset(&pg, q, &subset));
            }
        }
    }

    #[test]
    fn subset_parsing_and_restriction() {
        assert_eq!(StreamSubset::parse("abd").unwrap(), StreamSubset::ALL);
        assert_eq!(StreamSubset::parse("b").unwrap().token(), "b");
        assert!(StreamSubset::parse("aa").is_err());
        assert!(StreamSubset::parse("x").is_err());

        let b_only = StreamSubset::parse("b").unwrap();
        assert_eq!(b_only.restrict([0.2, 0.7, 0.1]), [0.0, 1.0, 0.0]);
        let ab = StreamSubset::parse("ab").unwrap();
        let r = ab.restrict([0.2, 0.7, 0.1]);
        assert!((r[0] - 0.2 / 0.9).abs() < 1e-12 && (r[1] - 0.7 / 0.9).abs() < 1e-12 && r[2] == 0.0);
        // All included coefficients zero: uniform fallback.
        let ad = StreamSubset::parse("ad").unwrap();
        assert_eq!(ad.restrict([0.0, 1.0, 0.0]), [0.5, 0.0, 0.5]);
    }

    #[test]
    fn subset_b_equals_pure_mask_attention_classifier() {
        let streams = toy_streams(31, 4, 6);
        let vocab = toy_vocab(32, 5, 2, 6);
        let w = BalanceWeights { alpha: 0.2, beta: 0.7, gamma: 0.0, mode: ARITH };
        let got = subset_predictions(&streams, &vocab, &w, StreamSubset::parse("b").unwrap(), 0.01)
            .unwrap()
            .to_vec();
        let want = classify(&streams.mask_attention, &streams.mask_attention, &vocab)
            .unwrap()
            .to_vec();
        for (x, y) in got.iter().zip(&want) {
            assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn metrics_csv_format() {
        let vocab = toy_vocab(29, 3, 2, 4);
        let mut acc = IouAccumulator::new(3);
        acc.update(&[0, 0, 1, 2], &[0, 1, 1, 2]).unwrap();
        let mut buf = Vec::new();
        write_metrics_csv(&mut buf, &vocab, &acc).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "class,iou,split");
        assert_eq!(lines[1], "class00,0.5,train");
        assert_eq!(lines[2], "class01,0.5,train");
        assert_eq!(lines[3], "class02,1,new");
        assert!(lines.contains(&"mean,0.5,train"));
        assert!(lines.contains(&"mean,1,new"));
        assert!(lines.iter().any(|l| l.starts_with("mean,") && l.ends_with(",all")));
    }
}
