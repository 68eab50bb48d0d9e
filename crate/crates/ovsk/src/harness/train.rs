use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::losses::{total_loss, GroundTruth};
use crate::numerics::backward;
use crate::Tensor;

use super::config::RunConfig;
use super::dataset::{ground_truth_from_labels, Dataset};
use super::model::{Model, Param};

/// Decoupled weight-decay Adam: decay applies directly to the parameter,
/// the moment estimates see only the raw gradient. Moments (0.9, 0.999),
/// epsilon 1e-8.
pub struct AdamW {
    pub learning_rate: f64,
    pub weight_decay: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step_count: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(learning_rate: f64, weight_decay: f64, params: &[Param]) -> Self {
        AdamW {
            learning_rate,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step_count: 0,
            first: params.iter().map(|p| vec![0.0; p.tensor.numel()]).collect(),
            second: params.iter().map(|p| vec![0.0; p.tensor.numel()]).collect(),
        }
    }

    /// One update over the same parameter list the optimizer was built with.
    /// Parameters without a gradient this step still receive weight decay.
    pub fn step(&mut self, params: &[Param]) -> Result<()> {
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, p) in params.iter().enumerate() {
            let grad = p.tensor.grad();
            let grad = grad.as_deref().unwrap_or(&[]);
            let mut values = p.tensor.to_vec();
            let m = &mut self.first[i];
            let v = &mut self.second[i];
            for j in 0..values.len() {
                let g = if grad.is_empty() { 0.0 } else { grad[j] };
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                values[j] -= self.learning_rate * self.weight_decay * values[j];
                values[j] -= self.learning_rate * mhat / (vhat.sqrt() + self.eps);
            }
            p.tensor.set_data(&values)?;
            p.tensor.zero_grad();
        }
        Ok(())
    }
}

pub struct TrainOutcome {
    pub model: Model,
    /// CSV text: `iter,sem_seg,ssc,total`, one row per iteration.
    pub loss_log: String,
    pub iterations: usize,
}

/// Single-threaded deterministic training loop over the dataset's training
/// split. Optimizes only the trainable leaves; a non-finite loss aborts with
/// the iteration index.
pub fn train(cfg: &RunConfig, data: &Dataset) -> Result<TrainOutcome> {
    if data.train_items.is_empty() {
        return Err(Error::Config("dataset has no training images".into()));
    }
    let model = Model::new(cfg)?;
    let train_text = model.train_text_embeddings(data)?;
    let weights = model.loss_weights();
    let train_index = data.train_index_map();

    let mut images: Vec<Tensor> = Vec::with_capacity(data.train_items.len());
    let mut truths: Vec<GroundTruth> = Vec::with_capacity(data.train_items.len());
    for item in &data.train_items {
        let image = Dataset::load_image_tensor(&item.image)?;
        let (w, h, labels) = Dataset::load_label_map(&item.labels, data.class_names.len())?;
        truths.push(ground_truth_from_labels(&labels, w, h, &train_index)?);
        images.push(image);
    }

    let trainables = model.trainable_params();
    let mut optimizer = AdamW::new(cfg.learning_rate, cfg.weight_decay, &trainables);
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(0x736875666c65));
    let mut cursor = order.len();

    let mut log = String::from("iter,sem_seg,ssc,total\n");
    for iteration in 0..cfg.iterations {
        let mut run = || -> Result<(Tensor, f64, f64)> {
            let mut batch_total: Option<Tensor> = None;
            let mut sem_sum = 0.0;
            let mut ssc_sum = 0.0;
            for _ in 0..cfg.batch_size {
                if cursor == order.len() {
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                let idx = order[cursor];
                cursor += 1;
                let (out, _feats) = model.forward(&images[idx])?;
                let pred = model.predictions(&out, &train_text)?;
                let breakdown = total_loss(&pred, &truths[idx], &train_text, &weights, cfg.ssc_placement)?;
                sem_sum += breakdown.sem_seg;
                ssc_sum += breakdown.ssc;
                batch_total = Some(match batch_total {
                    Some(acc) => acc.add(&breakdown.total)?,
                    None => breakdown.total,
                });
            }
            let scale = 1.0 / cfg.batch_size as f64;
            Ok((
                batch_total.unwrap().scale(scale)?,
                sem_sum * scale,
                ssc_sum * scale,
            ))
        };
        // A non-finite value anywhere in the forward/loss graph aborts with
        // the iteration index.
        let (loss, sem, ssc) = run().map_err(|e| match e {
            Error::NonFinite { .. } => Error::Training { iteration },
            other => other,
        })?;
        let value = loss.item();
        backward(&loss)?;
        optimizer.step(&trainables)?;
        log.push_str(&format!("{iteration},{sem},{ssc},{value}\n"));
    }
    Ok(TrainOutcome { model, loss_log: log, iterations: cfg.iterations })
}
