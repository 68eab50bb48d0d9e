use crate::encoders::PromptStrategy;
use crate::error::Result;
use crate::inference::{
    segment, subset_predictions, BalanceWeights, ClassVocabulary, IouAccumulator, SegmentationResult,
    StreamSubset,
};
use crate::Tensor;

use super::config::RunConfig;
use super::dataset::Dataset;
use super::model::Model;

/// Inference-time switches: balancing weights and mode, participating
/// streams, prompt strategy, geometric temperature.
#[derive(Debug, Clone, Copy)]
pub struct EvalOptions {
    pub weights: BalanceWeights,
    pub subset: StreamSubset,
    pub temperature: f64,
    pub prompts: PromptStrategy,
}

impl EvalOptions {
    pub fn from_config(cfg: &RunConfig) -> Self {
        EvalOptions {
            weights: BalanceWeights {
                alpha: cfg.alpha,
                beta: cfg.beta,
                gamma: cfg.gamma,
                mode: cfg.balance_mode,
            },
            subset: cfg.embeddings,
            temperature: cfg.temperature,
            prompts: cfg.prompts,
        }
    }
}

/// Segment one image with the balanced streams.
pub fn infer_image(
    model: &Model,
    image: &Tensor,
    vocab: &ClassVocabulary,
    opts: &EvalOptions,
) -> Result<SegmentationResult> {
    let (out, clip_feats) = model.forward(image)?;
    let streams = model.streams(&out, &clip_feats)?;
    let predictions = subset_predictions(&streams, vocab, &opts.weights, opts.subset, opts.temperature)?;
    segment(&out.masks().detach(), &predictions, (image.shape()[0], image.shape()[1]))
}

/// Run the eval split and accumulate per-class IoU against the stored label
/// maps. Images are visited in sorted filename order.
pub fn evaluate(model: &Model, data: &Dataset, opts: &EvalOptions) -> Result<(ClassVocabulary, IouAccumulator)> {
    let embeddings = model.text.class_embeddings(&data.class_names, opts.prompts)?;
    let vocab = ClassVocabulary::new(data.class_names.clone(), embeddings, data.is_train_class.clone())?;
    let mut acc = IouAccumulator::new(vocab.num_classes());
    for item in &data.eval_items {
        let image = Dataset::load_image_tensor(&item.image)?;
        let seg = infer_image(model, &image, &vocab, opts)?;
        let (_, _, labels) = Dataset::load_label_map(&item.labels, vocab.num_classes())?;
        acc.update(&seg.label_map, &labels)?;
    }
    Ok((vocab, acc))
}
