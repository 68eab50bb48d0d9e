use rand_chacha::ChaCha20Rng;

use crate::error::Result;
use crate::fusion::{level_extents, FeaturePyramid};
use crate::Tensor;

use super::{gaussian_param, quarter_extents};

/// One pyramid step: 1×1 lateral projection, nearest 2x upsample, 3×3 refine.
pub struct PixelStage {
    pub lateral_weight: Tensor,
    pub lateral_bias: Tensor,
    pub refine_kernel: Tensor,
    pub refine_bias: Tensor,
}

/// Plain convolutional top-down pathway. Walks the pyramid from the
/// coarsest level, doubling resolution per stage, and finishes with a 1×1
/// projection to the mask-embedding width at quarter resolution.
pub struct PixelDecoder {
    pub stages: [PixelStage; 3],
    pub out_weight: Tensor,
    pub out_bias: Tensor,
    pub hidden: usize,
    pub embed_dim: usize,
}

/// Stage features (coarse to fine, H/16 → H/8 → H/4) plus the mask-feature
/// map at H/4 with `embed_dim` channels.
pub struct PixelDecoderOutput {
    pub stages: [Tensor; 3],
    pub mask_features: Tensor,
}

fn conv1x1(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (h, w, ci) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let co = weight.shape()[1];
    x.reshape(vec![h * w, ci])?
        .matmul(weight)?
        .add_bias(bias)?
        .reshape(vec![h, w, co])
}

/// Nearest 2x upsample, then trim/pad by resampling when ceiling rules make
/// the doubled extents disagree with the exact target grid.
fn up_to(x: &Tensor, th: usize, tw: usize) -> Result<Tensor> {
    let up = x.nearest_upsample2x()?;
    if up.shape()[0] == th && up.shape()[1] == tw {
        Ok(up)
    } else {
        up.bilinear_resize(th, tw)
    }
}

impl PixelDecoder {
    pub fn new(rng: &mut ChaCha20Rng, in_channels: usize, hidden: usize, embed_dim: usize) -> Self {
        let stage = |rng: &mut ChaCha20Rng| PixelStage {
            lateral_weight: gaussian_param(rng, vec![in_channels, hidden]),
            lateral_bias: Tensor::param(vec![hidden], vec![0.0; hidden]).unwrap(),
            refine_kernel: gaussian_param(rng, vec![3, 3, hidden, hidden]),
            refine_bias: Tensor::param(vec![hidden], vec![0.0; hidden]).unwrap(),
        };
        PixelDecoder {
            stages: [stage(rng), stage(rng), stage(rng)],
            out_weight: gaussian_param(rng, vec![hidden, embed_dim]),
            out_bias: Tensor::param(vec![embed_dim], vec![0.0; embed_dim]).unwrap(),
            hidden,
            embed_dim,
        }
    }

    pub fn forward(&self, pyr: &FeaturePyramid, image_hw: (usize, usize)) -> Result<PixelDecoderOutput> {
        pyr.validate()?;
        // Coarsest first: level 2 (H/32) -> H/16 -> H/8 -> H/4.
        let mut stages = Vec::with_capacity(3);
        let mut x: Option<Tensor> = None;
        for (step, level_index) in [2usize, 1, 0].iter().enumerate() {
            let stage = &self.stages[step];
            let lateral = conv1x1(&pyr.levels[*level_index], &stage.lateral_weight, &stage.lateral_bias)?;
            let merged = match x {
                Some(prev) => prev.add(&lateral)?,
                None => lateral,
            };
            let (th, tw) = if *level_index == 0 {
                quarter_extents(image_hw)
            } else {
                level_extents(image_hw, level_index - 1)
            };
            let up = up_to(&merged, th, tw)?;
            let refined = up.conv3x3(&stage.refine_kernel, &stage.refine_bias)?.relu()?;
            stages.push(refined.clone());
            x = Some(refined);
        }
        let top = stages.last().unwrap();
        let mask_features = conv1x1(top, &self.out_weight, &self.out_bias)?;
        let stages: [Tensor; 3] = stages.try_into().expect("three stages");
        Ok(PixelDecoderOutput { stages, mask_features })
    }

    pub fn params(&self, prefix: &str) -> Vec<(String, Tensor, bool)> {
        let mut out = Vec::new();
        for (i, s) in self.stages.iter().enumerate() {
            out.push((format!("{prefix}.stage{i}.lateral.weight"), s.lateral_weight.clone(), true));
            out.push((format!("{prefix}.stage{i}.lateral.bias"), s.lateral_bias.clone(), true));
            out.push((format!("{prefix}.stage{i}.refine.kernel"), s.refine_kernel.clone(), true));
            out.push((format!("{prefix}.stage{i}.refine.bias"), s.refine_bias.clone(), true));
        }
        out.push((format!("{prefix}.out.weight"), self.out_weight.clone(), true));
        out.push((format!("{prefix}.out.bias"), self.out_bias.clone(), true));
        out
    }
}
