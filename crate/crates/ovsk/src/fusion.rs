//! Fuse the two encoders' multi-scale features: a trainable linear layer
//! matches channel counts, both stacks are resampled to the pyramid grid,
//! and matching levels are added elementwise.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::Tensor;

/// Fused multi-scale features. Level `i` (0-indexed) lives at
/// ⌈H/2^{i+3}⌉ × ⌈W/2^{i+3}⌉, i.e. H/8, H/16, H/32; every level shares the
/// spatial encoder's channel count.
pub struct FeaturePyramid {
    pub levels: [Tensor; 3],
}

/// Ceiling-divide target extents for pyramid level `level` in 0..3.
pub fn level_extents(image_hw: (usize, usize), level: usize) -> (usize, usize) {
    let stride = 1usize << (level + 3);
    (image_hw.0.div_ceil(stride), image_hw.1.div_ceil(stride))
}

impl FeaturePyramid {
    pub fn channels(&self) -> usize {
        self.levels[0].shape()[2]
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels();
        for (i, l) in self.levels.iter().enumerate() {
            if l.ndim() != 3 || l.shape()[2] != c {
                return Err(Error::Shape {
                    op: "feature_pyramid",
                    detail: format!("level {i} has shape {:?}, expected …×{c}", l.shape()),
                });
            }
        }
        Ok(())
    }
}

/// Per-position affine map from the semantic encoder's channel count to the
/// spatial encoder's. Trainable.
pub struct ChannelProjection {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ChannelProjection {
    pub fn new(seed: u64, c_in: usize, c_out: usize) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let dist = Normal::new(0.0f64, 1.0 / (c_in as f64).sqrt()).unwrap();
        let data: Vec<f64> = (0..c_in * c_out).map(|_| dist.sample(&mut rng)).collect();
        ChannelProjection {
            weight: Tensor::param(vec![c_in, c_out], data).unwrap(),
            bias: Tensor::param(vec![c_out], vec![0.0; c_out]).unwrap(),
        }
    }

    /// Identity map (square only); handy as a reference point.
    pub fn identity(c: usize) -> Self {
        let mut data = vec![0.0f64; c * c];
        for i in 0..c {
            data[i * c + i] = 1.0;
        }
        ChannelProjection {
            weight: Tensor::param(vec![c, c], data).unwrap(),
            bias: Tensor::param(vec![c], vec![0.0; c]).unwrap(),
        }
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        if x.ndim() != 3 || x.shape()[2] != self.weight.shape()[0] {
            return Err(Error::Shape {
                op: "project_channels",
                detail: format!(
                    "input {:?} does not match projection {:?}",
                    x.shape(),
                    self.weight.shape()
                ),
            });
        }
        let (h, w) = (x.shape()[0], x.shape()[1]);
        let c_out = self.weight.shape()[1];
        x.reshape(vec![h * w, self.weight.shape()[0]])?
            .matmul(&self.weight)?
            .add_bias(&self.bias)?
            .reshape(vec![h, w, c_out])
    }
}

/// Resample both tap stacks to the pyramid grid and add them. Inputs must
/// already share a channel count (project first).
pub fn fuse(spatial: &[Tensor; 3], semantic: &[Tensor; 3], image_hw: (usize, usize)) -> Result<FeaturePyramid> {
    let c = spatial[0].shape()[2];
    let mut levels = Vec::with_capacity(3);
    for i in 0..3 {
        if semantic[i].ndim() != 3 || spatial[i].ndim() != 3 || semantic[i].shape()[2] != c || spatial[i].shape()[2] != c
        {
            return Err(Error::Shape {
                op: "fuse",
                detail: format!(
                    "level {i}: channel mismatch after projection ({:?} vs {:?})",
                    spatial[i].shape(),
                    semantic[i].shape()
                ),
            });
        }
        let (th, tw) = level_extents(image_hw, i);
        let a = spatial[i].bilinear_resize(th, tw)?;
        let b = semantic[i].bilinear_resize(th, tw)?;
        levels.push(a.add(&b)?);
    }
    let levels: [Tensor; 3] = levels.try_into().expect("three levels");
    let pyr = FeaturePyramid { levels };
    pyr.validate()?;
    Ok(pyr)
}
