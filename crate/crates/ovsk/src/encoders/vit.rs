use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numerics::{multi_head_attention, AttentionParams};
use crate::Tensor;

/// Width multiplier of the transformer MLP.
const MLP_RATIO: usize = 4;
const LN_EPS: f64 = 1e-5;

/// Which feature contract an encoder instance serves.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderRole {
    /// Spatial encoder: grid tokens only, taps at the last three blocks.
    SamLike,
    /// Semantic encoder: CLS token, taps at depth/4, depth/2, 3·depth/4,
    /// and a frozen projection to the shared embedding width.
    ClipLike,
}

#[derive(Debug, Clone)]
pub struct ViTConfig {
    pub patch_size: usize,
    pub depth: usize,
    pub heads: usize,
    pub width: usize,
    /// 0-indexed blocks whose outputs are exposed, in block order.
    pub tap_blocks: Vec<usize>,
    pub role: EncoderRole,
    /// Side length of the stored positional-embedding grid.
    pub base_grid: usize,
    /// Final projection width (ClipLike only).
    pub embed_dim: usize,
}

impl ViTConfig {
    pub fn sam_like(patch_size: usize, depth: usize, heads: usize, width: usize, base_grid: usize) -> Self {
        ViTConfig {
            patch_size,
            depth,
            heads,
            width,
            tap_blocks: vec![depth.saturating_sub(3), depth.saturating_sub(2), depth.saturating_sub(1)],
            role: EncoderRole::SamLike,
            base_grid,
            embed_dim: width,
        }
    }

    pub fn clip_like(
        patch_size: usize,
        depth: usize,
        heads: usize,
        width: usize,
        base_grid: usize,
        embed_dim: usize,
    ) -> Self {
        ViTConfig {
            patch_size,
            depth,
            heads,
            width,
            tap_blocks: vec![depth / 4 - 1, depth / 2 - 1, 3 * depth / 4 - 1],
            role: EncoderRole::ClipLike,
            base_grid,
            embed_dim,
        }
    }

    /// Masked tail length for the ClipLike role: the last depth/4 blocks.
    pub fn masked_blocks(&self) -> usize {
        self.depth / 4
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 4 {
            return Err(Error::Config(format!("encoder depth must be >= 4, got {}", self.depth)));
        }
        if self.width == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "width {} must be a positive multiple of heads {}",
                self.width, self.heads
            )));
        }
        if self.tap_blocks.iter().any(|&b| b >= self.depth) {
            return Err(Error::Config(format!(
                "tap blocks {:?} out of range for depth {}",
                self.tap_blocks, self.depth
            )));
        }
        if self.patch_size == 0 || self.base_grid == 0 || self.embed_dim == 0 {
            return Err(Error::Config("patch size, base grid and embed dim must be positive".into()));
        }
        Ok(())
    }
}

pub struct VitBlock {
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub attn: AttentionParams<f64>,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
    pub fc1_weight: Tensor,
    pub fc1_bias: Tensor,
    pub fc2_weight: Tensor,
    pub fc2_bias: Tensor,
}

/// Spatial-encoder output: three same-resolution grid taps, block order.
pub struct SamFeatures {
    pub taps: [Tensor; 3],
    pub grid: (usize, usize),
}

/// Semantic-encoder output up to the masked tail.
pub struct ClipFeatures {
    /// Grid taps (CLS stripped), h×w×width each.
    pub taps: [Tensor; 3],
    /// Token sequence feeding the final blocks; CLS token first.
    pub mid_tokens: Tensor,
    pub grid: (usize, usize),
    /// Image size actually encoded after downsampling and rounding.
    pub input_size: (usize, usize),
}

pub struct VitEncoder {
    pub cfg: ViTConfig,
    pub patch_weight: Tensor,
    pub patch_bias: Tensor,
    /// Trainable positional grid, (base_grid²)×width.
    pub pos: Tensor,
    pub cls_token: Option<Tensor>,
    /// Trainable CLS positional embedding.
    pub cls_pos: Option<Tensor>,
    pub blocks: Vec<VitBlock>,
    /// Frozen projection width→embed_dim (ClipLike only).
    pub out_proj: Option<Tensor>,
}

fn gaussian(rng: &mut ChaCha20Rng, shape: Vec<usize>, trainable: bool) -> Tensor {
    let dist = Normal::new(0.0f64, 0.02).unwrap();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| dist.sample(rng)).collect();
    if trainable {
        Tensor::param(shape, data).unwrap()
    } else {
        Tensor::from_vec(shape, data).unwrap()
    }
}

fn frozen_attention(rng: &mut ChaCha20Rng, width: usize, heads: usize) -> AttentionParams<f64> {
    AttentionParams {
        heads,
        wq: gaussian(rng, vec![width, width], false),
        bq: Tensor::zeros(vec![width]),
        wk: gaussian(rng, vec![width, width], false),
        bk: Tensor::zeros(vec![width]),
        wv: gaussian(rng, vec![width, width], false),
        bv: Tensor::zeros(vec![width]),
        wo: gaussian(rng, vec![width, width], false),
        bo: Tensor::zeros(vec![width]),
    }
}

impl VitEncoder {
    /// Seeded construction; identical (seed, config) yields bitwise-identical
    /// weights.
    pub fn new(cfg: ViTConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let w = cfg.width;
        let patch_in = cfg.patch_size * cfg.patch_size * 3;
        let patch_weight = gaussian(&mut rng, vec![patch_in, w], false);
        let patch_bias = Tensor::zeros(vec![w]);
        let pos = gaussian(&mut rng, vec![cfg.base_grid * cfg.base_grid, w], true);
        let (cls_token, cls_pos) = match cfg.role {
            EncoderRole::ClipLike => (
                Some(gaussian(&mut rng, vec![1, w], false)),
                Some(gaussian(&mut rng, vec![1, w], true)),
            ),
            EncoderRole::SamLike => (None, None),
        };
        let blocks = (0..cfg.depth)
            .map(|_| VitBlock {
                ln1_gamma: Tensor::full(vec![w], 1.0),
                ln1_beta: Tensor::zeros(vec![w]),
                attn: frozen_attention(&mut rng, w, cfg.heads),
                ln2_gamma: Tensor::full(vec![w], 1.0),
                ln2_beta: Tensor::zeros(vec![w]),
                fc1_weight: gaussian(&mut rng, vec![w, MLP_RATIO * w], false),
                fc1_bias: Tensor::zeros(vec![MLP_RATIO * w]),
                fc2_weight: gaussian(&mut rng, vec![MLP_RATIO * w, w], false),
                fc2_bias: Tensor::zeros(vec![w]),
            })
            .collect();
        let out_proj = match cfg.role {
            EncoderRole::ClipLike => Some(gaussian(&mut rng, vec![w, cfg.embed_dim], false)),
            EncoderRole::SamLike => None,
        };
        Ok(VitEncoder {
            cfg,
            patch_weight,
            patch_bias,
            pos,
            cls_token,
            cls_pos,
            blocks,
            out_proj,
        })
    }

    /// All parameters with stable names and their trainable flag.
    pub fn params(&self, prefix: &str) -> Vec<(String, Tensor, bool)> {
        let mut out = vec![
            (format!("{prefix}.patch.weight"), self.patch_weight.clone(), false),
            (format!("{prefix}.patch.bias"), self.patch_bias.clone(), false),
            (format!("{prefix}.pos"), self.pos.clone(), true),
        ];
        if let Some(cls) = &self.cls_token {
            out.push((format!("{prefix}.cls"), cls.clone(), false));
        }
        if let Some(cls_pos) = &self.cls_pos {
            out.push((format!("{prefix}.cls_pos"), cls_pos.clone(), true));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            let base = format!("{prefix}.block{i}");
            out.push((format!("{base}.ln1.gamma"), b.ln1_gamma.clone(), false));
            out.push((format!("{base}.ln1.beta"), b.ln1_beta.clone(), false));
            for (name, t) in [
                ("wq", &b.attn.wq),
                ("bq", &b.attn.bq),
                ("wk", &b.attn.wk),
                ("bk", &b.attn.bk),
                ("wv", &b.attn.wv),
                ("bv", &b.attn.bv),
                ("wo", &b.attn.wo),
                ("bo", &b.attn.bo),
            ] {
                out.push((format!("{base}.attn.{name}"), t.clone(), false));
            }
            out.push((format!("{base}.ln2.gamma"), b.ln2_gamma.clone(), false));
            out.push((format!("{base}.ln2.beta"), b.ln2_beta.clone(), false));
            out.push((format!("{base}.fc1.weight"), b.fc1_weight.clone(), false));
            out.push((format!("{base}.fc1.bias"), b.fc1_bias.clone(), false));
            out.push((format!("{base}.fc2.weight"), b.fc2_weight.clone(), false));
            out.push((format!("{base}.fc2.bias"), b.fc2_bias.clone(), false));
        }
        if let Some(proj) = &self.out_proj {
            out.push((format!("{prefix}.out_proj"), proj.clone(), false));
        }
        out
    }

    /// Positional grid resampled to `gh`×`gw` (bilinear). The CLS position is
    /// handled separately and copied unchanged.
    pub fn interpolated_pos(&self, gh: usize, gw: usize) -> Result<Tensor> {
        let g = self.cfg.base_grid;
        let w = self.cfg.width;
        self.pos
            .reshape(vec![g, g, w])?
            .bilinear_resize(gh, gw)?
            .reshape(vec![gh * gw, w])
    }

    fn patchify(&self, image: &Tensor) -> Result<(Tensor, usize, usize)> {
        if image.ndim() != 3 || image.shape()[2] != 3 {
            return Err(Error::Shape {
                op: "patchify",
                detail: format!("expected H×W×3 image, got {:?}", image.shape()),
            });
        }
        let (h, w) = (image.shape()[0], image.shape()[1]);
        let p = self.cfg.patch_size;
        if h % p != 0 || w % p != 0 {
            return Err(Error::Shape {
                op: "patchify",
                detail: format!("image {h}×{w} not divisible by patch size {p}"),
            });
        }
        let (gh, gw) = (h / p, w / p);
        let src = image.data();
        let mut rows = Vec::with_capacity(gh * gw * p * p * 3);
        for gy in 0..gh {
            for gx in 0..gw {
                for py in 0..p {
                    for px in 0..p {
                        let idx = ((gy * p + py) * w + gx * p + px) * 3;
                        rows.extend_from_slice(&src[idx..idx + 3]);
                    }
                }
            }
        }
        drop(src);
        let patches = Tensor::from_vec(vec![gh * gw, p * p * 3], rows)?;
        Ok((patches, gh, gw))
    }

    fn embed(&self, image: &Tensor) -> Result<(Tensor, usize, usize)> {
        let (patches, gh, gw) = self.patchify(image)?;
        let tokens = patches.matmul(&self.patch_weight)?.add_bias(&self.patch_bias)?;
        let tokens = tokens.add(&self.interpolated_pos(gh, gw)?)?;
        let tokens = match (&self.cls_token, &self.cls_pos) {
            (Some(cls), Some(cls_pos)) => {
                let head = cls.add(cls_pos)?;
                crate::numerics::concat(&[head, tokens], 0)?
            }
            _ => tokens,
        };
        Ok((tokens, gh, gw))
    }

    fn block_forward(&self, index: usize, x: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        let b = &self.blocks[index];
        let normed = x.layer_norm(&b.ln1_gamma, &b.ln1_beta, LN_EPS)?;
        let attended = multi_head_attention(&normed, &normed, &b.attn, bias)?;
        let x = x.add(&attended)?;
        let normed = x.layer_norm(&b.ln2_gamma, &b.ln2_beta, LN_EPS)?;
        let hidden = normed.matmul(&b.fc1_weight)?.add_bias(&b.fc1_bias)?.gelu()?;
        let mlp = hidden.matmul(&b.fc2_weight)?.add_bias(&b.fc2_bias)?;
        x.add(&mlp)
    }

    fn tokens_to_grid(&self, tokens: &Tensor, gh: usize, gw: usize) -> Result<Tensor> {
        let skip = match self.cfg.role {
            EncoderRole::ClipLike => 1,
            EncoderRole::SamLike => 0,
        };
        let grid = if skip == 1 { tokens.narrow(0, 1, gh * gw)? } else { tokens.clone() };
        grid.reshape(vec![gh, gw, self.cfg.width])
    }

    /// Run the spatial encoder: grids from the last three blocks, block order.
    pub fn encode_sam(&self, image: &Tensor) -> Result<SamFeatures> {
        if self.cfg.role != EncoderRole::SamLike {
            return Err(Error::Config("encode_sam on a non-spatial encoder".into()));
        }
        let (mut x, gh, gw) = self.embed(image)?;
        let mut taps = Vec::with_capacity(3);
        for i in 0..self.cfg.depth {
            x = self.block_forward(i, &x, None)?;
            if self.cfg.tap_blocks.contains(&i) {
                taps.push(self.tokens_to_grid(&x, gh, gw)?);
            }
        }
        let taps: [Tensor; 3] = taps
            .try_into()
            .map_err(|_| Error::Config("spatial encoder must expose exactly 3 taps".into()))?;
        Ok(SamFeatures { taps, grid: (gh, gw) })
    }

    /// Downsample by `ratio`, then run the semantic encoder up to (and
    /// including) the block that feeds the masked tail. Returns the three
    /// grid taps and the token sequence at that depth.
    pub fn encode_clip(&self, image: &Tensor, ratio: f64) -> Result<ClipFeatures> {
        if self.cfg.role != EncoderRole::ClipLike {
            return Err(Error::Config("encode_clip on a non-semantic encoder".into()));
        }
        if ratio <= 0.0 || ratio > 1.0 {
            return Err(Error::Config(format!("downsample ratio must be in (0, 1], got {ratio}")));
        }
        let p = self.cfg.patch_size as f64;
        let round_to_patch = |extent: usize| -> usize {
            let target = (extent as f64 * ratio / p).round().max(1.0) as usize;
            target * self.cfg.patch_size
        };
        let (h, w) = (image.shape()[0], image.shape()[1]);
        let (rh, rw) = (round_to_patch(h), round_to_patch(w));
        let resized = if (rh, rw) == (h, w) { image.clone() } else { image.bilinear_resize(rh, rw)? };

        let (mut x, gh, gw) = self.embed(&resized)?;
        let mid = self.cfg.depth - self.cfg.masked_blocks() - 1;
        let mut taps = Vec::with_capacity(3);
        for i in 0..=mid {
            x = self.block_forward(i, &x, None)?;
            if self.cfg.tap_blocks.contains(&i) {
                taps.push(self.tokens_to_grid(&x, gh, gw)?);
            }
        }
        let taps: [Tensor; 3] = taps
            .try_into()
            .map_err(|_| Error::Config("semantic encoder taps must all lie before the masked tail".into()))?;
        Ok(ClipFeatures { taps, mid_tokens: x, grid: (gh, gw), input_size: (rh, rw) })
    }

    /// Run the final `masked_blocks` transformer blocks over a token
    /// sequence, optionally with a per-head additive attention bias shared by
    /// every tail block.
    pub fn forward_tail(&self, tokens: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        if self.cfg.role != EncoderRole::ClipLike {
            return Err(Error::Config("forward_tail on a non-semantic encoder".into()));
        }
        let mut x = tokens.clone();
        for i in self.cfg.depth - self.cfg.masked_blocks()..self.cfg.depth {
            x = self.block_forward(i, &x, bias)?;
        }
        Ok(x)
    }

    /// Final projected feature grid from a plain (unmasked) pass over the
    /// tail blocks: h×w×embed_dim.
    pub fn final_grid(&self, feats: &ClipFeatures) -> Result<Tensor> {
        let out = self.forward_tail(&feats.mid_tokens, None)?;
        let (gh, gw) = feats.grid;
        let grid = out.narrow(0, 1, gh * gw)?;
        let proj = self.out_proj.as_ref().expect("semantic encoder has a projection");
        grid.matmul(proj)?.reshape(vec![gh, gw, self.cfg.embed_dim])
    }
}
