//! Query-based mask decoder with three embedding streams per query.
//!
//! A convolutional pixel decoder lifts the fused pyramid back to quarter
//! resolution, a transformer decoder refines `N` learned queries against the
//! stage features (mask-guided cross-attention, Mask2Former-style), and the
//! query embeddings produce masks, per-head attention masks, mask-attention
//! embeddings through the frozen semantic tail, and mask-pooled frozen
//! embeddings.

mod mask_attention;
mod masks;
mod pixel;
mod transformer;

pub use mask_attention::mask_attention_decode;
pub use masks::{compute_attention_masks, compute_masks, mask_pooling};
pub use pixel::{PixelDecoder, PixelDecoderOutput, PixelStage};
pub use transformer::DecoderLayer;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};

use crate::encoders::{ClipFeatures, VitEncoder};
use crate::error::{Error, Result};
use crate::fusion::FeaturePyramid;
use crate::Tensor;

pub(crate) const LN_EPS: f64 = 1e-5;
/// Additive bias for disallowed attention positions.
pub(crate) const MASK_OFF: f64 = -1e9;

/// Trainable Gaussian init, fan-in scaled: std = 1/sqrt(prod(shape[..-1])).
pub(crate) fn gaussian_param(rng: &mut ChaCha20Rng, shape: Vec<usize>) -> Tensor {
    let fan_in: usize = shape[..shape.len() - 1].iter().product::<usize>().max(1);
    gaussian_param_std(rng, shape, 1.0 / (fan_in as f64).sqrt())
}

pub(crate) fn gaussian_param_std(rng: &mut ChaCha20Rng, shape: Vec<usize>, std: f64) -> Tensor {
    let dist = Normal::new(0.0f64, std).unwrap();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::param(shape, data).unwrap()
}

/// Quarter-resolution extents (ceiling rule, same as the pyramid).
pub fn quarter_extents(image_hw: (usize, usize)) -> (usize, usize) {
    (image_hw.0.div_ceil(4), image_hw.1.div_ceil(4))
}

#[derive(Debug, Clone)]
pub struct DecoderConfig {
    /// Query count N.
    pub queries: usize,
    /// Transformer decoder depth.
    pub layers: usize,
    /// Internal query width.
    pub hidden: usize,
    /// Output embedding dim C; must equal the text-embedding dim.
    pub embed_dim: usize,
    /// Attention head count of the frozen semantic encoder (n).
    pub clip_heads: usize,
    /// Number of frozen tail blocks the mask-attention stream runs through.
    pub masked_blocks: usize,
    /// Head count of the decoder's own attention layers.
    pub attn_heads: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            queries: 100,
            layers: 9,
            hidden: 256,
            embed_dim: 16,
            clip_heads: 4,
            masked_blocks: 2,
            attn_heads: 8,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.queries == 0 {
            return Err(Error::Config("query count must be >= 1".into()));
        }
        if self.layers == 0 || self.masked_blocks == 0 {
            return Err(Error::Config("layer counts must be >= 1".into()));
        }
        if self.hidden == 0 || !self.hidden.is_multiple_of(self.attn_heads) {
            return Err(Error::Config(format!(
                "hidden width {} must be a positive multiple of {} heads",
                self.hidden, self.attn_heads
            )));
        }
        if self.embed_dim == 0 || self.clip_heads == 0 {
            return Err(Error::Config("embed dim and clip head count must be positive".into()));
        }
        Ok(())
    }
}

/// The three per-query embedding sets produced for inference, each N×C with
/// unit-norm rows. The frozen stream is always built off the tape.
pub struct EmbeddingStreams {
    /// Trained, fully supervised embeddings (mask + classification heads).
    pub supervised: Tensor,
    /// Embeddings from the frozen tail run under per-head attention masks.
    pub mask_attention: Tensor,
    /// Mask-pooled final frozen-encoder features.
    pub frozen: Tensor,
}

/// Intermediate decode state before the mask-attention stream runs.
pub struct MaskDecode {
    pub pixel_out: PixelDecoderOutput,
    pub layer_embeddings: Vec<Tensor>,
    pub layer_masks: Vec<Tensor>,
    pub per_head: Tensor,
    pub attention_masks: Tensor,
}

pub struct DecodeOutput {
    /// Per-layer unit-norm query embeddings, one N×C entry per decoder layer.
    pub layer_embeddings: Vec<Tensor>,
    /// Per-layer mask logits, H/4×W/4×N.
    pub layer_masks: Vec<Tensor>,
    /// Per-head query embeddings A' (N×(C·n)).
    pub per_head: Tensor,
    /// Per-head attention mask logits, H/4×W/4×n×N.
    pub attention_masks: Tensor,
    /// Mask-feature map F'₁ at quarter resolution, H/4×W/4×C.
    pub mask_features: Tensor,
    /// Mask-attention embeddings B (N×C, unit rows).
    pub mask_attention: Tensor,
}

impl DecodeOutput {
    /// Final-layer supervised embeddings A.
    pub fn supervised(&self) -> &Tensor {
        self.layer_embeddings.last().unwrap()
    }

    /// Final-layer mask logits M.
    pub fn masks(&self) -> &Tensor {
        self.layer_masks.last().unwrap()
    }
}

pub struct Decoder {
    pub cfg: DecoderConfig,
    pub pixel: PixelDecoder,
    /// Learned query embeddings, N×hidden.
    pub query_embed: Tensor,
    pub layers: Vec<DecoderLayer>,
    pub head_ln_gamma: Tensor,
    pub head_ln_beta: Tensor,
    pub head_weight: Tensor,
    pub head_bias: Tensor,
    pub expand_weight: Tensor,
    pub expand_bias: Tensor,
    /// Projection of tail outputs to the embedding dim (trainable).
    pub b_proj_weight: Tensor,
    pub b_proj_bias: Tensor,
}

/// Cross-attention bias from the previous layer's mask logits: resized to the
/// stage grid, binarized at logit 0, shared across decoder heads. Empty rows
/// fall back to open attention.
fn cross_attention_bias(prev_masks: &Tensor, stage_hw: (usize, usize), heads: usize) -> Result<Tensor> {
    let n = prev_masks.shape()[2];
    let (sh, sw) = stage_hw;
    let cells = sh * sw;
    let resized = prev_masks.detach().bilinear_resize(sh, sw)?;
    let md = resized.data();
    let mut row = vec![0.0f64; cells];
    let mut bias = vec![0.0f64; heads * n * cells];
    for q in 0..n {
        mask_attention::bias_from_logit_row((0..cells).map(|cell| md[cell * n + q]), &mut row);
        for head in 0..heads {
            bias[(head * n + q) * cells..][..cells].copy_from_slice(&row);
        }
    }
    drop(md);
    Tensor::from_vec(vec![heads, n, cells], bias)
}

impl Decoder {
    pub fn new(cfg: DecoderConfig, pyramid_channels: usize, clip_width: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let pixel = PixelDecoder::new(&mut rng, pyramid_channels, cfg.hidden, cfg.embed_dim);
        // Query content embeddings are layer-normed before every use, so
        // only their directions matter; unit-scale init keeps them distinct.
        let query_embed = gaussian_param_std(&mut rng, vec![cfg.queries, cfg.hidden], 1.0);
        let layers = (0..cfg.layers)
            .map(|_| DecoderLayer::new(&mut rng, cfg.hidden, cfg.attn_heads))
            .collect();
        let c = cfg.embed_dim;
        // The head expansion sits behind a hard threshold, so gradients never
        // reach it; start it at stacked identity (every head's mask begins as
        // the plain mask) with small noise to differentiate the heads.
        let expand_weight = {
            let noise = gaussian_param_std(&mut rng, vec![c, c * cfg.clip_heads], 0.02);
            let mut data = noise.to_vec();
            for head in 0..cfg.clip_heads {
                for i in 0..c {
                    data[i * c * cfg.clip_heads + head * c + i] += 1.0;
                }
            }
            Tensor::param(vec![c, c * cfg.clip_heads], data).unwrap()
        };
        Ok(Decoder {
            pixel,
            query_embed,
            layers,
            head_ln_gamma: Tensor::param(vec![cfg.hidden], vec![1.0; cfg.hidden]).unwrap(),
            head_ln_beta: Tensor::param(vec![cfg.hidden], vec![0.0; cfg.hidden]).unwrap(),
            head_weight: gaussian_param(&mut rng, vec![cfg.hidden, c]),
            head_bias: Tensor::param(vec![c], vec![0.0; c]).unwrap(),
            expand_weight,
            expand_bias: Tensor::param(vec![c * cfg.clip_heads], vec![0.0; c * cfg.clip_heads]).unwrap(),
            b_proj_weight: gaussian_param(&mut rng, vec![clip_width, c]),
            b_proj_bias: Tensor::param(vec![c], vec![0.0; c]).unwrap(),
            cfg,
        })
    }

    /// Unit-norm embedding head applied to a query state.
    fn embed_queries(&self, queries: &Tensor) -> Result<Tensor> {
        queries
            .layer_norm(&self.head_ln_gamma, &self.head_ln_beta, LN_EPS)?
            .matmul(&self.head_weight)?
            .add_bias(&self.head_bias)?
            .l2_normalize_rows()
    }

    /// Pixel decoder + transformer decoder + mask heads; everything except
    /// the mask-attention stream (see [`Decoder::decode`]).
    pub fn decode_masks(&self, pyr: &FeaturePyramid, image_hw: (usize, usize)) -> Result<MaskDecode> {
        let pixel_out = self.pixel.forward(pyr, image_hw)?;
        let memories: Vec<(Tensor, (usize, usize))> = pixel_out
            .stages
            .iter()
            .map(|s| {
                let (h, w, c) = (s.shape()[0], s.shape()[1], s.shape()[2]);
                s.reshape(vec![h * w, c]).map(|flat| (flat, (h, w)))
            })
            .collect::<Result<_>>()?;

        let mut queries = self.query_embed.clone();
        let mut layer_embeddings = Vec::with_capacity(self.cfg.layers);
        let mut layer_masks: Vec<Tensor> = Vec::with_capacity(self.cfg.layers);
        for (i, layer) in self.layers.iter().enumerate() {
            let (memory, stage_hw) = &memories[i % memories.len()];
            let bias = match layer_masks.last() {
                Some(prev) => Some(cross_attention_bias(prev, *stage_hw, self.cfg.attn_heads)?),
                None => None,
            };
            queries = layer.forward(&queries, memory, bias.as_ref())?;
            let embed = self.embed_queries(&queries)?;
            let masks = compute_masks(&pixel_out.mask_features, &embed)?;
            layer_embeddings.push(embed);
            layer_masks.push(masks);
        }
        let final_embed = layer_embeddings.last().unwrap();
        let per_head = final_embed.matmul(&self.expand_weight)?.add_bias(&self.expand_bias)?;
        let attention_masks = compute_attention_masks(&pixel_out.mask_features, &per_head, self.cfg.clip_heads)?;
        Ok(MaskDecode { pixel_out, layer_embeddings, layer_masks, per_head, attention_masks })
    }

    /// Full decode: masks, per-layer embeddings, and the mask-attention
    /// stream through the frozen semantic tail.
    pub fn decode(
        &self,
        pyr: &FeaturePyramid,
        image_hw: (usize, usize),
        clip: &VitEncoder,
        clip_feats: &ClipFeatures,
    ) -> Result<DecodeOutput> {
        let MaskDecode { pixel_out, layer_embeddings, layer_masks, per_head, attention_masks } =
            self.decode_masks(pyr, image_hw)?;
        let mask_attention = mask_attention_decode(
            clip,
            clip_feats,
            &attention_masks,
            &self.b_proj_weight,
            &self.b_proj_bias,
        )?;
        Ok(DecodeOutput {
            layer_embeddings,
            layer_masks,
            per_head,
            attention_masks,
            mask_features: pixel_out.mask_features,
            mask_attention,
        })
    }

    pub fn params(&self, prefix: &str) -> Vec<(String, Tensor, bool)> {
        let mut out = self.pixel.params(&format!("{prefix}.pixel"));
        out.push((format!("{prefix}.query_embed"), self.query_embed.clone(), true));
        for (i, layer) in self.layers.iter().enumerate() {
            out.extend(layer.params(&format!("{prefix}.layer{i}")));
        }
        out.push((format!("{prefix}.head.ln.gamma"), self.head_ln_gamma.clone(), true));
        out.push((format!("{prefix}.head.ln.beta"), self.head_ln_beta.clone(), true));
        out.push((format!("{prefix}.head.weight"), self.head_weight.clone(), true));
        out.push((format!("{prefix}.head.bias"), self.head_bias.clone(), true));
        out.push((format!("{prefix}.expand.weight"), self.expand_weight.clone(), true));
        out.push((format!("{prefix}.expand.bias"), self.expand_bias.clone(), true));
        out.push((format!("{prefix}.b_proj.weight"), self.b_proj_weight.clone(), true));
        out.push((format!("{prefix}.b_proj.bias"), self.b_proj_bias.clone(), true));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::{ViTConfig, VitEncoder};
    use crate::numerics::finite_diff_check;
    use rand::{Rng, SeedableRng};

    fn rand_tensor(seed: u64, shape: Vec<usize>) -> Tensor {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    fn small_pyramid(seed: u64, image_hw: (usize, usize), channels: usize) -> FeaturePyramid {
        let mk = |lvl: usize| {
            let (h, w) = crate::fusion::level_extents(image_hw, lvl);
            rand_tensor(seed + lvl as u64, vec![h, w, channels])
        };
        FeaturePyramid { levels: [mk(0), mk(1), mk(2)] }
    }

    fn small_clip(seed: u64) -> VitEncoder {
        VitEncoder::new(ViTConfig::clip_like(8, 4, 2, 16, 4, 8), seed).unwrap()
    }

    fn small_decoder(queries: usize, seed: u64) -> Decoder {
        let cfg = DecoderConfig {
            queries,
            layers: 2,
            hidden: 8,
            embed_dim: 8,
            clip_heads: 2,
            masked_blocks: 1,
            attn_heads: 2,
        };
        Decoder::new(cfg, 6, 16, seed).unwrap()
    }

    // ── compute_masks ─────────────────────────────────────────────────

    #[test]
    fn zero_embedding_row_gives_zero_mask() {
        let feats = rand_tensor(1, vec![4, 4, 3]);
        let emb = Tensor::from_vec(vec![2, 3], vec![0.0, 0.0, 0.0, 1.0, -2.0, 0.5]).unwrap();
        let m = compute_masks(&feats, &emb).unwrap();
        let md = m.to_vec();
        for cell in 0..16 {
            assert_eq!(md[cell * 2], 0.0);
        }
    }

    #[test]
    fn unit_embedding_on_constant_features_gives_constant_mask() {
        let feats = Tensor::full(vec![3, 5, 4], 1.0);
        let emb = Tensor::from_vec(vec![1, 4], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let m = compute_masks(&feats, &emb).unwrap();
        assert!(m.to_vec().iter().all(|&v| (v - 1.0).abs() < 1e-15));
    }

    #[test]
    fn masks_match_per_pixel_dot_oracle() {
        let feats = rand_tensor(2, vec![5, 3, 4]);
        let emb = rand_tensor(3, vec![6, 4]);
        let m = compute_masks(&feats, &emb).unwrap().to_vec();
        let fd = feats.to_vec();
        let ed = emb.to_vec();
        for cell in 0..15 {
            for q in 0..6 {
                let mut dot = 0.0;
                for c in 0..4 {
                    dot += fd[cell * 4 + c] * ed[q * 4 + c];
                }
                assert!((m[cell * 6 + q] - dot).abs() <= 1e-12);
            }
        }
    }

    // ── compute_attention_masks ───────────────────────────────────────

    #[test]
    fn single_head_attention_masks_reduce_to_masks() {
        let feats = rand_tensor(4, vec![4, 4, 5]);
        let emb = rand_tensor(5, vec![3, 5]);
        let plain = compute_masks(&feats, &emb).unwrap();
        let headed = compute_attention_masks(&feats, &emb, 1).unwrap();
        assert_eq!(headed.shape(), &[4, 4, 1, 3]);
        assert_eq!(headed.to_vec(), plain.to_vec());
    }

    #[test]
    fn zero_chunk_gives_zero_head_logits() {
        let feats = rand_tensor(6, vec![2, 2, 3]);
        // Two heads; head 1 chunk of query 0 is zero.
        let mut ph = rand_tensor(7, vec![2, 6]).to_vec();
        for slot in ph[3..6].iter_mut() {
            *slot = 0.0;
        }
        let per_head = Tensor::from_vec(vec![2, 6], ph).unwrap();
        let m = compute_attention_masks(&feats, &per_head, 2).unwrap().to_vec();
        // layout H×W×heads×N
        for cell in 0..4 {
            assert_eq!(m[cell * 4 + 2], 0.0);
        }
    }

    #[test]
    fn attention_masks_match_chunked_oracle() {
        let feats = rand_tensor(8, vec![3, 4, 4]);
        let per_head = rand_tensor(9, vec![5, 8]); // N=5, C=4, n=2
        let m = compute_attention_masks(&feats, &per_head, 2).unwrap().to_vec();
        let fd = feats.to_vec();
        let pd = per_head.to_vec();
        for cell in 0..12 {
            for head in 0..2 {
                for q in 0..5 {
                    let mut dot = 0.0;
                    for c in 0..4 {
                        dot += fd[cell * 4 + c] * pd[q * 8 + head * 4 + c];
                    }
                    assert!((m[cell * 10 + head * 5 + q] - dot).abs() <= 1e-12);
                }
            }
        }
    }

    // ── mask_pooling ──────────────────────────────────────────────────

    #[test]
    fn saturated_masks_pool_to_normalized_mean() {
        let grid = rand_tensor(10, vec![3, 3, 4]);
        let masks = Tensor::full(vec![3, 3, 2], 1000.0);
        let d = mask_pooling(&masks, &grid).unwrap();
        let gd = grid.to_vec();
        let mut mean = [0.0f64; 4];
        for cell in 0..9 {
            for c in 0..4 {
                mean[c] += gd[cell * 4 + c] / 9.0;
            }
        }
        let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
        for q in 0..2 {
            for (c, m) in mean.iter().enumerate() {
                assert!((d.to_vec()[q * 4 + c] - m / norm).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn one_hot_mask_pools_single_cell() {
        let grid = rand_tensor(11, vec![2, 2, 3]);
        let mut md = vec![-1000.0f64; 4];
        md[2] = 1000.0; // cell (1,0)
        let masks = Tensor::from_vec(vec![2, 2, 1], md).unwrap();
        let d = mask_pooling(&masks, &grid).unwrap().to_vec();
        let gd = grid.to_vec();
        let cell = &gd[2 * 3..3 * 3];
        let norm = cell.iter().map(|v| v * v).sum::<f64>().sqrt();
        for c in 0..3 {
            assert!((d[c] - cell[c] / norm).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_mask_falls_back_to_uniform_average() {
        let grid = rand_tensor(12, vec![2, 2, 3]);
        let masks = Tensor::full(vec![2, 2, 1], -1000.0);
        let d = mask_pooling(&masks, &grid).unwrap().to_vec();
        let gd = grid.to_vec();
        let mut mean = [0.0f64; 3];
        for cell in 0..4 {
            for c in 0..3 {
                mean[c] += gd[cell * 3 + c] / 4.0;
            }
        }
        let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
        for c in 0..3 {
            assert!((d[c] - mean[c] / norm).abs() < 1e-12);
        }
    }

    #[test]
    fn mask_pooling_matches_weighted_mean_oracle() {
        let grid = rand_tensor(13, vec![4, 4, 5]);
        let masks = rand_tensor(14, vec![4, 4, 3]);
        let d = mask_pooling(&masks, &grid).unwrap().to_vec();
        let gd = grid.to_vec();
        let md = masks.to_vec();
        for q in 0..3 {
            let mut acc = [0.0f64; 5];
            let mut denom = 0.0;
            for cell in 0..16 {
                let w = 1.0 / (1.0 + (-md[cell * 3 + q]).exp());
                denom += w;
                for c in 0..5 {
                    acc[c] += w * gd[cell * 5 + c];
                }
            }
            for a in acc.iter_mut() {
                *a /= denom;
            }
            let norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
            for c in 0..5 {
                assert!((d[q * 5 + c] - acc[c] / norm).abs() <= 1e-9);
            }
        }
    }

    // ── Pixel decoder ─────────────────────────────────────────────────

    #[test]
    fn stage_extents_double_up_to_quarter_resolution() {
        let dec = small_decoder(3, 21);
        let pyr = small_pyramid(22, (64, 64), 6);
        let out = dec.pixel.forward(&pyr, (64, 64)).unwrap();
        assert_eq!(out.stages[0].shape()[..2], [4, 4]); // 2x the H/32 level
        assert_eq!(out.stages[1].shape()[..2], [8, 8]);
        assert_eq!(out.stages[2].shape()[..2], [16, 16]);
        assert_eq!(out.mask_features.shape(), &[16, 16, 8]);
    }

    #[test]
    fn odd_sizes_follow_ceiling_rule() {
        let dec = small_decoder(3, 23);
        let pyr = small_pyramid(24, (68, 52), 6);
        let out = dec.pixel.forward(&pyr, (68, 52)).unwrap();
        assert_eq!(out.mask_features.shape()[..2], [17, 13]);
    }

    #[test]
    fn zero_weights_make_mask_features_bias_only() {
        let dec = small_decoder(2, 25);
        for (_, t, _) in dec.pixel.params("p") {
            t.set_data(&vec![0.0; t.numel()]).unwrap();
        }
        dec.pixel.out_bias.set_data(&[0.25; 8]).unwrap();
        let pyr = FeaturePyramid {
            levels: [
                Tensor::zeros(vec![4, 4, 6]),
                Tensor::zeros(vec![2, 2, 6]),
                Tensor::zeros(vec![1, 1, 6]),
            ],
        };
        let out = dec.pixel.forward(&pyr, (32, 32)).unwrap();
        assert!(out.mask_features.to_vec().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn gradient_reaches_every_pyramid_level() {
        let dec = small_decoder(2, 27);
        for lvl in 0..3 {
            let probe = small_pyramid(30, (32, 32), 6).levels[lvl].clone();
            let err = finite_diff_check(
                |x| {
                    let mut pyr = small_pyramid(30, (32, 32), 6);
                    pyr.levels[lvl] = x.clone();
                    dec.pixel.forward(&pyr, (32, 32))?.mask_features.sum_all()
                },
                &probe,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "level {lvl} rel error {err}");
        }
    }

    // ── Full decode ───────────────────────────────────────────────────

    #[test]
    fn decode_shape_contract() {
        let clip = small_clip(31);
        let img = rand_tensor(32, vec![32, 32, 3]);
        let feats = clip.encode_clip(&img, 1.0).unwrap();
        let dec = small_decoder(3, 33);
        let pyr = small_pyramid(34, (32, 32), 6);
        let out = dec.decode(&pyr, (32, 32), &clip, &feats).unwrap();
        assert_eq!(out.layer_embeddings.len(), 2);
        for e in &out.layer_embeddings {
            assert_eq!(e.shape(), &[3, 8]);
        }
        for m in &out.layer_masks {
            assert_eq!(m.shape(), &[8, 8, 3]);
        }
        assert_eq!(out.per_head.shape(), &[3, 16]);
        assert_eq!(out.attention_masks.shape(), &[8, 8, 2, 3]);
        assert_eq!(out.mask_attention.shape(), &[3, 8]);
        // B rows are unit norm.
        let b = out.mask_attention.to_vec();
        for q in 0..3 {
            let norm: f64 = b[q * 8..(q + 1) * 8].iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn identity_expansion_single_head_gives_a_prime_equal_a() {
        let clip = VitEncoder::new(ViTConfig::clip_like(8, 4, 1, 16, 4, 8), 35).unwrap();
        let img = rand_tensor(36, vec![32, 32, 3]);
        let feats = clip.encode_clip(&img, 1.0).unwrap();
        let cfg = DecoderConfig {
            queries: 2,
            layers: 1,
            hidden: 8,
            embed_dim: 8,
            clip_heads: 1,
            masked_blocks: 1,
            attn_heads: 2,
        };
        let dec = Decoder::new(cfg, 6, 16, 37).unwrap();
        let mut eye = vec![0.0f64; 64];
        for i in 0..8 {
            eye[i * 8 + i] = 1.0;
        }
        dec.expand_weight.set_data(&eye).unwrap();
        dec.expand_bias.set_data(&[0.0; 8]).unwrap();
        let pyr = small_pyramid(38, (32, 32), 6);
        let out = dec.decode(&pyr, (32, 32), &clip, &feats).unwrap();
        assert_eq!(out.per_head.to_vec(), out.supervised().to_vec());
        // And with n == 1 the attention masks equal the plain masks.
        assert_eq!(out.attention_masks.to_vec(), out.masks().to_vec());
    }

    #[test]
    fn query_permutation_permutes_all_outputs() {
        let clip = small_clip(41);
        let img = rand_tensor(42, vec![32, 32, 3]);
        let feats = clip.encode_clip(&img, 1.0).unwrap();
        let dec = small_decoder(3, 43);
        let pyr = small_pyramid(44, (32, 32), 6);
        let base = dec.decode(&pyr, (32, 32), &clip, &feats).unwrap();

        let perm = [2usize, 0, 1];
        let qd = dec.query_embed.to_vec();
        let mut permuted = vec![0.0f64; qd.len()];
        for (i, &p) in perm.iter().enumerate() {
            permuted[i * 8..(i + 1) * 8].copy_from_slice(&qd[p * 8..(p + 1) * 8]);
        }
        dec.query_embed.set_data(&permuted).unwrap();
        let swapped = dec.decode(&pyr, (32, 32), &clip, &feats).unwrap();

        let (a0, a1) = (base.supervised().to_vec(), swapped.supervised().to_vec());
        let (b0, b1) = (base.mask_attention.to_vec(), swapped.mask_attention.to_vec());
        for (i, &p) in perm.iter().enumerate() {
            for c in 0..8 {
                assert!((a1[i * 8 + c] - a0[p * 8 + c]).abs() < 1e-9);
                assert!((b1[i * 8 + c] - b0[p * 8 + c]).abs() < 1e-9);
            }
        }
        let (m0, m1) = (base.masks().to_vec(), swapped.masks().to_vec());
        for cell in 0..64 {
            for (i, &p) in perm.iter().enumerate() {
                assert!((m1[cell * 3 + i] - m0[cell * 3 + p]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn open_mask_decode_equals_plain_cls_stream() {
        let clip = small_clip(51);
        let img = rand_tensor(52, vec![32, 32, 3]);
        let feats = clip.encode_clip(&img, 1.0).unwrap();
        let dec = small_decoder(1, 53);
        let open = Tensor::full(vec![8, 8, 2, 1], 10.0);
        let b = mask_attention_decode(&clip, &feats, &open, &dec.b_proj_weight, &dec.b_proj_bias).unwrap();

        let plain = clip.forward_tail(&feats.mid_tokens, None).unwrap();
        let want = plain
            .narrow(0, 0, 1)
            .unwrap()
            .matmul(&dec.b_proj_weight)
            .unwrap()
            .add_bias(&dec.b_proj_bias)
            .unwrap()
            .l2_normalize_rows()
            .unwrap();
        for (x, y) in b.to_vec().iter().zip(want.to_vec()) {
            assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn identical_attention_masks_give_identical_rows() {
        let clip = small_clip(61);
        let img = rand_tensor(62, vec![32, 32, 3]);
        let feats = clip.encode_clip(&img, 1.0).unwrap();
        let dec = small_decoder(2, 63);
        // Same spatial pattern for both queries, per head.
        let pattern = rand_tensor(64, vec![8, 8, 2, 1]).to_vec();
        let mut md = vec![0.0f64; 8 * 8 * 2 * 2];
        for cell in 0..64 {
            for head in 0..2 {
                for q in 0..2 {
                    md[cell * 4 + head * 2 + q] = pattern[cell * 2 + head];
                }
            }
        }
        let masks = Tensor::from_vec(vec![8, 8, 2, 2], md).unwrap();
        let b = mask_attention_decode(&clip, &feats, &masks, &dec.b_proj_weight, &dec.b_proj_bias)
            .unwrap()
            .to_vec();
        assert_eq!(&b[0..8], &b[8..16]);
    }

    #[test]
    fn no_gradient_leaks_into_frozen_blocks() {
        let clip = small_clip(71);
        let img = rand_tensor(72, vec![32, 32, 3]);
        let feats = clip.encode_clip(&img, 1.0).unwrap();
        let dec = small_decoder(2, 73);
        let pyr = small_pyramid(74, (32, 32), 6);
        let out = dec.decode(&pyr, (32, 32), &clip, &feats).unwrap();
        let loss = out
            .mask_attention
            .sum_all()
            .unwrap()
            .add(&out.masks().sum_all().unwrap())
            .unwrap();
        crate::numerics::backward(&loss).unwrap();
        for (name, t, trainable) in clip.params("clip") {
            if trainable {
                assert!(t.grad().is_some(), "{name} should receive gradient");
            } else {
                assert!(t.grad().is_none(), "{name} must stay frozen");
            }
        }
        assert!(dec.b_proj_weight.grad().is_some());
    }
}
