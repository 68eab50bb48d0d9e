use crate::decoder::{mask_pooling, DecodeOutput, Decoder, DecoderConfig, EmbeddingStreams};
use crate::encoders::{ClipFeatures, TextEmbedder, ViTConfig, VitEncoder};
use crate::error::{Error, Result};
use crate::fusion::{fuse, ChannelProjection};
use crate::inference::ClassVocabulary;
use crate::losses::{LayerPrediction, LossWeights, Predictions};
use crate::Tensor;

use super::config::RunConfig;
use super::dataset::Dataset;
use super::TEXT_EMBED_SEED;

/// Head count of the decoder's internal attention layers.
const DECODER_ATTN_HEADS: usize = 8;

pub struct Param {
    pub name: String,
    pub tensor: Tensor,
    pub trainable: bool,
}

/// The assembled pipeline: two frozen encoders, the trainable channel
/// projection, the mask decoder, and the deterministic text embedder.
pub struct Model {
    pub cfg: RunConfig,
    pub sam: VitEncoder,
    pub clip: VitEncoder,
    pub projection: ChannelProjection,
    pub decoder: Decoder,
    pub text: TextEmbedder,
}

fn derive_seed(seed: u64, tag: u64) -> u64 {
    seed.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(tag)
}

impl Model {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        if !cfg.hidden_dim.is_multiple_of(DECODER_ATTN_HEADS) {
            return Err(Error::Config(format!(
                "hidden_dim {} must be a multiple of {DECODER_ATTN_HEADS}",
                cfg.hidden_dim
            )));
        }
        let sam_grid = cfg.image_size / cfg.sam_patch;
        let clip_grid = ((cfg.image_size as f64 * cfg.clip_downsample / cfg.clip_patch as f64).round() as usize).max(1);
        let sam = VitEncoder::new(
            ViTConfig::sam_like(cfg.sam_patch, cfg.encoder_depth, cfg.encoder_heads, cfg.encoder_width, sam_grid),
            derive_seed(cfg.seed, 1),
        )?;
        let clip = VitEncoder::new(
            ViTConfig::clip_like(
                cfg.clip_patch,
                cfg.encoder_depth,
                cfg.encoder_heads,
                cfg.encoder_width,
                clip_grid,
                cfg.embed_dim,
            ),
            derive_seed(cfg.seed, 2),
        )?;
        let projection = ChannelProjection::new(derive_seed(cfg.seed, 3), cfg.encoder_width, cfg.encoder_width);
        let decoder_cfg = DecoderConfig {
            queries: cfg.queries,
            layers: cfg.decoder_layers,
            hidden: cfg.hidden_dim,
            embed_dim: cfg.embed_dim,
            clip_heads: cfg.encoder_heads,
            masked_blocks: clip.cfg.masked_blocks(),
            attn_heads: DECODER_ATTN_HEADS,
        };
        let decoder = Decoder::new(decoder_cfg, cfg.encoder_width, cfg.encoder_width, derive_seed(cfg.seed, 4))?;
        let text = TextEmbedder::builtin(TEXT_EMBED_SEED, cfg.embed_dim);
        Ok(Model { cfg: cfg.clone(), sam, clip, projection, decoder, text })
    }

    /// Every parameter with a stable name, frozen and trainable alike.
    pub fn params(&self) -> Vec<Param> {
        let mut out: Vec<Param> = Vec::new();
        for (name, tensor, trainable) in self.sam.params("sam") {
            out.push(Param { name, tensor, trainable });
        }
        for (name, tensor, trainable) in self.clip.params("clip") {
            out.push(Param { name, tensor, trainable });
        }
        out.push(Param {
            name: "fusion.projection.weight".into(),
            tensor: self.projection.weight.clone(),
            trainable: true,
        });
        out.push(Param {
            name: "fusion.projection.bias".into(),
            tensor: self.projection.bias.clone(),
            trainable: true,
        });
        for (name, tensor, trainable) in self.decoder.params("decoder") {
            out.push(Param { name, tensor, trainable });
        }
        out
    }

    pub fn trainable_params(&self) -> Vec<Param> {
        self.params().into_iter().filter(|p| p.trainable).collect()
    }

    /// FNV-1a over the bit patterns of every frozen parameter, in parameter
    /// order. Training must leave this unchanged.
    pub fn frozen_checksum(&self) -> u64 {
        let mut hash: u64 = 0xcbf29ce484222325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                hash ^= b as u64;
                hash = hash.wrapping_mul(0x100000001b3);
            }
        };
        for p in self.params() {
            if p.trainable {
                continue;
            }
            eat(p.name.as_bytes());
            for v in p.tensor.data().iter() {
                eat(&v.to_bits().to_le_bytes());
            }
        }
        hash
    }

    /// Full forward pass: encoders, fusion, decode. Returns the decoder
    /// output and the semantic-encoder features (for the frozen stream).
    pub fn forward(&self, image: &Tensor) -> Result<(DecodeOutput, ClipFeatures)> {
        let (h, w) = (image.shape()[0], image.shape()[1]);
        let sam_feats = self.sam.encode_sam(image)?;
        let clip_feats = self.clip.encode_clip(image, self.cfg.clip_downsample)?;
        let projected = [
            self.projection.apply(&clip_feats.taps[0])?,
            self.projection.apply(&clip_feats.taps[1])?,
            self.projection.apply(&clip_feats.taps[2])?,
        ];
        let pyramid = fuse(&sam_feats.taps, &projected, (h, w))?;
        let out = self.decoder.decode(&pyramid, (h, w), &self.clip, &clip_feats)?;
        Ok((out, clip_feats))
    }

    /// Unit-norm text embeddings of the training classes, in train order.
    pub fn train_text_embeddings(&self, data: &Dataset) -> Result<Tensor> {
        let names: Vec<String> = data
            .class_names
            .iter()
            .zip(&data.is_train_class)
            .filter(|(_, &t)| t)
            .map(|(n, _)| n.clone())
            .collect();
        if names.is_empty() {
            return Err(Error::Vocabulary("dataset has no training classes".into()));
        }
        self.text.class_embeddings(&names, self.cfg.prompts)
    }

    /// Test-time vocabulary over all dataset classes.
    pub fn vocabulary(&self, data: &Dataset) -> Result<ClassVocabulary> {
        let embeddings = self.text.class_embeddings(&data.class_names, self.cfg.prompts)?;
        ClassVocabulary::new(data.class_names.clone(), embeddings, data.is_train_class.clone())
    }

    /// Per-layer class logits against the training text embeddings, for the
    /// loss. Cosine logits: embeddings are unit rows, text rows unit.
    pub fn predictions(&self, out: &DecodeOutput, train_text: &Tensor) -> Result<Predictions> {
        let text_t = train_text.transpose2d()?;
        let mut layers = Vec::with_capacity(out.layer_embeddings.len());
        for (embed, masks) in out.layer_embeddings.iter().zip(&out.layer_masks) {
            layers.push(LayerPrediction {
                masks: masks.clone(),
                embeddings: embed.clone(),
                class_logits: embed.matmul(&text_t)?,
            });
        }
        let mask_attention_logits = out.mask_attention.matmul(&text_t)?;
        Ok(Predictions {
            layers,
            mask_attention: out.mask_attention.clone(),
            mask_attention_logits,
        })
    }

    /// The three embedding streams for inference; all detached, the frozen
    /// stream pooled from the final semantic grid off the tape.
    pub fn streams(&self, out: &DecodeOutput, clip_feats: &ClipFeatures) -> Result<EmbeddingStreams> {
        let final_grid = self.clip.final_grid(clip_feats)?;
        Ok(EmbeddingStreams {
            supervised: out.supervised().detach(),
            mask_attention: out.mask_attention.detach(),
            frozen: mask_pooling(out.masks(), &final_grid)?,
        })
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            bce: self.cfg.bce_weight,
            dice: self.cfg.dice_weight,
            cls: self.cfg.cls_weight,
            ssc: self.cfg.ssc_weight,
        }
    }
}
