//! Toy frozen stand-ins for the two image encoders and the text encoder.
//!
//! The vision transformers are seeded-Gaussian ViTs whose weights never
//! train; only their positional embeddings are trainable leaves. They expose
//! exactly the feature taps the pipeline consumes: three same-resolution
//! grids from the spatial encoder, three intermediate grids plus a deep
//! token sequence and a final projected grid from the semantic encoder.

mod text;
mod vit;

pub use text::{PromptStrategy, TextEmbedder, BUILTIN_TEMPLATES};
pub use vit::{ClipFeatures, EncoderRole, SamFeatures, ViTConfig, VitBlock, VitEncoder};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn test_image(seed: u64, h: usize, w: usize) -> Tensor {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..h * w * 3).map(|_| rng.gen_range(0.0..1.0)).collect();
        Tensor::from_vec(vec![h, w, 3], data).unwrap()
    }

    fn sam(seed: u64) -> VitEncoder {
        VitEncoder::new(ViTConfig::sam_like(8, 8, 4, 32, 8), seed).unwrap()
    }

    fn clip(seed: u64) -> VitEncoder {
        VitEncoder::new(ViTConfig::clip_like(16, 8, 4, 32, 4, 16), seed).unwrap()
    }

    #[test]
    fn sam_taps_are_three_grids_at_patch_resolution() {
        let enc = sam(1);
        let feats = enc.encode_sam(&test_image(2, 64, 64)).unwrap();
        assert_eq!(feats.grid, (8, 8));
        for tap in &feats.taps {
            assert_eq!(tap.shape(), &[8, 8, 32]);
        }
    }

    #[test]
    fn encoders_are_deterministic() {
        let img = test_image(3, 64, 64);
        let a = sam(7).encode_sam(&img).unwrap();
        let b = sam(7).encode_sam(&img).unwrap();
        for (x, y) in a.taps.iter().zip(b.taps.iter()) {
            assert_eq!(x.to_vec(), y.to_vec());
        }
    }

    #[test]
    fn single_pixel_change_propagates() {
        let enc = sam(9);
        let img = test_image(4, 64, 64);
        let mut bumped = img.to_vec();
        bumped[(13 * 64 + 29) * 3] += 0.25;
        let bumped = Tensor::from_vec(vec![64, 64, 3], bumped).unwrap();
        let a = enc.encode_sam(&img).unwrap();
        let b = enc.encode_sam(&bumped).unwrap();
        let changed = a
            .taps
            .iter()
            .zip(b.taps.iter())
            .any(|(x, y)| x.to_vec().iter().zip(y.to_vec()).any(|(u, v)| (u - v).abs() > 0.0));
        assert!(changed);
    }

    #[test]
    fn indivisible_image_is_a_shape_error() {
        let enc = sam(1);
        assert!(enc.encode_sam(&test_image(5, 60, 64)).is_err());
    }

    #[test]
    fn clip_final_grid_and_token_count() {
        let enc = clip(11);
        let img = test_image(6, 64, 64);
        let feats = enc.encode_clip(&img, 1.0).unwrap();
        assert_eq!(feats.grid, (4, 4));
        assert_eq!(feats.mid_tokens.shape(), &[1 + 16, 32]); // CLS first
        let f_clip = enc.final_grid(&feats).unwrap();
        assert_eq!(f_clip.shape(), &[4, 4, 16]);
        for tap in &feats.taps {
            assert_eq!(tap.shape(), &[4, 4, 32]);
        }
    }

    #[test]
    fn downsampling_halves_token_grid() {
        let enc = VitEncoder::new(ViTConfig::clip_like(8, 8, 4, 32, 8, 16), 13).unwrap();
        let img = test_image(8, 64, 64);
        let full = enc.encode_clip(&img, 1.0).unwrap();
        let half = enc.encode_clip(&img, 0.5).unwrap();
        assert_eq!(full.grid, (8, 8));
        assert_eq!(half.grid, (4, 4));
        assert_eq!(half.input_size, (32, 32));
    }

    #[test]
    fn invalid_downsample_ratio_is_a_config_error() {
        let enc = clip(1);
        assert!(enc.encode_clip(&test_image(1, 64, 64), 0.0).is_err());
        assert!(enc.encode_clip(&test_image(1, 64, 64), 1.5).is_err());
    }

    #[test]
    fn pos_interpolation_identity_and_constant() {
        let enc = sam(17);
        let same = enc.interpolated_pos(8, 8).unwrap();
        assert_eq!(same.to_vec(), enc.pos.to_vec());

        let enc2 = sam(18);
        enc2.pos.set_data(&vec![0.75; 8 * 8 * 32]).unwrap();
        let up = enc2.interpolated_pos(11, 5).unwrap();
        assert!(up.to_vec().iter().all(|&v| (v - 0.75).abs() < 1e-15));
    }

    #[test]
    fn pos_interpolation_matches_bilinear_oracle() {
        let enc = VitEncoder::new(ViTConfig::sam_like(8, 8, 4, 16, 4), 19).unwrap();
        let got = enc.interpolated_pos(6, 6).unwrap();
        let want = enc
            .pos
            .reshape(vec![4, 4, 16])
            .unwrap()
            .bilinear_resize(6, 6)
            .unwrap()
            .reshape(vec![36, 16])
            .unwrap();
        assert_eq!(got.to_vec(), want.to_vec());
    }

    #[test]
    fn config_invariants_enforced() {
        assert!(VitEncoder::new(ViTConfig::sam_like(8, 3, 4, 32, 8), 0).is_err()); // depth < 4
        assert!(VitEncoder::new(ViTConfig::sam_like(8, 8, 5, 32, 8), 0).is_err()); // width % heads
        let mut cfg = ViTConfig::sam_like(8, 8, 4, 32, 8);
        cfg.tap_blocks = vec![9];
        assert!(VitEncoder::new(cfg, 0).is_err());
    }

    // ── Text embeddings ───────────────────────────────────────────────

    #[test]
    fn single_template_embedding_is_unit_norm() {
        let embedder = TextEmbedder::builtin(5, 16);
        let te = embedder
            .class_embeddings(&["moss".to_string()], PromptStrategy::Single)
            .unwrap();
        let norm: f64 = te.to_vec().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
    }

    #[test]
    fn averaging_identical_templates_equals_single() {
        let one = TextEmbedder::new(vec!["a photo of a {}.".into()], 5, 16).unwrap();
        let thrice = TextEmbedder::new(vec!["a photo of a {}.".into(); 3], 5, 16).unwrap();
        let classes = vec!["brick".to_string()];
        let a = one.class_embeddings(&classes, PromptStrategy::Single).unwrap();
        let b = thrice.class_embeddings(&classes, PromptStrategy::Ensemble).unwrap();
        for (x, y) in a.to_vec().iter().zip(b.to_vec()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn ensemble_matches_mean_then_normalize_oracle() {
        let embedder = TextEmbedder::builtin(23, 16);
        let classes: Vec<String> = ["fern", "sand", "tarp"].iter().map(|s| s.to_string()).collect();
        let got = embedder.class_embeddings(&classes, PromptStrategy::Ensemble).unwrap();
        let gd = got.to_vec();
        for (k, class) in classes.iter().enumerate() {
            let mut acc = [0.0f64; 16];
            for t in embedder.templates() {
                for (a, v) in acc.iter_mut().zip(embedder.template_embedding(t, class)) {
                    *a += v;
                }
            }
            for a in acc.iter_mut() {
                *a /= embedder.templates().len() as f64;
            }
            let norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
            for (j, a) in acc.iter().enumerate() {
                assert!((gd[k * 16 + j] - a / norm).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn duplicate_class_names_are_a_vocabulary_error() {
        let embedder = TextEmbedder::builtin(1, 8);
        let classes = vec!["oak".to_string(), "oak".to_string()];
        assert!(embedder.class_embeddings(&classes, PromptStrategy::Single).is_err());
    }

    #[test]
    fn template_without_placeholder_is_rejected() {
        assert!(TextEmbedder::new(vec!["a photo".into()], 0, 8).is_err());
    }

    #[test]
    fn templates_load_from_file() {
        let path = std::env::temp_dir().join(format!("ovsk_templates_{}.txt", std::process::id()));
        std::fs::write(&path, "a photo of a {}.\n\nan image showing a {}\n").unwrap();
        let embedder = TextEmbedder::from_file(&path, 3, 8).unwrap();
        assert_eq!(embedder.templates().len(), 2);
        // Same seed and strings as an in-memory embedder: identical vectors.
        let direct =
            TextEmbedder::new(vec!["a photo of a {}.".into(), "an image showing a {}".into()], 3, 8).unwrap();
        assert_eq!(
            embedder.template_embedding("a photo of a {}.", "moss"),
            direct.template_embedding("a photo of a {}.", "moss")
        );
        std::fs::write(&path, "no placeholder here\n").unwrap();
        assert!(TextEmbedder::from_file(&path, 3, 8).is_err());
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn tap_resolutions_follow_patch_arithmetic() {
        for (h, w, patch) in [(64usize, 64usize, 8usize), (48, 80, 16), (32, 64, 8)] {
            let enc = VitEncoder::new(ViTConfig::sam_like(patch, 4, 2, 16, 4), 1).unwrap();
            let feats = enc.encode_sam(&test_image(9, h, w)).unwrap();
            assert_eq!(feats.grid, (h / patch, w / patch));
        }
        for ratio in [1.0, 0.5, 0.7] {
            let enc = VitEncoder::new(ViTConfig::clip_like(8, 4, 2, 16, 4, 8), 2).unwrap();
            let feats = enc.encode_clip(&test_image(10, 64, 64), ratio).unwrap();
            let expect = ((64.0 * ratio / 8.0_f64).round().max(1.0)) as usize;
            assert_eq!(feats.grid, (expect, expect));
            assert_eq!(feats.input_size, (expect * 8, expect * 8));
            assert_eq!(feats.mid_tokens.shape()[0], 1 + expect * expect);
        }
    }
}
