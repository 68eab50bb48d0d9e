//! Everything around the model: synthetic dataset generation, the training
//! loop with its deterministic loss log, checkpointing, and evaluation.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod eval;
pub mod image_io;
pub mod model;
pub mod train;

pub use checkpoint::{load_model, Checkpoint, CHECKPOINT_MAGIC};
pub use config::RunConfig;
pub use dataset::{gen_dataset, ground_truth_from_labels, palette, quarter_labels, Dataset, DatasetSpec, SceneSpec};
pub use eval::{evaluate, infer_image, EvalOptions};
pub use model::{Model, Param};
pub use train::{train, AdamW, TrainOutcome};

/// Seed of the deterministic text embedder. Shared by the dataset generator
/// (for the palette) and the model (for class embeddings) so that class
/// appearance stays a fixed function of the class's text embedding.
pub const TEXT_EMBED_SEED: u64 = 0x7e87;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::PromptStrategy;
    use crate::error::Error;
    use std::path::Path;

    fn tmpdir(tag: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("ovsk_test_{tag}_{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&dir);
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    fn tiny_config() -> RunConfig {
        RunConfig {
            image_size: 32,
            iterations: 4,
            batch_size: 2,
            queries: 4,
            decoder_layers: 2,
            hidden_dim: 16,
            embed_dim: 8,
            encoder_depth: 4,
            encoder_heads: 2,
            encoder_width: 16,
            sam_patch: 8,
            clip_patch: 8,
            clip_downsample: 0.5,
            ..RunConfig::default()
        }
    }

    fn tiny_dataset(dir: &Path, seed: u64) -> Dataset {
        let spec = DatasetSpec {
            seed,
            classes: 5,
            train_classes: 3,
            images: 6,
            image_size: 32,
            embed_dim: 8,
        };
        gen_dataset(&spec, dir).unwrap();
        Dataset::load(dir).unwrap()
    }

    // ── Config file ───────────────────────────────────────────────────

    #[test]
    fn config_parses_values_and_comments() {
        let cfg = RunConfig::parse("# comment\nseed = 9\nalpha = 0.25 # trailing\n\nqueries = 5\n").unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.alpha, 0.25);
        assert_eq!(cfg.queries, 5);
        assert_eq!(cfg.beta, 0.7); // untouched default
    }

    #[test]
    fn unknown_config_keys_are_errors() {
        assert!(matches!(RunConfig::parse("nope = 1\n"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("seed = 1\nseed = 2\n"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("seed\n"), Err(Error::Config(_))));
    }

    #[test]
    fn config_round_trips_through_canonical_form() {
        let cfg = RunConfig {
            learning_rate: 3e-4,
            ssc_placement: crate::losses::SscPlacement::Both,
            balance_mode: crate::inference::BalanceMode::Geometric,
            ..RunConfig::default()
        };
        let text = cfg.to_kv_string();
        let reparsed = RunConfig::parse(&text).unwrap();
        assert_eq!(text, reparsed.to_kv_string());
    }

    // ── Image IO ──────────────────────────────────────────────────────

    #[test]
    fn netpbm_round_trip_and_golden_header() {
        let dir = tmpdir("netpbm");
        let pgm = dir.join("x.pgm");
        image_io::write_pgm(&pgm, 3, 2, &[0, 1, 2, 3, 4, 5]).unwrap();
        let bytes = std::fs::read(&pgm).unwrap();
        assert_eq!(&bytes, b"P5\n3 2\n255\n\x00\x01\x02\x03\x04\x05");
        let (w, h, data) = image_io::read_pgm(&pgm).unwrap();
        assert_eq!((w, h), (3, 2));
        assert_eq!(data, vec![0, 1, 2, 3, 4, 5]);

        let ppm = dir.join("x.ppm");
        let rgb: Vec<u8> = (0..12).collect();
        image_io::write_ppm(&ppm, 2, 2, &rgb).unwrap();
        let (w, h, back) = image_io::read_ppm(&ppm).unwrap();
        assert_eq!((w, h, back), (2, 2, rgb));
        std::fs::remove_dir_all(&dir).unwrap();
    }

    // ── Dataset generation ────────────────────────────────────────────

    #[test]
    fn generation_is_byte_deterministic() {
        let a = tmpdir("gen_a");
        let b = tmpdir("gen_b");
        let spec = DatasetSpec { seed: 11, classes: 4, train_classes: 2, images: 3, image_size: 32, embed_dim: 8 };
        gen_dataset(&spec, &a).unwrap();
        gen_dataset(&spec, &b).unwrap();
        for rel in ["vocab.txt", "meta.cfg", "train/img_0000.ppm", "eval/img_0003_labels.pgm"] {
            let x = std::fs::read(a.join(rel)).unwrap();
            let y = std::fs::read(b.join(rel)).unwrap();
            assert_eq!(x, y, "{rel} differs");
        }
        std::fs::remove_dir_all(&a).unwrap();
        std::fs::remove_dir_all(&b).unwrap();
    }

    #[test]
    fn train_images_use_only_training_classes() {
        let dir = tmpdir("gen_train_only");
        let data = tiny_dataset(&dir, 5);
        for item in &data.train_items {
            let (_, _, labels) = Dataset::load_label_map(&item.labels, 5).unwrap();
            assert!(labels.iter().all(|&l| l < 3));
        }
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn pixel_colors_match_recomputed_palette() {
        let dir = tmpdir("gen_palette");
        let data = tiny_dataset(&dir, 7);
        let embedder = crate::encoders::TextEmbedder::builtin(TEXT_EMBED_SEED, 8);
        let te = embedder.class_embeddings(&data.class_names, PromptStrategy::Ensemble).unwrap();
        let colors = palette(data.seed, &te);
        let item = &data.train_items[0];
        let (w, _, rgb) = image_io::read_ppm(&item.image).unwrap();
        let (_, _, labels) = Dataset::load_label_map(&item.labels, 5).unwrap();
        for (i, &l) in labels.iter().enumerate() {
            assert_eq!(&rgb[i * 3..i * 3 + 3], &colors[l], "pixel {} row {}", i % w, i / w);
        }
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn quarter_labels_majority_vote() {
        // 8x8 map, left half class 0, right half class 1 -> 2x2 split.
        let mut labels = vec![0usize; 64];
        for y in 0..8 {
            for x in 4..8 {
                labels[y * 8 + x] = 1;
            }
        }
        assert_eq!(quarter_labels(&labels, 8, 8, 2), vec![0, 1, 0, 1]);
    }

    #[test]
    fn ground_truth_rejects_non_training_classes() {
        let labels = vec![2usize; 64];
        let train_index = vec![Some(0), Some(1), None];
        assert!(ground_truth_from_labels(&labels, 8, 8, &train_index).is_err());
    }

    // ── Checkpoints ───────────────────────────────────────────────────

    #[test]
    fn checkpoint_round_trip_is_byte_identical() {
        let cfg = tiny_config();
        let model = Model::new(&cfg).unwrap();
        let ck = Checkpoint::from_model(&model, 42);
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.iteration, 42);
        assert_eq!(bytes, back.to_bytes());
    }

    #[test]
    fn unknown_checkpoint_version_is_an_error() {
        let cfg = tiny_config();
        let model = Model::new(&cfg).unwrap();
        let mut bytes = Checkpoint::from_model(&model, 0).to_bytes();
        bytes[4] = b'2'; // OVSK2
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Version(_))));
    }

    #[test]
    fn checkpoint_restores_model_parameters() {
        let cfg = tiny_config();
        let model = Model::new(&cfg).unwrap();
        let probe = &model.decoder.query_embed;
        let mut bumped = probe.to_vec();
        bumped[0] += 1.5;
        probe.set_data(&bumped).unwrap();
        let ck = Checkpoint::from_model(&model, 7);

        let fresh = Model::new(&cfg).unwrap();
        assert_ne!(fresh.decoder.query_embed.to_vec()[0], bumped[0]);
        ck.apply_to(&fresh).unwrap();
        assert_eq!(fresh.decoder.query_embed.to_vec(), bumped);
    }

    // ── Training ──────────────────────────────────────────────────────

    #[test]
    fn training_is_deterministic_and_freezes_encoders() {
        let dir = tmpdir("train_det");
        let data = tiny_dataset(&dir, 3);
        let cfg = tiny_config();

        let before = Model::new(&cfg).unwrap().frozen_checksum();
        let a = train(&cfg, &data).unwrap();
        let b = train(&cfg, &data).unwrap();
        assert_eq!(a.loss_log, b.loss_log, "loss logs must be bitwise identical");
        assert_eq!(a.model.frozen_checksum(), before, "frozen parameters changed");
        assert!(a.loss_log.starts_with("iter,sem_seg,ssc,total\n"));
        assert_eq!(a.loss_log.lines().count(), 1 + cfg.iterations);
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn evaluation_runs_end_to_end() {
        let dir = tmpdir("eval_smoke");
        let data = tiny_dataset(&dir, 13);
        let cfg = tiny_config();
        let outcome = train(&cfg, &data).unwrap();
        let opts = EvalOptions::from_config(&cfg);
        let (vocab, acc) = evaluate(&outcome.model, &data, &opts).unwrap();
        let summary = acc.summary(&vocab.is_train);
        assert!(summary.all.is_some());
        let mut csv = Vec::new();
        crate::inference::write_metrics_csv(&mut csv, &vocab, &acc).unwrap();
        assert!(String::from_utf8(csv).unwrap().starts_with("class,iou,split\n"));
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
