//! Synthetic open-vocabulary scenes. Class appearance is a fixed affine map
//! of the class's text embedding to RGB, so classes never seen in training
//! still have appearances predictable from their embeddings. Training images
//! draw only from the training classes; eval images draw from all of them.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::losses::GroundTruth;
use crate::Tensor;

use super::image_io::{read_pgm, read_ppm, write_pgm, write_ppm};
use super::TEXT_EMBED_SEED;

const PALETTE_CANDIDATES: u64 = 200;
const PALETTE_SPREAD: f64 = 110.0;

/// Deterministic affine palette: each RGB channel is a seeded random unit
/// projection of the text embedding, centered at 128. Among a fixed number
/// of candidate projections the one with the best minimum pairwise color
/// separation wins, so the choice is still a pure function of (seed, TE).
pub fn palette(seed: u64, text_embeddings: &Tensor) -> Vec<[u8; 3]> {
    let k = text_embeddings.shape()[0];
    let c = text_embeddings.shape()[1];
    let te = text_embeddings.data();
    let mut best: (i32, Vec<[u8; 3]>) = (-1, Vec::new());
    for candidate in 0..PALETTE_CANDIDATES {
        let mut rng = ChaCha20Rng::seed_from_u64(seed.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(candidate));
        let mut axes = [[0.0f64; 64]; 3];
        for axis in axes.iter_mut() {
            let mut norm = 0.0;
            for slot in axis.iter_mut().take(c) {
                *slot = StandardNormal.sample(&mut rng);
                norm += *slot * *slot;
            }
            let norm = norm.sqrt().max(1e-12);
            for slot in axis.iter_mut().take(c) {
                *slot /= norm;
            }
        }
        let colors: Vec<[u8; 3]> = (0..k)
            .map(|class| {
                let row = &te[class * c..(class + 1) * c];
                let mut rgb = [0u8; 3];
                for ch in 0..3 {
                    let dot: f64 = row.iter().zip(axes[ch].iter()).map(|(a, b)| a * b).sum();
                    rgb[ch] = (128.0 + PALETTE_SPREAD * dot).round().clamp(0.0, 255.0) as u8;
                }
                rgb
            })
            .collect();
        let mut separation = i32::MAX;
        for i in 0..k {
            for j in i + 1..k {
                let dist = (0..3)
                    .map(|ch| (colors[i][ch] as i32 - colors[j][ch] as i32).abs())
                    .max()
                    .unwrap();
                separation = separation.min(dist);
            }
        }
        if k == 1 {
            separation = i32::MAX - 1;
        }
        if separation > best.0 {
            best = (separation, colors);
        }
    }
    best.1
}

#[derive(Debug, Clone)]
pub enum ShapeKind {
    Rect { x0: usize, y0: usize, w: usize, h: usize },
    Circle { cx: f64, cy: f64, r: f64 },
    Stripe { horizontal: bool, offset: usize, thickness: usize },
}

#[derive(Debug, Clone)]
pub struct PlacedShape {
    pub kind: ShapeKind,
    pub class_id: usize,
}

/// One synthetic scene: a background class plus a few painted shapes, all
/// inside the canvas.
#[derive(Debug, Clone)]
pub struct SceneSpec {
    pub size: usize,
    pub background: usize,
    pub shapes: Vec<PlacedShape>,
}

impl SceneSpec {
    pub fn generate(rng: &mut ChaCha20Rng, class_pool: &[usize], size: usize) -> SceneSpec {
        let background = class_pool[rng.gen_range(0..class_pool.len())];
        let count = rng.gen_range(2..=4usize);
        let shapes = (0..count)
            .map(|_| {
                let class_id = class_pool[rng.gen_range(0..class_pool.len())];
                let kind = match rng.gen_range(0..3u8) {
                    0 => {
                        let w = rng.gen_range(size / 4..=size / 2);
                        let h = rng.gen_range(size / 4..=size / 2);
                        ShapeKind::Rect {
                            x0: rng.gen_range(0..=size - w),
                            y0: rng.gen_range(0..=size - h),
                            w,
                            h,
                        }
                    }
                    1 => {
                        let r = rng.gen_range(size as f64 / 6.0..size as f64 / 3.0);
                        ShapeKind::Circle {
                            cx: rng.gen_range(r..size as f64 - r),
                            cy: rng.gen_range(r..size as f64 - r),
                            r,
                        }
                    }
                    _ => {
                        let thickness = rng.gen_range(size / 6..=size / 4);
                        ShapeKind::Stripe {
                            horizontal: rng.gen_bool(0.5),
                            offset: rng.gen_range(0..=size - thickness),
                            thickness,
                        }
                    }
                };
                PlacedShape { kind, class_id }
            })
            .collect();
        SceneSpec { size, background, shapes }
    }

    /// Rasterize to a row-major class-index map; later shapes paint over
    /// earlier ones.
    pub fn label_map(&self) -> Vec<usize> {
        let s = self.size;
        let mut labels = vec![self.background; s * s];
        for shape in &self.shapes {
            match shape.kind {
                ShapeKind::Rect { x0, y0, w, h } => {
                    for y in y0..y0 + h {
                        for x in x0..x0 + w {
                            labels[y * s + x] = shape.class_id;
                        }
                    }
                }
                ShapeKind::Circle { cx, cy, r } => {
                    for y in 0..s {
                        for x in 0..s {
                            let dx = x as f64 + 0.5 - cx;
                            let dy = y as f64 + 0.5 - cy;
                            if dx * dx + dy * dy <= r * r {
                                labels[y * s + x] = shape.class_id;
                            }
                        }
                    }
                }
                ShapeKind::Stripe { horizontal, offset, thickness } => {
                    for y in 0..s {
                        for x in 0..s {
                            let along = if horizontal { y } else { x };
                            if along >= offset && along < offset + thickness {
                                labels[y * s + x] = shape.class_id;
                            }
                        }
                    }
                }
            }
        }
        labels
    }
}

#[derive(Debug, Clone)]
pub struct DatasetSpec {
    pub seed: u64,
    pub classes: usize,
    pub train_classes: usize,
    pub images: usize,
    pub image_size: usize,
    pub embed_dim: usize,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.classes > 255 {
            return Err(Error::Config(format!("class count must be in 2..=255, got {}", self.classes)));
        }
        if self.train_classes == 0 || self.train_classes >= self.classes {
            return Err(Error::Config(format!(
                "train classes must satisfy 1 <= f < K, got f={} K={}",
                self.train_classes, self.classes
            )));
        }
        if self.images == 0 || self.image_size < 16 {
            return Err(Error::Config("need at least one image and image_size >= 16".into()));
        }
        Ok(())
    }

    pub fn eval_images(&self) -> usize {
        self.images.div_ceil(4).max(4)
    }

    pub fn class_names(&self) -> Vec<String> {
        (0..self.classes).map(|i| format!("class{i:02}")).collect()
    }
}

fn render_rgb(labels: &[usize], colors: &[[u8; 3]]) -> Vec<u8> {
    let mut rgb = Vec::with_capacity(labels.len() * 3);
    for &l in labels {
        rgb.extend_from_slice(&colors[l]);
    }
    rgb
}

/// Generate a dataset on disk: `vocab.txt`, `meta.cfg`, and `train/` +
/// `eval/` image/label pairs. Byte-for-byte deterministic in the seed.
pub fn gen_dataset(spec: &DatasetSpec, out: &Path) -> Result<()> {
    spec.validate()?;
    let names = spec.class_names();
    let embedder = crate::encoders::TextEmbedder::builtin(TEXT_EMBED_SEED, spec.embed_dim);
    let te = embedder.class_embeddings(&names, crate::encoders::PromptStrategy::Ensemble)?;
    let colors = palette(spec.seed, &te);

    std::fs::create_dir_all(out.join("train"))?;
    std::fs::create_dir_all(out.join("eval"))?;

    let mut vocab = String::new();
    for (i, name) in names.iter().enumerate() {
        if i < spec.train_classes {
            vocab.push('*');
        }
        vocab.push_str(name);
        vocab.push('\n');
    }
    std::fs::write(out.join("vocab.txt"), vocab)?;

    let mut meta = BTreeMap::new();
    meta.insert("classes", spec.classes.to_string());
    meta.insert("embed_dim", spec.embed_dim.to_string());
    meta.insert("eval_images", spec.eval_images().to_string());
    meta.insert("image_size", spec.image_size.to_string());
    meta.insert("images", spec.images.to_string());
    meta.insert("seed", spec.seed.to_string());
    meta.insert("train_classes", spec.train_classes.to_string());
    let meta_text: String = meta.iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
    std::fs::write(out.join("meta.cfg"), meta_text)?;

    let train_pool: Vec<usize> = (0..spec.train_classes).collect();
    let all_pool: Vec<usize> = (0..spec.classes).collect();
    for (split, count, pool, salt) in [
        ("train", spec.images, &train_pool, 0x7261_696eu64),
        ("eval", spec.eval_images(), &all_pool, 0x6576_616cu64),
    ] {
        for index in 0..count {
            let mut rng = ChaCha20Rng::seed_from_u64(
                spec.seed
                    .wrapping_mul(0x9E3779B97F4A7C15)
                    .wrapping_add(salt)
                    .wrapping_add(index as u64),
            );
            let scene = SceneSpec::generate(&mut rng, pool, spec.image_size);
            let labels = scene.label_map();
            if split == "train" {
                debug_assert!(labels.iter().all(|&l| l < spec.train_classes));
            }
            let rgb = render_rgb(&labels, &colors);
            let bytes: Vec<u8> = labels.iter().map(|&l| l as u8).collect();
            write_ppm(&out.join(split).join(format!("img_{index:04}.ppm")), spec.image_size, spec.image_size, &rgb)?;
            write_pgm(
                &out.join(split).join(format!("img_{index:04}_labels.pgm")),
                spec.image_size,
                spec.image_size,
                &bytes,
            )?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct DatasetItem {
    pub image: PathBuf,
    pub labels: PathBuf,
}

/// A generated dataset reloaded from disk.
pub struct Dataset {
    pub root: PathBuf,
    pub class_names: Vec<String>,
    pub is_train_class: Vec<bool>,
    pub image_size: usize,
    pub embed_dim: usize,
    pub seed: u64,
    pub train_items: Vec<DatasetItem>,
    pub eval_items: Vec<DatasetItem>,
}

fn list_items(dir: &Path) -> Result<Vec<DatasetItem>> {
    let mut out = Vec::new();
    if !dir.exists() {
        return Ok(out);
    }
    let mut names: Vec<String> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".ppm"))
        .collect();
    names.sort();
    for n in names {
        let stem = n.trim_end_matches(".ppm");
        let labels = dir.join(format!("{stem}_labels.pgm"));
        if !labels.exists() {
            return Err(Error::Format(format!("missing label map for {}", dir.join(&n).display())));
        }
        out.push(DatasetItem { image: dir.join(&n), labels });
    }
    Ok(out)
}

/// Parse a vocabulary file: one class name per line, training classes
/// prefixed with `*`.
pub fn parse_vocab(text: &str) -> Result<(Vec<String>, Vec<bool>)> {
    let mut names = Vec::new();
    let mut flags = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('*') {
            names.push(name.to_string());
            flags.push(true);
        } else {
            names.push(line.to_string());
            flags.push(false);
        }
    }
    if names.is_empty() {
        return Err(Error::Vocabulary("vocabulary file has no classes".into()));
    }
    Ok((names, flags))
}

impl Dataset {
    pub fn load(root: &Path) -> Result<Self> {
        let vocab_text = std::fs::read_to_string(root.join("vocab.txt"))
            .map_err(|_| Error::Format(format!("{}: missing vocab.txt", root.display())))?;
        let (class_names, is_train_class) = parse_vocab(&vocab_text)?;
        let meta_text = std::fs::read_to_string(root.join("meta.cfg"))
            .map_err(|_| Error::Format(format!("{}: missing meta.cfg", root.display())))?;
        let meta = super::config::parse_kv(&meta_text)?;
        let lookup = |key: &str| -> Result<u64> {
            meta.iter()
                .find(|(k, _)| k == key)
                .and_then(|(_, v)| v.parse().ok())
                .ok_or_else(|| Error::Format(format!("meta.cfg: missing or invalid key {key:?}")))
        };
        Ok(Dataset {
            class_names,
            is_train_class,
            image_size: lookup("image_size")? as usize,
            embed_dim: lookup("embed_dim")? as usize,
            seed: lookup("seed")?,
            train_items: list_items(&root.join("train"))?,
            eval_items: list_items(&root.join("eval"))?,
            root: root.to_path_buf(),
        })
    }

    /// Global class ids of the training classes, in vocabulary order.
    pub fn train_class_ids(&self) -> Vec<usize> {
        (0..self.class_names.len()).filter(|&i| self.is_train_class[i]).collect()
    }

    /// Map global class id -> index within the training subset.
    pub fn train_index_map(&self) -> Vec<Option<usize>> {
        let mut next = 0usize;
        self.is_train_class
            .iter()
            .map(|&t| {
                if t {
                    let i = next;
                    next += 1;
                    Some(i)
                } else {
                    None
                }
            })
            .collect()
    }

    pub fn load_image_tensor(path: &Path) -> Result<Tensor> {
        let (w, h, rgb) = read_ppm(path)?;
        let data: Vec<f64> = rgb.iter().map(|&b| b as f64 / 255.0).collect();
        Tensor::from_vec(vec![h, w, 3], data)
    }

    pub fn load_label_map(path: &Path, classes: usize) -> Result<(usize, usize, Vec<usize>)> {
        let (w, h, bytes) = read_pgm(path)?;
        let labels: Vec<usize> = bytes.iter().map(|&b| b as usize).collect();
        if let Some(&bad) = labels.iter().find(|&&l| l > classes) {
            return Err(Error::Format(format!("label {bad} out of range for {classes} classes")));
        }
        Ok((w, h, labels))
    }
}

/// Majority-vote downsample of a label map by 4 in each direction (ceiling
/// extents). Ties take the smallest class id; the ignore label participates
/// like any other value.
pub fn quarter_labels(labels: &[usize], w: usize, h: usize, classes: usize) -> Vec<usize> {
    let qh = h.div_ceil(4);
    let qw = w.div_ceil(4);
    let mut out = vec![0usize; qh * qw];
    let mut counts = vec![0usize; classes + 1];
    for qy in 0..qh {
        for qx in 0..qw {
            counts.iter_mut().for_each(|c| *c = 0);
            for y in qy * 4..((qy + 1) * 4).min(h) {
                for x in qx * 4..((qx + 1) * 4).min(w) {
                    counts[labels[y * w + x]] += 1;
                }
            }
            let mut best = 0usize;
            for (c, &n) in counts.iter().enumerate() {
                if n > counts[best] {
                    best = c;
                }
            }
            out[qy * qw + qx] = best;
        }
    }
    out
}

/// Ground truth for training: quarter-resolution binary masks for every
/// training class present, class ids given as indices into the training
/// subset. A non-training class in the map is an error.
pub fn ground_truth_from_labels(
    labels: &[usize],
    w: usize,
    h: usize,
    train_index: &[Option<usize>],
) -> Result<GroundTruth> {
    let classes = train_index.len();
    let quarter = quarter_labels(labels, w, h, classes);
    let cells = quarter.len();
    let mut present: Vec<usize> = quarter.to_vec();
    present.sort_unstable();
    present.dedup();
    let mut masks = Vec::new();
    let mut class_ids = Vec::new();
    for class in present {
        if class >= classes {
            continue; // ignore label
        }
        let Some(train_id) = train_index[class] else {
            return Err(Error::Vocabulary(format!(
                "training image contains non-training class {class}"
            )));
        };
        let mask: Vec<f64> = (0..cells).map(|i| f64::from(quarter[i] == class)).collect();
        masks.push(mask);
        class_ids.push(train_id);
    }
    if masks.is_empty() {
        return Err(Error::Format("label map has no usable classes at quarter resolution".into()));
    }
    Ok(GroundTruth { masks, class_ids })
}
