use std::collections::HashSet;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::Tensor;

/// Prompt templates used when no template file is supplied. Index 0 is the
/// single-template prompt.
pub const BUILTIN_TEMPLATES: [&str; 14] = [
    "a photo of a {}.",
    "This is a photo of a {}",
    "There is a {} in the scene",
    "There is the {} in the scene",
    "a photo of a {} in the scene",
    "a photo of a small {}.",
    "a photo of a medium {}.",
    "a photo of a large {}.",
    "This is a photo of a small {}.",
    "This is a photo of a medium {}.",
    "This is a photo of a large {}.",
    "There is a small {} in the scene.",
    "There is a medium {} in the scene.",
    "There is a large {} in the scene.",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptStrategy {
    /// First template only.
    Single,
    /// Mean over all templates, renormalized.
    Ensemble,
}

/// Deterministic stand-in for a text encoder: each (template, class) pair
/// hashes to a pseudo-random unit vector. Same seed, same strings, same
/// embedding — that is all the pipeline needs from text.
pub struct TextEmbedder {
    templates: Vec<String>,
    seed: u64,
    dim: usize,
}

fn fnv1a(bytes: &[u8], mut hash: u64) -> u64 {
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

impl TextEmbedder {
    pub fn new(templates: Vec<String>, seed: u64, dim: usize) -> Result<Self> {
        if templates.is_empty() {
            return Err(Error::Config("template list is empty".into()));
        }
        if dim == 0 {
            return Err(Error::Config("embedding dim must be positive".into()));
        }
        for t in &templates {
            if !t.contains("{}") {
                return Err(Error::Config(format!("template missing {{}} placeholder: {t:?}")));
            }
        }
        Ok(TextEmbedder { templates, seed, dim })
    }

    pub fn builtin(seed: u64, dim: usize) -> Self {
        Self::new(BUILTIN_TEMPLATES.iter().map(|s| s.to_string()).collect(), seed, dim)
            .expect("builtin templates are valid")
    }

    /// One template per line, UTF-8, each line must contain `{}`.
    pub fn from_file(path: &Path, seed: u64, dim: usize) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let templates: Vec<String> = text
            .lines()
            .map(|l| l.trim())
            .filter(|l| !l.is_empty())
            .map(|l| l.to_string())
            .collect();
        Self::new(templates, seed, dim)
    }

    pub fn templates(&self) -> &[String] {
        &self.templates
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Unit-norm embedding of one rendered (template, class) pair.
    pub fn template_embedding(&self, template: &str, class: &str) -> Vec<f64> {
        let mut salt = 0u64;
        loop {
            let mut h = fnv1a(&self.seed.to_le_bytes(), 0xcbf29ce484222325);
            h = fnv1a(template.as_bytes(), h);
            h = fnv1a(&[0x1f], h);
            h = fnv1a(class.as_bytes(), h);
            h = fnv1a(&salt.to_le_bytes(), h);
            let mut rng = ChaCha20Rng::seed_from_u64(h);
            let raw: Vec<f64> = (0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 1e-9 {
                return raw.into_iter().map(|v| v / norm).collect();
            }
            salt += 1; // vanishing draw: rehash deterministically
        }
    }

    /// K×C matrix of class embeddings, one unit-norm row per class.
    pub fn class_embeddings(&self, classes: &[String], strategy: PromptStrategy) -> Result<Tensor> {
        if classes.is_empty() {
            return Err(Error::Vocabulary("class list is empty".into()));
        }
        let mut seen = HashSet::new();
        for c in classes {
            if !seen.insert(c.as_str()) {
                return Err(Error::Vocabulary(format!("duplicate class name {c:?}")));
            }
        }
        let mut rows = Vec::with_capacity(classes.len() * self.dim);
        for class in classes {
            let row = match strategy {
                PromptStrategy::Single => self.template_embedding(&self.templates[0], class),
                PromptStrategy::Ensemble => {
                    let mut acc = vec![0.0f64; self.dim];
                    for t in &self.templates {
                        for (a, v) in acc.iter_mut().zip(self.template_embedding(t, class)) {
                            *a += v;
                        }
                    }
                    let k = self.templates.len() as f64;
                    for a in acc.iter_mut() {
                        *a /= k;
                    }
                    let norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if norm < 1e-12 {
                        return Err(Error::Degenerate { op: "class_embeddings" });
                    }
                    acc.into_iter().map(|v| v / norm).collect()
                }
            };
            rows.extend_from_slice(&row);
        }
        Tensor::from_vec(vec![classes.len(), self.dim], rows)
    }
}
