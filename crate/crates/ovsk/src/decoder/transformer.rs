use rand_chacha::ChaCha20Rng;

use crate::error::Result;
use crate::numerics::{multi_head_attention, AttentionParams};
use crate::Tensor;

use super::{gaussian_param, LN_EPS};

const FFN_RATIO: usize = 4;

/// One decoder round: mask-guided cross-attention into a stage feature map,
/// self-attention among the queries, feed-forward. Pre-norm throughout.
pub struct DecoderLayer {
    pub ln_cross_gamma: Tensor,
    pub ln_cross_beta: Tensor,
    pub cross: AttentionParams<f64>,
    pub ln_self_gamma: Tensor,
    pub ln_self_beta: Tensor,
    pub self_attn: AttentionParams<f64>,
    pub ln_ffn_gamma: Tensor,
    pub ln_ffn_beta: Tensor,
    pub fc1_weight: Tensor,
    pub fc1_bias: Tensor,
    pub fc2_weight: Tensor,
    pub fc2_bias: Tensor,
}

pub(super) fn trainable_attention(rng: &mut ChaCha20Rng, width: usize, heads: usize) -> AttentionParams<f64> {
    AttentionParams {
        heads,
        wq: gaussian_param(rng, vec![width, width]),
        bq: Tensor::param(vec![width], vec![0.0; width]).unwrap(),
        wk: gaussian_param(rng, vec![width, width]),
        bk: Tensor::param(vec![width], vec![0.0; width]).unwrap(),
        wv: gaussian_param(rng, vec![width, width]),
        bv: Tensor::param(vec![width], vec![0.0; width]).unwrap(),
        wo: gaussian_param(rng, vec![width, width]),
        bo: Tensor::param(vec![width], vec![0.0; width]).unwrap(),
    }
}

fn ln_pair(width: usize) -> (Tensor, Tensor) {
    (
        Tensor::param(vec![width], vec![1.0; width]).unwrap(),
        Tensor::param(vec![width], vec![0.0; width]).unwrap(),
    )
}

impl DecoderLayer {
    pub fn new(rng: &mut ChaCha20Rng, hidden: usize, heads: usize) -> Self {
        let (ln_cross_gamma, ln_cross_beta) = ln_pair(hidden);
        let (ln_self_gamma, ln_self_beta) = ln_pair(hidden);
        let (ln_ffn_gamma, ln_ffn_beta) = ln_pair(hidden);
        DecoderLayer {
            ln_cross_gamma,
            ln_cross_beta,
            cross: trainable_attention(rng, hidden, heads),
            ln_self_gamma,
            ln_self_beta,
            self_attn: trainable_attention(rng, hidden, heads),
            ln_ffn_gamma,
            ln_ffn_beta,
            fc1_weight: gaussian_param(rng, vec![hidden, FFN_RATIO * hidden]),
            fc1_bias: Tensor::param(vec![FFN_RATIO * hidden], vec![0.0; FFN_RATIO * hidden]).unwrap(),
            fc2_weight: gaussian_param(rng, vec![FFN_RATIO * hidden, hidden]),
            fc2_bias: Tensor::param(vec![hidden], vec![0.0; hidden]).unwrap(),
        }
    }

    pub fn forward(&self, queries: &Tensor, memory: &Tensor, cross_bias: Option<&Tensor>) -> Result<Tensor> {
        let normed = queries.layer_norm(&self.ln_cross_gamma, &self.ln_cross_beta, LN_EPS)?;
        let x = queries.add(&multi_head_attention(&normed, memory, &self.cross, cross_bias)?)?;
        let normed = x.layer_norm(&self.ln_self_gamma, &self.ln_self_beta, LN_EPS)?;
        let x = x.add(&multi_head_attention(&normed, &normed, &self.self_attn, None)?)?;
        let normed = x.layer_norm(&self.ln_ffn_gamma, &self.ln_ffn_beta, LN_EPS)?;
        let h = normed.matmul(&self.fc1_weight)?.add_bias(&self.fc1_bias)?.gelu()?;
        x.add(&h.matmul(&self.fc2_weight)?.add_bias(&self.fc2_bias)?)
    }

    pub fn params(&self, prefix: &str) -> Vec<(String, Tensor, bool)> {
        let mut out = vec![
            (format!("{prefix}.ln_cross.gamma"), self.ln_cross_gamma.clone(), true),
            (format!("{prefix}.ln_cross.beta"), self.ln_cross_beta.clone(), true),
        ];
        for (name, t) in [
            ("cross.wq", &self.cross.wq),
            ("cross.bq", &self.cross.bq),
            ("cross.wk", &self.cross.wk),
            ("cross.bk", &self.cross.bk),
            ("cross.wv", &self.cross.wv),
            ("cross.bv", &self.cross.bv),
            ("cross.wo", &self.cross.wo),
            ("cross.bo", &self.cross.bo),
        ] {
            out.push((format!("{prefix}.{name}"), t.clone(), true));
        }
        out.push((format!("{prefix}.ln_self.gamma"), self.ln_self_gamma.clone(), true));
        out.push((format!("{prefix}.ln_self.beta"), self.ln_self_beta.clone(), true));
        for (name, t) in [
            ("self.wq", &self.self_attn.wq),
            ("self.bq", &self.self_attn.bq),
            ("self.wk", &self.self_attn.wk),
            ("self.bk", &self.self_attn.bk),
            ("self.wv", &self.self_attn.wv),
            ("self.bv", &self.self_attn.bv),
            ("self.wo", &self.self_attn.wo),
            ("self.bo", &self.self_attn.bo),
        ] {
            out.push((format!("{prefix}.{name}"), t.clone(), true));
        }
        out.push((format!("{prefix}.ln_ffn.gamma"), self.ln_ffn_gamma.clone(), true));
        out.push((format!("{prefix}.ln_ffn.beta"), self.ln_ffn_beta.clone(), true));
        out.push((format!("{prefix}.fc1.weight"), self.fc1_weight.clone(), true));
        out.push((format!("{prefix}.fc1.bias"), self.fc1_bias.clone(), true));
        out.push((format!("{prefix}.fc2.weight"), self.fc2_weight.clone(), true));
        out.push((format!("{prefix}.fc2.bias"), self.fc2_bias.clone(), true));
        out
    }
}
