//! Closed-form FLOP and parameter accounting (2 FLOPs per multiply-accumulate).
//!
//! Elementwise work (softmax, normalization, GELU, residual adds, pooling) is
//! not counted.

use serde::{Deserialize, Serialize};

use crate::vit::ModelConfig;

/// Shape quantities the counts depend on. `tokens` is free so that
/// class-token layouts (e.g. 197 = 196 + 1) can be costed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopsInput {
    pub dim: u64,
    pub heads: u64,
    pub tokens: u64,
    pub ffn_hidden: u64,
    pub patch_dim: u64,
    pub num_classes: u64,
    pub deploy_blocks: u64,
    pub branches: u64,
}

impl From<&ModelConfig> for FlopsInput {
    fn from(c: &ModelConfig) -> Self {
        Self {
            dim: c.dim as u64,
            heads: c.heads as u64,
            tokens: c.token_count() as u64,
            ffn_hidden: c.ffn_hidden as u64,
            patch_dim: c.patch_dim() as u64,
            num_classes: c.num_classes as u64,
            deploy_blocks: c.deploy_blocks as u64,
            branches: c.branches as u64,
        }
    }
}

impl FlopsInput {
    pub fn head_dim(&self) -> u64 {
        self.dim / self.heads
    }
}

/// Per-layer component counts, in FLOPs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerFlops {
    /// Q and K projections plus `QKᵀ`: `2·(2·N·d² + N²·d)`.
    pub attn_scores_traditional: u64,
    /// Fused `X·W·Xᵀ` over all heads: `2·(h·N·d² + N²·d)`.
    pub attn_scores_fused: u64,
    /// Literal per-head fused cost `2·h·(N·d² + N²·d)`.
    pub fused_scores_per_head_literal: u64,
    /// V projection, `softmax·V` and output projection: `2·(2·N·d² + N²·d)`.
    pub attn_value_output: u64,
    /// `2·(2·N·d·ffn_hidden)`.
    pub ffn: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    /// Standard `L`-layer model with affine LNs (`L = deploy_blocks·branches`).
    pub baseline: u64,
    /// Training-time multi-branch model.
    pub multi_branch: u64,
    /// Deployed model after collapse and affine absorption.
    pub deployed: u64,
    pub deployed_attention_per_block: u64,
    pub ffn_per_layer: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub input: FlopsInput,
    pub layer: LayerFlops,
    pub patch_embed: u64,
    pub head: u64,
    /// `patch_embed + L·(scores_traditional + value_output + ffn) + head`.
    pub baseline_total: u64,
    /// `patch_embed + (L/n)·(scores_fused + value_output + ffn) + head`.
    pub deployed_total: u64,
    pub params: ParamCounts,
}

pub fn layer_flops(x: &FlopsInput) -> LayerFlops {
    let (n, d, h, f) = (x.tokens, x.dim, x.heads, x.ffn_hidden);
    LayerFlops {
        attn_scores_traditional: 2 * (2 * n * d * d + n * n * d),
        attn_scores_fused: 2 * (h * n * d * d + n * n * d),
        fused_scores_per_head_literal: 2 * h * (n * d * d + n * n * d),
        attn_value_output: 2 * (2 * n * d * d + n * n * d),
        ffn: 2 * (2 * n * d * f),
    }
}

pub fn param_counts(x: &FlopsInput) -> ParamCounts {
    let (d, h, dh, f) = (x.dim, x.heads, x.head_dim(), x.ffn_hidden);
    let embed = x.patch_dim * d + d + x.tokens * d;
    let head = d * x.num_classes + x.num_classes;
    let ffn = d * f + f + f * d + d;
    let affines = 4 * d;
    let branch_attn = h * (3 * d * dh + dh * d);
    let layers = x.deploy_blocks * x.branches;
    let deployed_attn = h * d * d + h * d * dh + h * dh * d;
    ParamCounts {
        baseline: embed + layers * (branch_attn + ffn + affines) + head,
        multi_branch: embed + x.deploy_blocks * (x.branches * (branch_attn + ffn) + affines) + head,
        deployed: embed + x.deploy_blocks * (deployed_attn + ffn) + head,
        deployed_attention_per_block: deployed_attn,
        ffn_per_layer: ffn,
    }
}

pub fn flops_report(x: &FlopsInput) -> FlopsReport {
    let layer = layer_flops(x);
    let patch_embed = 2 * x.tokens * x.patch_dim * x.dim;
    let head = 2 * x.dim * x.num_classes;
    let layers = x.deploy_blocks * x.branches;
    FlopsReport {
        input: *x,
        layer,
        patch_embed,
        head,
        baseline_total: patch_embed
            + layers * (layer.attn_scores_traditional + layer.attn_value_output + layer.ffn)
            + head,
        deployed_total: patch_embed
            + x.deploy_blocks * (layer.attn_scores_fused + layer.attn_value_output + layer.ffn)
            + head,
        params: param_counts(x),
    }
}

impl FlopsReport {
    /// Human-readable table, one component per line, in MFLOPs.
    pub fn table(&self) -> String {
        let m = |v: u64| format!("{:>12.3}", v as f64 / 1e6);
        let l = &self.layer;
        let rows = [
            ("patch_embed", self.patch_embed),
            ("attn_scores_traditional", l.attn_scores_traditional),
            ("attn_scores_fused", l.attn_scores_fused),
            ("fused_scores_per_head_literal", l.fused_scores_per_head_literal),
            ("attn_value_output", l.attn_value_output),
            ("ffn", l.ffn),
            ("head", self.head),
            ("baseline_total", self.baseline_total),
            ("deployed_total", self.deployed_total),
        ];
        let mut out = format!("{:<32}{:>12}\n", "component", "MFLOPs");
        for (name, v) in rows {
            out.push_str(&format!("{name:<32}{}\n", m(v)));
        }
        let p = &self.params;
        out.push_str(&format!(
            "params: baseline {} | multi_branch {} | deployed {}\n",
            p.baseline, p.multi_branch, p.deployed
        ));
        out
    }
}
