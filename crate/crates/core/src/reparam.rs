//! Collapse of a fully joined (λ = 1) multi-branch model into a deployed
//! single-path model, LN-affine absorption, and the deployed forward pass.
//!
//! At λ = 1 every branch sees the same softmax input `Xn·(Σ_b W_b)·Xnᵀ`, the
//! same joined values and the same GELU input, so per-head score, value and
//! output matrices (and FFN weights) can simply be summed over branches.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tensor, TensorError};
use crate::vit::{
    patchify, AffineParams, AttnAffine, BranchAttentionParams, BranchFfnParams, FfnParams, ModelConfig,
    MultiBranchViT, PatchEmbedParams, VisitMut,
};

/// Threshold on relative logit error for [`verify_equivalence`] to pass.
pub const VERIFY_REL_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct FusedHead {
    /// `d × d` fused score matrix `Σ_b Wq·Wkᵀ`, rank ≤ n·d_h.
    pub w: Tensor,
    /// `d × d_h`
    pub v: Tensor,
    /// `d_h × d`
    pub o: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusedAttentionParams {
    pub heads: Vec<FusedHead>,
    /// Divisor applied to the scores.
    pub scale: f64,
}

impl FusedAttentionParams {
    pub fn parameter_count(&self) -> usize {
        self.heads.iter().map(|h| h.w.len() + h.v.len() + h.o.len()).sum()
    }
}

/// Normalization in front of a deployed sub-module.
#[derive(Debug, Clone, PartialEq)]
pub enum LnMode {
    Affine(AffineParams),
    /// Mean/variance normalization only; the affine lives in adjacent weights.
    ParameterFree,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusedBlockParams {
    pub ln1: LnMode,
    pub attn: FusedAttentionParams,
    pub ln2: LnMode,
    pub ffn: FfnParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeployedViT {
    /// Configuration of the source model (`branches` records the source branch count).
    pub config: ModelConfig,
    pub embed: PatchEmbedParams,
    pub blocks: Vec<FusedBlockParams>,
    pub head_w: Tensor,
    pub head_b: Tensor,
}

pub fn collapse_attention(attn: &BranchAttentionParams) -> Result<FusedAttentionParams> {
    let n = attn.branches();
    let h = attn.head_count();
    if n == 0 || h == 0 {
        return Err(Error::Tensor(TensorError::Usage("attention has no branches or heads".into())));
    }
    let head_dim = attn.heads[0][0].wq.cols();
    let mut heads = Vec::with_capacity(h);
    for i in 0..h {
        let first = &attn.heads[0][i];
        let mut w = first.wq.matmul_t(&first.wk)?;
        let mut v = first.wv.clone();
        let mut o = first.wo.clone();
        for branch in &attn.heads[1..] {
            let hw = &branch[i];
            w.add_assign(&hw.wq.matmul_t(&hw.wk)?)?;
            v.add_assign(&hw.wv)?;
            o.add_assign(&hw.wo)?;
        }
        heads.push(FusedHead { w, v, o });
    }
    Ok(FusedAttentionParams {
        heads,
        scale: crate::schedule::rectified_scale(1.0, n, head_dim),
    })
}

pub fn collapse_ffn(ffn: &BranchFfnParams) -> Result<FfnParams> {
    let (first, rest) = ffn
        .branches
        .split_first()
        .ok_or_else(|| Error::Tensor(TensorError::Usage("FFN has no branches".into())))?;
    let mut out = first.clone();
    for p in rest {
        out.w1.add_assign(&p.w1)?;
        out.b1.add_assign(&p.b1)?;
        out.w2.add_assign(&p.w2)?;
        out.b2.add_assign(&p.b2)?;
    }
    Ok(out)
}

/// Sums branch weights of every block. LN affines are carried over unchanged.
pub fn collapse(mb: &MultiBranchViT) -> Result<DeployedViT> {
    let blocks = mb
        .blocks
        .iter()
        .map(|b| {
            Ok(FusedBlockParams {
                ln1: LnMode::Affine(b.ln1.clone()),
                attn: collapse_attention(&b.attn)?,
                ln2: LnMode::Affine(b.ln2.clone()),
                ffn: collapse_ffn(&b.ffn)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DeployedViT {
        config: mb.config.clone(),
        embed: mb.embed.clone(),
        blocks,
        head_w: mb.head_w.clone(),
        head_b: mb.head_b.clone(),
    })
}

fn check_vec(op: &'static str, v: &Tensor, d: usize) -> Result<()> {
    if v.shape() != [d] {
        return Err(Error::Tensor(TensorError::Shape {
            op,
            lhs: v.shape().to_vec(),
            rhs: vec![d],
        }));
    }
    Ok(())
}

/// Folds a preceding affine `u ↦ γ⊙u + β` into a `d × k` first layer:
/// `W1' = diag(γ)·W1`, `b1' = W1ᵀβ + b1`.
pub fn absorb_ln_forward_ffn(gamma: &Tensor, beta: &Tensor, w1: &Tensor, b1: &Tensor) -> Result<(Tensor, Tensor)> {
    let d = w1.rows();
    check_vec("absorb_ln_forward_ffn", gamma, d)?;
    check_vec("absorb_ln_forward_ffn", beta, d)?;
    check_vec("absorb_ln_forward_ffn", b1, w1.cols())?;
    let w = w1.scale_rows(gamma)?;
    let shift = beta.reshape(&[1, d])?.matmul(w1)?.reshape(&[w1.cols()])?;
    Ok((w, shift.add(b1)?))
}

/// Folds a scale-only pre-attention affine into the fused score and value
/// matrices: `W' = diag(γ)·W·diag(γ)`, `V' = diag(γ)·V`.
pub fn absorb_ln_forward_attn(
    gamma: &Tensor,
    beta: &Tensor,
    fused: &FusedAttentionParams,
) -> Result<FusedAttentionParams> {
    if beta.data().iter().any(|&b| b != 0.0) {
        return Err(Error::UnsupportedAbsorption(
            "pre-attention affine has a nonzero shift; fold it backward with absorb_ln_backward instead".into(),
        ));
    }
    let heads = fused
        .heads
        .iter()
        .map(|h| {
            check_vec("absorb_ln_forward_attn", gamma, h.w.rows())?;
            Ok(FusedHead {
                w: h.w.scale_rows(gamma)?.mul_row_vector(gamma)?,
                v: h.v.scale_rows(gamma)?,
                o: h.o.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FusedAttentionParams {
        heads,
        scale: fused.scale,
    })
}

/// Folds a following affine into a `k × d` last layer on its output side:
/// `W2' = W2·diag(γ)`, `b2' = γ⊙b2 + β`.
pub fn absorb_ln_backward(gamma: &Tensor, beta: &Tensor, w2: &Tensor, b2: &Tensor) -> Result<(Tensor, Tensor)> {
    let d = w2.cols();
    check_vec("absorb_ln_backward", gamma, d)?;
    check_vec("absorb_ln_backward", beta, d)?;
    check_vec("absorb_ln_backward", b2, d)?;
    Ok((w2.mul_row_vector(gamma)?, b2.mul(gamma)?.add(beta)?))
}

/// Folds an affine applied to the embedded tokens into the patch embedding.
pub fn absorb_ln_into_patch_embed(
    gamma: &Tensor,
    beta: &Tensor,
    embed: &PatchEmbedParams,
) -> Result<PatchEmbedParams> {
    let d = embed.weight.cols();
    check_vec("absorb_ln_into_patch_embed", gamma, d)?;
    check_vec("absorb_ln_into_patch_embed", beta, d)?;
    Ok(PatchEmbedParams {
        weight: embed.weight.mul_row_vector(gamma)?,
        bias: embed.bias.mul(gamma)?.add(beta)?,
        pos: embed.pos.mul_row_vector(gamma)?,
    })
}

/// Result of [`absorb_affines`].
#[derive(Debug, Clone)]
pub struct Absorbed {
    pub model: DeployedViT,
    /// False when pre-attention affines were moved backward across a
    /// normalization and residual connection, which is not function-preserving
    /// in general.
    pub exact: bool,
}

/// Removes every LN affine from a deployed model.
///
/// Pre-FFN affines are folded forward into the FFN input layer. Pre-attention
/// affines are folded forward into the fused attention matrices when the
/// model was trained with [`AttnAffine::ScaleOnly`], otherwise backward into
/// the previous block's FFN output layer (or the patch embedding for block 0).
pub fn absorb_affines(dp: &DeployedViT) -> Result<Absorbed> {
    let mut model = dp.clone();
    let mut exact = true;
    for k in 0..model.blocks.len() {
        if let LnMode::Affine(a) = model.blocks[k].ln2.clone() {
            let ffn = &mut model.blocks[k].ffn;
            let (w1, b1) = absorb_ln_forward_ffn(&a.gamma, &a.beta, &ffn.w1, &ffn.b1)?;
            ffn.w1 = w1;
            ffn.b1 = b1;
            model.blocks[k].ln2 = LnMode::ParameterFree;
        }
        if let LnMode::Affine(a) = model.blocks[k].ln1.clone() {
            let shift_free = a.beta.data().iter().all(|&b| b == 0.0);
            if dp.config.attn_affine == AttnAffine::ScaleOnly || shift_free {
                model.blocks[k].attn = absorb_ln_forward_attn(&a.gamma, &a.beta, &model.blocks[k].attn)?;
            } else if k == 0 {
                model.embed = absorb_ln_into_patch_embed(&a.gamma, &a.beta, &model.embed)?;
                exact = false;
            } else {
                let prev = &mut model.blocks[k - 1].ffn;
                let (w2, b2) = absorb_ln_backward(&a.gamma, &a.beta, &prev.w2, &prev.b2)?;
                prev.w2 = w2;
                prev.b2 = b2;
                exact = false;
            }
            model.blocks[k].ln1 = LnMode::ParameterFree;
        }
    }
    Ok(Absorbed { model, exact })
}

fn normalize(x: &Tensor, mode: &LnMode, eps: f64) -> Result<Tensor> {
    let n = x.layer_norm_rows(eps)?;
    Ok(match mode {
        LnMode::Affine(a) => n.affine_rows(&a.gamma, &a.beta)?,
        LnMode::ParameterFree => n,
    })
}

/// Fused attention on one `N × d` token matrix. Scores are formed as
/// `(Xn·W)·Xnᵀ`: two products per head.
pub fn fused_attention(xn: &Tensor, attn: &FusedAttentionParams) -> Result<Tensor> {
    let mut out: Option<Tensor> = None;
    for h in &attn.heads {
        let y = xn.matmul(&h.w)?;
        let probs = y.matmul_t(xn)?.scale(1.0 / attn.scale).softmax_rows()?;
        let contrib = probs.matmul(&xn.matmul(&h.v)?)?.matmul(&h.o)?;
        match &mut out {
            Some(acc) => acc.add_assign(&contrib)?,
            None => out = Some(contrib),
        }
    }
    out.ok_or_else(|| Error::Tensor(TensorError::Usage("no attention heads".into())))
}

pub fn ffn_forward(xn: &Tensor, ffn: &FfnParams) -> Result<Tensor> {
    let hidden = xn.matmul(&ffn.w1)?.add_row_vector(&ffn.b1)?.gelu();
    Ok(hidden.matmul(&ffn.w2)?.add_row_vector(&ffn.b2)?)
}

pub fn deployed_block_forward(x: &Tensor, block: &FusedBlockParams, eps: f64) -> Result<Tensor> {
    let xn = normalize(x, &block.ln1, eps)?;
    let x1 = x.add(&fused_attention(&xn, &block.attn)?)?;
    let xn2 = normalize(&x1, &block.ln2, eps)?;
    Ok(x1.add(&ffn_forward(&xn2, &block.ffn)?)?)
}

/// Logits `batch × num_classes`.
pub fn deployed_forward(images: &[Tensor], model: &DeployedViT) -> Result<Tensor> {
    let patches = patchify(images, &model.config)?;
    deployed_forward_patches(&patches, model)
}

pub(crate) fn deployed_forward_patches(patches: &Tensor, model: &DeployedViT) -> Result<Tensor> {
    let cfg = &model.config;
    let tokens = cfg.token_count();
    let batch = patches.rows() / tokens;
    let embedded = patches
        .matmul(&model.embed.weight)?
        .add_row_vector(&model.embed.bias)?;
    let mut pooled = Vec::with_capacity(batch);
    for s in 0..batch {
        let mut x = embedded.slice_rows(s * tokens, tokens)?.add(&model.embed.pos)?;
        for block in &model.blocks {
            x = deployed_block_forward(&x, block, cfg.ln_eps)?;
        }
        pooled.push(x.group_mean_rows(tokens)?);
    }
    let pooled = Tensor::concat_rows(&pooled)?;
    Ok(pooled.matmul(&model.head_w)?.add_row_vector(&model.head_b)?)
}

impl DeployedViT {
    /// Named tensors. Affine LN modes contribute `ln1.gamma`-style entries;
    /// the score divisor is stored as a one-element `attn.scale` tensor.
    pub fn tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = vec![
            ("embed.weight".to_string(), self.embed.weight.clone()),
            ("embed.bias".to_string(), self.embed.bias.clone()),
            ("embed.pos".to_string(), self.embed.pos.clone()),
        ];
        for (k, b) in self.blocks.iter().enumerate() {
            let p = format!("blocks.{k}");
            for (tag, mode) in [("ln1", &b.ln1), ("ln2", &b.ln2)] {
                if let LnMode::Affine(a) = mode {
                    out.push((format!("{p}.{tag}.gamma"), a.gamma.clone()));
                    out.push((format!("{p}.{tag}.beta"), a.beta.clone()));
                }
            }
            out.push((format!("{p}.attn.scale"), Tensor::scalar(b.attn.scale)));
            for (i, h) in b.attn.heads.iter().enumerate() {
                out.push((format!("{p}.attn.h{i}.w"), h.w.clone()));
                out.push((format!("{p}.attn.h{i}.v"), h.v.clone()));
                out.push((format!("{p}.attn.h{i}.o"), h.o.clone()));
            }
            let mut ffn = Vec::new();
            b.ffn.map(&format!("{p}.ffn"), &mut |n, t| ffn.push((n.to_string(), t.clone())));
            out.extend(ffn);
        }
        out.push(("head.weight".to_string(), self.head_w.clone()));
        out.push(("head.bias".to_string(), self.head_b.clone()));
        out
    }

    pub fn from_tensors(config: &ModelConfig, tensors: &[(String, Tensor)]) -> Result<Self> {
        config.validate()?;
        let lookup: std::collections::HashMap<&str, &Tensor> =
            tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let get = |name: &str, shape: &[usize]| -> Result<Tensor> {
            match lookup.get(name) {
                Some(t) if t.shape() == shape => Ok((*t).clone()),
                Some(t) => Err(Error::ModelMismatch(format!(
                    "tensor {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                ))),
                None => Err(Error::ModelMismatch(format!("tensor {name} missing"))),
            }
        };
        let (d, dh, f) = (config.dim, config.head_dim(), config.ffn_hidden);
        let embed = PatchEmbedParams {
            weight: get("embed.weight", &[config.patch_dim(), d])?,
            bias: get("embed.bias", &[d])?,
            pos: get("embed.pos", &[config.token_count(), d])?,
        };
        let mut blocks = Vec::with_capacity(config.deploy_blocks);
        for k in 0..config.deploy_blocks {
            let p = format!("blocks.{k}");
            let ln = |tag: &str| -> Result<LnMode> {
                let g = format!("{p}.{tag}.gamma");
                if lookup.contains_key(g.as_str()) {
                    Ok(LnMode::Affine(AffineParams {
                        gamma: get(&g, &[d])?,
                        beta: get(&format!("{p}.{tag}.beta"), &[d])?,
                    }))
                } else {
                    Ok(LnMode::ParameterFree)
                }
            };
            let scale = get(&format!("{p}.attn.scale"), &[1])?.item();
            if !(scale > 0.0 && scale.is_finite()) {
                return Err(Error::ModelMismatch(format!("{p}.attn.scale must be positive")));
            }
            let heads = (0..config.heads)
                .map(|i| {
                    Ok(FusedHead {
                        w: get(&format!("{p}.attn.h{i}.w"), &[d, d])?,
                        v: get(&format!("{p}.attn.h{i}.v"), &[d, dh])?,
                        o: get(&format!("{p}.attn.h{i}.o"), &[dh, d])?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let ffn = FfnParams {
                w1: get(&format!("{p}.ffn.w1"), &[d, f])?,
                b1: get(&format!("{p}.ffn.b1"), &[f])?,
                w2: get(&format!("{p}.ffn.w2"), &[f, d])?,
                b2: get(&format!("{p}.ffn.b2"), &[d])?,
            };
            blocks.push(FusedBlockParams {
                ln1: ln("ln1")?,
                attn: FusedAttentionParams { heads, scale },
                ln2: ln("ln2")?,
                ffn,
            });
        }
        Ok(Self {
            config: config.clone(),
            embed,
            blocks,
            head_w: get("head.weight", &[d, config.num_classes])?,
            head_b: get("head.bias", &[config.num_classes])?,
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors()
            .iter()
            .filter(|(n, _)| !n.ends_with("attn.scale"))
            .map(|(_, t)| t.len())
            .sum()
    }

    /// Visits every stored tensor mutably (used for perturbation tests).
    pub fn for_each_mut(&mut self, f: VisitMut<Tensor>) {
        f("embed.weight", &mut self.embed.weight);
        f("embed.bias", &mut self.embed.bias);
        f("embed.pos", &mut self.embed.pos);
        for (k, b) in self.blocks.iter_mut().enumerate() {
            for (i, h) in b.attn.heads.iter_mut().enumerate() {
                f(&format!("blocks.{k}.attn.h{i}.w"), &mut h.w);
                f(&format!("blocks.{k}.attn.h{i}.v"), &mut h.v);
                f(&format!("blocks.{k}.attn.h{i}.o"), &mut h.o);
            }
            b.ffn.for_each_mut(&format!("blocks.{k}.ffn"), f);
        }
        f("head.weight", &mut self.head_w);
        f("head.bias", &mut self.head_b);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub probes: usize,
    pub seed: u64,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    pub pass: bool,
}

/// Random standard-normal probe images.
pub fn probe_images(config: &ModelConfig, count: usize, seed: u64) -> Vec<Tensor> {
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let shape = [config.channels, config.image_size, config.image_size];
    (0..count)
        .map(|_| {
            let data = (0..config.image_len())
                .map(|_| StandardNormal.sample(&mut rng))
                .collect();
            Tensor::new(&shape, data).expect("probe shape")
        })
        .collect()
}

/// Runs both models at λ = 1 on seeded random inputs and compares logits.
pub fn verify_equivalence(mb: &MultiBranchViT, dp: &DeployedViT, probes: usize, seed: u64) -> Result<VerifyReport> {
    if mb.config != dp.config {
        return Err(Error::ModelMismatch(format!(
            "multi-branch config {:?} differs from deployed config {:?}",
            mb.config, dp.config
        )));
    }
    if probes == 0 {
        return Err(Error::Config("probes must be at least 1".into()));
    }
    let images = probe_images(&mb.config, probes, seed);
    let mut max_abs: f64 = 0.0;
    let mut max_ref: f64 = 0.0;
    for chunk in images.chunks(16) {
        let reference = crate::vit::model_forward(chunk, mb, 1.0)?;
        let deployed = deployed_forward(chunk, dp)?;
        max_abs = max_abs.max(deployed.sub(&reference)?.max_abs());
        max_ref = max_ref.max(reference.max_abs());
    }
    let max_rel = max_abs / max_ref.max(f64::MIN_POSITIVE);
    Ok(VerifyReport {
        probes,
        seed,
        max_abs_err: max_abs,
        max_rel_err: max_rel,
        pass: max_rel <= VERIFY_REL_TOL,
    })
}
