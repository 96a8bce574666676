//! Multi-branch training-time ViT.
//!
//! Parameter containers are generic over their leaf type so one structure can
//! hold concrete [`Tensor`]s (storage, checkpoints, optimizer) or tape [`Var`]s
//! (a forward pass being recorded). Traversal order of [`MultiBranchViT::map`]
//! defines the canonical parameter order used everywhere else.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::schedule::rectified_scale;
use crate::tensor::{self, Tensor, TensorError};

pub const LN_EPS_DEFAULT: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;

/// Treatment of the pre-attention LN affine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AttnAffine {
    /// β is pinned to zero, which keeps absorption into the fused score
    /// matrices exact.
    #[default]
    ScaleOnly,
    /// Trainable γ and β.
    Full,
}

fn default_eps() -> f64 {
    LN_EPS_DEFAULT
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub dim: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub deploy_blocks: usize,
    pub branches: usize,
    pub num_classes: usize,
    #[serde(default)]
    pub attn_affine: AttnAffine,
    #[serde(default = "default_eps")]
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    /// Desk-scale default: 28×28 single channel, patch 7, d=64, h=4, n=2, 2 blocks.
    fn default() -> Self {
        Self {
            image_size: 28,
            channels: 1,
            patch_size: 7,
            dim: 64,
            heads: 4,
            ffn_hidden: 128,
            deploy_blocks: 2,
            branches: 2,
            num_classes: 10,
            attn_affine: AttnAffine::ScaleOnly,
            ln_eps: LN_EPS_DEFAULT,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.image_size == 0 || self.patch_size == 0 || self.channels == 0 {
            return fail("image_size, patch_size and channels must be positive".into());
        }
        if self.image_size % self.patch_size != 0 {
            return fail(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return fail(format!("dim {} is not divisible by heads {}", self.dim, self.heads));
        }
        if self.dim < 2 {
            return fail("dim must be at least 2".into());
        }
        if self.ffn_hidden == 0 {
            return fail("ffn_hidden must be positive".into());
        }
        if self.branches == 0 {
            return fail("branches must be at least 1".into());
        }
        if self.deploy_blocks == 0 {
            return fail("deploy_blocks must be at least 1".into());
        }
        if self.num_classes < 2 {
            return fail("num_classes must be at least 2".into());
        }
        if !(self.ln_eps >= 0.0 && self.ln_eps.is_finite()) {
            return fail("ln_eps must be a finite non-negative number".into());
        }
        Ok(())
    }

    pub fn token_count(&self) -> usize {
        (self.image_size / self.patch_size).pow(2)
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.image_size * self.image_size
    }
}

pub type Visit<'f, T, U> = &'f mut dyn FnMut(&str, &T) -> U;
pub type VisitMut<'f, T> = &'f mut dyn FnMut(&str, &mut T);

#[derive(Debug, Clone, PartialEq)]
pub struct PatchEmbedParams<T = Tensor> {
    /// `patch_dim × d`
    pub weight: T,
    pub bias: T,
    /// `N × d` learnable positional table.
    pub pos: T,
}

impl<T> PatchEmbedParams<T> {
    pub fn map<U>(&self, prefix: &str, f: Visit<T, U>) -> PatchEmbedParams<U> {
        PatchEmbedParams {
            weight: f(&format!("{prefix}.weight"), &self.weight),
            bias: f(&format!("{prefix}.bias"), &self.bias),
            pos: f(&format!("{prefix}.pos"), &self.pos),
        }
    }

    pub fn for_each_mut(&mut self, prefix: &str, f: VisitMut<T>) {
        f(&format!("{prefix}.weight"), &mut self.weight);
        f(&format!("{prefix}.bias"), &mut self.bias);
        f(&format!("{prefix}.pos"), &mut self.pos);
    }
}

/// Projections of one head in one branch.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadWeights<T = Tensor> {
    /// `d × d_h`
    pub wq: T,
    /// `d × d_h`
    pub wk: T,
    /// `d × d_h`
    pub wv: T,
    /// `d_h × d`
    pub wo: T,
}

impl<T> HeadWeights<T> {
    pub fn map<U>(&self, prefix: &str, f: Visit<T, U>) -> HeadWeights<U> {
        HeadWeights {
            wq: f(&format!("{prefix}.wq"), &self.wq),
            wk: f(&format!("{prefix}.wk"), &self.wk),
            wv: f(&format!("{prefix}.wv"), &self.wv),
            wo: f(&format!("{prefix}.wo"), &self.wo),
        }
    }

    pub fn for_each_mut(&mut self, prefix: &str, f: VisitMut<T>) {
        f(&format!("{prefix}.wq"), &mut self.wq);
        f(&format!("{prefix}.wk"), &mut self.wk);
        f(&format!("{prefix}.wv"), &mut self.wv);
        f(&format!("{prefix}.wo"), &mut self.wo);
    }
}

/// `heads[b][i]` holds branch `b`, head `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchAttentionParams<T = Tensor> {
    pub heads: Vec<Vec<HeadWeights<T>>>,
}

impl<T> BranchAttentionParams<T> {
    pub fn branches(&self) -> usize {
        self.heads.len()
    }

    pub fn head_count(&self) -> usize {
        self.heads.first().map_or(0, Vec::len)
    }

    pub fn map<U>(&self, prefix: &str, f: Visit<T, U>) -> BranchAttentionParams<U> {
        BranchAttentionParams {
            heads: self
                .heads
                .iter()
                .enumerate()
                .map(|(b, hs)| {
                    hs.iter()
                        .enumerate()
                        .map(|(i, h)| h.map(&format!("{prefix}.b{b}.h{i}"), f))
                        .collect()
                })
                .collect(),
        }
    }

    pub fn for_each_mut(&mut self, prefix: &str, f: VisitMut<T>) {
        for (b, hs) in self.heads.iter_mut().enumerate() {
            for (i, h) in hs.iter_mut().enumerate() {
                h.for_each_mut(&format!("{prefix}.b{b}.h{i}"), f);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FfnParams<T = Tensor> {
    /// `d × ffn_hidden`
    pub w1: T,
    pub b1: T,
    /// `ffn_hidden × d`
    pub w2: T,
    pub b2: T,
}

impl<T> FfnParams<T> {
    pub fn map<U>(&self, prefix: &str, f: Visit<T, U>) -> FfnParams<U> {
        FfnParams {
            w1: f(&format!("{prefix}.w1"), &self.w1),
            b1: f(&format!("{prefix}.b1"), &self.b1),
            w2: f(&format!("{prefix}.w2"), &self.w2),
            b2: f(&format!("{prefix}.b2"), &self.b2),
        }
    }

    pub fn for_each_mut(&mut self, prefix: &str, f: VisitMut<T>) {
        f(&format!("{prefix}.w1"), &mut self.w1);
        f(&format!("{prefix}.b1"), &mut self.b1);
        f(&format!("{prefix}.w2"), &mut self.w2);
        f(&format!("{prefix}.b2"), &mut self.b2);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BranchFfnParams<T = Tensor> {
    pub branches: Vec<FfnParams<T>>,
}

impl<T> BranchFfnParams<T> {
    pub fn map<U>(&self, prefix: &str, f: Visit<T, U>) -> BranchFfnParams<U> {
        BranchFfnParams {
            branches: self
                .branches
                .iter()
                .enumerate()
                .map(|(b, p)| p.map(&format!("{prefix}.b{b}"), f))
                .collect(),
        }
    }

    pub fn for_each_mut(&mut self, prefix: &str, f: VisitMut<T>) {
        for (b, p) in self.branches.iter_mut().enumerate() {
            p.for_each_mut(&format!("{prefix}.b{b}"), f);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AffineParams<T = Tensor> {
    pub gamma: T,
    pub beta: T,
}

impl<T> AffineParams<T> {
    pub fn map<U>(&self, prefix: &str, f: Visit<T, U>) -> AffineParams<U> {
        AffineParams {
            gamma: f(&format!("{prefix}.gamma"), &self.gamma),
            beta: f(&format!("{prefix}.beta"), &self.beta),
        }
    }

    pub fn for_each_mut(&mut self, prefix: &str, f: VisitMut<T>) {
        f(&format!("{prefix}.gamma"), &mut self.gamma);
        f(&format!("{prefix}.beta"), &mut self.beta);
    }
}

impl AffineParams {
    pub fn identity(d: usize) -> Self {
        Self {
            gamma: Tensor::full(&[d], 1.0),
            beta: Tensor::zeros(&[d]),
        }
    }
}

/// One parallel block. LN affines sit before the branch split and are shared.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchBlock<T = Tensor> {
    pub ln1: AffineParams<T>,
    pub ln2: AffineParams<T>,
    pub attn: BranchAttentionParams<T>,
    pub ffn: BranchFfnParams<T>,
}

impl<T> BranchBlock<T> {
    pub fn map<U>(&self, prefix: &str, f: Visit<T, U>) -> BranchBlock<U> {
        BranchBlock {
            ln1: self.ln1.map(&format!("{prefix}.ln1"), f),
            ln2: self.ln2.map(&format!("{prefix}.ln2"), f),
            attn: self.attn.map(&format!("{prefix}.attn"), f),
            ffn: self.ffn.map(&format!("{prefix}.ffn"), f),
        }
    }

    pub fn for_each_mut(&mut self, prefix: &str, f: VisitMut<T>) {
        self.ln1.for_each_mut(&format!("{prefix}.ln1"), f);
        self.ln2.for_each_mut(&format!("{prefix}.ln2"), f);
        self.attn.for_each_mut(&format!("{prefix}.attn"), f);
        self.ffn.for_each_mut(&format!("{prefix}.ffn"), f);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiBranchViT<T = Tensor> {
    pub config: ModelConfig,
    pub embed: PatchEmbedParams<T>,
    pub blocks: Vec<BranchBlock<T>>,
    /// `d × num_classes`
    pub head_w: T,
    pub head_b: T,
}

impl<T> MultiBranchViT<T> {
    pub fn map<U>(&self, f: Visit<T, U>) -> MultiBranchViT<U> {
        MultiBranchViT {
            config: self.config.clone(),
            embed: self.embed.map("embed", f),
            blocks: self
                .blocks
                .iter()
                .enumerate()
                .map(|(k, b)| b.map(&format!("blocks.{k}"), f))
                .collect(),
            head_w: f("head.weight", &self.head_w),
            head_b: f("head.bias", &self.head_b),
        }
    }

    pub fn for_each_mut(&mut self, f: VisitMut<T>) {
        self.embed.for_each_mut("embed", f);
        for (k, b) in self.blocks.iter_mut().enumerate() {
            b.for_each_mut(&format!("blocks.{k}"), f);
        }
        f("head.weight", &mut self.head_w);
        f("head.bias", &mut self.head_b);
    }

    /// Canonical parameter names in traversal order.
    pub fn names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.map(&mut |name, _| names.push(name.to_string()));
        names
    }
}

/// Whether a named parameter is held fixed during training.
pub fn is_frozen(config: &ModelConfig, name: &str) -> bool {
    config.attn_affine == AttnAffine::ScaleOnly && name.ends_with(".ln1.beta")
}

fn trunc_normal(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let normal = Normal::new(0.0, std).expect("valid std");
    let len: usize = shape.iter().product();
    let data = (0..len)
        .map(|_| loop {
            let v: f64 = normal.sample(rng);
            if v.abs() <= 2.0 * std {
                break v;
            }
        })
        .collect();
    Tensor::new(shape, data).expect("shape matches length")
}

impl MultiBranchViT {
    /// Truncated-normal (σ = 0.02) weights, zero biases, identity affines.
    pub fn init(config: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        Self::init_with_std(config, rng, INIT_STD)
    }

    pub fn init_with_std(config: &ModelConfig, rng: &mut impl Rng, std: f64) -> Result<Self> {
        Self::build(config, &mut |kind, shape| match kind {
            Slot::Weight => trunc_normal(rng, shape, std),
            Slot::Bias => Tensor::zeros(shape),
            Slot::Gamma => Tensor::full(shape, 1.0),
        })
    }

    /// All weights and biases zero, affines identity.
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        Self::build(config, &mut |kind, shape| match kind {
            Slot::Gamma => Tensor::full(shape, 1.0),
            _ => Tensor::zeros(shape),
        })
    }

    fn build(config: &ModelConfig, make: &mut dyn FnMut(Slot, &[usize]) -> Tensor) -> Result<Self> {
        config.validate()?;
        let (d, dh, f) = (config.dim, config.head_dim(), config.ffn_hidden);
        let embed = PatchEmbedParams {
            weight: make(Slot::Weight, &[config.patch_dim(), d]),
            bias: make(Slot::Bias, &[d]),
            pos: make(Slot::Weight, &[config.token_count(), d]),
        };
        let mut blocks = Vec::with_capacity(config.deploy_blocks);
        for _ in 0..config.deploy_blocks {
            let mut heads = Vec::with_capacity(config.branches);
            for _ in 0..config.branches {
                let mut per_branch = Vec::with_capacity(config.heads);
                for _ in 0..config.heads {
                    per_branch.push(HeadWeights {
                        wq: make(Slot::Weight, &[d, dh]),
                        wk: make(Slot::Weight, &[d, dh]),
                        wv: make(Slot::Weight, &[d, dh]),
                        wo: make(Slot::Weight, &[dh, d]),
                    });
                }
                heads.push(per_branch);
            }
            let mut branches = Vec::with_capacity(config.branches);
            for _ in 0..config.branches {
                branches.push(FfnParams {
                    w1: make(Slot::Weight, &[d, f]),
                    b1: make(Slot::Bias, &[f]),
                    w2: make(Slot::Weight, &[f, d]),
                    b2: make(Slot::Bias, &[d]),
                });
            }
            blocks.push(BranchBlock {
                ln1: AffineParams {
                    gamma: make(Slot::Gamma, &[d]),
                    beta: make(Slot::Bias, &[d]),
                },
                ln2: AffineParams {
                    gamma: make(Slot::Gamma, &[d]),
                    beta: make(Slot::Bias, &[d]),
                },
                attn: BranchAttentionParams { heads },
                ffn: BranchFfnParams { branches },
            });
        }
        Ok(Self {
            config: config.clone(),
            embed,
            blocks,
            head_w: make(Slot::Weight, &[d, config.num_classes]),
            head_b: make(Slot::Bias, &[config.num_classes]),
        })
    }

    pub fn tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.map(&mut |name, t| out.push((name.to_string(), t.clone())));
        out
    }

    pub fn parameter_count(&self) -> usize {
        let mut n = 0;
        self.map(&mut |_, t| n += t.len());
        n
    }

    /// Records every tensor on `tape`; trainable ones become parameters.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> MultiBranchViT<Var> {
        let config = self.config.clone();
        self.map(&mut |name, t| {
            if trainable && !is_frozen(&config, name) {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        })
    }

    /// Rebuilds a model from `(name, tensor)` pairs, checking every shape.
    pub fn from_tensors(config: &ModelConfig, tensors: &[(String, Tensor)]) -> Result<Self> {
        let mut model = Self::zeros(config)?;
        fill_from(&mut |f| model.for_each_mut(f), tensors)?;
        Ok(model)
    }
}

#[derive(Clone, Copy)]
enum Slot {
    Weight,
    Bias,
    Gamma,
}

/// Copies named tensors into the slots visited by `walk`, checking names and shapes.
pub(crate) fn fill_from(
    walk: &mut dyn FnMut(VisitMut<Tensor>),
    tensors: &[(String, Tensor)],
) -> Result<()> {
    let lookup: std::collections::HashMap<&str, &Tensor> =
        tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
    let mut problem = None;
    walk(&mut |name, slot| match lookup.get(name) {
        Some(t) if t.shape() == slot.shape() => *slot = (*t).clone(),
        Some(t) => {
            problem.get_or_insert(format!(
                "tensor {name} has shape {:?}, expected {:?}",
                t.shape(),
                slot.shape()
            ));
        }
        None => {
            problem.get_or_insert(format!("tensor {name} missing"));
        }
    });
    match problem {
        Some(msg) => Err(Error::ModelMismatch(msg)),
        None => Ok(()),
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Tensor(TensorError::Usage(format!(
            "lambda must lie in [0, 1], got {lambda}"
        ))));
    }
    Ok(())
}

/// Splits a batch of `channels × S × S` images into non-overlapping patches,
/// one row per token, images stacked. Each patch is flattened channel-major,
/// then row-major within the patch. Output is `(B·N) × patch_dim`.
pub fn patchify(images: &[Tensor], config: &ModelConfig) -> Result<Tensor> {
    let (c, s, p) = (config.channels, config.image_size, config.patch_size);
    let grid = s / p;
    let pd = config.patch_dim();
    if images.is_empty() {
        return Err(Error::Tensor(TensorError::Usage("empty image batch".into())));
    }
    let mut out = Vec::with_capacity(images.len() * grid * grid * pd);
    for img in images {
        if img.shape() != [c, s, s] {
            return Err(Error::Tensor(TensorError::Shape {
                op: "patch_embed",
                lhs: img.shape().to_vec(),
                rhs: vec![c, s, s],
            }));
        }
        let px = img.data();
        for gy in 0..grid {
            for gx in 0..grid {
                for ch in 0..c {
                    for y in 0..p {
                        let base = ch * s * s + (gy * p + y) * s + gx * p;
                        out.extend_from_slice(&px[base..base + p]);
                    }
                }
            }
        }
    }
    Ok(Tensor::new(&[images.len() * grid * grid, pd], out)?)
}

/// Shared input handling for the tape forward.
pub(crate) fn tape_patch_embed(
    tape: &mut Tape,
    patches: Var,
    embed: &PatchEmbedParams<Var>,
) -> Result<Var> {
    let proj = tape.matmul(patches, embed.weight)?;
    let biased = tape.add_row_bias(proj, embed.bias)?;
    Ok(tape.add_tiled(biased, embed.pos)?)
}

/// `W_b + λ·Σ_{b'≠b} W_{b'}` over a list of same-shaped vars.
fn tape_join(tape: &mut Tape, items: &[Var], b: usize, lambda: f64) -> Result<Var> {
    let others: Vec<Var> = items
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != b)
        .map(|(_, &v)| v)
        .collect();
    if others.is_empty() || lambda == 0.0 {
        return Ok(items[b]);
    }
    let rest = tape.add_all(&others)?;
    let rest = tape.scale(rest, lambda)?;
    Ok(tape.add(items[b], rest)?)
}

/// Record of one branch-attention evaluation.
#[derive(Debug, Clone)]
pub struct AttentionTrace<T = Var> {
    pub block_out: T,
    /// Per-branch output, already summed over heads.
    pub branch_outputs: Vec<T>,
    /// `head_outputs[b][i]` = `H·Wo[b,i]` before summation.
    pub head_outputs: Vec<Vec<T>>,
}

pub(crate) fn tape_fused_qk(tape: &mut Tape, attn: &BranchAttentionParams<Var>) -> Result<Vec<Vec<Var>>> {
    attn.heads
        .iter()
        .map(|hs| hs.iter().map(|h| Ok(tape.matmul_t(h.wq, h.wk)?)).collect())
        .collect()
}

/// Joined, rectified pre-softmax scores of branch `b`, head `i`:
/// `Xn·(W_b + λΣ_{b'≠b}W_{b'})·Xnᵀ / (√(1+(n-1)λ²)·√d_k)`, per group of
/// `tokens` rows. Output is `(B·N) × N`.
pub(crate) fn tape_joined_scores(
    tape: &mut Tape,
    xn: Var,
    fused: &[Vec<Var>],
    b: usize,
    i: usize,
    lambda: f64,
    tokens: usize,
    head_dim: usize,
) -> Result<Var> {
    let per_branch: Vec<Var> = fused.iter().map(|hs| hs[i]).collect();
    let joined = tape_join(tape, &per_branch, b, lambda)?;
    let y = tape.matmul(xn, joined)?;
    let scores = tape.grouped_abt(y, xn, tokens)?;
    let divisor = rectified_scale(lambda, fused.len(), head_dim);
    Ok(tape.scale(scores, 1.0 / divisor)?)
}

pub(crate) fn tape_branch_attention(
    tape: &mut Tape,
    xn: Var,
    attn: &BranchAttentionParams<Var>,
    lambda: f64,
    tokens: usize,
    head_dim: usize,
) -> Result<AttentionTrace> {
    let fused = tape_fused_qk(tape, attn)?;
    let n = attn.branches();
    let mut branch_outputs = Vec::with_capacity(n);
    let mut head_outputs = Vec::with_capacity(n);
    for b in 0..n {
        let mut heads = Vec::with_capacity(attn.head_count());
        for i in 0..attn.head_count() {
            let scores = tape_joined_scores(tape, xn, &fused, b, i, lambda, tokens, head_dim)?;
            let probs = tape.row_softmax(scores)?;
            let values: Vec<Var> = attn.heads.iter().map(|hs| hs[i].wv).collect();
            let wv = tape_join(tape, &values, b, lambda)?;
            let xv = tape.matmul(xn, wv)?;
            let h = tape.grouped_ab(probs, xv, tokens)?;
            heads.push(tape.matmul(h, attn.heads[b][i].wo)?);
        }
        branch_outputs.push(tape.add_all(&heads)?);
        head_outputs.push(heads);
    }
    let block_out = tape.add_all(&branch_outputs)?;
    Ok(AttentionTrace {
        block_out,
        branch_outputs,
        head_outputs,
    })
}

/// Returns the summed output and the per-branch outputs.
pub(crate) fn tape_branch_ffn(
    tape: &mut Tape,
    xn: Var,
    ffn: &BranchFfnParams<Var>,
    lambda: f64,
) -> Result<(Var, Vec<Var>)> {
    let hidden = ffn
        .branches
        .iter()
        .map(|p| {
            let h = tape.matmul(xn, p.w1)?;
            Ok(tape.add_row_bias(h, p.b1)?)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut outs = Vec::with_capacity(hidden.len());
    for (b, p) in ffn.branches.iter().enumerate() {
        let joined = tape_join(tape, &hidden, b, lambda)?;
        let g = tape.gelu(joined)?;
        let o = tape.matmul(g, p.w2)?;
        outs.push(tape.add_row_bias(o, p.b2)?);
    }
    Ok((tape.add_all(&outs)?, outs))
}

/// Branch features captured at one block, used by the diversity loss.
#[derive(Debug, Clone)]
pub struct BlockTrace {
    pub attn_branches: Vec<Var>,
    pub ffn_branches: Vec<Var>,
}

pub(crate) fn tape_block(
    tape: &mut Tape,
    x: Var,
    block: &BranchBlock<Var>,
    config: &ModelConfig,
    lambda: f64,
) -> Result<(Var, BlockTrace)> {
    let tokens = config.token_count();
    let n1 = tape.layer_norm(x, config.ln_eps)?;
    let xn1 = tape.affine(n1, block.ln1.gamma, block.ln1.beta)?;
    let attn = tape_branch_attention(tape, xn1, &block.attn, lambda, tokens, config.head_dim())?;
    let x1 = tape.add(x, attn.block_out)?;
    let n2 = tape.layer_norm(x1, config.ln_eps)?;
    let xn2 = tape.affine(n2, block.ln2.gamma, block.ln2.beta)?;
    let (ffn_out, ffn_branches) = tape_branch_ffn(tape, xn2, &block.ffn, lambda)?;
    let x2 = tape.add(x1, ffn_out)?;
    Ok((
        x2,
        BlockTrace {
            attn_branches: attn.branch_outputs,
            ffn_branches,
        },
    ))
}

/// Full recorded forward pass for a batch of already-patchified images.
pub fn tape_model_forward(
    tape: &mut Tape,
    model: &MultiBranchViT<Var>,
    patches: Var,
    lambda: f64,
) -> Result<(Var, Vec<BlockTrace>)> {
    check_lambda(lambda)?;
    let config = &model.config;
    let mut x = tape_patch_embed(tape, patches, &model.embed)?;
    let mut traces = Vec::with_capacity(model.blocks.len());
    for block in &model.blocks {
        let (next, trace) = tape_block(tape, x, block, config, lambda)?;
        x = next;
        traces.push(trace);
    }
    let pooled = tape.group_mean(x, config.token_count())?;
    let logits = tape.matmul(pooled, model.head_w)?;
    Ok((tape.add_row_bias(logits, model.head_b)?, traces))
}

// ---------------------------------------------------------------------------
// Tensor-level API (each call records on a private tape and discards it).

fn bind_attention(tape: &mut Tape, attn: &BranchAttentionParams) -> BranchAttentionParams<Var> {
    attn.map("", &mut |_, t| tape.constant(t.clone()))
}

fn head_dim_of(attn: &BranchAttentionParams) -> Result<usize> {
    attn.heads
        .first()
        .and_then(|hs| hs.first())
        .map(|h| h.wq.cols())
        .ok_or_else(|| Error::Tensor(TensorError::Usage("attention has no heads".into())))
}

/// Tokens of a single image: `N × d`.
pub fn patch_embed(image: &Tensor, params: &PatchEmbedParams, config: &ModelConfig) -> Result<Tensor> {
    let patches = patchify(std::slice::from_ref(image), config)?;
    let proj = patches.matmul(&params.weight)?.add_row_vector(&params.bias)?;
    Ok(proj.add(&params.pos)?)
}

/// `Wq · Wkᵀ`, a `d × d` matrix of rank at most `d_h`.
pub fn fused_qk(wq: &Tensor, wk: &Tensor) -> Result<Tensor> {
    Ok(wq.matmul_t(wk)?)
}

/// Joined pre-softmax scores for one `N × d` token matrix.
pub fn joined_scores(
    xn: &Tensor,
    attn: &BranchAttentionParams,
    branch: usize,
    head: usize,
    lambda: f64,
) -> Result<Tensor> {
    check_lambda(lambda)?;
    if branch >= attn.branches() || head >= attn.head_count() {
        return Err(Error::Tensor(TensorError::Usage(format!(
            "branch {branch} / head {head} out of range"
        ))));
    }
    let dh = head_dim_of(attn)?;
    let mut tape = Tape::new();
    let x = tape.constant(xn.clone());
    let bound = bind_attention(&mut tape, attn);
    let fused = tape_fused_qk(&mut tape, &bound)?;
    let s = tape_joined_scores(&mut tape, x, &fused, branch, head, lambda, xn.rows(), dh)?;
    Ok(tape.value(s).clone())
}

/// Branch attention over one `N × d` token matrix.
pub fn branch_attention_forward(
    xn: &Tensor,
    attn: &BranchAttentionParams,
    lambda: f64,
) -> Result<AttentionTrace<Tensor>> {
    check_lambda(lambda)?;
    let dh = head_dim_of(attn)?;
    let mut tape = Tape::new();
    let x = tape.constant(xn.clone());
    let bound = bind_attention(&mut tape, attn);
    let trace = tape_branch_attention(&mut tape, x, &bound, lambda, xn.rows(), dh)?;
    let get = |v: &Var| tape.value(*v).clone();
    Ok(AttentionTrace {
        block_out: get(&trace.block_out),
        branch_outputs: trace.branch_outputs.iter().map(get).collect(),
        head_outputs: trace
            .head_outputs
            .iter()
            .map(|hs| hs.iter().map(get).collect())
            .collect(),
    })
}

/// Standard multi-head attention: per-head `softmax(QKᵀ/√d_k)·V`, heads
/// concatenated and projected by one `d × d` output matrix.
pub fn concat_mhsa_oracle(
    xn: &Tensor,
    wq: &[Tensor],
    wk: &[Tensor],
    wv: &[Tensor],
    wo_full: &Tensor,
) -> Result<Tensor> {
    if wq.len() != wk.len() || wq.len() != wv.len() || wq.is_empty() {
        return Err(Error::Tensor(TensorError::Usage(
            "concat_mhsa_oracle: per-head weight lists differ in length".into(),
        )));
    }
    let mut heads = Vec::with_capacity(wq.len());
    for ((q, k), v) in wq.iter().zip(wk).zip(wv) {
        let dk = q.cols() as f64;
        let qx = xn.matmul(q)?;
        let kx = xn.matmul(k)?;
        let s = qx.matmul_t(&kx)?.scale(1.0 / dk.sqrt()).softmax_rows()?;
        heads.push(s.matmul(&xn.matmul(v)?)?);
    }
    Ok(tensor::Tensor::concat_cols(&heads)?.matmul(wo_full)?)
}

pub fn branch_ffn_forward(xn: &Tensor, ffn: &BranchFfnParams, lambda: f64) -> Result<Tensor> {
    check_lambda(lambda)?;
    let mut tape = Tape::new();
    let x = tape.constant(xn.clone());
    let bound = ffn.map("", &mut |_, t| tape.constant(t.clone()));
    let (out, _) = tape_branch_ffn(&mut tape, x, &bound, lambda)?;
    Ok(tape.value(out).clone())
}

/// One pre-LN residual block on an `N × d` token matrix.
pub fn block_forward(x: &Tensor, block: &BranchBlock, config: &ModelConfig, lambda: f64) -> Result<Tensor> {
    check_lambda(lambda)?;
    if x.rows() != config.token_count() {
        return Err(Error::Tensor(TensorError::Shape {
            op: "block_forward",
            lhs: x.shape().to_vec(),
            rhs: vec![config.token_count(), config.dim],
        }));
    }
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let bound = block.map("", &mut |_, t| tape.constant(t.clone()));
    let (out, _) = tape_block(&mut tape, xv, &bound, config, lambda)?;
    Ok(tape.value(out).clone())
}

/// Logits `batch × num_classes`.
pub fn model_forward(images: &[Tensor], model: &MultiBranchViT, lambda: f64) -> Result<Tensor> {
    let patches = patchify(images, &model.config)?;
    forward_patches(&patches, model, lambda)
}

pub(crate) fn forward_patches(patches: &Tensor, model: &MultiBranchViT, lambda: f64) -> Result<Tensor> {
    let mut tape = Tape::new();
    let p = tape.constant(patches.clone());
    let bound = model.bind(&mut tape, false);
    let (logits, _) = tape_model_forward(&mut tape, &bound, p, lambda)?;
    Ok(tape.value(logits).clone())
}
