//! Branch-similarity analysis: cosine similarity between per-branch weights
//! and between per-branch module outputs.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vit::{patchify, tape_model_forward, MultiBranchViT};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Module {
    Attention,
    Ffn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimilarityKind {
    Weights,
    Features,
}

impl std::str::FromStr for SimilarityKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "weights" => Ok(Self::Weights),
            "features" => Ok(Self::Features),
            _ => Err(Error::Config(format!("kind must be `weights` or `features`, got `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    pub block: usize,
    pub module: Module,
    pub kind: SimilarityKind,
    /// Row-major `n × n`.
    pub values: Vec<Vec<f64>>,
}

impl SimilarityMatrix {
    /// File stem such as `block0_attention_weights`.
    pub fn site(&self) -> String {
        let m = match self.module {
            Module::Attention => "attention",
            Module::Ffn => "ffn",
        };
        let k = match self.kind {
            SimilarityKind::Weights => "weights",
            SimilarityKind::Features => "features",
        };
        format!("block{}_{m}_{k}", self.block)
    }

    /// Header `branch,b0,b1,...`, one row per branch.
    pub fn to_csv(&self) -> String {
        let n = self.values.len();
        let mut out = String::from("branch");
        for j in 0..n {
            out.push_str(&format!(",b{j}"));
        }
        out.push('\n');
        for (i, row) in self.values.iter().enumerate() {
            out.push_str(&format!("b{i}"));
            for v in row {
                out.push_str(&format!(",{v:.12}"));
            }
            out.push('\n');
        }
        out
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

/// Pairwise cosine between flat vectors. Only the upper triangle is computed
/// so the result is exactly symmetric; nonzero vectors get a diagonal of 1.
pub fn cosine_matrix(vectors: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = vectors.len();
    let mut m = vec![vec![0.0; n]; n];
    for i in 0..n {
        m[i][i] = if vectors[i].iter().any(|&x| x != 0.0) { 1.0 } else { 0.0 };
        for j in i + 1..n {
            let c = cosine(&vectors[i], &vectors[j]);
            m[i][j] = c;
            m[j][i] = c;
        }
    }
    m
}

/// Mean over rows of the row-wise cosine between two equally shaped matrices.
fn mean_row_cosine(a: &Tensor, b: &Tensor) -> f64 {
    let rows = a.rows();
    (0..rows).map(|r| cosine(a.row(r), b.row(r))).sum::<f64>() / rows as f64
}

fn require_branches(model: &MultiBranchViT) -> Result<()> {
    if model.config.branches < 2 {
        return Err(Error::NothingToAnalyze(format!(
            "model has {} branch per block; similarity needs at least 2",
            model.config.branches
        )));
    }
    Ok(())
}

fn flatten(parts: &[&Tensor]) -> Vec<f64> {
    parts.iter().flat_map(|t| t.data().iter().copied()).collect()
}

/// Attention: all heads' `Wq|Wk|Wv|Wo` per branch. FFN: `W1|b1|W2|b2`.
pub fn weight_similarity(model: &MultiBranchViT) -> Result<Vec<SimilarityMatrix>> {
    require_branches(model)?;
    let mut out = Vec::new();
    for (k, block) in model.blocks.iter().enumerate() {
        let attn: Vec<Vec<f64>> = block
            .attn
            .heads
            .iter()
            .map(|hs| hs.iter().flat_map(|h| flatten(&[&h.wq, &h.wk, &h.wv, &h.wo])).collect())
            .collect();
        let ffn: Vec<Vec<f64>> = block
            .ffn
            .branches
            .iter()
            .map(|p| flatten(&[&p.w1, &p.b1, &p.w2, &p.b2]))
            .collect();
        out.push(SimilarityMatrix {
            block: k,
            module: Module::Attention,
            kind: SimilarityKind::Weights,
            values: cosine_matrix(&attn),
        });
        out.push(SimilarityMatrix {
            block: k,
            module: Module::Ffn,
            kind: SimilarityKind::Weights,
            values: cosine_matrix(&ffn),
        });
    }
    Ok(out)
}

/// Mean row cosine between branch module outputs at mixing weight `lambda`,
/// averaged over batches of `batch` images.
pub fn feature_similarity(
    model: &MultiBranchViT,
    images: &[Tensor],
    lambda: f64,
    batch: usize,
) -> Result<Vec<SimilarityMatrix>> {
    require_branches(model)?;
    if images.is_empty() {
        return Err(Error::Config("feature similarity needs at least one image".into()));
    }
    let n = model.config.branches;
    let blocks = model.blocks.len();
    // sums[site][i][j], site = 2·block + module
    let mut sums = vec![vec![vec![0.0; n]; n]; 2 * blocks];
    let mut total = 0usize;
    for chunk in images.chunks(batch.max(1)) {
        let mut tape = Tape::new();
        let p = tape.constant(patchify(chunk, &model.config)?);
        let bound = model.bind(&mut tape, false);
        let (_, traces) = tape_model_forward(&mut tape, &bound, p, lambda)?;
        let w = chunk.len() as f64;
        for (k, trace) in traces.iter().enumerate() {
            for (m, feats) in [&trace.attn_branches, &trace.ffn_branches].into_iter().enumerate() {
                let vals: Vec<&Tensor> = feats.iter().map(|v: &Var| tape.value(*v)).collect();
                let site = &mut sums[2 * k + m];
                for i in 0..n {
                    for j in i..n {
                        site[i][j] += w * mean_row_cosine(vals[i], vals[j]);
                    }
                }
            }
        }
        total += chunk.len();
    }
    let mut out = Vec::with_capacity(2 * blocks);
    for (s, site) in sums.into_iter().enumerate() {
        let mut values = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in i..n {
                let v = (site[i][j] / total as f64).clamp(-1.0, 1.0);
                values[i][j] = v;
                values[j][i] = v;
            }
        }
        out.push(SimilarityMatrix {
            block: s / 2,
            module: if s % 2 == 0 { Module::Attention } else { Module::Ffn },
            kind: SimilarityKind::Features,
            values,
        });
    }
    Ok(out)
}
