//! Wall-clock comparison of a deployed model against a deeper standard ViT of
//! the same width.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::reparam::{deployed_forward, probe_images, DeployedViT};
use crate::tensor::Tensor;
use crate::vit::{patchify, ModelConfig, MultiBranchViT};

/// Conventional single-branch ViT layer weights with full-width projections
/// (`d × d` for Q, K, V and O) and per-head `QKᵀ` scores.
#[derive(Debug, Clone)]
struct BaselineLayer {
    ln1: (Tensor, Tensor),
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    wo: Tensor,
    ln2: (Tensor, Tensor),
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
}

/// Standard `layers`-deep ViT used as the latency reference.
#[derive(Debug, Clone)]
pub struct BaselineViT {
    config: ModelConfig,
    embed_w: Tensor,
    embed_b: Tensor,
    pos: Tensor,
    layers: Vec<BaselineLayer>,
    head_w: Tensor,
    head_b: Tensor,
}

impl BaselineViT {
    /// Random weights; `config.deploy_blocks` is ignored in favor of `layers`.
    pub fn random(config: &ModelConfig, layers: usize, seed: u64) -> Result<Self> {
        if layers == 0 {
            return Err(Error::Config("baseline needs at least one layer".into()));
        }
        let single = ModelConfig {
            branches: 1,
            deploy_blocks: layers,
            ..config.clone()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let src = MultiBranchViT::init(&single, &mut rng)?;
        let cat = |f: &dyn Fn(&crate::vit::HeadWeights) -> Tensor, heads: &[crate::vit::HeadWeights], rows: bool| {
            let parts: Vec<Tensor> = heads.iter().map(f).collect();
            if rows {
                Tensor::concat_rows(&parts)
            } else {
                Tensor::concat_cols(&parts)
            }
        };
        let layers = src
            .blocks
            .iter()
            .map(|b| {
                let hs = &b.attn.heads[0];
                let ffn = &b.ffn.branches[0];
                Ok(BaselineLayer {
                    ln1: (b.ln1.gamma.clone(), b.ln1.beta.clone()),
                    wq: cat(&|h| h.wq.clone(), hs, false)?,
                    wk: cat(&|h| h.wk.clone(), hs, false)?,
                    wv: cat(&|h| h.wv.clone(), hs, false)?,
                    wo: cat(&|h| h.wo.clone(), hs, true)?,
                    ln2: (b.ln2.gamma.clone(), b.ln2.beta.clone()),
                    w1: ffn.w1.clone(),
                    b1: ffn.b1.clone(),
                    w2: ffn.w2.clone(),
                    b2: ffn.b2.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config: single,
            embed_w: src.embed.weight,
            embed_b: src.embed.bias,
            pos: src.embed.pos,
            layers,
            head_w: src.head_w,
            head_b: src.head_b,
        })
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    fn layer_forward(&self, x: &Tensor, l: &BaselineLayer) -> Result<Tensor> {
        let (h, dh, eps) = (self.config.heads, self.config.head_dim(), self.config.ln_eps);
        let xn = x.layer_norm_rows(eps)?.affine_rows(&l.ln1.0, &l.ln1.1)?;
        let (q, k, v) = (xn.matmul(&l.wq)?, xn.matmul(&l.wk)?, xn.matmul(&l.wv)?);
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(h);
        for i in 0..h {
            let (qi, ki, vi) = (q.slice_cols(i * dh, dh)?, k.slice_cols(i * dh, dh)?, v.slice_cols(i * dh, dh)?);
            heads.push(qi.matmul_t(&ki)?.scale(scale).softmax_rows()?.matmul(&vi)?);
        }
        let x1 = x.add(&Tensor::concat_cols(&heads)?.matmul(&l.wo)?)?;
        let xn2 = x1.layer_norm_rows(eps)?.affine_rows(&l.ln2.0, &l.ln2.1)?;
        let hidden = xn2.matmul(&l.w1)?.add_row_vector(&l.b1)?.gelu();
        Ok(x1.add(&hidden.matmul(&l.w2)?.add_row_vector(&l.b2)?)?)
    }

    pub fn forward(&self, images: &[Tensor]) -> Result<Tensor> {
        let tokens = self.config.token_count();
        let embedded = patchify(images, &self.config)?
            .matmul(&self.embed_w)?
            .add_row_vector(&self.embed_b)?;
        let mut pooled = Vec::with_capacity(images.len());
        for s in 0..images.len() {
            let mut x = embedded.slice_rows(s * tokens, tokens)?.add(&self.pos)?;
            for l in &self.layers {
                x = self.layer_forward(&x, l)?;
            }
            pooled.push(x.group_mean_rows(tokens)?);
        }
        Ok(Tensor::concat_rows(&pooled)?.matmul(&self.head_w)?.add_row_vector(&self.head_b)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub iters: usize,
    pub median_ms: f64,
    pub p10_ms: f64,
    pub p90_ms: f64,
}

/// Nearest-rank percentiles over wall-clock samples in milliseconds.
pub fn summarize(mut samples: Vec<f64>) -> Result<Timing> {
    if samples.is_empty() {
        return Err(Error::Config("iters must be at least 1".into()));
    }
    samples.sort_by(|a, b| a.total_cmp(b));
    let last = samples.len() - 1;
    let pick = |q: f64| samples[((q * last as f64).round() as usize).min(last)];
    Ok(Timing {
        iters: samples.len(),
        median_ms: pick(0.5),
        p10_ms: pick(0.1),
        p90_ms: pick(0.9),
    })
}

/// Times `f` after `warmup` untimed calls.
pub fn time_it(iters: usize, warmup: usize, mut f: impl FnMut() -> Result<()>) -> Result<Timing> {
    if iters == 0 {
        return Err(Error::Config("iters must be at least 1".into()));
    }
    for _ in 0..warmup {
        f()?;
    }
    let mut samples = Vec::with_capacity(iters);
    for _ in 0..iters {
        let t0 = Instant::now();
        f()?;
        samples.push(t0.elapsed().as_secs_f64() * 1e3);
    }
    summarize(samples)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub seed: u64,
    pub batch: usize,
    pub threads: usize,
    pub deployed_blocks: usize,
    pub baseline_layers: usize,
    pub dim: usize,
    pub deployed: Timing,
    pub baseline: Timing,
    /// `baseline.median_ms / deployed.median_ms`
    pub speedup: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct BenchOptions {
    pub iters: usize,
    pub warmup: usize,
    pub batch: usize,
    pub seed: u64,
    /// Baseline depth; `None` uses `deploy_blocks · branches`.
    pub baseline_layers: Option<usize>,
}

/// Interleaves the two models per iteration so drift affects both equally.
pub fn run_bench(deployed: &DeployedViT, baseline_config: &ModelConfig, opts: &BenchOptions) -> Result<BenchReport> {
    if opts.iters == 0 {
        return Err(Error::Config("iters must be at least 1".into()));
    }
    if opts.batch == 0 {
        return Err(Error::Config("batch must be at least 1".into()));
    }
    if baseline_config.dim != deployed.config.dim {
        return Err(Error::ModelMismatch(format!(
            "baseline width {} differs from deployed width {}",
            baseline_config.dim, deployed.config.dim
        )));
    }
    let layers = opts
        .baseline_layers
        .unwrap_or(deployed.config.deploy_blocks * deployed.config.branches);
    let baseline = BaselineViT::random(baseline_config, layers, opts.seed)?;
    let dep_images = probe_images(&deployed.config, opts.batch, opts.seed);
    let base_images = probe_images(&baseline.config, opts.batch, opts.seed);
    let mut dep_samples = Vec::with_capacity(opts.iters);
    let mut base_samples = Vec::with_capacity(opts.iters);
    for i in 0..opts.warmup + opts.iters {
        let t0 = Instant::now();
        std::hint::black_box(deployed_forward(&dep_images, deployed)?);
        let t1 = Instant::now();
        std::hint::black_box(baseline.forward(&base_images)?);
        let t2 = Instant::now();
        if i >= opts.warmup {
            dep_samples.push((t1 - t0).as_secs_f64() * 1e3);
            base_samples.push((t2 - t1).as_secs_f64() * 1e3);
        }
    }
    let deployed_t = summarize(dep_samples)?;
    let baseline_t = summarize(base_samples)?;
    Ok(BenchReport {
        seed: opts.seed,
        batch: opts.batch,
        threads: 1,
        deployed_blocks: deployed.blocks.len(),
        baseline_layers: baseline.depth(),
        dim: deployed.config.dim,
        speedup: baseline_t.median_ms / deployed_t.median_ms,
        deployed: deployed_t,
        baseline: baseline_t,
    })
}
