//! C ABI over the `branchfuse` library.
//!
//! Models live behind an opaque [`BfModel`] handle. Every fallible call
//! returns a [`BfStatus`]; on failure a message is available from
//! [`bf_last_error`] on the same thread. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use branchfuse::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, PhaseMeta};
use branchfuse::flops::{flops_report, FlopsInput};
use branchfuse::reparam::{absorb_affines, collapse, deployed_forward, verify_equivalence, DeployedViT};
use branchfuse::schedule::{lambda_at, rectified_scale, JoinSchedule, ScheduleKind};
use branchfuse::vit::{model_forward, MultiBranchViT};
use branchfuse::{Error, Tensor};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BfStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    Io = 3,
    BadMagic = 4,
    UnsupportedVersion = 5,
    Truncated = 6,
    ChecksumMismatch = 7,
    MalformedHeader = 8,
    ModelMismatch = 9,
    /// Collapse requested on a checkpoint that is not fully joined.
    NotJoined = 10,
    NumericalError = 11,
    VerificationFailed = 12,
    Internal = 13,
}

/// Joining curve selector for [`bf_lambda_at`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BfSchedule {
    Linear = 0,
    Cosine = 1,
    Exponential = 2,
    Sqrt = 3,
}

/// Shape summary of a loaded model.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct BfModelInfo {
    pub deployed: bool,
    pub channels: usize,
    pub image_size: usize,
    pub num_classes: usize,
    pub dim: usize,
    pub heads: usize,
    pub blocks: usize,
    /// Parallel branches per block (before collapse for deployed models).
    pub branches: usize,
    pub step: u64,
    pub lambda: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct BfVerifyReport {
    pub probes: usize,
    pub seed: u64,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    pub pass: bool,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct BfFlopsInput {
    pub dim: u64,
    pub heads: u64,
    pub tokens: u64,
    pub ffn_hidden: u64,
    pub patch_dim: u64,
    pub num_classes: u64,
    pub deploy_blocks: u64,
    pub branches: u64,
}

/// FLOPs at 2 per multiply-accumulate.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct BfFlopsReport {
    pub attn_scores_traditional: u64,
    pub attn_scores_fused: u64,
    pub fused_scores_per_head_literal: u64,
    pub attn_value_output: u64,
    pub ffn: u64,
    pub patch_embed: u64,
    pub head: u64,
    pub baseline_total: u64,
    pub deployed_total: u64,
    pub params_baseline: u64,
    pub params_multi_branch: u64,
    pub params_deployed: u64,
}

enum Inner {
    MultiBranch(MultiBranchViT),
    Deployed(DeployedViT),
}

/// Opaque model handle.
pub struct BfModel {
    inner: Inner,
    phase: PhaseMeta,
    source: Checkpoint,
}

impl BfModel {
    fn from_checkpoint(ck: Checkpoint) -> Result<Self, Error> {
        let inner = match ck.kind() {
            branchfuse::checkpoint::ModelKind::MultiBranch => Inner::MultiBranch(ck.multi_branch()?),
            branchfuse::checkpoint::ModelKind::Deployed => Inner::Deployed(ck.deployed()?),
        };
        Ok(Self {
            inner,
            phase: ck.phase,
            source: ck,
        })
    }

    fn config(&self) -> &branchfuse::vit::ModelConfig {
        match &self.inner {
            Inner::MultiBranch(m) => &m.config,
            Inner::Deployed(d) => &d.config,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let text = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).unwrap_or_default());
}

fn status_of(e: &Error) -> BfStatus {
    match e {
        Error::Checkpoint(c) => match c {
            CheckpointError::BadMagic { .. } => BfStatus::BadMagic,
            CheckpointError::Version { .. } => BfStatus::UnsupportedVersion,
            CheckpointError::Truncated(_) => BfStatus::Truncated,
            CheckpointError::Checksum { .. } => BfStatus::ChecksumMismatch,
            CheckpointError::Header(_) => BfStatus::MalformedHeader,
        },
        Error::Io(_) | Error::Dataset(_) => BfStatus::Io,
        Error::ModelMismatch(_) => BfStatus::ModelMismatch,
        Error::Precondition(_) => BfStatus::NotJoined,
        Error::Divergence { .. } | Error::Tensor(branchfuse::tensor::TensorError::NonFinite { .. }) => {
            BfStatus::NumericalError
        }
        _ => BfStatus::InvalidArgument,
    }
}

/// Runs `f`, recording errors and trapping panics.
fn guard(f: impl FnOnce() -> Result<BfStatus, Error>) -> BfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(s)) => s,
        Ok(Err(e)) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic");
            BfStatus::Internal
        }
    }
}

fn null(what: &str) -> Error {
    Error::Config(format!("{what} is null"))
}

unsafe fn path_arg<'a>(p: *const c_char) -> Result<&'a str, Error> {
    if p.is_null() {
        return Err(null("path"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Error::Config("path is not valid UTF-8".into()))
}

unsafe fn model_ref<'a>(m: *const BfModel) -> Result<&'a BfModel, Error> {
    m.as_ref().ok_or_else(|| null("model"))
}

macro_rules! require {
    ($($p:ident),+) => {
        $(if $p.is_null() {
            set_error(concat!(stringify!($p), " is null"));
            return BfStatus::NullArgument;
        })+
    };
}

/// Library version, a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn bf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread. The pointer stays valid
/// until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn bf_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads a checkpoint of either kind. `*out` receives a handle to release
/// with [`bf_model_free`].
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn bf_model_load(path: *const c_char, out: *mut *mut BfModel) -> BfStatus {
    require!(path, out);
    *out = ptr::null_mut();
    guard(|| {
        let ck = load_checkpoint(path_arg(path)?)?;
        *out = Box::into_raw(Box::new(BfModel::from_checkpoint(ck)?));
        Ok(BfStatus::Ok)
    })
}

/// # Safety
/// `model` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn bf_model_save(model: *const BfModel, path: *const c_char) -> BfStatus {
    require!(model, path);
    guard(|| {
        save_checkpoint(path_arg(path)?, &model_ref(model)?.source)?;
        Ok(BfStatus::Ok)
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `model` must be null or a live handle from this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn bf_model_free(model: *mut BfModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn bf_model_info(model: *const BfModel, out: *mut BfModelInfo) -> BfStatus {
    require!(model, out);
    guard(|| {
        let m = model_ref(model)?;
        let c = m.config();
        *out = BfModelInfo {
            deployed: matches!(m.inner, Inner::Deployed(_)),
            channels: c.channels,
            image_size: c.image_size,
            num_classes: c.num_classes,
            dim: c.dim,
            heads: c.heads,
            blocks: c.deploy_blocks,
            branches: c.branches,
            step: m.phase.step,
            lambda: m.phase.lambda,
        };
        Ok(BfStatus::Ok)
    })
}

/// Logits for `batch` images stored contiguously as `channels × size × size`
/// doubles each. `lambda` is used by multi-branch models only; pass a NaN to
/// use the checkpoint's stored λ. `logits` must hold `batch · num_classes`.
///
/// # Safety
/// `images` must point to `images_len` doubles and `logits` to `logits_len`.
#[no_mangle]
pub unsafe extern "C" fn bf_model_forward(
    model: *const BfModel,
    images: *const f64,
    images_len: usize,
    batch: usize,
    lambda: f64,
    logits: *mut f64,
    logits_len: usize,
) -> BfStatus {
    require!(model, images, logits);
    guard(|| {
        let m = model_ref(model)?;
        let c = m.config();
        let per = c.image_len();
        if batch == 0 || images_len != batch * per {
            return Err(Error::Config(format!(
                "expected {batch} images of {per} values, got {images_len} values"
            )));
        }
        if logits_len != batch * c.num_classes {
            return Err(Error::Config(format!(
                "logits buffer holds {logits_len}, need {}",
                batch * c.num_classes
            )));
        }
        let src = std::slice::from_raw_parts(images, images_len);
        let shape = [c.channels, c.image_size, c.image_size];
        let imgs = src
            .chunks(per)
            .map(|p| Tensor::new(&shape, p.to_vec()))
            .collect::<Result<Vec<_>, _>>()?;
        let y = match &m.inner {
            Inner::MultiBranch(mb) => {
                let l = if lambda.is_nan() { m.phase.lambda } else { lambda };
                model_forward(&imgs, mb, l)?
            }
            Inner::Deployed(dp) => deployed_forward(&imgs, dp)?,
        };
        std::slice::from_raw_parts_mut(logits, logits_len).copy_from_slice(y.data());
        Ok(BfStatus::Ok)
    })
}

/// Collapses a multi-branch model into a new deployed handle. Refuses with
/// [`BfStatus::NotJoined`] when the stored λ is below 1, unless `force`.
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn bf_model_collapse(
    model: *const BfModel,
    absorb: bool,
    force: bool,
    out: *mut *mut BfModel,
) -> BfStatus {
    require!(model, out);
    *out = ptr::null_mut();
    guard(|| {
        let m = model_ref(model)?;
        let Inner::MultiBranch(mb) = &m.inner else {
            return Err(Error::ModelMismatch("model is already deployed".into()));
        };
        if m.phase.lambda != 1.0 && !force {
            return Err(Error::Precondition(format!("stored λ is {}", m.phase.lambda)));
        }
        let mut dp = collapse(mb)?;
        let mut exact = None;
        if absorb {
            let a = absorb_affines(&dp)?;
            exact = Some(a.exact);
            dp = a.model;
        }
        let mut ck = Checkpoint::from_deployed(&dp, m.phase, exact);
        ck.config.train = m.source.config.train.clone();
        *out = Box::into_raw(Box::new(BfModel {
            inner: Inner::Deployed(dp),
            phase: m.phase,
            source: ck,
        }));
        Ok(BfStatus::Ok)
    })
}

/// Compares a multi-branch model at λ = 1 with a deployed one on `probes`
/// seeded random inputs. Returns [`BfStatus::VerificationFailed`] (with
/// `*out` filled) when the tolerance is exceeded.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn bf_verify(
    multi_branch: *const BfModel,
    deployed: *const BfModel,
    probes: usize,
    seed: u64,
    out: *mut BfVerifyReport,
) -> BfStatus {
    require!(multi_branch, deployed, out);
    guard(|| {
        let (a, b) = (model_ref(multi_branch)?, model_ref(deployed)?);
        let (Inner::MultiBranch(mb), Inner::Deployed(dp)) = (&a.inner, &b.inner) else {
            return Err(Error::ModelMismatch("expected a multi-branch and a deployed model".into()));
        };
        let r = verify_equivalence(mb, dp, probes, seed)?;
        *out = BfVerifyReport {
            probes: r.probes,
            seed: r.seed,
            max_abs_err: r.max_abs_err,
            max_rel_err: r.max_rel_err,
            pass: r.pass,
        };
        if r.pass {
            Ok(BfStatus::Ok)
        } else {
            set_error(format!("max relative error {:e} exceeds tolerance", r.max_rel_err));
            Ok(BfStatus::VerificationFailed)
        }
    })
}

/// λ at `step` for the joining curve `kind` (a [`BfSchedule`] value).
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn bf_lambda_at(
    kind: u32,
    join_start_step: u64,
    warmup_steps: u64,
    adjust_steps: u64,
    step: u64,
    out: *mut f64,
) -> BfStatus {
    require!(out);
    let kind = match kind {
        k if k == BfSchedule::Linear as u32 => ScheduleKind::Linear,
        k if k == BfSchedule::Cosine as u32 => ScheduleKind::Cosine,
        k if k == BfSchedule::Exponential as u32 => ScheduleKind::Exponential,
        k if k == BfSchedule::Sqrt as u32 => ScheduleKind::Sqrt,
        other => {
            set_error(format!("unknown schedule kind {other}"));
            return BfStatus::InvalidArgument;
        }
    };
    let s = JoinSchedule {
        kind,
        join_start_step,
        warmup_steps,
        adjust_steps,
    };
    *out = lambda_at(step, &s);
    BfStatus::Ok
}

/// Pre-softmax divisor `√(1 + (n-1)λ²)·√d_k`.
#[no_mangle]
pub extern "C" fn bf_rectified_scale(lambda: f64, branches: usize, head_dim: usize) -> f64 {
    rectified_scale(lambda, branches, head_dim)
}

/// Closed-form FLOP and parameter counts.
///
/// # Safety
/// `input` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn bf_flops(input: *const BfFlopsInput, out: *mut BfFlopsReport) -> BfStatus {
    require!(input, out);
    let i = *input;
    if i.heads == 0 || i.dim % i.heads != 0 {
        set_error("dim must be a positive multiple of heads");
        return BfStatus::InvalidArgument;
    }
    let r = flops_report(&FlopsInput {
        dim: i.dim,
        heads: i.heads,
        tokens: i.tokens,
        ffn_hidden: i.ffn_hidden,
        patch_dim: i.patch_dim,
        num_classes: i.num_classes,
        deploy_blocks: i.deploy_blocks,
        branches: i.branches,
    });
    *out = BfFlopsReport {
        attn_scores_traditional: r.layer.attn_scores_traditional,
        attn_scores_fused: r.layer.attn_scores_fused,
        fused_scores_per_head_literal: r.layer.fused_scores_per_head_literal,
        attn_value_output: r.layer.attn_value_output,
        ffn: r.layer.ffn,
        patch_embed: r.patch_embed,
        head: r.head,
        baseline_total: r.baseline_total,
        deployed_total: r.deployed_total,
        params_baseline: r.params.baseline,
        params_multi_branch: r.params.multi_branch,
        params_deployed: r.params.deployed,
    };
    BfStatus::Ok
}
