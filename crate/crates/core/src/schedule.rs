//! Branch-joining schedule λ(t), the rectified pre-softmax scale, and the
//! branch-diversity penalty.

use serde::{Deserialize, Serialize};

use crate::autograd::{row_cos, Tape, Var};
use crate::tensor::{Result, Tensor, TensorError};
use crate::vit::BlockTrace;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    #[default]
    Linear,
    Cosine,
    Exponential,
    Sqrt,
}

impl ScheduleKind {
    pub const ALL: [ScheduleKind; 4] = [Self::Linear, Self::Cosine, Self::Exponential, Self::Sqrt];

    /// The raw joining curve on normalized progress `t ∈ [0, 1]`, without the
    /// end clamp applied by [`lambda_at`].
    pub fn curve(self, t: f64) -> f64 {
        match self {
            Self::Linear => t,
            Self::Cosine => 0.5 * (1.0 - (std::f64::consts::PI * t).cos()),
            Self::Exponential => 1.0 - (-5.0 * t).exp(),
            Self::Sqrt => t.sqrt(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Linear => "linear",
            Self::Cosine => "cosine",
            Self::Exponential => "exponential",
            Self::Sqrt => "sqrt",
        }
    }
}

impl std::str::FromStr for ScheduleKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown schedule kind {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct JoinSchedule {
    pub kind: ScheduleKind,
    /// Step at which the warmup ramp starts; λ = 0 before it.
    pub join_start_step: u64,
    pub warmup_steps: u64,
    /// Steps at λ = 1 after the ramp, before collapse.
    pub adjust_steps: u64,
}

impl Default for JoinSchedule {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::Linear,
            join_start_step: 0,
            warmup_steps: 1_000,
            adjust_steps: 2_000,
        }
    }
}

impl JoinSchedule {
    /// Step at which λ first reaches 1.
    pub fn joined_step(&self) -> u64 {
        self.join_start_step + self.warmup_steps
    }

    pub fn end_step(&self) -> u64 {
        self.joined_step() + self.adjust_steps
    }

    pub fn phase(&self, step: u64) -> Phase {
        if step < self.join_start_step {
            Phase::PreJoin
        } else if step < self.joined_step() {
            Phase::Warmup
        } else {
            Phase::Adjust
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    PreJoin,
    Warmup,
    Adjust,
}

/// λ at a training step. Exactly 0 before the ramp and exactly 1 from the
/// end of the ramp on; the exponential curve is clamped to 1 there even
/// though it only reaches `1 - e⁻⁵` analytically.
pub fn lambda_at(step: u64, s: &JoinSchedule) -> f64 {
    match s.phase(step) {
        Phase::PreJoin => 0.0,
        Phase::Adjust => 1.0,
        Phase::Warmup => {
            let t = (step - s.join_start_step) as f64 / s.warmup_steps as f64;
            s.kind.curve(t).clamp(0.0, 1.0)
        }
    }
}

/// `√(1 + (n-1)λ²) · √d_k`
pub fn rectified_scale(lambda: f64, branches: usize, head_dim: usize) -> f64 {
    let extra = branches.saturating_sub(1) as f64;
    (1.0 + extra * lambda * lambda).sqrt() * (head_dim as f64).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiversityConfig {
    pub alpha: f64,
    pub enabled: bool,
}

impl Default for DiversityConfig {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            enabled: false,
        }
    }
}

/// Outcome of [`diversity_loss`]; `degenerate` is set when fewer than two
/// branches were supplied and the value is 0 by convention.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiversityValue {
    pub value: f64,
    pub degenerate: bool,
}

/// Mean over branch pairs and rows of squared cosine similarity. Each
/// feature tensor is `rows × d`, one row per (sample, token).
pub fn diversity_loss(features: &[Tensor]) -> Result<DiversityValue> {
    if features.len() < 2 {
        return Ok(DiversityValue {
            value: 0.0,
            degenerate: true,
        });
    }
    let shape = features[0].shape();
    if let Some(bad) = features.iter().find(|f| f.shape() != shape || f.shape().len() != 2) {
        return Err(TensorError::Shape {
            op: "diversity_loss",
            lhs: shape.to_vec(),
            rhs: bad.shape().to_vec(),
        });
    }
    let rows = features[0].rows();
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..features.len() {
        for j in i + 1..features.len() {
            let s: f64 = (0..rows)
                .map(|r| row_cos(features[i].row(r), features[j].row(r)).0.powi(2))
                .sum();
            total += s / rows as f64;
            pairs += 1;
        }
    }
    Ok(DiversityValue {
        value: total / pairs as f64,
        degenerate: false,
    })
}

/// Recorded counterpart of [`diversity_loss`]; `None` for fewer than two branches.
pub fn tape_diversity_loss(tape: &mut Tape, features: &[Var]) -> Result<Option<Var>> {
    if features.len() < 2 {
        return Ok(None);
    }
    let mut terms = Vec::new();
    for i in 0..features.len() {
        for j in i + 1..features.len() {
            terms.push(tape.row_cos2_mean(features[i], features[j])?);
        }
    }
    let pairs = terms.len() as f64;
    let total = tape.add_all(&terms)?;
    Ok(Some(tape.scale(total, 1.0 / pairs)?))
}

/// Unweighted mean of the diversity loss over every (block × {attention, FFN})
/// site. `None` for single-branch models.
pub fn tape_mean_site_diversity(tape: &mut Tape, traces: &[BlockTrace]) -> Result<Option<Var>> {
    let mut sites = Vec::new();
    for t in traces {
        for features in [&t.attn_branches, &t.ffn_branches] {
            if let Some(v) = tape_diversity_loss(tape, features)? {
                sites.push(v);
            }
        }
    }
    if sites.is_empty() {
        return Ok(None);
    }
    let count = sites.len() as f64;
    let total = tape.add_all(&sites)?;
    Ok(Some(tape.scale(total, 1.0 / count)?))
}

/// Per-site branch features taken from concrete activations.
#[derive(Debug, Clone)]
pub struct SiteFeatures {
    pub attn_branches: Vec<Tensor>,
    pub ffn_branches: Vec<Tensor>,
}

/// `α · mean(diversity_loss)` over all sites; 0 when disabled or single-branch.
pub fn total_aux_loss(sites: &[SiteFeatures], cfg: &DiversityConfig) -> Result<f64> {
    if !cfg.enabled {
        return Ok(0.0);
    }
    let mut values = Vec::new();
    for s in sites {
        for f in [&s.attn_branches, &s.ffn_branches] {
            let v = diversity_loss(f)?;
            if !v.degenerate {
                values.push(v.value);
            }
        }
    }
    if values.is_empty() {
        return Ok(0.0);
    }
    Ok(cfg.alpha * values.iter().sum::<f64>() / values.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sched(kind: ScheduleKind, start: u64, warmup: u64) -> JoinSchedule {
        JoinSchedule {
            kind,
            join_start_step: start,
            warmup_steps: warmup,
            adjust_steps: 10,
        }
    }

    #[test]
    fn curve_examples() {
        assert_eq!(ScheduleKind::Linear.curve(0.5), 0.5);
        assert!((ScheduleKind::Cosine.curve(0.5) - 0.5).abs() < 1e-15);
        assert!((ScheduleKind::Exponential.curve(0.5) - 0.917_915).abs() < 1e-6);
        assert_eq!(ScheduleKind::Sqrt.curve(0.25), 0.5);
    }

    #[test]
    fn lambda_phases() {
        let s = sched(ScheduleKind::Linear, 100, 200);
        assert_eq!(lambda_at(0, &s), 0.0);
        assert_eq!(lambda_at(99, &s), 0.0);
        assert_eq!(lambda_at(100, &s), 0.0);
        assert_eq!(lambda_at(200, &s), 0.5);
        assert_eq!(lambda_at(300, &s), 1.0);
        assert_eq!(lambda_at(10_000, &s), 1.0);
        assert_eq!(s.phase(50), Phase::PreJoin);
        assert_eq!(s.phase(150), Phase::Warmup);
        assert_eq!(s.phase(300), Phase::Adjust);
    }

    #[test]
    fn instant_joining_jumps_to_one() {
        let s = sched(ScheduleKind::Cosine, 7, 0);
        assert_eq!(lambda_at(6, &s), 0.0);
        assert_eq!(lambda_at(7, &s), 1.0);
    }

    #[test]
    fn exponential_is_clamped_at_ramp_end() {
        let s = sched(ScheduleKind::Exponential, 0, 10);
        assert!(lambda_at(9, &s) < 1.0);
        assert_eq!(lambda_at(10, &s), 1.0);
    }

    #[test]
    fn rectified_scale_examples() {
        assert_eq!(rectified_scale(0.0, 3, 16), 4.0);
        assert!((rectified_scale(1.0, 2, 64) - 11.313_708_498_984_76).abs() < 1e-12);
        assert_eq!(rectified_scale(1.0, 4, 16), 8.0);
    }

    #[test]
    fn diversity_examples() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![-3.0, 0.5]]).unwrap();
        assert!((diversity_loss(&[a.clone(), a.clone(), a.clone()]).unwrap().value - 1.0).abs() < 1e-15);

        let e1 = Tensor::from_rows(&[vec![1.0, 0.0, 0.0]]).unwrap();
        let e2 = Tensor::from_rows(&[vec![0.0, 2.0, 0.0]]).unwrap();
        let e3 = Tensor::from_rows(&[vec![0.0, 0.0, -1.0]]).unwrap();
        assert_eq!(diversity_loss(&[e1, e2, e3]).unwrap().value, 0.0);

        let f1 = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let r = 0.5f64.sqrt();
        let f2 = Tensor::from_rows(&[vec![r, r]]).unwrap();
        assert!((diversity_loss(&[f1, f2]).unwrap().value - 0.5).abs() < 1e-15);
    }

    #[test]
    fn diversity_degenerate_cases() {
        let one = diversity_loss(&[Tensor::zeros(&[2, 2])]).unwrap();
        assert!(one.degenerate);
        assert_eq!(one.value, 0.0);
        // zero features contribute cosine 0
        let z = Tensor::zeros(&[1, 2]);
        let a = Tensor::from_rows(&[vec![1.0, 1.0]]).unwrap();
        assert_eq!(diversity_loss(&[z, a]).unwrap().value, 0.0);
        assert!(diversity_loss(&[Tensor::zeros(&[1, 2]), Tensor::zeros(&[2, 2])]).is_err());
    }

    #[test]
    fn aux_loss_examples() {
        let a = Tensor::from_rows(&[vec![0.3, -0.7]]).unwrap();
        let site = SiteFeatures {
            attn_branches: vec![a.clone(), a.clone()],
            ffn_branches: vec![a.clone(), a.clone()],
        };
        let on = DiversityConfig {
            alpha: 0.05,
            enabled: true,
        };
        assert!((total_aux_loss(std::slice::from_ref(&site), &on).unwrap() - 0.05).abs() < 1e-15);
        let off = DiversityConfig { enabled: false, ..on };
        assert_eq!(total_aux_loss(&[site], &off).unwrap(), 0.0);
        let single = SiteFeatures {
            attn_branches: vec![a.clone()],
            ffn_branches: vec![a],
        };
        assert_eq!(total_aux_loss(&[single], &on).unwrap(), 0.0);
    }

    #[test]
    fn kind_round_trips_through_names() {
        for k in ScheduleKind::ALL {
            assert_eq!(k.name().parse::<ScheduleKind>().unwrap(), k);
        }
        assert!("quadratic".parse::<ScheduleKind>().is_err());
    }
}
