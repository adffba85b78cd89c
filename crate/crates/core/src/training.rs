//! Optimization machinery shared by both training phases: Adam with
//! serializable moment state, candidate scoring heads, negative sampling
//! and a step loop that aborts on non-finite losses and records JSONL
//! metrics.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LumError, Result};
use crate::params::ParamSet;
use crate::tensor::{dot, Tensor};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Steps of linear learning-rate warmup; 0 disables.
    pub warmup: u64,
    /// Global gradient-norm clip; 0 disables.
    pub clip: f64,
}

impl Default for OptimConfig {
    fn default() -> OptimConfig {
        OptimConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup: 0,
            clip: 0.0,
        }
    }
}

/// Adam moments, serializable so an interrupted run resumes bitwise.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct AdamState {
    pub t: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

pub struct Adam {
    pub cfg: OptimConfig,
    pub state: AdamState,
}

impl Adam {
    pub fn new(cfg: OptimConfig) -> Adam {
        Adam {
            cfg,
            state: AdamState::default(),
        }
    }

    pub fn with_state(cfg: OptimConfig, state: AdamState) -> Adam {
        Adam { cfg, state }
    }

    /// Apply one update from the gradients currently stored on the
    /// parameters. Frozen parameters are skipped entirely; any non-finite
    /// gradient aborts without touching parameter data.
    pub fn step(&mut self, ps: &ParamSet) -> Result<()> {
        let mut updates: Vec<(&String, Vec<f64>)> = Vec::new();
        let t = self.state.t + 1;
        let mut lr = self.cfg.lr;
        if self.cfg.warmup > 0 && t <= self.cfg.warmup {
            lr *= t as f64 / self.cfg.warmup as f64;
        }
        let mut clip_scale = 1.0;
        if self.cfg.clip > 0.0 {
            let mut sq = 0.0;
            for (name, tensor) in ps.iter() {
                if ps.is_frozen(name) {
                    continue;
                }
                if let Some(grad) = tensor.grad() {
                    sq += grad.iter().map(|g| g * g).sum::<f64>();
                }
            }
            let norm = sq.sqrt();
            if norm > self.cfg.clip {
                clip_scale = self.cfg.clip / norm;
            }
        }
        for (name, tensor) in ps.iter() {
            if ps.is_frozen(name) {
                continue;
            }
            let Some(grad) = tensor.grad() else { continue };
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(LumError::Validation(format!(
                    "non-finite gradient for parameter '{name}'"
                )));
            }
            let m = self
                .state
                .m
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; grad.len()]);
            let v = self
                .state
                .v
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; grad.len()]);
            let mut data = tensor.data();
            let bc1 = 1.0 - self.cfg.beta1.powi(t as i32);
            let bc2 = 1.0 - self.cfg.beta2.powi(t as i32);
            for i in 0..grad.len() {
                let g = grad[i] * clip_scale;
                m[i] = self.cfg.beta1 * m[i] + (1.0 - self.cfg.beta1) * g;
                v[i] = self.cfg.beta2 * v[i] + (1.0 - self.cfg.beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                data[i] -= lr * mhat / (vhat.sqrt() + self.cfg.eps);
            }
            updates.push((name, data));
        }
        for (name, data) in updates {
            ps.get(name).set_data(&data);
        }
        self.state.t = t;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Scoring
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    /// Learned scoring vector over the sequence summary alone; candidate
    /// awareness must come from the decoder input (front/end placement).
    Head,
    /// Inner product between summary and projected candidate embedding.
    Dot,
}

pub struct Scorer {
    pub mode: ScoreMode,
    w: Tensor, // [d]
}

impl Scorer {
    /// The scoring vector starts at zero so all initial scores are exactly
    /// zero and the first contrastive loss sits at ln(M+1).
    pub fn init(ps: &mut ParamSet, mode: ScoreMode, dim: usize) -> Scorer {
        Scorer {
            mode,
            w: ps.init_zeros("scorer.w", &[dim]),
        }
    }

    /// `user` is the decoder summary; `target` the candidate's embedding in
    /// the same space (used only in dot mode).
    pub fn score(&self, user: &Tensor, target: &Tensor) -> Result<Tensor> {
        match self.mode {
            ScoreMode::Dot => Ok(dot(user, target)),
            ScoreMode::Head => Ok(dot(&self.w, user)),
        }
    }
}

// ---------------------------------------------------------------------------
// Negative sampling
// ---------------------------------------------------------------------------

/// One contrastive example: a positive behavior and M distinct negatives
/// drawn from the catalog, none equal to the positive.
#[derive(Debug, Clone)]
pub struct ContrastiveBatch {
    pub positive: usize,
    pub negatives: Vec<usize>,
}

pub fn sample_negatives(
    catalog: usize,
    positive: usize,
    m: usize,
    rng: &mut ChaCha8Rng,
) -> Result<ContrastiveBatch> {
    if positive >= catalog {
        return Err(LumError::Contract(format!(
            "positive id {positive} outside catalog of {catalog}"
        )));
    }
    if m + 1 > catalog {
        return Err(LumError::Contract(format!(
            "cannot draw {m} distinct negatives from a catalog of {catalog}"
        )));
    }
    let mut negatives = Vec::with_capacity(m);
    let mut seen = vec![false; catalog];
    seen[positive] = true;
    while negatives.len() < m {
        let c = rng.gen_range(0..catalog);
        if !seen[c] {
            seen[c] = true;
            negatives.push(c);
        }
    }
    Ok(ContrastiveBatch { positive, negatives })
}

/// In-batch negative assembly: each user's negatives are the other users'
/// positives, deduplicated and never containing the user's own positive.
pub fn in_batch_negatives(positives: &[usize]) -> Result<Vec<ContrastiveBatch>> {
    if positives.len() < 2 {
        return Err(LumError::Config(format!(
            "batch size {} cannot form in-batch negatives (need >= 2)",
            positives.len()
        )));
    }
    Ok(positives
        .iter()
        .map(|&pos| {
            let mut negatives: Vec<usize> = positives
                .iter()
                .copied()
                .filter(|&p| p != pos)
                .collect();
            negatives.sort_unstable();
            negatives.dedup();
            ContrastiveBatch { positive: pos, negatives }
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Step loop and metrics
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
}

/// Run `steps` optimization steps. Each call to `step_fn` must build a
/// fresh scalar loss over the current parameters. A non-finite loss aborts
/// before any parameter update for that step.
pub fn run_steps<F>(
    ps: &ParamSet,
    adam: &mut Adam,
    steps: usize,
    mut step_fn: F,
) -> Result<Vec<StepRecord>>
where
    F: FnMut(usize) -> Result<Tensor>,
{
    let mut records = Vec::with_capacity(steps);
    for step in 0..steps {
        ps.zero_grad();
        let loss = step_fn(step)?;
        let value = loss.item();
        if !value.is_finite() {
            return Err(LumError::Validation(format!(
                "non-finite loss {value} at step {step}; aborting"
            )));
        }
        loss.backward();
        adam.step(ps)?;
        records.push(StepRecord { step, loss: value });
    }
    Ok(records)
}

/// Append-free JSONL metrics dump, one record per line.
pub fn write_metrics_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    for r in records {
        let line = serde_json::to_string(r)?;
        writeln!(f, "{line}")?;
    }
    Ok(())
}
