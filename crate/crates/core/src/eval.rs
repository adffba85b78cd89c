//! Retrieval evaluation: leave-one-out splits, deterministic candidate
//! ranking and Recall@K / NDCG@K aggregation, plus seed-sweep summaries
//! for ablation variants.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

/// Candidate ids ordered by descending score; ties break toward the lower
/// id so rankings are deterministic.
pub fn rank_candidates(scores: &[f64]) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..scores.len()).collect();
    ids.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .expect("scores must be comparable")
            .then(a.cmp(&b))
    });
    ids
}

/// 1-based rank of `target` under the same ordering as [`rank_candidates`].
pub fn rank_of(scores: &[f64], target: usize) -> usize {
    let ts = scores[target];
    let better = scores
        .iter()
        .enumerate()
        .filter(|&(i, &s)| s > ts || (s == ts && i < target))
        .count();
    better + 1
}

/// Fraction of ranks at or under K. If K exceeds the catalog it is clamped
/// and the flag in the result is set so callers can warn.
pub fn recall_at_k(ranks: &[usize], k: usize, catalog: usize) -> (f64, bool) {
    let clamped = k > catalog;
    let k = k.min(catalog);
    if ranks.is_empty() {
        return (0.0, clamped);
    }
    let hits = ranks.iter().filter(|&&r| r <= k).count();
    (hits as f64 / ranks.len() as f64, clamped)
}

/// Leave-one-out NDCG with a single relevant item: 1/log2(rank+1) inside
/// the cut, 0 outside, averaged over users.
pub fn ndcg_at_k(ranks: &[usize], k: usize) -> f64 {
    if ranks.is_empty() {
        return 0.0;
    }
    let total: f64 = ranks
        .iter()
        .map(|&r| {
            if r <= k {
                1.0 / ((r as f64) + 1.0).log2()
            } else {
                0.0
            }
        })
        .sum();
    total / ranks.len() as f64
}

/// Split a per-user event list into (history, held-out last event).
/// Users with fewer than two events cannot be evaluated and yield None.
pub fn leave_one_out<T>(events: &[T]) -> Option<(&[T], &T)> {
    if events.len() < 2 {
        return None;
    }
    let (last, rest) = events.split_last().unwrap();
    Some((rest, last))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub users: usize,
    pub skipped: usize,
    pub recall: BTreeMap<usize, f64>,
    pub ndcg: BTreeMap<usize, f64>,
    pub clamped_k: Vec<usize>,
}

pub fn evaluate_ranks(ranks: &[usize], skipped: usize, ks: &[usize], catalog: usize) -> EvalReport {
    let mut recall = BTreeMap::new();
    let mut ndcg = BTreeMap::new();
    let mut clamped_k = Vec::new();
    for &k in ks {
        let (r, clamped) = recall_at_k(ranks, k, catalog);
        if clamped {
            clamped_k.push(k);
        }
        recall.insert(k, r);
        ndcg.insert(k, ndcg_at_k(ranks, k.min(catalog)));
    }
    EvalReport {
        users: ranks.len(),
        skipped,
        recall,
        ndcg,
        clamped_k,
    }
}

/// Mean and sample standard deviation (n-1 denominator; 0 for n < 2).
pub fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n as f64 - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    pub sd: f64,
    pub seeds: usize,
}

/// variant name -> metric name -> mean/sd over the per-seed values.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct AblationReport {
    pub variants: BTreeMap<String, BTreeMap<String, MetricSummary>>,
}

impl AblationReport {
    /// Aggregate per-seed reports for one variant.
    pub fn add_variant(&mut self, name: &str, per_seed: &[EvalReport]) {
        let mut metrics = BTreeMap::new();
        let ks: Vec<usize> = per_seed
            .first()
            .map(|r| r.recall.keys().copied().collect())
            .unwrap_or_default();
        for k in ks {
            let recalls: Vec<f64> = per_seed.iter().map(|r| r.recall[&k]).collect();
            let ndcgs: Vec<f64> = per_seed.iter().map(|r| r.ndcg[&k]).collect();
            let (m, s) = mean_sd(&recalls);
            metrics.insert(
                format!("recall@{k}"),
                MetricSummary { mean: m, sd: s, seeds: per_seed.len() },
            );
            let (m, s) = mean_sd(&ndcgs);
            metrics.insert(
                format!("ndcg@{k}"),
                MetricSummary { mean: m, sd: s, seeds: per_seed.len() },
            );
        }
        self.variants.insert(name.to_string(), metrics);
    }
}

/// Order-preserving parallel map over disjoint chunks. `make_state` runs
/// once per worker so non-Send per-thread resources (e.g. rebuilt models)
/// can live inside the worker.
pub fn par_map<T, R, S, FS, F>(items: &[T], threads: usize, make_state: FS, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    FS: Fn() -> S + Sync,
    F: Fn(&mut S, &T) -> R + Sync,
{
    let threads = threads.max(1).min(items.len().max(1));
    let chunk = items.len().div_ceil(threads);
    let mut out: Vec<Option<R>> = (0..items.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        for (slice, dst) in items.chunks(chunk).zip(out.chunks_mut(chunk)) {
            let f = &f;
            let make_state = &make_state;
            scope.spawn(move || {
                let mut state = make_state();
                for (item, slot) in slice.iter().zip(dst.iter_mut()) {
                    *slot = Some(f(&mut state, item));
                }
            });
        }
    });
    out.into_iter().map(|r| r.unwrap()).collect()
}
