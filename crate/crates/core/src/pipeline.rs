//! End-to-end orchestration: layered configuration, model assembly, the
//! two training phases, leave-one-out evaluation, and ablation sweeps.
//! Every stage writes its artifacts plus a hash manifest under the run
//! directory, so re-running with unchanged inputs is a no-op.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::business::{
    build_cooccurrence_graph, combine_modalities, encode_table, random_walk_embed, WalkConfig,
};
use crate::datagen::{generate, Dataset, GenSpec};
use crate::decoder::{DecToken, Decoder, DecoderConfig, Placement};
use crate::error::{LumError, Result};
use crate::eval::{evaluate_ranks, par_map, rank_of, AblationReport, EvalReport};
use crate::params::{Checkpoint, ParamSet};
use crate::qformer::{
    build_vocab, loss_contrastive, loss_matching, MatchingHead, QFormer, QFormerConfig, TextTower,
};
use crate::semantic::{
    build_semantic_ids, load_semantic_ids, save_semantic_ids, SemanticIdMap, TokenizerConfig,
};
use crate::tensor::{add, Tensor};
use crate::timestamp::{
    assign_interval, reshape_sequence, RawEvent, TimestampConfig, TimestampMode, Token,
};
use crate::training::{
    in_batch_negatives, run_steps, write_metrics_jsonl, Adam, OptimConfig, ScoreMode, Scorer,
};

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    /// Linear learning-rate warmup steps.
    pub warmup: u64,
    /// Global gradient-norm clip; 0 disables.
    pub clip: f64,
    pub tau: f64,
    /// Negatives per positive; Phase-II batch size is negatives + 1.
    pub negatives: usize,
    pub phase1_steps: usize,
    pub phase1_batch: usize,
    pub phase2_epochs: usize,
    pub steps_per_epoch: usize,
    /// Events of history per training/eval example.
    pub history_window: usize,
    pub score_mode: ScoreMode,
    pub timestamp_mode: TimestampMode,
    pub fusion: FusionMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// Multi-modal fusion of semantic tokens and business keys.
    QFormer,
    /// Ablation: behavior embeddings come from the text tower alone.
    TextOnly,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            lr: 1e-4,
            warmup: 100,
            clip: 1.0,
            tau: 0.07,
            negatives: 31,
            phase1_steps: 200,
            phase1_batch: 8,
            phase2_epochs: 5,
            steps_per_epoch: 100,
            history_window: 16,
            score_mode: ScoreMode::Head,
            timestamp_mode: TimestampMode::Full,
            fusion: FusionMode::QFormer,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
    pub threads: usize,
    /// Cap on evaluated users; 0 means all.
    pub max_users: usize,
}

impl Default for EvalConfig {
    fn default() -> EvalConfig {
        EvalConfig {
            ks: vec![5, 10, 50, 200],
            threads: 4,
            max_users: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub run_dir: String,
    pub seed: u64,
    pub data: GenSpec,
    pub tokenizer: TokenizerConfig,
    pub walks: WalkConfig,
    pub qformer: QFormerConfig,
    pub decoder: DecoderConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for PipelineConfig {
    fn default() -> PipelineConfig {
        PipelineConfig {
            run_dir: "runs/default".to_string(),
            seed: 7,
            data: GenSpec::default(),
            tokenizer: TokenizerConfig::default(),
            walks: WalkConfig::default(),
            qformer: QFormerConfig::default(),
            decoder: DecoderConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        if self.train.tau <= 0.0 {
            return Err(LumError::Config("train.tau must be positive".into()));
        }
        if self.train.negatives < 1 {
            return Err(LumError::Config("train.negatives must be at least 1".into()));
        }
        if self.train.lr <= 0.0 {
            return Err(LumError::Config("train.lr must be positive".into()));
        }
        if self.train.history_window < 1 || self.train.phase1_batch < 2 {
            return Err(LumError::Config(
                "history_window must be >= 1 and phase1_batch >= 2".into(),
            ));
        }
        if self.eval.ks.is_empty() || self.eval.ks.iter().any(|&k| k == 0) {
            return Err(LumError::Config("eval.ks must be non-empty positive".into()));
        }
        Ok(())
    }

    /// Run directory, honoring the LUM_RUN_ROOT environment variable for
    /// relative paths.
    pub fn run_path(&self) -> PathBuf {
        let p = PathBuf::from(&self.run_dir);
        if p.is_relative() {
            if let Ok(root) = std::env::var("LUM_RUN_ROOT") {
                return PathBuf::from(root).join(p);
            }
        }
        p
    }

    pub fn timestamp_config(&self) -> TimestampConfig {
        TimestampConfig {
            interval_minutes: self.data.interval_minutes,
            mode: self.train.timestamp_mode,
            ..TimestampConfig::default()
        }
    }
}

/// Set `key` (dotted path) to `value` inside a JSON tree, creating
/// intermediate objects. Values parse as JSON when possible, else string.
fn set_json_path(root: &mut serde_json::Value, key: &str, value: &str) -> Result<()> {
    let parsed: serde_json::Value = serde_json::from_str(value)
        .unwrap_or_else(|_| serde_json::Value::String(value.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if part.is_empty() {
            return Err(LumError::Config(format!("empty segment in override key '{key}'")));
        }
        let obj = node
            .as_object_mut()
            .ok_or_else(|| LumError::Config(format!("override '{key}' descends into a non-object")))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), parsed);
            return Ok(());
        }
        node = obj
            .entry(part.to_string())
            .or_insert_with(|| serde_json::Value::Object(Default::default()));
    }
    unreachable!("override key had no segments")
}

/// Layered configuration: optional JSON file, then `key=value` overrides.
/// Unknown keys anywhere are rejected.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<PipelineConfig> {
    let mut tree: serde_json::Value = match path {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p).map_err(|e| {
            LumError::Config(format!("cannot read config {}: {e}", p.display()))
        })?)?,
        None => serde_json::Value::Object(Default::default()),
    };
    for ov in overrides {
        let (k, v) = ov
            .split_once('=')
            .ok_or_else(|| LumError::Config(format!("override '{ov}' is not key=value")))?;
        set_json_path(&mut tree, k.trim(), v.trim())?;
    }
    let cfg: PipelineConfig = serde_json::from_value(tree)
        .map_err(|e| LumError::Config(format!("invalid configuration: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

// ---------------------------------------------------------------------------
// Stage manifests (hash-checked idempotence)
// ---------------------------------------------------------------------------

fn fnv1a_hex(bytes: &[u8]) -> String {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    format!("{h:016x}")
}

fn hash_file(path: &Path) -> Result<String> {
    Ok(fnv1a_hex(&std::fs::read(path)?))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct Manifest {
    stage: String,
    config_hash: String,
    input_hashes: BTreeMap<String, String>,
}

#[derive(Debug)]
pub struct StageResult {
    pub skipped: bool,
    pub message: String,
}

/// Compute the stage manifest; if it matches the one on disk the stage is
/// a no-op. Inputs must exist (dependency error naming the producer).
fn stage_manifest(
    cfg: &PipelineConfig,
    stage: &str,
    inputs: &[(&str, PathBuf, &str)],
) -> Result<(Manifest, bool)> {
    let mut input_hashes = BTreeMap::new();
    for (name, path, producer) in inputs {
        if !path.exists() {
            return Err(LumError::Dependency(format!(
                "{stage}: missing input {} ({}); run `lum {producer}` first",
                name,
                path.display()
            )));
        }
        input_hashes.insert(name.to_string(), hash_file(path)?);
    }
    let manifest = Manifest {
        stage: stage.to_string(),
        config_hash: fnv1a_hex(serde_json::to_string(cfg)?.as_bytes()),
        input_hashes,
    };
    let dir = cfg.run_path().join(stage);
    let existing = dir.join("manifest.json");
    let unchanged = existing.exists()
        && serde_json::from_str::<Manifest>(&std::fs::read_to_string(&existing)?)
            .map(|m| m == manifest)
            .unwrap_or(false);
    Ok((manifest, unchanged))
}

fn finish_stage(cfg: &PipelineConfig, stage: &str, manifest: &Manifest) -> Result<()> {
    let dir = cfg.run_path().join(stage);
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("config.json"), serde_json::to_string_pretty(cfg)?)?;
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(manifest)?)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Artifacts and model assembly
// ---------------------------------------------------------------------------

/// Everything the model needs besides parameters; plain data, thread-safe.
pub struct Artifacts {
    pub dataset: Dataset,
    pub sem: SemanticIdMap,
    pub business: BTreeMap<String, Vec<Vec<f64>>>,
}

impl Artifacts {
    /// Scenario windows as (behavior indices, label text) pairs.
    pub fn scenario_windows(&self) -> Vec<(Vec<usize>, String)> {
        let epoch = self.dataset.spec.timestamp_config().epoch;
        let mut by_user_day: BTreeMap<(&str, u32), Vec<usize>> = BTreeMap::new();
        for e in &self.dataset.events {
            let day = (e.ts - epoch).num_days() as u32;
            let idx: usize = e.behavior_id[1..].parse().unwrap_or(0);
            by_user_day
                .entry((e.user_id.as_str(), day))
                .or_default()
                .push(idx);
        }
        self.dataset
            .scenarios
            .iter()
            .filter_map(|s| {
                by_user_day
                    .get(&(s.user_id.as_str(), s.day))
                    .map(|w| (w.clone(), s.text.clone()))
            })
            .collect()
    }
}

pub struct Model {
    pub cfg: PipelineConfig,
    pub ps: ParamSet,
    pub qformer: QFormer,
    pub tower: TextTower,
    pub match_head: MatchingHead,
    pub decoder: Decoder,
    pub scorer: Scorer,
    /// Per behavior index: semantic path, business vectors, id, text.
    pub paths: Vec<Vec<usize>>,
    pub business: Vec<Vec<Vec<f64>>>,
    pub behavior_ids: Vec<String>,
    pub texts: Vec<String>,
    index: BTreeMap<String, usize>,
    pub ts_cfg: TimestampConfig,
}

pub struct CaseInput {
    pub items: Vec<(DecToken, f64)>,
    pub target_pos: f64,
}

impl Model {
    /// Deterministic assembly from config + artifacts. The decoder input
    /// width always tracks the fusion width.
    pub fn build(cfg: &PipelineConfig, art: &Artifacts) -> Result<Model> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut ps = ParamSet::new();
        let qf = QFormer::init(
            &mut ps,
            &cfg.qformer,
            &art.sem.level_sizes,
            cfg.walks.dims,
            &mut rng,
        );
        let mut corpus: Vec<&str> = art.dataset.behaviors.iter().map(|b| b.text.as_str()).collect();
        let scen_texts: Vec<String> = art
            .dataset
            .scenarios
            .iter()
            .map(|s| s.text.clone())
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        corpus.extend(scen_texts.iter().map(|s| s.as_str()));
        let vocab = build_vocab(&corpus);
        let tower = TextTower::init(
            &mut ps,
            vocab,
            cfg.qformer.text_dim,
            cfg.qformer.dim,
            cfg.qformer.heads,
            &mut rng,
        );
        let match_head = MatchingHead::init(&mut ps, cfg.qformer.dim, &mut rng);
        let dec_cfg = DecoderConfig {
            input_dim: cfg.qformer.dim,
            ..cfg.decoder.clone()
        };
        let decoder = Decoder::init(&mut ps, &dec_cfg, &mut rng);
        let scorer = Scorer::init(&mut ps, cfg.train.score_mode, dec_cfg.dim);

        let mut paths = Vec::new();
        let mut business = Vec::new();
        let mut behavior_ids = Vec::new();
        let mut texts = Vec::new();
        let mut index = BTreeMap::new();
        for b in &art.dataset.behaviors {
            let sem = art.sem.ids.get(&b.id).ok_or_else(|| {
                LumError::Coverage(vec![b.id.clone()])
            })?;
            let biz = art.business.get(&b.id).ok_or_else(|| {
                LumError::Coverage(vec![b.id.clone()])
            })?;
            index.insert(b.id.clone(), paths.len());
            paths.push(sem.path.clone());
            business.push(biz.clone());
            behavior_ids.push(b.id.clone());
            texts.push(b.text.clone());
        }
        Ok(Model {
            cfg: cfg.clone(),
            ps,
            qformer: qf,
            tower,
            match_head,
            decoder,
            scorer,
            paths,
            business,
            behavior_ids,
            texts,
            index,
            ts_cfg: cfg.timestamp_config(),
        })
    }

    pub fn behavior_index(&self, id: &str) -> Result<usize> {
        self.index
            .get(id)
            .copied()
            .ok_or_else(|| LumError::Catalog(format!("unknown behavior '{id}'")))
    }

    /// Fused embedding for one behavior under the configured fusion mode.
    pub fn fuse(&self, idx: usize) -> Result<Tensor> {
        match self.cfg.train.fusion {
            FusionMode::QFormer => self.qformer.fuse_behavior(&self.paths[idx], &self.business[idx]),
            FusionMode::TextOnly => self.tower.text_embedding(&self.texts[idx]),
        }
    }

    /// Fused embeddings for the whole catalog, computed once and shared so
    /// gradients accumulate across every use inside a step.
    pub fn fuse_catalog(&self) -> Result<Vec<Tensor>> {
        (0..self.behavior_ids.len()).map(|i| self.fuse(i)).collect()
    }

    /// Detached (constant) fused embeddings for gradient-free evaluation.
    pub fn fuse_catalog_const(&self) -> Result<Vec<Tensor>> {
        Ok(self
            .fuse_catalog()?
            .into_iter()
            .map(|t| Tensor::new(t.data(), t.shape(), false))
            .collect())
    }

    /// Decoder inputs for a chronological history plus the target slot
    /// position, under the configured timestamp mode.
    pub fn case_input(
        &self,
        fused: &[Tensor],
        history: &[RawEvent],
        target_ts: DateTime<Utc>,
    ) -> Result<CaseInput> {
        let seq = reshape_sequence(history, &self.ts_cfg)?;
        let mut items = Vec::with_capacity(seq.tokens.len());
        match self.ts_cfg.mode {
            TimestampMode::Full => {
                let mut current = 0f64;
                for tok in &seq.tokens {
                    match tok {
                        Token::Tds(d) => {
                            current = d.time_id as f64;
                            items.push((DecToken::Tds(d.table_index()), current));
                        }
                        Token::Sep => items.push((DecToken::Sep, current)),
                        Token::Behavior { behavior_id, time_id } => {
                            current = *time_id as f64;
                            let idx = self.behavior_index(behavior_id)?;
                            items.push((DecToken::Fused(fused[idx].clone()), current));
                        }
                    }
                }
                let target_pos = assign_interval(target_ts, &self.ts_cfg)?.time_id as f64;
                Ok(CaseInput { items, target_pos })
            }
            TimestampMode::PositionOnly => {
                for (k, tok) in seq.tokens.iter().enumerate() {
                    if let Token::Behavior { behavior_id, .. } = tok {
                        let idx = self.behavior_index(behavior_id)?;
                        items.push((DecToken::Fused(fused[idx].clone()), seq.positions[k] as f64));
                    }
                }
                let target_pos = seq.positions.last().map(|&p| p + 1).unwrap_or(0) as f64;
                Ok(CaseInput { items, target_pos })
            }
            TimestampMode::None => {
                for (k, tok) in seq.tokens.iter().enumerate() {
                    if let Token::Behavior { behavior_id, .. } = tok {
                        let idx = self.behavior_index(behavior_id)?;
                        items.push((DecToken::Fused(fused[idx].clone()), k as f64));
                    }
                }
                let target_pos = items.len() as f64;
                Ok(CaseInput { items, target_pos })
            }
        }
    }

    /// Score one candidate against a prepared case.
    pub fn score_candidate(&self, case: &CaseInput, fused_c: &Tensor) -> Result<Tensor> {
        let target = (DecToken::Fused(fused_c.clone()), case.target_pos);
        let arranged = self.decoder.arrange(&case.items, &target);
        let user = self.decoder.user_embedding(&arranged)?;
        match self.scorer.mode {
            ScoreMode::Head => self.scorer.score(&user, &user),
            ScoreMode::Dot => {
                let proj = self.decoder.project_candidate(fused_c)?;
                self.scorer.score(&user, &proj)
            }
        }
    }

    // -- Phase I ------------------------------------------------------------

    /// Sum of the six alignment losses on one sampled mini-batch.
    pub fn phase1_loss(
        &self,
        windows: &[(Vec<usize>, String)],
        rng: &mut ChaCha8Rng,
    ) -> Result<Tensor> {
        let b = self.cfg.train.phase1_batch.min(self.behavior_ids.len());
        if b < 2 {
            return Err(LumError::Contract("phase 1 needs a batch of at least 2".into()));
        }
        let tau = self.cfg.train.tau;
        let mut idxs: Vec<usize> = (0..self.behavior_ids.len()).collect();
        idxs.shuffle(rng);
        idxs.truncate(b);

        // Behavior level.
        let fused: Vec<Tensor> = idxs.iter().map(|&i| self.fuse(i)).collect::<Result<_>>()?;
        let texts: Vec<Tensor> = idxs
            .iter()
            .map(|&i| self.tower.text_embedding(&self.texts[i]))
            .collect::<Result<_>>()?;
        let mut total = loss_contrastive(&fused, &texts, tau)?;
        for i in 0..b {
            let pos = loss_matching(&self.match_head, &fused[i], &texts[i], true)?;
            let neg = loss_matching(&self.match_head, &fused[i], &texts[(i + 1) % b], false)?;
            total = add(&total, &crate::tensor::scale(&add(&pos, &neg), 1.0 / (2.0 * b as f64)));
        }
        for &i in idxs.iter().take(2) {
            let cond = self.qformer.fuse_queries(&self.paths[i], &self.business[i])?;
            let gen = self.tower.generation_loss(Some(&cond), &self.texts[i])?;
            total = add(&total, &crate::tensor::scale(&gen, 0.5));
        }

        // Sequence level over scenario windows.
        if windows.len() < 2 {
            return Err(LumError::Contract(
                "phase 1 needs at least 2 scenario windows for sequence-level losses".into(),
            ));
        }
        let s = b.min(windows.len());
        let mut widx: Vec<usize> = (0..windows.len()).collect();
        widx.shuffle(rng);
        widx.truncate(s);
        let k = self.cfg.qformer.window_k;
        let mut pooled = Vec::with_capacity(s);
        let mut wtexts = Vec::with_capacity(s);
        let mut queries = Vec::with_capacity(s);
        for &w in &widx {
            let (idxs, text) = &windows[w];
            let tail: Vec<usize> = idxs.iter().rev().take(k).rev().copied().collect();
            let refs: Vec<(&[usize], &[Vec<f64>])> = tail
                .iter()
                .map(|&i| (self.paths[i].as_slice(), self.business[i].as_slice()))
                .collect();
            let q = self.qformer.query_tower(&refs)?;
            pooled.push(crate::tensor::mean_rows(&q));
            wtexts.push(self.tower.text_embedding(text)?);
            queries.push((q, text.clone()));
        }
        total = add(&total, &loss_contrastive(&pooled, &wtexts, tau)?);
        for i in 0..s {
            let pos = loss_matching(&self.match_head, &pooled[i], &wtexts[i], true)?;
            let neg = loss_matching(&self.match_head, &pooled[i], &wtexts[(i + 1) % s], false)?;
            total = add(&total, &crate::tensor::scale(&add(&pos, &neg), 1.0 / (2.0 * s as f64)));
        }
        for (q, text) in queries.iter().take(2) {
            let gen = self.tower.generation_loss(Some(q), text)?;
            total = add(&total, &crate::tensor::scale(&gen, 0.5));
        }
        Ok(total)
    }

    // -- Phase II -----------------------------------------------------------

    /// Mean InfoNCE over one in-batch-negative user batch.
    pub fn phase2_loss(
        &self,
        users: &[(String, Vec<RawEvent>)],
        rng: &mut ChaCha8Rng,
    ) -> Result<Tensor> {
        let batch = self.cfg.train.negatives + 1;
        if batch < 2 {
            return Err(LumError::Config("phase 2 batch must be at least 2".into()));
        }
        let eligible: Vec<usize> = (0..users.len())
            .filter(|&u| users[u].1.len() >= 3)
            .collect();
        if eligible.len() < 2 {
            return Err(LumError::Contract("not enough users with >= 3 events".into()));
        }
        let tau = self.cfg.train.tau;
        let w = self.cfg.train.history_window;
        let fused = self.fuse_catalog()?;
        let mut cases = Vec::with_capacity(batch);
        let mut positives = Vec::with_capacity(batch);
        for _ in 0..batch {
            let u = eligible[rng.gen_range(0..eligible.len())];
            let evs = &users[u].1;
            // Hold the final event out for evaluation; train strictly before.
            let t = rng.gen_range(1..evs.len() - 1);
            let start = t.saturating_sub(w);
            let pos = self.behavior_index(&evs[t].behavior_id)?;
            cases.push(self.case_input(&fused, &evs[start..t], evs[t].ts)?);
            positives.push(pos);
        }
        let batches = in_batch_negatives(&positives)?;
        let mut total = Tensor::scalar(0.0);
        for (case, cb) in cases.iter().zip(&batches) {
            let s_pos = self.score_candidate(case, &fused[cb.positive])?;
            let s_negs: Vec<Tensor> = cb
                .negatives
                .iter()
                .map(|&n| self.score_candidate(case, &fused[n]))
                .collect::<Result<_>>()?;
            total = add(&total, &crate::qformer::infonce(&s_pos, &s_negs, tau));
        }
        Ok(crate::tensor::scale(&total, 1.0 / batch as f64))
    }
}

// ---------------------------------------------------------------------------
// Stages
// ---------------------------------------------------------------------------

fn data_files(cfg: &PipelineConfig) -> Vec<(&'static str, PathBuf, &'static str)> {
    let d = cfg.run_path().join("gen-data");
    vec![
        ("events", d.join("events.jsonl"), "gen-data"),
        ("catalog", d.join("catalog.json"), "gen-data"),
        ("attributes", d.join("attributes.json"), "gen-data"),
        ("scenarios", d.join("scenarios.jsonl"), "gen-data"),
        ("genspec", d.join("genspec.json"), "gen-data"),
    ]
}

pub fn stage_gen_data(cfg: &PipelineConfig) -> Result<StageResult> {
    let (manifest, unchanged) = stage_manifest(cfg, "gen-data", &[])?;
    if unchanged {
        return Ok(StageResult { skipped: true, message: "gen-data: inputs unchanged, skipping".into() });
    }
    let spec = GenSpec { seed: cfg.seed, ..cfg.data.clone() };
    let dataset = generate(&spec)?;
    let dir = cfg.run_path().join("gen-data");
    dataset.save(&dir)?;
    let summary = dataset.describe()?;
    finish_stage(cfg, "gen-data", &manifest)?;
    Ok(StageResult {
        skipped: false,
        message: format!(
            "gen-data: {} users, {} events, catalog {}, {} scenarios (rate {:.3}), rule agreement {:.3}",
            summary.users, summary.events, summary.catalog, summary.scenarios,
            summary.scenario_rate, summary.rule_agreement
        ),
    })
}

pub fn load_dataset(cfg: &PipelineConfig) -> Result<Dataset> {
    let dir = cfg.run_path().join("gen-data");
    if !dir.join("events.jsonl").exists() {
        return Err(LumError::Dependency(
            "dataset not found; run `lum gen-data` first".into(),
        ));
    }
    Dataset::load(&dir)
}

pub fn stage_build_tokens(cfg: &PipelineConfig) -> Result<StageResult> {
    let (manifest, unchanged) = stage_manifest(cfg, "build-tokens", &data_files(cfg))?;
    if unchanged {
        return Ok(StageResult { skipped: true, message: "build-tokens: inputs unchanged, skipping".into() });
    }
    let dataset = load_dataset(cfg)?;
    let dir = cfg.run_path().join("build-tokens");
    std::fs::create_dir_all(&dir)?;

    // Semantic IDs from behavior texts.
    let catalog: BTreeMap<String, String> = dataset
        .behaviors
        .iter()
        .map(|b| (b.id.clone(), b.text.clone()))
        .collect();
    let tok_cfg = TokenizerConfig { seed: cfg.seed, ..cfg.tokenizer.clone() };
    let sem = build_semantic_ids(&catalog, &tok_cfg, None)?;
    save_semantic_ids(&sem, &dir.join("semantic.json"))?;

    // Business embeddings: co-occurrence walks + attribute table.
    let ts_cfg = TimestampConfig {
        interval_minutes: cfg.data.interval_minutes,
        ..TimestampConfig::default()
    };
    let mut sequences = Vec::new();
    for (user, evs) in dataset.events_by_user() {
        let owned: Vec<RawEvent> = evs.iter().map(|e| (*e).clone()).collect();
        sequences.push((user.to_string(), reshape_sequence(&owned, &ts_cfg)?));
    }
    let graph = build_cooccurrence_graph(&sequences);
    let walk_cfg = WalkConfig { ..cfg.walks.clone() };
    let (mut walks, report) = random_walk_embed(&graph, &walk_cfg)?;
    // Behaviors that never co-occur still need a vector.
    for b in &dataset.behaviors {
        walks.entry(b.id.clone()).or_insert_with(|| vec![0.0; walk_cfg.dims]);
    }
    let attrs = encode_table(&dataset.attributes, &dataset.schema, walk_cfg.dims, cfg.seed, None)?;
    let ids: Vec<String> = dataset.behaviors.iter().map(|b| b.id.clone()).collect();
    let combined = combine_modalities(&ids, &[&walks, &attrs])?;
    std::fs::write(dir.join("business.json"), serde_json::to_string_pretty(&combined)?)?;

    finish_stage(cfg, "build-tokens", &manifest)?;
    Ok(StageResult {
        skipped: false,
        message: format!(
            "build-tokens: {} semantic ids (levels {:?}), {} graph nodes, {} isolated",
            sem.ids.len(),
            sem.level_sizes,
            graph.nodes.len(),
            report.isolated_nodes.len()
        ),
    })
}

pub fn load_artifacts(cfg: &PipelineConfig) -> Result<Artifacts> {
    let dir = cfg.run_path().join("build-tokens");
    if !dir.join("semantic.json").exists() {
        return Err(LumError::Dependency(
            "token artifacts not found; run `lum build-tokens` first".into(),
        ));
    }
    let dataset = load_dataset(cfg)?;
    let sem = load_semantic_ids(&dir.join("semantic.json"))?;
    let business: BTreeMap<String, Vec<Vec<f64>>> =
        serde_json::from_str(&std::fs::read_to_string(dir.join("business.json"))?)?;
    Ok(Artifacts { dataset, sem, business })
}

fn token_files(cfg: &PipelineConfig) -> Vec<(&'static str, PathBuf, &'static str)> {
    let d = cfg.run_path().join("build-tokens");
    let mut v = data_files(cfg);
    v.push(("semantic", d.join("semantic.json"), "build-tokens"));
    v.push(("business", d.join("business.json"), "build-tokens"));
    v
}

pub fn stage_pretrain(cfg: &PipelineConfig) -> Result<StageResult> {
    let (manifest, unchanged) = stage_manifest(cfg, "pretrain", &token_files(cfg))?;
    if unchanged {
        return Ok(StageResult { skipped: true, message: "pretrain: inputs unchanged, skipping".into() });
    }
    let art = load_artifacts(cfg)?;
    let model = Model::build(cfg, &art)?;
    let windows = art.scenario_windows();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x9e3779b9));
    let mut adam = Adam::new(OptimConfig {
        lr: cfg.train.lr,
        warmup: cfg.train.warmup,
        clip: cfg.train.clip,
        ..OptimConfig::default()
    });
    let records = run_steps(&model.ps, &mut adam, cfg.train.phase1_steps, |_| {
        model.phase1_loss(&windows, &mut rng)
    })?;
    let dir = cfg.run_path().join("pretrain");
    std::fs::create_dir_all(&dir)?;
    model.ps.snapshot().save(&dir.join("checkpoint.json"))?;
    write_metrics_jsonl(&dir.join("metrics.jsonl"), &records)?;
    finish_stage(cfg, "pretrain", &manifest)?;
    let first = records.first().map(|r| r.loss).unwrap_or(0.0);
    let last = records.last().map(|r| r.loss).unwrap_or(0.0);
    Ok(StageResult {
        skipped: false,
        message: format!("pretrain: {} steps, loss {first:.4} -> {last:.4}", records.len()),
    })
}

pub fn stage_train(cfg: &PipelineConfig) -> Result<StageResult> {
    let mut inputs = token_files(cfg);
    inputs.push(("phase1", cfg.run_path().join("pretrain/checkpoint.json"), "pretrain"));
    let (manifest, unchanged) = stage_manifest(cfg, "train", &inputs)?;
    if unchanged {
        return Ok(StageResult { skipped: true, message: "train: inputs unchanged, skipping".into() });
    }
    let art = load_artifacts(cfg)?;
    let mut model = Model::build(cfg, &art)?;
    let ckpt = Checkpoint::load(&cfg.run_path().join("pretrain/checkpoint.json"))?;
    model.ps.restore(&ckpt)?;
    if !cfg.decoder.trainable {
        Decoder::freeze_core(&mut model.ps);
    }
    let users: Vec<(String, Vec<RawEvent>)> = art
        .dataset
        .events_by_user()
        .into_iter()
        .map(|(u, evs)| (u.to_string(), evs.into_iter().cloned().collect()))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x51ed2701));
    let mut adam = Adam::new(OptimConfig {
        lr: cfg.train.lr,
        warmup: cfg.train.warmup,
        clip: cfg.train.clip,
        ..OptimConfig::default()
    });
    let steps = cfg.train.phase2_epochs * cfg.train.steps_per_epoch;
    let records = run_steps(&model.ps, &mut adam, steps, |_| {
        model.phase2_loss(&users, &mut rng)
    })?;
    let dir = cfg.run_path().join("train");
    std::fs::create_dir_all(&dir)?;
    model.ps.snapshot().save(&dir.join("checkpoint.json"))?;
    write_metrics_jsonl(&dir.join("metrics.jsonl"), &records)?;
    finish_stage(cfg, "train", &manifest)?;
    let first = records.first().map(|r| r.loss).unwrap_or(0.0);
    let last = records.last().map(|r| r.loss).unwrap_or(0.0);
    Ok(StageResult {
        skipped: false,
        message: format!(
            "train: {} steps over {} epochs, infonce {first:.4} -> {last:.4}",
            records.len(),
            cfg.train.phase2_epochs
        ),
    })
}

struct EvalCase {
    history: Vec<RawEvent>,
    target_ts: DateTime<Utc>,
    target: usize,
}

pub fn evaluate_model(cfg: &PipelineConfig, art: &Artifacts, ckpt: &Checkpoint) -> Result<EvalReport> {
    let w = cfg.train.history_window;
    let mut cases = Vec::new();
    let mut skipped = 0usize;
    for (_, evs) in art.dataset.events_by_user() {
        match crate::eval::leave_one_out(&evs) {
            None => skipped += 1,
            Some((hist, last)) => {
                let start = hist.len().saturating_sub(w);
                let target: usize = last.behavior_id[1..]
                    .parse()
                    .map_err(|_| LumError::Validation(format!("bad behavior id {}", last.behavior_id)))?;
                cases.push(EvalCase {
                    history: hist[start..].iter().map(|e| (*e).clone()).collect(),
                    target_ts: last.ts,
                    target,
                });
            }
        }
        if cfg.eval.max_users > 0 && cases.len() >= cfg.eval.max_users {
            break;
        }
    }
    let ranks = par_map(
        &cases,
        cfg.eval.threads,
        || {
            // Per-worker model rebuild: tensors are not thread-safe, but
            // config + artifacts + checkpoint reproduce the model exactly.
            let mut model = Model::build(cfg, art).expect("model rebuild");
            model.ps.restore(ckpt).expect("checkpoint restore");
            let fused = model.fuse_catalog_const().expect("fusion");
            (model, fused)
        },
        |(model, fused), case| -> Result<usize> {
            let input = model.case_input(fused, &case.history, case.target_ts)?;
            let scores: Vec<f64> = fused
                .iter()
                .map(|f| model.score_candidate(&input, f).map(|t| t.item()))
                .collect::<Result<_>>()?;
            Ok(rank_of(&scores, case.target))
        },
    )
    .into_iter()
    .collect::<Result<Vec<usize>>>()?;
    Ok(evaluate_ranks(&ranks, skipped, &cfg.eval.ks, art.dataset.behaviors.len()))
}

pub fn stage_evaluate(cfg: &PipelineConfig) -> Result<(StageResult, EvalReport)> {
    let mut inputs = token_files(cfg);
    inputs.push(("model", cfg.run_path().join("train/checkpoint.json"), "train"));
    let (manifest, unchanged) = stage_manifest(cfg, "evaluate", &inputs)?;
    let dir = cfg.run_path().join("evaluate");
    if unchanged {
        let report: EvalReport =
            serde_json::from_str(&std::fs::read_to_string(dir.join("metrics.json"))?)?;
        return Ok((
            StageResult { skipped: true, message: "evaluate: inputs unchanged, skipping".into() },
            report,
        ));
    }
    let art = load_artifacts(cfg)?;
    let ckpt = Checkpoint::load(&cfg.run_path().join("train/checkpoint.json"))?;
    let report = evaluate_model(cfg, &art, &ckpt)?;
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("metrics.json"), serde_json::to_string_pretty(&report)?)?;
    finish_stage(cfg, "evaluate", &manifest)?;
    Ok((
        StageResult { skipped: false, message: render_report(&report) },
        report,
    ))
}

pub fn render_report(report: &EvalReport) -> String {
    let mut lines = vec![format!(
        "evaluate: {} users ({} skipped)",
        report.users, report.skipped
    )];
    for (k, r) in &report.recall {
        lines.push(format!("  R@{k:<4} {r:.4}   NDCG@{k:<4} {:.4}", report.ndcg[k]));
    }
    for k in &report.clamped_k {
        lines.push(format!("  warning: K={k} exceeds the catalog; clamped"));
    }
    lines.join("\n")
}

// ---------------------------------------------------------------------------
// Ablation
// ---------------------------------------------------------------------------

/// Run the full pipeline for each variant x seed and aggregate the metrics.
pub fn stage_ablate(cfg: &PipelineConfig, axis: &str, seeds: &[u64]) -> Result<AblationReport> {
    if seeds.is_empty() {
        return Err(LumError::Config("ablate needs at least one seed".into()));
    }
    let variants: Vec<(&str, Vec<String>)> = match axis {
        "placement" => vec![
            ("front", vec!["decoder.placement=\"front\"".into()]),
            ("end", vec!["decoder.placement=\"end\"".into()]),
            ("none", vec!["decoder.placement=\"none\"".into()]),
        ],
        "timestamp" => vec![
            ("full", vec!["train.timestamp_mode=\"full\"".into()]),
            ("position_only", vec!["train.timestamp_mode=\"position_only\"".into()]),
            ("none", vec!["train.timestamp_mode=\"none\"".into()]),
        ],
        "fusion" => vec![
            ("qformer", vec!["train.fusion=\"q_former\"".into()]),
            ("text_only", vec!["train.fusion=\"text_only\"".into()]),
        ],
        other => {
            return Err(LumError::Config(format!(
                "unknown ablation axis '{other}' (placement|timestamp|fusion)"
            )))
        }
    };
    let base = serde_json::to_value(cfg)?;
    let mut report = AblationReport::default();
    for (name, overrides) in &variants {
        let mut per_seed = Vec::new();
        for &seed in seeds {
            let mut tree = base.clone();
            set_json_path(&mut tree, "seed", &seed.to_string())?;
            let sub = cfg.run_path().join("ablate").join(axis).join(format!("{name}-s{seed}"));
            set_json_path(&mut tree, "run_dir", &serde_json::to_string(&sub.to_string_lossy())?)?;
            for ov in overrides {
                let (k, v) = ov.split_once('=').unwrap();
                set_json_path(&mut tree, k, v)?;
            }
            let vcfg: PipelineConfig = serde_json::from_value(tree)
                .map_err(|e| LumError::Config(format!("invalid ablation config: {e}")))?;
            stage_gen_data(&vcfg)?;
            stage_build_tokens(&vcfg)?;
            stage_pretrain(&vcfg)?;
            stage_train(&vcfg)?;
            let (_, rep) = stage_evaluate(&vcfg)?;
            per_seed.push(rep);
        }
        report.add_variant(name, &per_seed);
    }
    let dir = cfg.run_path().join("ablate");
    std::fs::create_dir_all(&dir)?;
    std::fs::write(
        dir.join(format!("{axis}.json")),
        serde_json::to_string_pretty(&report)?,
    )?;
    Ok(report)
}

pub fn render_ablation(report: &AblationReport) -> String {
    let mut lines = Vec::new();
    for (variant, metrics) in &report.variants {
        let mut cells: Vec<String> = Vec::new();
        for (metric, m) in metrics {
            cells.push(format!("{metric} {:.4}±{:.4}", m.mean, m.sd));
        }
        lines.push(format!("{variant:<14} {}", cells.join("  ")));
    }
    lines.join("\n")
}

// ---------------------------------------------------------------------------
// Gradient verification
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradCheckLine {
    pub name: String,
    pub max_rel_err: f64,
    pub passed: bool,
}

/// Numeric verification across primitives and the composite losses; any
/// failure should make the caller exit with the verification code.
pub fn run_gradcheck() -> Result<Vec<GradCheckLine>> {
    use crate::tensor::{grad_check, matmul, mean, softmax_rows};
    let mut lines = Vec::new();
    let mut push = |name: &str, r: crate::tensor::GradCheckReport| {
        lines.push(GradCheckLine {
            name: name.to_string(),
            max_rel_err: r.max_rel_err,
            passed: r.passed(),
        });
    };
    let mk = |rng: &mut ChaCha8Rng, n: usize, shape: &[usize]| {
        Tensor::new((0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(), shape, true)
    };

    // Primitive composite across ten independent seeds.
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let a = mk(&mut rng, 6, &[2, 3]);
        let b2 = mk(&mut rng, 6, &[3, 2]);
        push(
            &format!("matmul+softmax seed {seed}"),
            grad_check(
                |xs| mean(&softmax_rows(&matmul(&xs[0], &xs[1]).unwrap())),
                &[a, b2],
                1e-5,
                1e-4,
            )?,
        );
    }
    for seed in 0..10u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(41 + seed);

    let mut ps = ParamSet::new();
    let qcfg = QFormerConfig {
        num_queries: 2,
        dim: 4,
        layers: 1,
        heads: 2,
        text_dim: 4,
        ..QFormerConfig::default()
    };
    let qf = QFormer::init(&mut ps, &qcfg, &[2, 2], 3, &mut rng);
    let tower = TextTower::init(
        &mut ps,
        build_vocab(&["net slow", "call drop"]),
        4,
        4,
        2,
        &mut rng,
    );
    let head = MatchingHead::init(&mut ps, 4, &mut rng);
    let dcfg = DecoderConfig {
        layers: 1,
        dim: 4,
        heads: 2,
        max_len: 8,
        input_dim: 4,
        placement: Placement::Front,
        trainable: true,
    };
    let dec = Decoder::init(&mut ps, &dcfg, &mut rng);
    let scorer = Scorer::init(&mut ps, ScoreMode::Head, 4);
    ps.get("scorer.w").set_data(&[0.3, -0.2, 0.5, 0.1]);
    let all: Vec<Tensor> = ps.iter().map(|(_, t)| t.clone()).collect();

    let biz = [vec![vec![0.2, -0.1, 0.4]], vec![vec![-0.3, 0.2, 0.1]]];
    push(
        &format!("phase1 six-loss sum seed {seed}"),
        grad_check(
            |_| {
                let f0 = qf.fuse_behavior(&[0, 1], &biz[0]).unwrap();
                let f1 = qf.fuse_behavior(&[1, 0], &biz[1]).unwrap();
                let t0 = tower.text_embedding("net slow").unwrap();
                let t1 = tower.text_embedding("call drop").unwrap();
                let mut l = loss_contrastive(&[f0.clone(), f1.clone()], &[t0.clone(), t1], 0.5).unwrap();
                l = add(&l, &loss_matching(&head, &f0, &t0, true).unwrap());
                let q = qf.fuse_queries(&[0, 0], &biz[0]).unwrap();
                add(&l, &tower.generation_loss(Some(&q), "net drop").unwrap())
            },
            &all,
            1e-5,
            1e-4,
        )?,
    );

    push(
        &format!("phase2 infonce step seed {seed}"),
        grad_check(
            |_| {
                let f0 = qf.fuse_behavior(&[0, 1], &biz[0]).unwrap();
                let f1 = qf.fuse_behavior(&[1, 0], &biz[1]).unwrap();
                let hist = vec![(DecToken::Fused(f0.clone()), 0.0)];
                let target = (DecToken::Fused(f1.clone()), 1.0);
                let u = dec.user_embedding(&dec.arrange(&hist, &target)).unwrap();
                let s_pos = scorer.score(&u, &u).unwrap();
                let hist2 = vec![(DecToken::Fused(f1), 0.0)];
                let target2 = (DecToken::Fused(f0), 1.0);
                let u2 = dec.user_embedding(&dec.arrange(&hist2, &target2)).unwrap();
                let s_neg = scorer.score(&u2, &u2).unwrap();
                crate::qformer::infonce(&s_pos, &[s_neg], 0.7)
            },
            &all,
            1e-5,
            1e-4,
        )?,
    );
    }
    Ok(lines)
}
