//! Acceptance gate: one test per criterion, each printing a single
//! pass/fail line. Tolerances are pinned here, not in library code.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use chrono::{TimeZone, Utc};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use lum_core::decoder::{DecToken, Decoder, DecoderConfig, Placement};
use lum_core::eval::{evaluate_ranks, ndcg_at_k, rank_of, recall_at_k};
use lum_core::params::ParamSet;
use lum_core::pipeline::{
    load_config, run_gradcheck, stage_ablate, stage_build_tokens, stage_evaluate, stage_gen_data,
    stage_pretrain, stage_train, PipelineConfig,
};
use lum_core::semantic::{build_semantic_ids, TokenizerConfig};
use lum_core::timestamp::{
    assign_interval, reshape_sequence, DayClass, PeriodClass, RawEvent, TimestampConfig, Token,
};

fn verdict(criterion: usize, name: &str, pass: bool, detail: &str) {
    println!(
        "criterion {criterion:>2} {} [{}] {detail}",
        if pass { "PASS" } else { "FAIL" },
        name
    );
    assert!(pass, "criterion {criterion} ({name}) failed: {detail}");
}

// -- Criterion 1: gradient soundness --------------------------------------

#[test]
fn criterion_01_gradient_soundness() {
    let start = Instant::now();
    let lines = run_gradcheck().expect("gradcheck runs");
    let worst = lines
        .iter()
        .map(|l| l.max_rel_err)
        .fold(0.0f64, f64::max);
    let all_pass = lines.iter().all(|l| l.passed);
    let elapsed = start.elapsed().as_secs_f64();
    // Pinned: rel err <= 1e-4, >= 10 seeds per check family, < 120 s.
    let seeds = lines.iter().filter(|l| l.name.contains("seed")).count();
    verdict(
        1,
        "gradient soundness",
        all_pass && elapsed < 120.0 && seeds >= 30,
        &format!("{} checks, worst rel err {worst:.2e}, {elapsed:.1}s", lines.len()),
    );
}

// -- Criterion 2: causal masking ------------------------------------------

#[test]
fn criterion_02_causality() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut ps = ParamSet::new();
    let cfg = DecoderConfig {
        layers: 2,
        dim: 8,
        heads: 2,
        max_len: 16,
        input_dim: 8,
        placement: Placement::End,
        trainable: true,
    };
    let dec = Decoder::init(&mut ps, &cfg, &mut rng);
    let fused = |rng: &mut ChaCha8Rng| {
        lum_core::tensor::Tensor::new(
            (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            &[8],
            false,
        )
    };
    let hist: Vec<(DecToken, f64)> = (0..5)
        .map(|i| (DecToken::Fused(fused(&mut rng)), i as f64))
        .collect();
    let target = (DecToken::Fused(fused(&mut rng)), 5.0);
    let base = dec.forward(&dec.arrange(&hist, &target)).unwrap();
    // Perturb the final (target) token; all earlier rows must be bitwise
    // identical, and the final row must change.
    let mut hist2 = hist.clone();
    let _ = &mut hist2;
    let target2 = (DecToken::Fused(fused(&mut rng)), 5.0);
    let alt = dec.forward(&dec.arrange(&hist, &target2)).unwrap();
    let n = base.shape()[0];
    let d = base.shape()[1];
    let bd = base.data();
    let ad = alt.data();
    let prefix_bitwise = (0..(n - 1) * d).all(|i| bd[i].to_bits() == ad[i].to_bits());
    let last_changed = ((n - 1) * d..n * d).any(|i| bd[i] != ad[i]);
    verdict(
        2,
        "causal masking",
        prefix_bitwise && last_changed,
        &format!("{} prefix rows bitwise stable under future edits", n - 1),
    );
}

// -- Criterion 3: placement dichotomy --------------------------------------

#[test]
fn criterion_03_placement() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mk = |rng: &mut ChaCha8Rng| {
        lum_core::tensor::Tensor::new(
            (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            &[8],
            false,
        )
    };
    let hist: Vec<(DecToken, f64)> = (0..4).map(|i| (DecToken::Fused(mk(&mut rng)), i as f64)).collect();
    let t1 = (DecToken::Fused(mk(&mut rng)), 4.0);
    let t2 = (DecToken::Fused(mk(&mut rng)), 4.0);

    let build = |placement: Placement, rng_seed: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let mut ps = ParamSet::new();
        let cfg = DecoderConfig {
            layers: 1,
            dim: 8,
            heads: 2,
            max_len: 16,
            input_dim: 8,
            placement,
            trainable: true,
        };
        Decoder::init(&mut ps, &cfg, &mut rng)
    };

    // Front: user embedding (last row) is target-aware.
    let front = build(Placement::Front, 9);
    let f1 = front.user_embedding(&front.arrange(&hist, &t1)).unwrap();
    let f2 = front.user_embedding(&front.arrange(&hist, &t2)).unwrap();
    let front_aware = f1.data().iter().zip(f2.data()).any(|(a, b)| a != b);

    // End: history rows never see the target (bitwise), only the final
    // target row differs.
    let end = build(Placement::End, 9);
    let e1 = end.forward(&end.arrange(&hist, &t1)).unwrap();
    let e2 = end.forward(&end.arrange(&hist, &t2)).unwrap();
    let d = e1.shape()[1];
    let rows = e1.shape()[0];
    let e1d = e1.data();
    let e2d = e2.data();
    let end_history_blind =
        (0..(rows - 1) * d).all(|i| e1d[i].to_bits() == e2d[i].to_bits());

    // None: the target never enters; output is bitwise target-independent.
    let none = build(Placement::None, 9);
    let n1 = none.forward(&none.arrange(&hist, &t1)).unwrap();
    let n2 = none.forward(&none.arrange(&hist, &t2)).unwrap();
    let none_blind = n1
        .data()
        .iter()
        .zip(n2.data())
        .all(|(a, b)| a.to_bits() == b.to_bits());

    verdict(
        3,
        "placement dichotomy",
        front_aware && end_history_blind && none_blind,
        "front target-aware, end history-blind, none target-blind",
    );
}

// -- Criterion 4: timestamp worked examples --------------------------------

#[test]
fn criterion_04_timestamp() {
    let cfg = TimestampConfig::default();
    let mut ok = true;
    let mut notes = Vec::new();

    // 2025-01-01 is a Wednesday. 08:07 falls in interval 32 of the day
    // (8*60+7 = 487 minutes, 487/15 = 32) during the morning rush.
    let d = assign_interval(Utc.with_ymd_and_hms(2025, 1, 1, 8, 7, 0).unwrap(), &cfg).unwrap();
    ok &= d.time_id == 32
        && d.day_class == DayClass::Weekday
        && d.period_class == PeriodClass::MorningRush;
    if d.time_id != 32 {
        notes.push(format!("time_id {} != 32", d.time_id));
    }

    // Same wall-clock time on Saturday 2025-01-04: weekend demotes the
    // rush class; time_id counts from the epoch (3 days * 96 intervals).
    let w = assign_interval(Utc.with_ymd_and_hms(2025, 1, 4, 8, 7, 0).unwrap(), &cfg).unwrap();
    ok &= w.time_id == 3 * 96 + 32
        && w.day_class == DayClass::Weekend
        && w.period_class == PeriodClass::NormalMorning;

    // Descriptor table is the 2x6 grid.
    ok &= d.table_index() == 1 && w.table_index() == 6 + 2;

    // Sequence construction: events in one interval share one descriptor,
    // interval changes insert SEP + new descriptor.
    let ev = |h: u32, m: u32| RawEvent {
        user_id: "u".into(),
        behavior_id: "b0".into(),
        ts: Utc.with_ymd_and_hms(2025, 1, 1, h, m, 0).unwrap(),
    };
    let seq = reshape_sequence(&[ev(8, 0), ev(8, 7), ev(8, 20)], &cfg).unwrap();
    let kinds: Vec<&str> = seq
        .tokens
        .iter()
        .map(|t| match t {
            Token::Tds(_) => "TDS",
            Token::Sep => "SEP",
            Token::Behavior { .. } => "B",
        })
        .collect();
    ok &= kinds == ["TDS", "B", "B", "SEP", "TDS", "B"];

    verdict(
        4,
        "timestamp worked examples",
        ok,
        &format!("08:07 -> id 32 rush; weekend demotion; TDS/SEP layout {kinds:?} {}", notes.join(";")),
    );
}

// -- Criterion 5: spectral tokenizer ----------------------------------------

#[test]
fn criterion_05_semantic_ids() {
    // Two well-separated text families must split at the first level.
    let mut catalog: BTreeMap<String, String> = BTreeMap::new();
    for i in 0..8 {
        catalog.insert(format!("b{i:02}"), format!("stream video clip {i}"));
    }
    for i in 8..16 {
        catalog.insert(format!("b{i:02}"), format!("wire transfer payment {i}"));
    }
    let cfg = TokenizerConfig {
        branching: vec![2, 4],
        embed_dim: 24,
        seed: 5,
        ..TokenizerConfig::default()
    };
    let map = build_semantic_ids(&catalog, &cfg, None).unwrap();
    let ok_levels = map.level_sizes == vec![2, 4];
    let first = |id: &str| map.ids[id].path[0];
    let fam_a: Vec<usize> = (0..8).map(|i| first(&format!("b{i:02}"))).collect();
    let fam_b: Vec<usize> = (8..16).map(|i| first(&format!("b{i:02}"))).collect();
    let coherent = fam_a.iter().all(|&c| c == fam_a[0])
        && fam_b.iter().all(|&c| c == fam_b[0])
        && fam_a[0] != fam_b[0];
    let depth_ok = map.ids.values().all(|s| s.path.len() == 2);
    // Determinism: same seed, same assignment.
    let map2 = build_semantic_ids(&catalog, &cfg, None).unwrap();
    let stable = map.ids == map2.ids;
    verdict(
        5,
        "spectral tokenizer",
        ok_levels && coherent && depth_ok && stable,
        &format!("levels {:?}, families split cleanly at level 0", map.level_sizes),
    );
}

// -- Criterion 6: Phase-II loss calibration ---------------------------------

#[test]
fn criterion_06_loss_calibration() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), 11, &[]);
    stage_gen_data(&cfg).unwrap();
    stage_build_tokens(&cfg).unwrap();
    let art = lum_core::pipeline::load_artifacts(&cfg).unwrap();
    let model = lum_core::pipeline::Model::build(&cfg, &art).unwrap();
    let users: Vec<(String, Vec<RawEvent>)> = art
        .dataset
        .events_by_user()
        .into_iter()
        .map(|(u, evs)| (u.to_string(), evs.into_iter().cloned().collect()))
        .collect();
    let m = cfg.train.negatives;
    let expect = ((m + 1) as f64).ln();
    let mut worst = 0.0f64;
    for seed in [1u64, 2, 3] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let loss = model.phase2_loss(&users, &mut rng).unwrap().item();
        worst = worst.max((loss - expect).abs());
    }
    // Pinned: within 0.1 of ln(M+1) at zero-initialized scoring vector.
    verdict(
        6,
        "phase-II init calibration",
        worst < 0.1,
        &format!("|loss - ln({})| <= {worst:.2e} over 3 sample seeds", m + 1),
    );
}

// -- Criterion 7: metric oracles --------------------------------------------

#[test]
fn criterion_07_metric_oracles() {
    // Hand-computed oracles.
    let ranks = [1usize, 3, 6, 2, 11];
    let (r5, clamped) = recall_at_k(&ranks, 5, 50);
    let pinned_recall = (r5 - 3.0 / 5.0).abs() < 1e-12 && !clamped;
    // NDCG@5: ranks 1,3,2 contribute 1, 1/log2(4), 1/log2(3).
    let expect = (1.0 + 1.0 / 4f64.log2() + 1.0 / 3f64.log2()) / 5.0;
    let pinned_ndcg = (ndcg_at_k(&ranks, 5) - expect).abs() < 1e-12;

    // Random-scores Monte Carlo: Recall@K -> K/catalog.
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let catalog = 50;
    let trials = 20_000;
    let mut hits = 0usize;
    for _ in 0..trials {
        let scores: Vec<f64> = (0..catalog).map(|_| rng.gen_range(0.0..1.0)).collect();
        let target = rng.gen_range(0..catalog);
        if rank_of(&scores, target) <= 5 {
            hits += 1;
        }
    }
    let rate = hits as f64 / trials as f64;
    let mc_ok = (rate - 0.10).abs() < 0.01;

    // Aggregation: report math matches the primitives.
    let report = evaluate_ranks(&ranks, 2, &[5], 50);
    let agg_ok = (report.recall[&5] - r5).abs() < 1e-15 && report.users == 5 && report.skipped == 2;

    verdict(
        7,
        "metric oracles",
        pinned_recall && pinned_ndcg && mc_ok && agg_ok,
        &format!("pinned R@5/NDCG@5 exact; random baseline {rate:.3} vs 0.100"),
    );
}

// -- Criterion 10: determinism ----------------------------------------------

#[test]
fn criterion_10_determinism() {
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    for d in [dir_a.path(), dir_b.path()] {
        let cfg = tiny_config(d, 23, &[]);
        stage_gen_data(&cfg).unwrap();
        stage_build_tokens(&cfg).unwrap();
        stage_pretrain(&cfg).unwrap();
        stage_train(&cfg).unwrap();
        stage_evaluate(&cfg).unwrap();
    }
    let a = std::fs::read(dir_a.path().join("evaluate/metrics.json")).unwrap();
    let b = std::fs::read(dir_b.path().join("evaluate/metrics.json")).unwrap();
    verdict(
        10,
        "byte-identical determinism",
        a == b,
        &format!("metrics.json {} bytes, identical across fresh runs", a.len()),
    );
}

// -- Shared tiny config ------------------------------------------------------

fn tiny_config(dir: &Path, seed: u64, extra: &[&str]) -> PipelineConfig {
    let mut overrides = vec![
        format!("run_dir={}", serde_json::to_string(&dir.to_string_lossy()).unwrap()),
        format!("seed={seed}"),
        "data.users=40".to_string(),
        "data.catalog=12".to_string(),
        "data.days=6".to_string(),
        "data.families=3".to_string(),
        "tokenizer.branching=[4,3]".to_string(),
        "tokenizer.embed_dim=16".to_string(),
        "walks.dims=8".to_string(),
        "walks.walks_per_node=4".to_string(),
        "walks.walk_length=10".to_string(),
        "walks.epochs=1".to_string(),
        "qformer.num_queries=2".to_string(),
        "qformer.dim=8".to_string(),
        "qformer.layers=1".to_string(),
        "qformer.heads=2".to_string(),
        "qformer.text_dim=8".to_string(),
        "decoder.layers=1".to_string(),
        "decoder.dim=8".to_string(),
        "decoder.heads=2".to_string(),
        "decoder.max_len=24".to_string(),
        "train.phase1_steps=2".to_string(),
        "train.phase1_batch=4".to_string(),
        "train.phase2_epochs=1".to_string(),
        "train.steps_per_epoch=2".to_string(),
        "train.negatives=3".to_string(),
        "train.history_window=6".to_string(),
        "eval.ks=[1,5]".to_string(),
        "eval.threads=2".to_string(),
        "eval.max_users=10".to_string(),
    ];
    overrides.extend(extra.iter().map(|s| s.to_string()));
    load_config(None, &overrides).unwrap()
}
