//! Synthetic event-stream generator with planted, replay-verifiable rules.
//!
//! Each user's next behavior follows a deterministic rule of the previous
//! behavior, its period class, and whether the previous interval was a
//! burst (two or more events); with probability `noise` the rule is
//! replaced by a uniform draw. Behavior texts deliberately collide within
//! a family while the attribute table stays fully discriminative, so
//! text-only models hit a ceiling that multi-modal fusion can pass.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;

use chrono::Duration;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::business::{AttrValue, AttributeTable, ColumnKind, ColumnSpec, TableSchema};
use crate::error::{LumError, Result};
use crate::timestamp::{assign_interval, PeriodClass, RawEvent, TimestampConfig};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenSpec {
    pub users: usize,
    pub catalog: usize,
    pub days: u32,
    pub interval_minutes: u32,
    pub noise: f64,
    pub seed: u64,
    pub families: usize,
    /// Probability that a session emits a second event in the same interval.
    pub burst_prob: f64,
    /// Fraction of active user-days labeled with a scenario description.
    pub scenario_rate: f64,
    pub max_sessions_per_day: u32,
    /// Fraction of users whose days start with the reserved marker
    /// behavior; a marker earlier in the day shifts the rule output, so
    /// target-dependent datasets need joint target/history reasoning.
    pub marker_fraction: f64,
}

impl Default for GenSpec {
    fn default() -> GenSpec {
        GenSpec {
            users: 1000,
            catalog: 50,
            days: 30,
            interval_minutes: 15,
            noise: 0.1,
            seed: 7,
            families: 5,
            burst_prob: 0.35,
            scenario_rate: 0.05,
            max_sessions_per_day: 3,
            marker_fraction: 0.0,
        }
    }
}

impl GenSpec {
    pub fn validate(&self) -> Result<()> {
        if self.catalog < 10 {
            return Err(LumError::Config(format!(
                "catalog must be at least 10, got {}",
                self.catalog
            )));
        }
        if !(0.0..0.5).contains(&self.noise) {
            return Err(LumError::Config(format!(
                "noise must lie in [0, 0.5), got {}",
                self.noise
            )));
        }
        if self.users == 0 || self.days == 0 || self.max_sessions_per_day == 0 {
            return Err(LumError::Config("users, days and sessions must be positive".into()));
        }
        if self.families < 2 || self.families > self.catalog {
            return Err(LumError::Config(format!(
                "families must lie in [2, catalog], got {}",
                self.families
            )));
        }
        if !(0.0..=1.0).contains(&self.scenario_rate)
            || !(0.0..=1.0).contains(&self.burst_prob)
            || !(0.0..=1.0).contains(&self.marker_fraction)
        {
            return Err(LumError::Config("rates must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn timestamp_config(&self) -> TimestampConfig {
        TimestampConfig {
            interval_minutes: self.interval_minutes,
            ..TimestampConfig::default()
        }
    }
}

const FAMILY_NAMES: [&str; 8] = [
    "stream", "chat", "browse", "pay", "game", "music", "mail", "map",
];
const VARIANT_WORDS: [&str; 3] = ["quick", "long", "retry"];

/// Distinct per-period offsets; at least three period classes disagree,
/// so sequences carry real timestamp signal.
const PERIOD_OFFSETS: [usize; 6] = [1, 5, 9, 17, 23, 29];
const BURST_OFFSET: usize = 7;
const ANCHOR_OFFSET: usize = 11;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Behavior {
    pub id: String,
    pub index: usize,
    pub family: String,
    pub text: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Scenario {
    pub user_id: String,
    pub day: u32,
    pub text: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Dataset {
    pub spec: GenSpec,
    pub behaviors: Vec<Behavior>,
    pub events: Vec<RawEvent>,
    pub attributes: AttributeTable,
    pub schema: TableSchema,
    pub scenarios: Vec<Scenario>,
    /// Number of user-days that were eligible for a scenario label.
    pub scenario_candidates: usize,
}

pub fn behavior_id(index: usize) -> String {
    format!("b{index:03}")
}

pub fn family_of(index: usize, spec: &GenSpec) -> usize {
    index % spec.families
}

/// Rule context observable from the history prefix alone.
#[derive(Debug, Clone, Copy)]
pub struct RuleCtx {
    pub prev: usize,
    pub period: PeriodClass,
    pub burst: bool,
    /// Marker behavior seen earlier the same day.
    pub marker: bool,
}

/// Reserved marker behavior; never produced by the rule or noise draws
/// when markers are enabled, so replay can identify forced events exactly.
pub fn marker_index(spec: &GenSpec) -> usize {
    spec.catalog - 1
}

/// Number of behaviors the rule and noise draws range over.
fn rule_range(spec: &GenSpec) -> usize {
    if spec.marker_fraction > 0.0 {
        spec.catalog - 1
    } else {
        spec.catalog
    }
}

pub fn rule_next(spec: &GenSpec, ctx: &RuleCtx) -> usize {
    let mut x = ctx.prev + PERIOD_OFFSETS[ctx.period.index()];
    if ctx.burst {
        x += BURST_OFFSET;
    }
    if ctx.marker {
        x += ANCHOR_OFFSET;
    }
    x % rule_range(spec)
}

fn make_catalog(spec: &GenSpec) -> Vec<Behavior> {
    (0..spec.catalog)
        .map(|i| {
            let fam = FAMILY_NAMES[family_of(i, spec) % FAMILY_NAMES.len()];
            let variant = VARIANT_WORDS[(i / spec.families) % VARIANT_WORDS.len()];
            Behavior {
                id: behavior_id(i),
                index: i,
                family: fam.to_string(),
                // Texts repeat across same-family behaviors on purpose.
                text: format!("{variant} {fam} session"),
            }
        })
        .collect()
}

fn make_attributes(spec: &GenSpec, catalog: &[Behavior]) -> (AttributeTable, TableSchema) {
    let families: Vec<String> = FAMILY_NAMES
        .iter()
        .take(spec.families.min(FAMILY_NAMES.len()))
        .map(|s| s.to_string())
        .collect();
    let schema = TableSchema {
        columns: vec![
            ColumnSpec {
                name: "family".into(),
                kind: ColumnKind::Categorical(families),
            },
            ColumnSpec {
                name: "code".into(),
                kind: ColumnKind::Numeric {
                    min: 0.0,
                    max: (spec.catalog - 1) as f64,
                },
            },
            ColumnSpec {
                name: "slot".into(),
                kind: ColumnKind::Numeric {
                    min: 0.0,
                    max: (spec.catalog / spec.families) as f64,
                },
            },
        ],
    };
    let mut table: AttributeTable = BTreeMap::new();
    for b in catalog {
        let mut row = BTreeMap::new();
        row.insert("family".to_string(), AttrValue::Cat(b.family.clone()));
        row.insert("code".to_string(), AttrValue::Num(b.index as f64));
        row.insert(
            "slot".to_string(),
            AttrValue::Num((b.index / spec.families) as f64),
        );
        table.insert(b.id.clone(), row);
    }
    (table, schema)
}

/// Session start minutes, weighted toward rush hours and noon so several
/// period classes appear with useful frequency.
const SESSION_MINUTES: [u32; 10] = [100, 420, 480, 540, 660, 720, 900, 1080, 1140, 1320];

struct Timeline {
    /// (day, minute) per event, chronologically sorted.
    slots: Vec<(u32, u32)>,
    /// Day indices that had at least one session.
    active_days: Vec<u32>,
}

fn build_timeline(spec: &GenSpec, rng: &mut ChaCha8Rng) -> Timeline {
    let mut slots = Vec::new();
    let mut active_days = Vec::new();
    for day in 0..spec.days {
        let sessions = rng.gen_range(1..=spec.max_sessions_per_day);
        let mut minutes: Vec<u32> = (0..sessions)
            .map(|_| SESSION_MINUTES[rng.gen_range(0..SESSION_MINUTES.len())])
            .collect();
        minutes.sort_unstable();
        minutes.dedup();
        if minutes.is_empty() {
            continue;
        }
        active_days.push(day);
        for m in minutes {
            // Align to the interval start so burst events share the interval.
            let base = (m / spec.interval_minutes) * spec.interval_minutes;
            slots.push((day, base));
            if rng.gen_bool(spec.burst_prob) {
                slots.push((day, base + 1));
            }
        }
    }
    Timeline { slots, active_days }
}

/// Rule context for event `i` given behaviors of events before `i`.
/// `prefix_interval_count` is how many earlier events share the previous
/// event's interval, so burst detection only uses the observable prefix.
fn context_at(
    i: usize,
    behaviors: &[usize],
    periods: &[PeriodClass],
    prefix_interval_count: u64,
    marker_today: bool,
) -> RuleCtx {
    debug_assert!(i >= 1 && behaviors.len() >= i);
    RuleCtx {
        prev: behaviors[i - 1],
        period: periods[i - 1],
        burst: prefix_interval_count >= 2,
        marker: marker_today,
    }
}

pub fn generate(spec: &GenSpec) -> Result<Dataset> {
    spec.validate()?;
    let ts_cfg = spec.timestamp_config();
    let catalog = make_catalog(spec);
    let (attributes, schema) = make_attributes(spec, &catalog);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut events = Vec::new();
    let mut scenarios = Vec::new();
    let mut scenario_candidates = 0usize;

    for u in 0..spec.users {
        let user_id = format!("u{u:04}");
        let timeline = build_timeline(spec, &mut rng);
        let n = timeline.slots.len();
        if n == 0 {
            continue;
        }
        let mut stamps = Vec::with_capacity(n);
        let mut time_ids = Vec::with_capacity(n);
        let mut periods = Vec::with_capacity(n);
        for &(day, minute) in &timeline.slots {
            let ts = ts_cfg.epoch
                + Duration::days(day as i64)
                + Duration::minutes(minute as i64);
            let d = assign_interval(ts, &ts_cfg)?;
            stamps.push(ts);
            time_ids.push(d.time_id);
            periods.push(d.period_class);
        }

        let is_marker_user = spec.marker_fraction > 0.0 && rng.gen_bool(spec.marker_fraction);
        let mut behaviors: Vec<usize> = Vec::with_capacity(n);
        let mut interval_counts: BTreeMap<u64, u64> = BTreeMap::new();
        let mut marker_today = false;
        let day_of: Vec<u32> = timeline.slots.iter().map(|(d, _)| *d).collect();
        for i in 0..n {
            if i == 0 || day_of[i] != day_of[i - 1] {
                marker_today = false;
            }
            let day_first = i == 0 || day_of[i] != day_of[i - 1];
            let b = if is_marker_user && day_first {
                marker_index(spec)
            } else if i == 0 {
                rng.gen_range(0..rule_range(spec))
            } else {
                let prev_count = interval_counts.get(&time_ids[i - 1]).copied().unwrap_or(0);
                let ctx = context_at(i, &behaviors, &periods, prev_count, marker_today);
                if rng.gen_bool(spec.noise) {
                    rng.gen_range(0..rule_range(spec))
                } else {
                    rule_next(spec, &ctx)
                }
            };
            behaviors.push(b);
            *interval_counts.entry(time_ids[i]).or_insert(0) += 1;
            if spec.marker_fraction > 0.0 && b == marker_index(spec) {
                marker_today = true;
            }
        }

        for i in 0..n {
            events.push(RawEvent {
                user_id: user_id.clone(),
                behavior_id: behavior_id(behaviors[i]),
                ts: stamps[i],
            });
        }

        // Scenario labels over active days.
        for &day in &timeline.active_days {
            scenario_candidates += 1;
            if rng.gen_bool(spec.scenario_rate) {
                let day_events: Vec<usize> = timeline
                    .slots
                    .iter()
                    .enumerate()
                    .filter(|(_, (d, _))| *d == day)
                    .map(|(i, _)| behaviors[i])
                    .collect();
                let mut fam_counts = vec![0usize; spec.families];
                for &b in &day_events {
                    fam_counts[family_of(b, spec)] += 1;
                }
                let top = fam_counts
                    .iter()
                    .enumerate()
                    .max_by_key(|&(i, c)| (*c, std::cmp::Reverse(i)))
                    .map(|(i, _)| i)
                    .unwrap_or(0);
                let fam = FAMILY_NAMES[top % FAMILY_NAMES.len()];
                let date = ts_cfg.epoch + Duration::days(day as i64);
                let day_word = match date.format("%u").to_string().parse::<u32>().unwrap() {
                    6 | 7 => "weekend",
                    _ => "weekday",
                };
                scenarios.push(Scenario {
                    user_id: user_id.clone(),
                    day,
                    text: format!("{day_word} {fam} heavy day"),
                });
            }
        }
    }

    Ok(Dataset {
        spec: spec.clone(),
        behaviors: catalog,
        events,
        attributes,
        schema,
        scenarios,
        scenario_candidates,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenSummary {
    pub users: usize,
    pub events: usize,
    pub catalog: usize,
    pub scenarios: usize,
    pub scenario_rate: f64,
    pub rule_agreement: f64,
}

impl Dataset {
    pub fn events_by_user(&self) -> BTreeMap<&str, Vec<&RawEvent>> {
        let mut map: BTreeMap<&str, Vec<&RawEvent>> = BTreeMap::new();
        for e in &self.events {
            map.entry(e.user_id.as_str()).or_default().push(e);
        }
        map
    }

    /// Replay every user's history through the planted rule and report the
    /// fraction of successor events the rule explains. Should sit near
    /// 1 - noise (noise draws can coincide with the rule by chance).
    pub fn rule_agreement(&self) -> Result<f64> {
        let ts_cfg = self.spec.timestamp_config();
        let markers = self.spec.marker_fraction > 0.0;
        let marker = marker_index(&self.spec);
        let mut hits = 0usize;
        let mut total = 0usize;
        for (_, evs) in self.events_by_user() {
            let mut behaviors: Vec<usize> = Vec::with_capacity(evs.len());
            let mut time_ids: Vec<u64> = Vec::with_capacity(evs.len());
            let mut periods: Vec<PeriodClass> = Vec::with_capacity(evs.len());
            let mut interval_counts: BTreeMap<u64, u64> = BTreeMap::new();
            let mut marker_today = false;
            let mut last_day = None;
            for (i, e) in evs.iter().enumerate() {
                let d = assign_interval(e.ts, &ts_cfg)?;
                let day = e.ts.date_naive();
                if last_day != Some(day) {
                    marker_today = false;
                    last_day = Some(day);
                }
                let b: usize = e.behavior_id[1..]
                    .parse()
                    .map_err(|_| LumError::Validation(format!("bad behavior id {}", e.behavior_id)))?;
                // Forced marker events are not rule predictions.
                let forced = markers && b == marker;
                if i > 0 && !forced {
                    let prev_count = interval_counts.get(&time_ids[i - 1]).copied().unwrap_or(0);
                    let ctx = context_at(i, &behaviors, &periods, prev_count, marker_today);
                    total += 1;
                    if rule_next(&self.spec, &ctx) == b {
                        hits += 1;
                    }
                }
                behaviors.push(b);
                time_ids.push(d.time_id);
                periods.push(d.period_class);
                *interval_counts.entry(d.time_id).or_insert(0) += 1;
                if markers && b == marker {
                    marker_today = true;
                }
            }
        }
        if total == 0 {
            return Err(LumError::Validation("no successor events to replay".into()));
        }
        Ok(hits as f64 / total as f64)
    }

    pub fn describe(&self) -> Result<GenSummary> {
        let users = self.events_by_user().len();
        Ok(GenSummary {
            users,
            events: self.events.len(),
            catalog: self.behaviors.len(),
            scenarios: self.scenarios.len(),
            scenario_rate: if self.scenario_candidates == 0 {
                0.0
            } else {
                self.scenarios.len() as f64 / self.scenario_candidates as f64
            },
            rule_agreement: self.rule_agreement()?,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut f = std::fs::File::create(dir.join("events.jsonl"))?;
        for e in &self.events {
            writeln!(f, "{}", serde_json::to_string(e)?)?;
        }
        std::fs::write(dir.join("catalog.json"), serde_json::to_string_pretty(&self.behaviors)?)?;
        std::fs::write(
            dir.join("attributes.json"),
            serde_json::to_string_pretty(&(&self.schema, &self.attributes))?,
        )?;
        let mut f = std::fs::File::create(dir.join("scenarios.jsonl"))?;
        for s in &self.scenarios {
            writeln!(f, "{}", serde_json::to_string(s)?)?;
        }
        std::fs::write(
            dir.join("genspec.json"),
            serde_json::to_string_pretty(&(&self.spec, self.scenario_candidates))?,
        )?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Dataset> {
        let (spec, scenario_candidates): (GenSpec, usize) =
            serde_json::from_str(&std::fs::read_to_string(dir.join("genspec.json"))?)?;
        let behaviors: Vec<Behavior> =
            serde_json::from_str(&std::fs::read_to_string(dir.join("catalog.json"))?)?;
        let (schema, attributes): (TableSchema, AttributeTable) =
            serde_json::from_str(&std::fs::read_to_string(dir.join("attributes.json"))?)?;
        let events = std::fs::read_to_string(dir.join("events.jsonl"))?
            .lines()
            .map(serde_json::from_str)
            .collect::<std::result::Result<Vec<RawEvent>, _>>()?;
        let scenarios = std::fs::read_to_string(dir.join("scenarios.jsonl"))?
            .lines()
            .map(serde_json::from_str)
            .collect::<std::result::Result<Vec<Scenario>, _>>()?;
        Ok(Dataset {
            spec,
            behaviors,
            events,
            attributes,
            schema,
            scenarios,
            scenario_candidates,
        })
    }
}
