//! Timestamp-aware sequence construction: fixed intervals, shared time IDs,
//! semantic interval descriptors and separator tokens.

use chrono::{DateTime, Datelike, NaiveDateTime, Timelike, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{LumError, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawEvent {
    pub user_id: String,
    pub behavior_id: String,
    pub ts: DateTime<Utc>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DayClass {
    Weekday,
    Weekend,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PeriodClass {
    LateNight,
    MorningRush,
    NormalMorning,
    Noon,
    NormalEvening,
    EveningRush,
}

impl PeriodClass {
    pub const ALL: [PeriodClass; 6] = [
        PeriodClass::LateNight,
        PeriodClass::MorningRush,
        PeriodClass::NormalMorning,
        PeriodClass::Noon,
        PeriodClass::NormalEvening,
        PeriodClass::EveningRush,
    ];

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&p| p == self).unwrap()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct IntervalDescriptor {
    pub time_id: u64,
    pub day_class: DayClass,
    pub period_class: PeriodClass,
}

impl IntervalDescriptor {
    /// Index into the 2x6 descriptor embedding table.
    pub fn table_index(&self) -> usize {
        let day = match self.day_class {
            DayClass::Weekday => 0,
            DayClass::Weekend => 1,
        };
        day * PeriodClass::ALL.len() + self.period_class.index()
    }
}

/// Half-open minute-of-day ranges assigning each minute a period class.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PeriodBoundaries {
    pub ranges: Vec<(u32, u32, PeriodClass)>,
}

impl Default for PeriodBoundaries {
    fn default() -> PeriodBoundaries {
        use PeriodClass::*;
        PeriodBoundaries {
            ranges: vec![
                (0, 360, LateNight),        // 00:00-05:59
                (360, 600, MorningRush),    // 06:00-09:59
                (600, 690, NormalMorning),  // 10:00-11:29
                (690, 840, Noon),           // 11:30-13:59
                (840, 1020, NormalEvening), // 14:00-16:59
                (1020, 1260, EveningRush),  // 17:00-20:59
                (1260, 1380, NormalEvening),// 21:00-22:59
                (1380, 1440, LateNight),    // 23:00-23:59
            ],
        }
    }
}

impl PeriodBoundaries {
    pub fn classify(&self, minute_of_day: u32) -> Result<PeriodClass> {
        for &(lo, hi, p) in &self.ranges {
            if (lo..hi).contains(&minute_of_day) {
                return Ok(p);
            }
        }
        Err(LumError::Config(format!(
            "period boundaries do not cover minute {minute_of_day}"
        )))
    }
}

/// Sequence-construction configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TimestampConfig {
    pub interval_minutes: u32,
    pub epoch: DateTime<Utc>,
    #[serde(default)]
    pub period_boundaries: PeriodBoundaries,
    #[serde(default)]
    pub mode: TimestampMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimestampMode {
    #[default]
    Full,
    None,
    PositionOnly,
}

impl std::str::FromStr for TimestampMode {
    type Err = LumError;
    fn from_str(s: &str) -> Result<TimestampMode> {
        match s {
            "full" => Ok(TimestampMode::Full),
            "none" => Ok(TimestampMode::None),
            "position_only" => Ok(TimestampMode::PositionOnly),
            other => Err(LumError::Config(format!("unknown timestamp mode '{other}'"))),
        }
    }
}

pub fn default_epoch() -> DateTime<Utc> {
    NaiveDateTime::parse_from_str("2025-01-01 00:00:00", "%Y-%m-%d %H:%M:%S")
        .unwrap()
        .and_utc()
}

impl Default for TimestampConfig {
    fn default() -> TimestampConfig {
        TimestampConfig {
            interval_minutes: 15,
            epoch: default_epoch(),
            period_boundaries: PeriodBoundaries::default(),
            mode: TimestampMode::Full,
        }
    }
}

/// Map a datetime to its interval descriptor. Weekend override replaces
/// rush-hour classes with the matching normal-hour class.
pub fn assign_interval(t: DateTime<Utc>, cfg: &TimestampConfig) -> Result<IntervalDescriptor> {
    if 1440 % cfg.interval_minutes != 0 {
        return Err(LumError::Config(format!(
            "interval_minutes {} does not divide 1440",
            cfg.interval_minutes
        )));
    }
    if t < cfg.epoch {
        return Err(LumError::Range(format!(
            "timestamp {t} precedes epoch {}",
            cfg.epoch
        )));
    }
    let minutes_since_epoch = (t - cfg.epoch).num_minutes() as u64;
    let time_id = minutes_since_epoch / cfg.interval_minutes as u64;
    let weekday = t.weekday().number_from_monday(); // 1..=7
    let day_class = if weekday >= 6 {
        DayClass::Weekend
    } else {
        DayClass::Weekday
    };
    let minute_of_day = t.hour() * 60 + t.minute();
    let mut period_class = cfg.period_boundaries.classify(minute_of_day)?;
    if day_class == DayClass::Weekend {
        period_class = match period_class {
            PeriodClass::MorningRush => PeriodClass::NormalMorning,
            PeriodClass::EveningRush => PeriodClass::NormalEvening,
            other => other,
        };
    }
    Ok(IntervalDescriptor {
        time_id,
        day_class,
        period_class,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Token {
    Tds(IntervalDescriptor),
    Sep,
    Behavior { behavior_id: String, time_id: u64 },
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub tokens: Vec<Token>,
    /// Per-behavior interval position, only populated in position_only mode.
    pub positions: Vec<u64>,
}

impl TokenSequence {
    pub fn behavior_count(&self) -> usize {
        self.tokens
            .iter()
            .filter(|t| matches!(t, Token::Behavior { .. }))
            .count()
    }

    /// Behaviors with their time IDs, in order, ignoring structural tokens.
    pub fn behaviors(&self) -> Vec<(&str, u64)> {
        self.tokens
            .iter()
            .filter_map(|t| match t {
                Token::Behavior { behavior_id, time_id } => Some((behavior_id.as_str(), *time_id)),
                _ => None,
            })
            .collect()
    }
}

/// Reshape chronologically sorted events into the token sequence with
/// interval descriptors and separators.
pub fn reshape_sequence(events: &[RawEvent], cfg: &TimestampConfig) -> Result<TokenSequence> {
    for pair in events.windows(2) {
        if pair[1].ts < pair[0].ts {
            return Err(LumError::Ordering(format!(
                "events not sorted: {} before {}",
                pair[0].ts, pair[1].ts
            )));
        }
    }
    match cfg.mode {
        TimestampMode::Full => reshape_full(events, cfg),
        TimestampMode::None => {
            let tokens = events
                .iter()
                .map(|e| {
                    Ok(Token::Behavior {
                        behavior_id: e.behavior_id.clone(),
                        time_id: assign_interval(e.ts, cfg)?.time_id,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(TokenSequence {
                tokens,
                positions: Vec::new(),
            })
        }
        TimestampMode::PositionOnly => {
            let mut tokens = Vec::with_capacity(events.len());
            let mut positions = Vec::with_capacity(events.len());
            let mut group: u64 = 0;
            let mut last_time_id: Option<u64> = None;
            for e in events {
                let d = assign_interval(e.ts, cfg)?;
                if let Some(prev) = last_time_id {
                    if prev != d.time_id {
                        group += 1;
                    }
                }
                last_time_id = Some(d.time_id);
                positions.push(group);
                tokens.push(Token::Behavior {
                    behavior_id: e.behavior_id.clone(),
                    time_id: d.time_id,
                });
            }
            Ok(TokenSequence { tokens, positions })
        }
    }
}

fn reshape_full(events: &[RawEvent], cfg: &TimestampConfig) -> Result<TokenSequence> {
    let mut tokens = Vec::new();
    let mut last_time_id: Option<u64> = None;
    for e in events {
        let d = assign_interval(e.ts, cfg)?;
        match last_time_id {
            None => tokens.push(Token::Tds(d)),
            Some(prev) if prev != d.time_id => {
                tokens.push(Token::Sep);
                tokens.push(Token::Tds(d));
            }
            _ => {}
        }
        last_time_id = Some(d.time_id);
        tokens.push(Token::Behavior {
            behavior_id: e.behavior_id.clone(),
            time_id: d.time_id,
        });
    }
    Ok(TokenSequence {
        tokens,
        positions: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;

    fn at(y: i32, mo: u32, d: u32, h: u32, mi: u32) -> DateTime<Utc> {
        Utc.with_ymd_and_hms(y, mo, d, h, mi, 0).unwrap()
    }

    fn cfg_with_epoch(epoch: DateTime<Utc>) -> TimestampConfig {
        TimestampConfig {
            epoch,
            ..TimestampConfig::default()
        }
    }

    #[test]
    fn monday_morning_rush() {
        // 2025-01-06 is a Monday.
        let epoch = at(2025, 1, 6, 0, 0);
        let cfg = cfg_with_epoch(epoch);
        let d = assign_interval(at(2025, 1, 6, 9, 7), &cfg).unwrap();
        assert_eq!(d.time_id, 36); // floor(547 / 15)
        assert_eq!(d.day_class, DayClass::Weekday);
        assert_eq!(d.period_class, PeriodClass::MorningRush);
    }

    #[test]
    fn sunday_same_slot_is_weekend_normal_morning() {
        let epoch = at(2025, 1, 5, 0, 0); // a Sunday
        let cfg = cfg_with_epoch(epoch);
        let d = assign_interval(at(2025, 1, 5, 9, 7), &cfg).unwrap();
        assert_eq!(d.day_class, DayClass::Weekend);
        assert_eq!(d.period_class, PeriodClass::NormalMorning);
    }

    #[test]
    fn weekday_late_night() {
        let epoch = at(2025, 1, 6, 0, 0);
        let cfg = cfg_with_epoch(epoch);
        let d = assign_interval(at(2025, 1, 6, 23, 30), &cfg).unwrap();
        assert_eq!(d.period_class, PeriodClass::LateNight);
    }

    #[test]
    fn before_epoch_is_range_error() {
        let cfg = cfg_with_epoch(at(2025, 1, 6, 0, 0));
        assert!(matches!(
            assign_interval(at(2025, 1, 5, 23, 0), &cfg),
            Err(LumError::Range(_))
        ));
    }

    #[test]
    fn bad_interval_length_is_config_error() {
        let mut cfg = cfg_with_epoch(at(2025, 1, 6, 0, 0));
        cfg.interval_minutes = 7;
        assert!(matches!(
            assign_interval(at(2025, 1, 6, 1, 0), &cfg),
            Err(LumError::Config(_))
        ));
    }

    fn three_events(epoch: DateTime<Utc>) -> Vec<RawEvent> {
        // b1, b2 in interval 5 (minutes 75-89), b3 in interval 9.
        let mk = |id: &str, min: i64| RawEvent {
            user_id: "u".into(),
            behavior_id: id.into(),
            ts: epoch + chrono::Duration::minutes(min),
        };
        vec![mk("b1", 76), mk("b2", 80), mk("b3", 140)]
    }

    #[test]
    fn reshape_groups_intervals_with_separators() {
        let epoch = at(2025, 1, 6, 0, 0);
        let cfg = cfg_with_epoch(epoch);
        let seq = reshape_sequence(&three_events(epoch), &cfg).unwrap();
        assert_eq!(seq.tokens.len(), 6);
        assert!(matches!(seq.tokens[0], Token::Tds(d) if d.time_id == 5));
        assert!(matches!(&seq.tokens[1], Token::Behavior { behavior_id, .. } if behavior_id == "b1"));
        assert!(matches!(&seq.tokens[2], Token::Behavior { behavior_id, .. } if behavior_id == "b2"));
        assert_eq!(seq.tokens[3], Token::Sep);
        assert!(matches!(seq.tokens[4], Token::Tds(d) if d.time_id == 9));
        assert!(matches!(&seq.tokens[5], Token::Behavior { behavior_id, .. } if behavior_id == "b3"));
    }

    #[test]
    fn reshape_empty_and_single() {
        let epoch = at(2025, 1, 6, 0, 0);
        let cfg = cfg_with_epoch(epoch);
        assert!(reshape_sequence(&[], &cfg).unwrap().tokens.is_empty());
        let one = vec![RawEvent {
            user_id: "u".into(),
            behavior_id: "b".into(),
            ts: epoch + chrono::Duration::minutes(10),
        }];
        let seq = reshape_sequence(&one, &cfg).unwrap();
        assert_eq!(seq.tokens.len(), 2);
        assert!(!seq.tokens.contains(&Token::Sep));
    }

    #[test]
    fn unsorted_input_rejected() {
        let epoch = at(2025, 1, 6, 0, 0);
        let cfg = cfg_with_epoch(epoch);
        let mut events = three_events(epoch);
        events.swap(0, 2);
        assert!(matches!(
            reshape_sequence(&events, &cfg),
            Err(LumError::Ordering(_))
        ));
    }

    #[test]
    fn mode_none_strips_structure() {
        let epoch = at(2025, 1, 6, 0, 0);
        let mut cfg = cfg_with_epoch(epoch);
        cfg.mode = TimestampMode::None;
        let seq = reshape_sequence(&three_events(epoch), &cfg).unwrap();
        assert_eq!(seq.tokens.len(), 3);
        assert!(seq.tokens.iter().all(|t| matches!(t, Token::Behavior { .. })));
    }

    #[test]
    fn mode_position_only_groups_share_position() {
        let epoch = at(2025, 1, 6, 0, 0);
        let mut cfg = cfg_with_epoch(epoch);
        cfg.mode = TimestampMode::PositionOnly;
        let seq = reshape_sequence(&three_events(epoch), &cfg).unwrap();
        assert_eq!(seq.positions, vec![0, 0, 1]);
    }

    #[test]
    fn roundtrip_recovers_behaviors_and_intervals() {
        let epoch = at(2025, 1, 6, 0, 0);
        let cfg = cfg_with_epoch(epoch);
        let events = three_events(epoch);
        let seq = reshape_sequence(&events, &cfg).unwrap();
        let got = seq.behaviors();
        assert_eq!(got.len(), events.len());
        for (e, (id, tid)) in events.iter().zip(&got) {
            assert_eq!(e.behavior_id, *id);
            assert_eq!(assign_interval(e.ts, &cfg).unwrap().time_id, *tid);
        }
    }

    #[test]
    fn sep_count_matches_interval_changes() {
        let epoch = at(2025, 1, 6, 0, 0);
        let cfg = cfg_with_epoch(epoch);
        let seq = reshape_sequence(&three_events(epoch), &cfg).unwrap();
        let seps = seq.tokens.iter().filter(|t| **t == Token::Sep).count();
        assert_eq!(seps, 1);
    }
}
