//! Causal decoder over fused behavior sequences with configurable target
//! placement. Placing the candidate target at the front lets every history
//! token attend to it under a causal mask, so the summary read from the
//! final position is target-aware; end placement only lets the target see
//! the history; none drops the target from the input entirely.

use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{linear, AttnBlock, Ffn, LN_EPS};
use crate::error::{LumError, Result};
use crate::params::ParamSet;
use crate::tensor::{
    add, concat_rows, gather_rows, last_row, layer_norm, reshape, AttnMask, Tensor,
};
use crate::timestamp::{DayClass, PeriodClass};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    Front,
    End,
    None,
}

impl FromStr for Placement {
    type Err = LumError;

    fn from_str(s: &str) -> Result<Placement> {
        match s {
            "front" => Ok(Placement::Front),
            "end" => Ok(Placement::End),
            "none" => Ok(Placement::None),
            other => Err(LumError::Config(format!(
                "unknown target placement '{other}' (expected front|end|none)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub max_len: usize,
    /// Width of fused behavior embeddings arriving from the adapter.
    pub input_dim: usize,
    pub placement: Placement,
    /// When false the attention/feed-forward stack stays frozen after
    /// random init during contrastive training; input projection and the
    /// structural token embeddings always remain trainable.
    #[serde(default)]
    pub trainable: bool,
}

impl Default for DecoderConfig {
    fn default() -> DecoderConfig {
        DecoderConfig {
            layers: 2,
            dim: 64,
            heads: 4,
            max_len: 240,
            input_dim: 64,
            placement: Placement::Front,
            trainable: false,
        }
    }
}

/// One decoder input slot: a fused behavior embedding or a discrete
/// structural token looked up from a learned table.
#[derive(Clone)]
pub enum DecToken {
    /// Fused behavior embedding, shape [1, input_dim] or [input_dim].
    Fused(Tensor),
    /// Time-description token indexed into the day-class x period grid.
    Tds(usize),
    Sep,
}

pub const TDS_VOCAB: usize = 2 * PeriodClass::ALL.len();

pub fn tds_index(day: DayClass, period: PeriodClass) -> usize {
    let d = match day {
        DayClass::Weekday => 0,
        DayClass::Weekend => 1,
    };
    d * PeriodClass::ALL.len() + period.index()
}

pub struct Decoder {
    pub cfg: DecoderConfig,
    proj_w: Tensor, // [input_dim, dim]
    proj_b: Tensor,
    tds_embed: Tensor, // [TDS_VOCAB, dim]
    sep_embed: Tensor, // [1, dim]
    /// Additive marker identifying the target slot regardless of placement.
    target_marker: Tensor, // [1, dim]
    layers: Vec<(AttnBlock, Ffn)>,
    final_ln_gain: Tensor,
    final_ln_bias: Tensor,
}

impl Decoder {
    pub fn init(ps: &mut ParamSet, cfg: &DecoderConfig, rng: &mut ChaCha8Rng) -> Decoder {
        assert_eq!(cfg.dim % cfg.heads, 0, "dim must be divisible by heads");
        assert!(cfg.max_len >= 2, "max_len must allow target plus history");
        let d = cfg.dim;
        let layers = (0..cfg.layers)
            .map(|l| {
                (
                    AttnBlock::init(ps, &format!("decoder.layer{l}.attn"), d, d, cfg.heads, rng),
                    Ffn::init(ps, &format!("decoder.layer{l}.ffn"), d, 4 * d, rng),
                )
            })
            .collect();
        Decoder {
            cfg: cfg.clone(),
            proj_w: ps.init("decoder.proj.w", &[cfg.input_dim, d], cfg.input_dim, rng),
            proj_b: ps.init_zeros("decoder.proj.b", &[d]),
            tds_embed: ps.init("decoder.tds_embed", &[TDS_VOCAB, d], d, rng),
            sep_embed: ps.init("decoder.sep_embed", &[1, d], d, rng),
            target_marker: ps.init("decoder.target_marker", &[1, d], d, rng),
            layers,
            final_ln_gain: ps.init_ones("decoder.final_ln_gain", &[d]),
            final_ln_bias: ps.init_zeros("decoder.final_ln_bias", &[d]),
        }
    }

    fn embed_token(&self, token: &DecToken, is_target: bool) -> Result<Tensor> {
        let row = match token {
            DecToken::Fused(t) => {
                let v = reshape(t, &[1, self.cfg.input_dim]);
                linear(&v, &self.proj_w, &self.proj_b)?
            }
            DecToken::Tds(i) => {
                if *i >= TDS_VOCAB {
                    return Err(LumError::Contract(format!(
                        "time-description index {i} out of range (vocab {TDS_VOCAB})"
                    )));
                }
                gather_rows(&self.tds_embed, &[*i])
            }
            DecToken::Sep => self.sep_embed.clone(),
        };
        Ok(if is_target {
            add(&row, &self.target_marker)
        } else {
            row
        })
    }

    /// Arrange history plus target for the configured placement, truncating
    /// the oldest history so the result fits max_len. The target always
    /// survives truncation.
    pub fn arrange(
        &self,
        history: &[(DecToken, f64)],
        target: &(DecToken, f64),
    ) -> Vec<(DecToken, f64, bool)> {
        let keep = match self.cfg.placement {
            Placement::None => self.cfg.max_len,
            _ => self.cfg.max_len - 1,
        };
        let start = history.len().saturating_sub(keep);
        let hist = history[start..]
            .iter()
            .map(|(t, p)| (t.clone(), *p, false));
        match self.cfg.placement {
            Placement::Front => std::iter::once((target.0.clone(), target.1, true))
                .chain(hist)
                .collect(),
            Placement::End => hist
                .chain(std::iter::once((target.0.clone(), target.1, true)))
                .collect(),
            Placement::None => hist.collect(),
        }
    }

    /// Causal forward pass over arranged tokens; returns all output rows.
    pub fn forward(&self, items: &[(DecToken, f64, bool)]) -> Result<Tensor> {
        if items.is_empty() {
            return Err(LumError::Contract("decoder input is empty".into()));
        }
        if items.len() > self.cfg.max_len {
            return Err(LumError::Contract(format!(
                "decoder input length {} exceeds max_len {}",
                items.len(),
                self.cfg.max_len
            )));
        }
        let rows: Vec<Tensor> = items
            .iter()
            .map(|(t, _, is_target)| self.embed_token(t, *is_target))
            .collect::<Result<_>>()?;
        let mut x = concat_rows(&rows);
        let positions: Vec<f64> = items.iter().map(|(_, p, _)| *p).collect();
        let mask = AttnMask::causal(items.len());
        for (attn, ffn) in &self.layers {
            x = attn.self_forward(&x, Some(&mask), Some(&positions))?;
            x = ffn.forward(&x)?;
        }
        layer_norm(&x, &self.final_ln_gain, &self.final_ln_bias, LN_EPS)
    }

    /// Candidate embedding in decoder space, for dot-mode scoring.
    pub fn project_candidate(&self, fused: &Tensor) -> Result<Tensor> {
        let row = self.embed_token(&DecToken::Fused(fused.clone()), true)?;
        Ok(reshape(&row, &[self.cfg.dim]))
    }

    /// Freeze the attention/feed-forward stack (used when the decoder is
    /// configured non-trainable); projection and token tables stay live.
    pub fn freeze_core(ps: &mut ParamSet) {
        ps.freeze_prefix("decoder.layer");
        ps.freeze_prefix("decoder.final_ln");
    }

    /// Sequence summary: the final position's output row.
    pub fn user_embedding(&self, items: &[(DecToken, f64, bool)]) -> Result<Tensor> {
        let out = self.forward(items)?;
        Ok(reshape(&last_row(&out), &[self.cfg.dim]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use rand::Rng;
    use rand::SeedableRng;

    fn small_cfg(placement: Placement) -> DecoderConfig {
        DecoderConfig {
            layers: 1,
            dim: 8,
            heads: 2,
            max_len: 6,
            input_dim: 4,
            placement,
            trainable: false,
        }
    }

    fn fused(rng: &mut ChaCha8Rng) -> DecToken {
        DecToken::Fused(Tensor::new(
            (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            &[4],
            false,
        ))
    }

    fn setup(placement: Placement, seed: u64) -> (ParamSet, Decoder, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let dec = Decoder::init(&mut ps, &small_cfg(placement), &mut rng);
        (ps, dec, rng)
    }

    #[test]
    fn tds_index_covers_grid() {
        assert_eq!(tds_index(DayClass::Weekday, PeriodClass::LateNight), 0);
        assert_eq!(
            tds_index(DayClass::Weekend, PeriodClass::EveningRush),
            TDS_VOCAB - 1
        );
    }

    #[test]
    fn causal_outputs_invariant_to_future_tokens() {
        let (_ps, dec, mut rng) = setup(Placement::End, 1);
        let hist: Vec<(DecToken, f64)> = (0..3).map(|i| (fused(&mut rng), i as f64)).collect();
        let target = (fused(&mut rng), 3.0);
        let items = dec.arrange(&hist, &target);
        let full = dec.forward(&items).unwrap().data();
        // Re-run with the last token replaced; earlier rows must be bitwise equal.
        let mut altered = items.clone();
        altered[3] = (fused(&mut rng), 3.0, true);
        let alt = dec.forward(&altered).unwrap().data();
        let d = dec.cfg.dim;
        for i in 0..3 * d {
            assert_eq!(full[i].to_bits(), alt[i].to_bits(), "row changed at flat index {i}");
        }
        assert_ne!(full[3 * d..], alt[3 * d..]);
    }

    #[test]
    fn front_placement_makes_history_target_aware() {
        let (_ps, dec, mut rng) = setup(Placement::Front, 2);
        let hist: Vec<(DecToken, f64)> = (0..3).map(|i| (fused(&mut rng), i as f64)).collect();
        let t1 = (fused(&mut rng), 3.0);
        let t2 = (fused(&mut rng), 3.0);
        let u1 = dec.user_embedding(&dec.arrange(&hist, &t1)).unwrap().data();
        let u2 = dec.user_embedding(&dec.arrange(&hist, &t2)).unwrap().data();
        assert_ne!(u1, u2, "front placement summary must depend on the target");
    }

    #[test]
    fn end_placement_leaves_history_rows_target_independent() {
        let (_ps, dec, mut rng) = setup(Placement::End, 3);
        let hist: Vec<(DecToken, f64)> = (0..3).map(|i| (fused(&mut rng), i as f64)).collect();
        let t1 = (fused(&mut rng), 3.0);
        let t2 = (fused(&mut rng), 3.0);
        let o1 = dec.forward(&dec.arrange(&hist, &t1)).unwrap().data();
        let o2 = dec.forward(&dec.arrange(&hist, &t2)).unwrap().data();
        let d = dec.cfg.dim;
        for i in 0..3 * d {
            assert_eq!(o1[i].to_bits(), o2[i].to_bits());
        }
        // The summary (target row) still differs.
        assert_ne!(o1[3 * d..], o2[3 * d..]);
    }

    #[test]
    fn none_placement_ignores_target_entirely() {
        let (_ps, dec, mut rng) = setup(Placement::None, 4);
        let hist: Vec<(DecToken, f64)> = (0..3).map(|i| (fused(&mut rng), i as f64)).collect();
        let t1 = (fused(&mut rng), 3.0);
        let t2 = (fused(&mut rng), 3.0);
        let u1 = dec.user_embedding(&dec.arrange(&hist, &t1)).unwrap().data();
        let u2 = dec.user_embedding(&dec.arrange(&hist, &t2)).unwrap().data();
        assert_eq!(u1, u2);
    }

    #[test]
    fn truncation_keeps_target_and_most_recent_history() {
        let (_ps, dec, mut rng) = setup(Placement::Front, 5);
        let hist: Vec<(DecToken, f64)> = (0..10).map(|i| (fused(&mut rng), i as f64)).collect();
        let target = (fused(&mut rng), 10.0);
        let items = dec.arrange(&hist, &target);
        assert_eq!(items.len(), 6); // max_len
        assert!(items[0].2, "target first under front placement");
        let kept: Vec<f64> = items[1..].iter().map(|(_, p, _)| *p).collect();
        assert_eq!(kept, vec![5.0, 6.0, 7.0, 8.0, 9.0]);
    }

    #[test]
    fn overlong_input_is_contract_error() {
        let (_ps, dec, mut rng) = setup(Placement::End, 6);
        let items: Vec<(DecToken, f64, bool)> =
            (0..7).map(|i| (fused(&mut rng), i as f64, false)).collect();
        assert!(matches!(dec.forward(&items), Err(LumError::Contract(_))));
    }

    #[test]
    fn time_ids_shift_output_via_rotary_positions() {
        let (_ps, dec, mut rng) = setup(Placement::End, 7);
        let toks: Vec<DecToken> = (0..3).map(|_| fused(&mut rng)).collect();
        let near: Vec<(DecToken, f64, bool)> = toks
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as f64, false))
            .collect();
        let far: Vec<(DecToken, f64, bool)> = toks
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), (i * 40) as f64, false))
            .collect();
        let a = dec.forward(&near).unwrap().data();
        let b = dec.forward(&far).unwrap().data();
        assert_ne!(a, b, "rotary positions must affect attention");
    }

    #[test]
    fn bad_tds_index_rejected() {
        let (_ps, dec, _rng) = setup(Placement::End, 8);
        let items = vec![(DecToken::Tds(TDS_VOCAB), 0.0, false)];
        assert!(dec.forward(&items).is_err());
    }

    #[test]
    fn decoder_gradient_check() {
        let (ps, dec, mut rng) = setup(Placement::Front, 9);
        let hist: Vec<(DecToken, f64)> = vec![
            (fused(&mut rng), 0.0),
            (DecToken::Tds(3), 1.0),
            (DecToken::Sep, 1.0),
            (fused(&mut rng), 2.0),
        ];
        let target = (fused(&mut rng), 3.0);
        let items = dec.arrange(&hist, &target);
        let all: Vec<Tensor> = ps.iter().map(|(_, t)| t.clone()).collect();
        let report = grad_check(
            |_| {
                let u = dec.user_embedding(&items).unwrap();
                crate::tensor::dot(&u, &u)
            },
            &all,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn placement_parse() {
        assert_eq!("front".parse::<Placement>().unwrap(), Placement::Front);
        assert_eq!("end".parse::<Placement>().unwrap(), Placement::End);
        assert_eq!("none".parse::<Placement>().unwrap(), Placement::None);
        assert!("middle".parse::<Placement>().is_err());
    }
}
