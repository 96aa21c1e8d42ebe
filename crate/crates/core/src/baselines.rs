//! ASR-style decoding followed by a keyword containment check: the usual way
//! a transducer is turned into a keyword spotter, used here as the baseline.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::decoder::DecodeMode;
use crate::emission::{argmax, EmissionOracle, GenerativeOracle, KeywordSpec, BLANK};
use crate::error::{KwsError, Result};

pub const DEFAULT_MAX_SYMBOLS_PER_FRAME: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub tokens: Vec<u32>,
    #[serde(with = "crate::logjson::value")]
    pub log_prob: f64,
    pub emit_frames: Vec<usize>,
}

impl Hypothesis {
    fn empty() -> Self {
        Hypothesis {
            tokens: Vec::new(),
            log_prob: 0.0,
            emit_frames: Vec::new(),
        }
    }
}

/// JSON-lines form: `{utt_id, tokens, log_prob, emit_frames}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypothesisRecord {
    pub utt_id: String,
    #[serde(flatten)]
    pub hypothesis: Hypothesis,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SearchConfig {
    pub mode: DecodeMode,
    pub max_symbols_per_frame: usize,
}

impl SearchConfig {
    pub fn rnnt() -> Self {
        SearchConfig {
            mode: DecodeMode::Rnnt,
            max_symbols_per_frame: DEFAULT_MAX_SYMBOLS_PER_FRAME,
        }
    }

    pub fn tdt() -> Self {
        SearchConfig {
            mode: DecodeMode::Tdt,
            ..Self::rnnt()
        }
    }
}

fn generative<O: EmissionOracle + ?Sized>(oracle: &O) -> Result<&dyn GenerativeOracle> {
    oracle.as_generative().ok_or_else(|| {
        KwsError::Capability(
            "ASR search needs a generative oracle; keyword-conditioned lattices cannot score \
             arbitrary histories"
                .into(),
        )
    })
}

/// Transducer greedy search. RNN-T: take the argmax symbol; a token keeps
/// the frame, blank advances one frame. TDT: also take the argmax duration
/// and advance by it (a token with duration 0 keeps the frame, blank always
/// advances at least one). At most `max_symbols_per_frame` tokens per frame.
pub fn greedy_search<O: EmissionOracle + ?Sized>(
    oracle: &O,
    config: &SearchConfig,
) -> Result<Hypothesis> {
    let gen = generative(oracle)?;
    if config.mode == DecodeMode::Tdt && gen.d_max() == 0 {
        return Err(KwsError::Mode(
            "TDT greedy search needs an oracle with a duration output".into(),
        ));
    }
    let num_frames = gen.num_frames();
    let mut hyp = Hypothesis::empty();
    let mut t = 1;
    let mut emitted_here = 0;
    while t <= num_frames {
        let probs = gen.token_log_probs(t, &hyp.tokens)?;
        let (symbol, log_p) = if emitted_here >= config.max_symbols_per_frame {
            (0, probs[0])
        } else {
            argmax(&probs)
        };
        hyp.log_prob += log_p;
        let symbol = symbol as u32;
        if symbol != BLANK {
            hyp.tokens.push(symbol);
            hyp.emit_frames.push(t);
            emitted_here += 1;
        }
        let hop = match config.mode {
            DecodeMode::Rnnt => usize::from(symbol == BLANK),
            DecodeMode::Tdt => {
                let durations = gen.duration_log_probs(t, &hyp.tokens)?;
                let (d, log_d) = argmax(&durations);
                hyp.log_prob += log_d;
                if symbol == BLANK {
                    d.max(1)
                } else {
                    d
                }
            }
        };
        if hop > 0 {
            t += hop;
            emitted_here = 0;
        }
    }
    Ok(hyp)
}

#[derive(Debug, Clone)]
struct Candidate {
    hyp: Hypothesis,
    finished: bool,
}

fn log_add(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    if hi == f64::NEG_INFINITY {
        hi
    } else {
        hi + (lo - hi).exp().ln_1p()
    }
}

/// Merges candidates with identical token sequences and state, summing their
/// probabilities; the survivor keeps the frames of the better one.
fn merge(candidates: Vec<Candidate>) -> Vec<Candidate> {
    let mut index: HashMap<(Vec<u32>, bool), usize> = HashMap::new();
    let mut merged: Vec<Candidate> = Vec::with_capacity(candidates.len());
    for cand in candidates {
        match index.get(&(cand.hyp.tokens.clone(), cand.finished)) {
            Some(&i) => {
                let kept = &mut merged[i];
                if cand.hyp.log_prob > kept.hyp.log_prob {
                    kept.hyp.emit_frames = cand.hyp.emit_frames;
                }
                kept.hyp.log_prob = log_add(kept.hyp.log_prob, cand.hyp.log_prob);
            }
            None => {
                index.insert((cand.hyp.tokens.clone(), cand.finished), merged.len());
                merged.push(cand);
            }
        }
    }
    merged
}

/// Breadth-first transducer beam search (RNN-T). Within a frame, every
/// active hypothesis expands by blank (finishing the frame) and by each
/// token (staying active); finished and active candidates compete for the
/// `beam_width` slots until no active one survives or the per-frame symbol
/// cap forces blank. With `beam_width = 1` this is exactly greedy search.
pub fn beam_search<O: EmissionOracle + ?Sized>(
    oracle: &O,
    beam_width: usize,
    config: &SearchConfig,
) -> Result<Vec<Hypothesis>> {
    if beam_width == 0 {
        return Err(KwsError::validation("beam width must be >= 1"));
    }
    let gen = generative(oracle)?;
    if config.mode != DecodeMode::Rnnt {
        return Err(KwsError::Mode(
            "beam search is only defined for RNN-T".into(),
        ));
    }
    let mut beams = vec![Hypothesis::empty()];
    for t in 1..=gen.num_frames() {
        let mut active = beams;
        let mut finished: Vec<Hypothesis> = Vec::new();
        for step in 0..=config.max_symbols_per_frame {
            if active.is_empty() {
                break;
            }
            let mut candidates: Vec<Candidate> = finished
                .drain(..)
                .map(|hyp| Candidate {
                    hyp,
                    finished: true,
                })
                .collect();
            for hyp in active.drain(..) {
                let probs = gen.token_log_probs(t, &hyp.tokens)?;
                let mut tokens: Vec<(usize, f64)> = Vec::new();
                if step < config.max_symbols_per_frame {
                    tokens = probs
                        .iter()
                        .copied()
                        .enumerate()
                        .skip(1)
                        .filter(|(_, p)| *p > f64::NEG_INFINITY)
                        .collect();
                    tokens.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
                    tokens.truncate(beam_width);
                }
                for &(v, log_p) in &tokens {
                    let mut next = hyp.clone();
                    next.tokens.push(v as u32);
                    next.emit_frames.push(t);
                    next.log_prob += log_p;
                    candidates.push(Candidate {
                        hyp: next,
                        finished: false,
                    });
                }
                let mut done = hyp;
                done.log_prob += probs[0];
                // blank goes ahead of the hypothesis' own token expansions
                let at = candidates.len() - tokens.len();
                candidates.insert(
                    at,
                    Candidate {
                        hyp: done,
                        finished: true,
                    },
                );
            }
            let mut pool = merge(candidates);
            pool.sort_by(|a, b| b.hyp.log_prob.total_cmp(&a.hyp.log_prob));
            pool.truncate(beam_width);
            for cand in pool {
                if cand.finished {
                    finished.push(cand.hyp);
                } else {
                    active.push(cand.hyp);
                }
            }
        }
        beams = finished;
    }
    beams.sort_by(|a, b| b.log_prob.total_cmp(&a.log_prob));
    Ok(beams)
}

/// Frames at which the first and last keyword tokens were emitted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameSpan {
    pub start_frame: usize,
    pub end_frame: usize,
}

/// First contiguous occurrence of the keyword in the hypothesis.
pub fn keyword_hit(hyp: &Hypothesis, keyword: &KeywordSpec) -> Option<FrameSpan> {
    let n = keyword.len();
    if n == 0 || hyp.tokens.len() < n {
        return None;
    }
    hyp.tokens
        .windows(n)
        .position(|w| w == keyword.tokens.as_slice())
        .map(|i| FrameSpan {
            start_frame: hyp.emit_frames[i],
            end_frame: hyp.emit_frames[i + n - 1],
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::emission::{Lattice, SyntheticJoiner, SyntheticJoinerConfig};

    fn hyp(tokens: &[u32]) -> Hypothesis {
        Hypothesis {
            tokens: tokens.to_vec(),
            log_prob: 0.0,
            emit_frames: (1..=tokens.len()).map(|i| i * 10).collect(),
        }
    }

    fn kw(tokens: &[u32]) -> KeywordSpec {
        KeywordSpec::new("k", tokens.to_vec()).unwrap()
    }

    #[test]
    fn contiguous_hit_reports_span() {
        let span = keyword_hit(&hyp(&[1, 4, 7, 7, 2]), &kw(&[7, 7])).unwrap();
        assert_eq!(
            span,
            FrameSpan {
                start_frame: 30,
                end_frame: 40
            }
        );
    }

    #[test]
    fn non_contiguous_is_a_miss() {
        assert!(keyword_hit(&hyp(&[7, 1, 7]), &kw(&[7, 7])).is_none());
        assert!(keyword_hit(&hyp(&[]), &kw(&[7])).is_none());
    }

    fn planted(d_max: u16) -> SyntheticJoiner {
        let mut config = SyntheticJoinerConfig::tiled(9, &[(4, 3), (5, 3), (2, 3), (9, 3), (3, 3)]);
        config.d_max = d_max;
        SyntheticJoiner::new(config).unwrap()
    }

    #[test]
    fn clean_greedy_recovers_planted_tokens() {
        let h = greedy_search(&planted(0), &SearchConfig::rnnt()).unwrap();
        assert_eq!(h.tokens, vec![4, 5, 2, 9, 3]);
        assert_eq!(h.emit_frames, vec![1, 4, 7, 10, 13]);
        assert_eq!(h.log_prob, 0.0);
    }

    #[test]
    fn all_blank_oracle_gives_empty_hypothesis() {
        let mut config = SyntheticJoinerConfig::tiled(9, &[]);
        config.num_frames = 6;
        config.epsilon = 0.3;
        let joiner = SyntheticJoiner::new(config).unwrap();
        let h = greedy_search(&joiner, &SearchConfig::rnnt()).unwrap();
        assert!(h.tokens.is_empty());
        let expected: f64 = (1..=6)
            .map(|t| joiner.token_distribution(t, None)[0].ln())
            .sum();
        assert!((h.log_prob - expected).abs() < 1e-12);
    }

    #[test]
    fn emission_cap_bounds_tokens_per_frame() {
        // at eps = 0.9 with a distractor, the same token can stay on top
        let mut config = SyntheticJoinerConfig::tiled(3, &[(1, 4)]);
        config.epsilon = 0.95;
        config.distractor_mass = 1.0;
        config.seed = 5;
        let joiner = SyntheticJoiner::new(config).unwrap();
        let cfg = SearchConfig {
            mode: DecodeMode::Rnnt,
            max_symbols_per_frame: 2,
        };
        let h = greedy_search(&joiner, &cfg).unwrap();
        for t in 1..=4 {
            assert!(h.emit_frames.iter().filter(|&&f| f == t).count() <= 2);
        }
    }

    #[test]
    fn lattices_are_not_generative() {
        let lattice = Lattice::from_fn(3, 1, 0, 0.03, |_, _| (0.0, 0.0), |_| (0, 0)).unwrap();
        assert!(matches!(
            greedy_search(&lattice, &SearchConfig::rnnt()),
            Err(KwsError::Capability(_))
        ));
        assert!(matches!(
            beam_search(&lattice, 4, &SearchConfig::rnnt()),
            Err(KwsError::Capability(_))
        ));
    }

    #[test]
    fn zero_beam_rejected() {
        assert!(matches!(
            beam_search(&planted(0), 0, &SearchConfig::rnnt()),
            Err(KwsError::Validation(_))
        ));
    }

    #[test]
    fn tdt_greedy_hops_by_planted_duration() {
        let h = greedy_search(&planted(4), &SearchConfig::tdt()).unwrap();
        assert_eq!(h.tokens, vec![4, 5, 2, 9, 3]);
        assert_eq!(h.emit_frames, vec![1, 4, 7, 10, 13]);
        assert!(matches!(
            greedy_search(&planted(0), &SearchConfig::tdt()),
            Err(KwsError::Mode(_))
        ));
    }

    #[test]
    fn log_add_handles_infinities() {
        assert_eq!(
            log_add(f64::NEG_INFINITY, f64::NEG_INFINITY),
            f64::NEG_INFINITY
        );
        assert!((log_add(0.5f64.ln(), 0.25f64.ln()) - 0.75f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn hypothesis_record_is_flat() {
        let rec = HypothesisRecord {
            utt_id: "u".into(),
            hypothesis: hyp(&[3]),
        };
        let text = serde_json::to_string(&rec).unwrap();
        assert_eq!(
            text,
            r#"{"utt_id":"u","tokens":[3],"log_prob":0.0,"emit_frames":[10]}"#
        );
    }
}
