//! Emission oracles: the stand-in for a trained encoder/predictor/joiner.
//!
//! Two conditioning paths are kept apart. The keyword track answers
//! `y(t, u)` and `phi(t, u)` given only the keyword prefix `y[0..u]`; the
//! greedy track answers the argmax token and duration given the greedy
//! history `G` that TDT decoding threads through [`EmissionOracle::greedy_step`].
//! All values are natural-log probabilities.

mod lattice;
mod synthetic;

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{KwsError, Result};

pub use lattice::{
    load_lattice, save_lattice, Lattice, LatticeHeader, LatticeSidecar, LATTICE_HEADER_BYTES,
    LATTICE_MAGIC, LATTICE_VERSION,
};
pub use synthetic::{Segment, SyntheticJoiner, SyntheticJoinerConfig};

/// Token id reserved for the blank symbol.
pub const BLANK: u32 = 0;

/// Wall-clock seconds represented by one frame (10 ms hop, 3x subsampling).
pub const DEFAULT_FRAME_SECONDS: f32 = 0.03;

/// The keyword token sequence searched for. Blank is implicit at position 0
/// and is not stored.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeywordSpec {
    pub name: String,
    pub tokens: Vec<u32>,
}

impl KeywordSpec {
    pub fn new(name: impl Into<String>, tokens: Vec<u32>) -> Result<Self> {
        let spec = KeywordSpec {
            name: name.into(),
            tokens,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.tokens.is_empty() {
            return Err(KwsError::validation(format!(
                "keyword {:?} has no tokens",
                self.name
            )));
        }
        if let Some(pos) = self.tokens.iter().position(|&tok| tok == BLANK) {
            return Err(KwsError::validation(format!(
                "keyword {:?} uses the blank id at position {pos}",
                self.name
            )));
        }
        Ok(())
    }

    /// Checks every token against a vocabulary of `vocab_size` non-blank tokens.
    pub fn validate_vocab(&self, vocab_size: usize) -> Result<()> {
        self.validate()?;
        match self.tokens.iter().find(|&&tok| tok as usize > vocab_size) {
            Some(tok) => Err(KwsError::validation(format!(
                "keyword {:?}: token {tok} outside vocabulary [1, {vocab_size}]",
                self.name
            ))),
            None => Ok(()),
        }
    }

    /// Number of keyword tokens, `U`.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Last token of the prefix `y[0..u]`, `None` when only blank precedes.
    pub fn context_last(&self, u: usize) -> Option<u32> {
        u.checked_sub(1).map(|i| self.tokens[i])
    }
}

/// A node `(t, u)` of the keyword lattice; `t` is 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EmissionQuery {
    pub t: usize,
    pub u: usize,
}

impl EmissionQuery {
    pub fn new(t: usize, u: usize) -> Self {
        EmissionQuery { t, u }
    }

    pub(crate) fn check(&self, num_frames: usize, keyword_len: usize) -> Result<()> {
        check_frame(self.t, num_frames)?;
        if self.u > keyword_len {
            return Err(KwsError::Range {
                what: "u",
                value: self.u,
                lo: 0,
                hi: keyword_len,
            });
        }
        Ok(())
    }
}

pub(crate) fn check_frame(t: usize, num_frames: usize) -> Result<()> {
    if t == 0 || t > num_frames {
        return Err(KwsError::Range {
            what: "t",
            value: t,
            lo: 1,
            hi: num_frames,
        });
    }
    Ok(())
}

/// `log y(t, u)` and `log phi(t, u)`. At `u = U` there is no next keyword
/// token and `log_y` is negative infinity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KeywordEmissions {
    pub log_y: f64,
    pub log_phi: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GreedyStepOutput {
    pub token: u32,
    pub duration: u16,
    pub log_token_prob: f64,
    pub log_duration_prob: f64,
}

/// The greedy-decoded history `G`. Starts as `{blank}`, represented by an
/// empty token list; blank outputs leave it unchanged.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GreedyHistory {
    tokens: Vec<u32>,
}

impl GreedyHistory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn last(&self) -> Option<u32> {
        self.tokens.last().copied()
    }

    pub fn extended(mut self, token: u32) -> Self {
        if token != BLANK {
            self.tokens.push(token);
        }
        self
    }
}

/// Source of the probabilities a transducer joiner would produce.
///
/// Implementations are immutable after construction and may be shared by
/// concurrent decode workers.
pub trait EmissionOracle: Send + Sync {
    /// Number of frames `T`.
    fn num_frames(&self) -> usize;

    /// Largest predictable duration; 0 means the oracle has no duration
    /// output and only supports RNN-T mode.
    fn d_max(&self) -> u16;

    fn frame_seconds(&self) -> f32 {
        DEFAULT_FRAME_SECONDS
    }

    /// Keyword-track emissions at node `q`. Deterministic.
    fn keyword_emissions(
        &self,
        keyword: &KeywordSpec,
        q: EmissionQuery,
    ) -> Result<KeywordEmissions>;

    /// Fills one lattice column: `log_y[u]` for `u < U` and `log_phi[u]` for
    /// `u <= U`.
    fn column_emissions(
        &self,
        keyword: &KeywordSpec,
        t: usize,
        log_y: &mut [f64],
        log_phi: &mut [f64],
    ) -> Result<()> {
        let u_len = keyword.len();
        for u in 0..=u_len {
            let e = self.keyword_emissions(keyword, EmissionQuery::new(t, u))?;
            if u < u_len {
                log_y[u] = e.log_y;
            }
            log_phi[u] = e.log_phi;
        }
        Ok(())
    }

    /// One greedy-track step at frame `t`: argmax token and duration given
    /// `history`, and the history extended by the token.
    fn greedy_step(
        &self,
        t: usize,
        history: GreedyHistory,
    ) -> Result<(GreedyStepOutput, GreedyHistory)>;

    /// Access to arbitrary-history queries, for the ASR baselines.
    fn as_generative(&self) -> Option<&dyn GenerativeOracle> {
        None
    }
}

/// An oracle that can score any token history, not just keyword prefixes.
pub trait GenerativeOracle: Send + Sync {
    fn num_frames(&self) -> usize;

    /// Number of non-blank tokens `V`; ids run over `[0, V]` with 0 = blank.
    fn vocab_size(&self) -> usize;

    fn d_max(&self) -> u16;

    /// `log P_T(v | t, context)` for `v` in `[0, V]`.
    fn token_log_probs(&self, t: usize, context: &[u32]) -> Result<Vec<f64>>;

    /// `log P_D(d | t, context)` for `d` in `[0, D_max]`.
    fn duration_log_probs(&self, t: usize, context: &[u32]) -> Result<Vec<f64>>;
}

/// Index and value of the first maximum. Panics on an empty slice.
pub(crate) fn argmax(values: &[f64]) -> (usize, f64) {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    (best, values[best])
}

/// Wraps an oracle and counts keyword-track node queries and greedy steps.
pub struct CountingOracle<'a, O: ?Sized> {
    inner: &'a O,
    keyword_queries: AtomicU64,
    greedy_queries: AtomicU64,
}

impl<'a, O: EmissionOracle + ?Sized> CountingOracle<'a, O> {
    pub fn new(inner: &'a O) -> Self {
        CountingOracle {
            inner,
            keyword_queries: AtomicU64::new(0),
            greedy_queries: AtomicU64::new(0),
        }
    }

    pub fn keyword_queries(&self) -> u64 {
        self.keyword_queries.load(Ordering::Relaxed)
    }

    pub fn greedy_queries(&self) -> u64 {
        self.greedy_queries.load(Ordering::Relaxed)
    }

    pub fn total_queries(&self) -> u64 {
        self.keyword_queries() + self.greedy_queries()
    }
}

impl<O: EmissionOracle + ?Sized> EmissionOracle for CountingOracle<'_, O> {
    fn num_frames(&self) -> usize {
        self.inner.num_frames()
    }

    fn d_max(&self) -> u16 {
        self.inner.d_max()
    }

    fn frame_seconds(&self) -> f32 {
        self.inner.frame_seconds()
    }

    fn keyword_emissions(
        &self,
        keyword: &KeywordSpec,
        q: EmissionQuery,
    ) -> Result<KeywordEmissions> {
        self.keyword_queries.fetch_add(1, Ordering::Relaxed);
        self.inner.keyword_emissions(keyword, q)
    }

    fn column_emissions(
        &self,
        keyword: &KeywordSpec,
        t: usize,
        log_y: &mut [f64],
        log_phi: &mut [f64],
    ) -> Result<()> {
        self.keyword_queries
            .fetch_add(keyword.len() as u64 + 1, Ordering::Relaxed);
        self.inner.column_emissions(keyword, t, log_y, log_phi)
    }

    fn greedy_step(
        &self,
        t: usize,
        history: GreedyHistory,
    ) -> Result<(GreedyStepOutput, GreedyHistory)> {
        self.greedy_queries.fetch_add(1, Ordering::Relaxed);
        self.inner.greedy_step(t, history)
    }

    fn as_generative(&self) -> Option<&dyn GenerativeOracle> {
        self.inner.as_generative()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keyword_rejects_empty_and_blank() {
        assert!(KeywordSpec::new("k", vec![]).is_err());
        assert!(KeywordSpec::new("k", vec![3, 0, 2]).is_err());
        let kw = KeywordSpec::new("k", vec![3, 9]).unwrap();
        assert!(kw.validate_vocab(9).is_ok());
        assert!(kw.validate_vocab(8).is_err());
    }

    #[test]
    fn context_last_tracks_prefix() {
        let kw = KeywordSpec::new("k", vec![4, 5, 6]).unwrap();
        assert_eq!(kw.context_last(0), None);
        assert_eq!(kw.context_last(1), Some(4));
        assert_eq!(kw.context_last(3), Some(6));
    }

    #[test]
    fn history_ignores_blank() {
        let g = GreedyHistory::new().extended(0).extended(7).extended(0);
        assert_eq!(g.tokens(), &[7]);
    }

    #[test]
    fn argmax_prefers_first_maximum() {
        assert_eq!(argmax(&[0.1, 0.5, 0.5]).0, 1);
        assert_eq!(argmax(&[f64::NEG_INFINITY, f64::NEG_INFINITY]).0, 0);
    }

    #[test]
    fn query_bounds() {
        assert!(EmissionQuery::new(0, 0).check(5, 2).is_err());
        assert!(EmissionQuery::new(6, 0).check(5, 2).is_err());
        assert!(EmissionQuery::new(5, 3).check(5, 2).is_err());
        assert!(EmissionQuery::new(5, 2).check(5, 2).is_ok());
    }
}
