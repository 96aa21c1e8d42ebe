//! Keyword-constrained max-product search over the transducer lattice, in
//! RNN-T mode (every frame) and TDT mode (hops of the predicted duration).
//!
//! `delta(t, u)` is the best log score of any path that has emitted the first
//! `u` keyword tokens by frame `t`; `delta(t, 0) = 0` at every processed frame
//! so a keyword may start anywhere. With `d` the hop from the previous
//! processed frame,
//!
//! ```text
//! delta(t, u) = max(delta(t, u-1) + log y(t, u-1), delta(t-d, u) + log phi(t-d, u))
//! Score[t]    = delta(t, U) + log phi(t, U)
//! ```
//!
//! Skipped frames are never computed and carry `Score = -inf`.

use std::fmt::Write as _;
use std::mem;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::emission::{EmissionOracle, GreedyHistory, KeywordSpec};
use crate::error::{KwsError, Result};

/// Frames suppressed after a detection: about one second at 30 ms per frame.
pub const DEFAULT_REFRACTORY_FRAMES: usize = 34;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    Rnnt,
    Tdt,
}

impl std::fmt::Display for DecodeMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DecodeMode::Rnnt => "rnnt",
            DecodeMode::Tdt => "tdt",
        })
    }
}

/// What to do with a predicted duration of 0, which would never advance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ZeroDurationPolicy {
    #[default]
    ClampToOne,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub mode: DecodeMode,
    /// Largest hop taken in TDT mode; predicted durations above it are capped.
    pub d_max: u16,
    pub zero_duration_policy: ZeroDurationPolicy,
    #[serde(with = "crate::logjson::value")]
    pub threshold_log: f64,
    pub refractory_frames: usize,
}

impl DecodeConfig {
    /// RNN-T mode with no detection threshold (events never fire).
    pub fn rnnt() -> Self {
        DecodeConfig {
            mode: DecodeMode::Rnnt,
            d_max: 0,
            zero_duration_policy: ZeroDurationPolicy::ClampToOne,
            threshold_log: f64::INFINITY,
            refractory_frames: DEFAULT_REFRACTORY_FRAMES,
        }
    }

    pub fn tdt(d_max: u16) -> Self {
        DecodeConfig {
            mode: DecodeMode::Tdt,
            d_max,
            ..Self::rnnt()
        }
    }

    pub fn with_threshold(mut self, threshold_log: f64) -> Self {
        self.threshold_log = threshold_log;
        self
    }

    pub fn with_refractory(mut self, frames: usize) -> Self {
        self.refractory_frames = frames;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.mode == DecodeMode::Tdt && self.d_max == 0 {
            return Err(KwsError::validation("TDT mode requires d_max >= 1"));
        }
        if self.threshold_log.is_nan() {
            return Err(KwsError::validation("threshold_log is NaN"));
        }
        Ok(())
    }

    /// Frames to advance after a TDT step that predicted `duration`.
    pub fn hop(&self, duration: u16) -> usize {
        let capped = duration.min(self.d_max);
        match self.zero_duration_policy {
            ZeroDurationPolicy::ClampToOne => usize::from(capped.max(1)),
        }
    }

    fn check_oracle<O: EmissionOracle + ?Sized>(&self, oracle: &O) -> Result<()> {
        if self.mode == DecodeMode::Tdt && oracle.d_max() == 0 {
            return Err(KwsError::Mode(
                "TDT decoding needs an oracle with a duration output (D_max > 0)".into(),
            ));
        }
        Ok(())
    }
}

/// The most recently processed lattice column.
#[derive(Debug, Clone, PartialEq)]
pub struct DpColumn {
    pub t_last: usize,
    pub delta: Vec<f64>,
    pub phi_last: Vec<f64>,
}

impl DpColumn {
    fn empty(keyword_len: usize) -> Self {
        DpColumn {
            t_last: 0,
            delta: vec![f64::NEG_INFINITY; keyword_len + 1],
            phi_last: vec![f64::NEG_INFINITY; keyword_len + 1],
        }
    }
}

/// Fills `delta` for the next processed column. With no previous column the
/// horizontal terms come from the t = 0 initialisation, `delta(0,u) = 1` and
/// `phi(0,u) = 0`, so they are `-inf`. Ties go to the vertical transition.
fn advance_column(prev: Option<&DpColumn>, log_y: &[f64], delta: &mut [f64]) {
    delta[0] = 0.0;
    for u in 1..delta.len() {
        let vertical = delta[u - 1] + log_y[u - 1];
        let horizontal = match prev {
            Some(col) => col.delta[u] + col.phi_last[u],
            None => f64::NEG_INFINITY,
        };
        delta[u] = if vertical >= horizontal {
            vertical
        } else {
            horizontal
        };
    }
}

/// Per-frame keyword confidence for one utterance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreStream {
    #[serde(with = "crate::logjson::values")]
    pub scores: Vec<f64>,
    pub processed: Vec<bool>,
    pub columns_evaluated: usize,
}

impl ScoreStream {
    pub fn num_frames(&self) -> usize {
        self.scores.len()
    }

    pub fn skipped(&self) -> usize {
        self.processed.iter().filter(|&&p| !p).count()
    }

    /// Best score over all frames, `-inf` if nothing was scored.
    pub fn max_score(&self) -> f64 {
        self.scores
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Bitwise equality, treating equal NaN payloads as equal.
    pub fn bit_identical(&self, other: &ScoreStream) -> bool {
        self.columns_evaluated == other.columns_evaluated
            && self.processed == other.processed
            && self.scores.len() == other.scores.len()
            && self
                .scores
                .iter()
                .zip(&other.scores)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionEvent {
    pub frame: usize,
    #[serde(with = "crate::logjson::value")]
    pub log_score: f64,
    pub keyword: String,
}

/// Thresholding with a refractory window: fires at a processed frame whose
/// score reaches the threshold, unless it is within `refractory` frames after
/// the previous event.
#[derive(Debug, Clone)]
struct EventGate {
    threshold: f64,
    refractory: usize,
    last: Option<usize>,
}

impl EventGate {
    fn new(threshold: f64, refractory: usize) -> Self {
        EventGate {
            threshold,
            refractory,
            last: None,
        }
    }

    fn offer(&mut self, frame: usize, score: f64) -> bool {
        if score < self.threshold || score.is_nan() {
            return false;
        }
        if let Some(last) = self.last {
            if frame <= last + self.refractory {
                return false;
            }
        }
        self.last = Some(frame);
        true
    }
}

/// Detection events implied by a finished score stream.
pub fn detect_events(
    stream: &ScoreStream,
    keyword: &str,
    threshold_log: f64,
    refractory_frames: usize,
) -> Vec<DetectionEvent> {
    let mut gate = EventGate::new(threshold_log, refractory_frames);
    stream
        .scores
        .iter()
        .zip(&stream.processed)
        .enumerate()
        .filter(|&(i, (&score, &processed))| processed && gate.offer(i + 1, score))
        .map(|(i, (&score, _))| DetectionEvent {
            frame: i + 1,
            log_score: score,
            keyword: keyword.to_string(),
        })
        .collect()
}

/// Decodes a whole utterance.
pub fn decode_kws<O: EmissionOracle + ?Sized>(
    oracle: &O,
    keyword: &KeywordSpec,
    config: &DecodeConfig,
) -> Result<ScoreStream> {
    keyword.validate()?;
    config.validate()?;
    config.check_oracle(oracle)?;

    let num_frames = oracle.num_frames();
    let u_len = keyword.len();
    let mut scores = vec![f64::NEG_INFINITY; num_frames];
    let mut processed = vec![false; num_frames];
    let mut columns_evaluated = 0;

    let mut log_y = vec![f64::NEG_INFINITY; u_len];
    let mut prev: Option<DpColumn> = None;
    let mut cur = DpColumn::empty(u_len);
    let mut history = GreedyHistory::new();
    let mut t = 1;
    while t <= num_frames {
        oracle.column_emissions(keyword, t, &mut log_y, &mut cur.phi_last)?;
        advance_column(prev.as_ref(), &log_y, &mut cur.delta);
        cur.t_last = t;
        scores[t - 1] = cur.delta[u_len] + cur.phi_last[u_len];
        processed[t - 1] = true;
        columns_evaluated += 1;

        let hop = match config.mode {
            DecodeMode::Rnnt => 1,
            DecodeMode::Tdt => {
                let (step, next) = oracle.greedy_step(t, history)?;
                history = next;
                config.hop(step.duration)
            }
        };
        let recycled = prev.replace(cur);
        cur = recycled.unwrap_or_else(|| DpColumn::empty(u_len));
        t += hop;
    }
    Ok(ScoreStream {
        scores,
        processed,
        columns_evaluated,
    })
}

/// What happened when a frame was delivered to a [`KwsStream`].
#[derive(Debug, Clone, PartialEq)]
pub struct FrameOutcome {
    pub frame: usize,
    pub processed: bool,
    pub score: f64,
    pub event: Option<DetectionEvent>,
}

/// Frame-at-a-time decoder for one keyword on one stream.
///
/// Frames must be delivered in order starting at 1. The decoder queries the
/// oracle only at the frame being delivered.
#[derive(Debug, Clone)]
pub struct KwsStream {
    keyword: KeywordSpec,
    config: DecodeConfig,
    column: Option<DpColumn>,
    spare: DpColumn,
    log_y: Vec<f64>,
    history: GreedyHistory,
    delivered: usize,
    next_due: usize,
    gate: EventGate,
    scores: Vec<f64>,
    processed: Vec<bool>,
    columns_evaluated: usize,
    oracle_queries: u64,
    search_time: Duration,
}

impl KwsStream {
    pub fn new(keyword: &KeywordSpec, config: &DecodeConfig) -> Result<Self> {
        keyword.validate()?;
        config.validate()?;
        let u_len = keyword.len();
        Ok(KwsStream {
            keyword: keyword.clone(),
            config: config.clone(),
            column: None,
            spare: DpColumn::empty(u_len),
            log_y: vec![f64::NEG_INFINITY; u_len],
            history: GreedyHistory::new(),
            delivered: 0,
            next_due: 1,
            gate: EventGate::new(config.threshold_log, config.refractory_frames),
            scores: Vec::new(),
            processed: Vec::new(),
            columns_evaluated: 0,
            oracle_queries: 0,
            search_time: Duration::ZERO,
        })
    }

    pub fn push_frame<O: EmissionOracle + ?Sized>(
        &mut self,
        oracle: &O,
        frame: usize,
    ) -> Result<FrameOutcome> {
        if frame != self.delivered + 1 {
            return Err(KwsError::Protocol {
                expected: self.delivered + 1,
                got: frame,
            });
        }
        if frame == 1 {
            self.config.check_oracle(oracle)?;
        }
        self.delivered = frame;

        if frame < self.next_due {
            self.scores.push(f64::NEG_INFINITY);
            self.processed.push(false);
            return Ok(FrameOutcome {
                frame,
                processed: false,
                score: f64::NEG_INFINITY,
                event: None,
            });
        }

        let u_len = self.keyword.len();
        let mut col = mem::replace(&mut self.spare, DpColumn::empty(0));
        oracle.column_emissions(&self.keyword, frame, &mut self.log_y, &mut col.phi_last)?;
        self.oracle_queries += u_len as u64 + 1;

        let started = Instant::now();
        advance_column(self.column.as_ref(), &self.log_y, &mut col.delta);
        col.t_last = frame;
        let score = col.delta[u_len] + col.phi_last[u_len];
        self.search_time += started.elapsed();

        if let Some(old) = self.column.replace(col) {
            self.spare = old;
        } else {
            self.spare = DpColumn::empty(u_len);
        }
        self.scores.push(score);
        self.processed.push(true);
        self.columns_evaluated += 1;

        let hop = match self.config.mode {
            DecodeMode::Rnnt => 1,
            DecodeMode::Tdt => {
                let history = mem::take(&mut self.history);
                let (step, next) = oracle.greedy_step(frame, history)?;
                self.oracle_queries += 1;
                self.history = next;
                self.config.hop(step.duration)
            }
        };
        self.next_due = frame + hop;

        let event = self.gate.offer(frame, score).then(|| DetectionEvent {
            frame,
            log_score: score,
            keyword: self.keyword.name.clone(),
        });
        Ok(FrameOutcome {
            frame,
            processed: true,
            score,
            event,
        })
    }

    /// The last processed column, if any.
    pub fn column(&self) -> Option<&DpColumn> {
        self.column.as_ref()
    }

    pub fn frames_delivered(&self) -> usize {
        self.delivered
    }

    pub fn columns_evaluated(&self) -> usize {
        self.columns_evaluated
    }

    pub fn oracle_queries(&self) -> u64 {
        self.oracle_queries
    }

    /// Time spent inside the column recursion only.
    pub fn search_time(&self) -> Duration {
        self.search_time
    }

    pub fn finish(self) -> ScoreStream {
        ScoreStream {
            scores: self.scores,
            processed: self.processed,
            columns_evaluated: self.columns_evaluated,
        }
    }
}

/// Streams every frame of `oracle` through a [`KwsStream`], handing
/// detection events to `sink` as they fire.
pub fn decode_kws_streaming<O: EmissionOracle + ?Sized>(
    oracle: &O,
    keyword: &KeywordSpec,
    config: &DecodeConfig,
    mut sink: impl FnMut(DetectionEvent),
) -> Result<ScoreStream> {
    let mut stream = KwsStream::new(keyword, config)?;
    for t in 1..=oracle.num_frames() {
        if let Some(event) = stream.push_frame(oracle, t)?.event {
            sink(event);
        }
    }
    Ok(stream.finish())
}

/// CSV of `delta(t, u)` with header `t,u0,...,uU`. Skipped frames have
/// empty cells.
pub fn dump_delta_matrix<O: EmissionOracle + ?Sized>(
    oracle: &O,
    keyword: &KeywordSpec,
    config: &DecodeConfig,
) -> Result<String> {
    let mut stream = KwsStream::new(keyword, config)?;
    let u_len = keyword.len();
    let mut out = String::from("t");
    for u in 0..=u_len {
        let _ = write!(out, ",u{u}");
    }
    out.push('\n');
    for t in 1..=oracle.num_frames() {
        let outcome = stream.push_frame(oracle, t)?;
        let _ = write!(out, "{t}");
        match stream.column().filter(|_| outcome.processed) {
            Some(col) => {
                for v in &col.delta {
                    let _ = write!(out, ",{v:?}");
                }
            }
            None => out.push_str(&",".repeat(u_len + 1)),
        }
        out.push('\n');
    }
    Ok(out)
}

/// One JSON-lines record of `kws decode` output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub utt_id: String,
    pub keyword: String,
    pub frame_seconds: f32,
    #[serde(with = "crate::logjson::values")]
    pub scores: Vec<f64>,
    pub processed: Vec<bool>,
    pub columns_evaluated: usize,
    #[serde(default)]
    pub events: Vec<DetectionEvent>,
}

impl ScoreRecord {
    pub fn new(
        utt_id: impl Into<String>,
        keyword: impl Into<String>,
        frame_seconds: f32,
        stream: ScoreStream,
        events: Vec<DetectionEvent>,
    ) -> Self {
        ScoreRecord {
            utt_id: utt_id.into(),
            keyword: keyword.into(),
            frame_seconds,
            scores: stream.scores,
            processed: stream.processed,
            columns_evaluated: stream.columns_evaluated,
            events,
        }
    }

    pub fn stream(&self) -> ScoreStream {
        ScoreStream {
            scores: self.scores.clone(),
            processed: self.processed.clone(),
            columns_evaluated: self.columns_evaluated,
        }
    }
}
