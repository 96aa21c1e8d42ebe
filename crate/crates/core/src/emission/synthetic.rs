//! Generative synthetic joiner built around a planted alignment.
//!
//! Each planted [`Segment`] says "token `k` is spoken over frames
//! `[start, start + duration)`". At frame `t` inside the segment the clean
//! distribution is a point mass on `k`, unless the last context token is
//! already `k` (the token has been emitted), in which case it is a point
//! mass on blank. Frames outside every segment are blank. This is what a
//! stateless predictor with a one-token context learns.
//!
//! Noise mixes `epsilon` of the mass into a noise distribution `q`: uniform
//! over all `V + 1` symbols, optionally with a share `distractor_mass * r`
//! moved onto a single distractor symbol `j`, where `(r, j)` are drawn from a
//! ChaCha stream keyed by `(seed, t, context)`. The oracle is a pure function
//! of `(t, last context token)`.
//!
//! The duration head puts `duration_concentration` on
//! `min(segment duration, D_max)` (for gap frames, the distance to the next
//! segment start) and spreads the rest evenly over the other durations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    argmax, EmissionOracle, EmissionQuery, GenerativeOracle, GreedyHistory, GreedyStepOutput,
    KeywordEmissions, KeywordSpec, BLANK, DEFAULT_FRAME_SECONDS,
};
use crate::error::{KwsError, Result};

/// A planted token occupying `duration` frames from `start` (1-based).
/// Token 0 marks an explicit silence segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub token: u32,
    pub start: usize,
    pub duration: usize,
}

impl Segment {
    pub fn end(&self) -> usize {
        self.start + self.duration
    }
}

fn default_frame_seconds() -> f32 {
    DEFAULT_FRAME_SECONDS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticJoinerConfig {
    pub vocab_size: usize,
    pub num_frames: usize,
    pub alignment: Vec<Segment>,
    pub epsilon: f64,
    pub d_max: u16,
    pub duration_concentration: f64,
    #[serde(default)]
    pub distractor_mass: f64,
    pub seed: u64,
    #[serde(default = "default_frame_seconds")]
    pub frame_seconds: f32,
}

impl SyntheticJoinerConfig {
    /// Tiles consecutive segments from frame 1; `T` is the total duration.
    pub fn tiled(vocab_size: usize, tokens_and_durations: &[(u32, usize)]) -> Self {
        let mut start = 1;
        let alignment = tokens_and_durations
            .iter()
            .map(|&(token, duration)| {
                let seg = Segment {
                    token,
                    start,
                    duration,
                };
                start += duration;
                seg
            })
            .collect();
        SyntheticJoinerConfig {
            vocab_size,
            num_frames: start - 1,
            alignment,
            epsilon: 0.0,
            d_max: 0,
            duration_concentration: 1.0,
            distractor_mass: 0.0,
            seed: 0,
            frame_seconds: DEFAULT_FRAME_SECONDS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(KwsError::Validation(msg));
        if self.vocab_size == 0 {
            return fail("vocab_size must be >= 1".into());
        }
        if self.num_frames == 0 {
            return fail("num_frames must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.epsilon) {
            return fail(format!("epsilon {} outside [0, 1)", self.epsilon));
        }
        if !(0.0..=1.0).contains(&self.duration_concentration) {
            return fail(format!(
                "duration_concentration {} outside [0, 1]",
                self.duration_concentration
            ));
        }
        if !(0.0..=1.0).contains(&self.distractor_mass) {
            return fail(format!(
                "distractor_mass {} outside [0, 1]",
                self.distractor_mass
            ));
        }
        let mut prev_end = 1;
        for seg in &self.alignment {
            if seg.duration == 0 {
                return fail(format!("segment at frame {} has zero duration", seg.start));
            }
            if seg.start < prev_end {
                return fail(format!(
                    "segment at frame {} overlaps or is out of order",
                    seg.start
                ));
            }
            if seg.end() > self.num_frames + 1 {
                return fail(format!(
                    "segment at frame {} runs past T = {}",
                    seg.start, self.num_frames
                ));
            }
            if seg.token as usize > self.vocab_size {
                return fail(format!("segment token {} outside vocabulary", seg.token));
            }
            prev_end = seg.end();
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticJoiner {
    config: SyntheticJoinerConfig,
    noise_key: [u8; 32],
    frame_token: Vec<u32>,
    frame_duration: Vec<u16>,
}

impl SyntheticJoiner {
    pub fn new(config: SyntheticJoinerConfig) -> Result<Self> {
        config.validate()?;
        let num_frames = config.num_frames;
        let mut frame_token = vec![BLANK; num_frames];
        let mut frame_duration = vec![0u16; num_frames];
        let cap = |d: usize| d.min(usize::from(config.d_max)).max(1) as u16;

        let mut next_seg = 0;
        for t in 1..=num_frames {
            while next_seg < config.alignment.len() && config.alignment[next_seg].end() <= t {
                next_seg += 1;
            }
            match config.alignment.get(next_seg) {
                Some(seg) if seg.start <= t => {
                    frame_token[t - 1] = seg.token;
                    frame_duration[t - 1] = cap(seg.duration);
                }
                Some(seg) => frame_duration[t - 1] = cap(seg.start - t),
                None => frame_duration[t - 1] = cap(num_frames + 1 - t),
            }
        }
        if config.d_max == 0 {
            frame_duration.iter_mut().for_each(|d| *d = 0);
        }

        let noise_key = ChaCha8Rng::seed_from_u64(config.seed).get_seed();
        Ok(SyntheticJoiner {
            config,
            noise_key,
            frame_token,
            frame_duration,
        })
    }

    pub fn config(&self) -> &SyntheticJoinerConfig {
        &self.config
    }

    /// The clean-distribution symbol at frame `t` after context `ctx_last`.
    pub fn target(&self, t: usize, ctx_last: Option<u32>) -> u32 {
        let k = self.frame_token[t - 1];
        if k == BLANK || ctx_last == Some(k) {
            BLANK
        } else {
            k
        }
    }

    /// Most likely duration at frame `t` (before concentration noise).
    pub fn duration_target(&self, t: usize) -> u16 {
        self.frame_duration[t - 1]
    }

    /// `(share, symbol)` of the distractor at `(t, ctx_last)`.
    fn distractor(&self, t: usize, ctx_last: Option<u32>) -> (f64, u32) {
        if self.config.distractor_mass == 0.0 {
            return (0.0, BLANK);
        }
        let width = self.config.vocab_size as u64 + 2;
        let ctx = ctx_last.map_or(0, |k| u64::from(k) + 1);
        let mut rng = ChaCha8Rng::from_seed(self.noise_key);
        rng.set_stream(t as u64 * width + ctx);
        let share = self.config.distractor_mass * rng.random::<f64>();
        let symbol = rng.random_range(0..=self.config.vocab_size as u32);
        (share, symbol)
    }

    fn prob(&self, v: u32, target: u32, distractor: (f64, u32)) -> f64 {
        let eps = self.config.epsilon;
        let symbols = (self.config.vocab_size + 1) as f64;
        let (share, j) = distractor;
        let mut q = (1.0 - share) / symbols;
        if v == j {
            q += share;
        }
        let clean = if v == target { 1.0 - eps } else { 0.0 };
        clean + eps * q
    }

    fn log_prob(&self, t: usize, ctx_last: Option<u32>, v: u32) -> f64 {
        let p = self.prob(v, self.target(t, ctx_last), self.distractor(t, ctx_last));
        p.ln().min(0.0)
    }

    /// Full probability vector over `[0, V]` at `(t, ctx_last)`.
    pub fn token_distribution(&self, t: usize, ctx_last: Option<u32>) -> Vec<f64> {
        let target = self.target(t, ctx_last);
        let distractor = self.distractor(t, ctx_last);
        (0..=self.config.vocab_size as u32)
            .map(|v| self.prob(v, target, distractor))
            .collect()
    }

    /// Full probability vector over `[0, D_max]` at frame `t`.
    pub fn duration_distribution(&self, t: usize) -> Result<Vec<f64>> {
        let d_max = self.config.d_max;
        if d_max == 0 {
            return Err(KwsError::Mode(
                "synthetic joiner has D_max = 0; no duration output".into(),
            ));
        }
        super::check_frame(t, self.config.num_frames)?;
        let c = self.config.duration_concentration;
        let rest = (1.0 - c) / f64::from(d_max);
        let target = self.frame_duration[t - 1];
        Ok((0..=d_max)
            .map(|d| if d == target { c } else { rest })
            .collect())
    }

    fn check_token(&self, token: u32) -> Result<()> {
        if token as usize > self.config.vocab_size {
            return Err(KwsError::Range {
                what: "token",
                value: token as usize,
                lo: 0,
                hi: self.config.vocab_size,
            });
        }
        Ok(())
    }
}

fn ln_all(values: Vec<f64>) -> Vec<f64> {
    values.into_iter().map(|p| p.ln().min(0.0)).collect()
}

impl EmissionOracle for SyntheticJoiner {
    fn num_frames(&self) -> usize {
        self.config.num_frames
    }

    fn d_max(&self) -> u16 {
        self.config.d_max
    }

    fn frame_seconds(&self) -> f32 {
        self.config.frame_seconds
    }

    fn keyword_emissions(
        &self,
        keyword: &KeywordSpec,
        q: EmissionQuery,
    ) -> Result<KeywordEmissions> {
        q.check(self.config.num_frames, keyword.len())?;
        let ctx = keyword.context_last(q.u);
        let log_y = match keyword.tokens.get(q.u) {
            Some(&tok) => {
                self.check_token(tok)?;
                self.log_prob(q.t, ctx, tok)
            }
            None => f64::NEG_INFINITY,
        };
        Ok(KeywordEmissions {
            log_y,
            log_phi: self.log_prob(q.t, ctx, BLANK),
        })
    }

    fn greedy_step(
        &self,
        t: usize,
        history: GreedyHistory,
    ) -> Result<(GreedyStepOutput, GreedyHistory)> {
        let durations = self.duration_distribution(t)?;
        let tokens = self.token_distribution(t, history.last());
        let (token, p_token) = argmax(&tokens);
        let (duration, p_duration) = argmax(&durations);
        let step = GreedyStepOutput {
            token: token as u32,
            duration: duration as u16,
            log_token_prob: p_token.ln().min(0.0),
            log_duration_prob: p_duration.ln().min(0.0),
        };
        Ok((step, history.extended(step.token)))
    }

    fn as_generative(&self) -> Option<&dyn GenerativeOracle> {
        Some(self)
    }
}

impl GenerativeOracle for SyntheticJoiner {
    fn num_frames(&self) -> usize {
        self.config.num_frames
    }

    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn d_max(&self) -> u16 {
        self.config.d_max
    }

    fn token_log_probs(&self, t: usize, context: &[u32]) -> Result<Vec<f64>> {
        super::check_frame(t, self.config.num_frames)?;
        Ok(ln_all(self.token_distribution(t, context.last().copied())))
    }

    fn duration_log_probs(&self, t: usize, _context: &[u32]) -> Result<Vec<f64>> {
        Ok(ln_all(self.duration_distribution(t)?))
    }
}
