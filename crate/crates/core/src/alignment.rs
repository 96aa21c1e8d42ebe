//! Exhaustive reference for the keyword search: enumerates every monotonic
//! alignment path of the keyword through the lattice and takes the best.
//!
//! A path starts at any processed frame with `u = 0` at no cost (the keyword
//! may begin anywhere), so its first move is a token move. Token moves stay
//! on the frame and consume `y(t, u)`; blank moves jump to the next processed
//! frame and consume `phi(t, u)` of the frame they leave. Paths end at
//! `(t_end, U)` and the frame score adds `phi(t_end, U)`.
//!
//! Enumeration is exponential, so instances are limited to 12 frames and
//! 4 keyword tokens.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::decoder::{decode_kws, DecodeConfig, ScoreStream};
use crate::emission::{EmissionOracle, EmissionQuery, KeywordSpec, Lattice};
use crate::error::{KwsError, Result};

pub const MAX_FRAMES: usize = 12;
pub const MAX_KEYWORD_LEN: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Move {
    /// Emit the next keyword token, staying on the frame.
    Token,
    /// Emit blank, moving to the next processed frame.
    Blank,
}

/// One move taken from lattice node `(t, u)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PathStep {
    pub t: usize,
    pub u: usize,
    pub mv: Move,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentPath {
    pub steps: Vec<PathStep>,
    /// Sum of the log-probabilities of every move on the path.
    pub log_score: f64,
}

impl AlignmentPath {
    pub fn start_frame(&self) -> usize {
        self.steps[0].t
    }

    /// Checks monotonicity, step continuity along `processed`, and that the
    /// path ends at `(end_frame, keyword_len)`.
    pub fn is_valid(&self, processed: &[usize], end_frame: usize, keyword_len: usize) -> bool {
        let Some(first) = self.steps.first() else {
            return false;
        };
        if first.u != 0 || first.mv != Move::Token {
            return false;
        }
        let (mut t, mut u) = (first.t, 0);
        for step in &self.steps {
            if step.t != t || step.u != u {
                return false;
            }
            match step.mv {
                Move::Token => u += 1,
                Move::Blank => match processed.iter().position(|&p| p == t) {
                    Some(i) if i + 1 < processed.len() => t = processed[i + 1],
                    _ => return false,
                },
            }
            if u > keyword_len {
                return false;
            }
        }
        t == end_frame && u == keyword_len
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BruteForceResult {
    /// Reference `Score[t_end]`: best path score plus `log phi(t_end, U)`.
    pub log_score: f64,
    pub best_path: Option<AlignmentPath>,
    pub paths_enumerated: usize,
}

/// Frames `1..=end_frame`, the hop sequence of RNN-T decoding.
pub fn all_frames(end_frame: usize) -> Vec<usize> {
    (1..=end_frame).collect()
}

/// Processed frames recorded in a decoded stream.
pub fn processed_frames(stream: &ScoreStream) -> Vec<usize> {
    stream
        .processed
        .iter()
        .enumerate()
        .filter_map(|(i, &p)| p.then_some(i + 1))
        .collect()
}

struct Table {
    frames: Vec<usize>,
    log_y: Vec<Vec<f64>>,
    log_phi: Vec<Vec<f64>>,
}

fn build_table<O: EmissionOracle + ?Sized>(
    oracle: &O,
    keyword: &KeywordSpec,
    end_frame: usize,
    processed: &[usize],
) -> Result<Option<Table>> {
    keyword.validate()?;
    if end_frame > MAX_FRAMES || keyword.len() > MAX_KEYWORD_LEN {
        return Err(KwsError::TooLarge(format!(
            "t = {end_frame}, U = {} (limits: t <= {MAX_FRAMES}, U <= {MAX_KEYWORD_LEN})",
            keyword.len()
        )));
    }
    if processed.windows(2).any(|w| w[0] >= w[1]) || processed.first() == Some(&0) {
        return Err(KwsError::validation(
            "processed frames must be strictly increasing and 1-based",
        ));
    }
    let frames: Vec<usize> = processed
        .iter()
        .copied()
        .filter(|&t| t <= end_frame)
        .collect();
    if frames.last() != Some(&end_frame) {
        return Ok(None);
    }
    let mut log_y = Vec::with_capacity(frames.len());
    let mut log_phi = Vec::with_capacity(frames.len());
    for &t in &frames {
        let mut ys = Vec::with_capacity(keyword.len());
        let mut phis = Vec::with_capacity(keyword.len() + 1);
        for u in 0..=keyword.len() {
            let e = oracle.keyword_emissions(keyword, EmissionQuery::new(t, u))?;
            ys.push(e.log_y);
            phis.push(e.log_phi);
        }
        log_y.push(ys);
        log_phi.push(phis);
    }
    Ok(Some(Table {
        frames,
        log_y,
        log_phi,
    }))
}

fn walk(
    table: &Table,
    keyword_len: usize,
    i: usize,
    u: usize,
    steps: &mut Vec<PathStep>,
    score: f64,
    visit: &mut dyn FnMut(&[PathStep], f64),
) {
    let last = table.frames.len() - 1;
    if i == last && u == keyword_len {
        visit(steps, score);
        return;
    }
    let t = table.frames[i];
    if u < keyword_len {
        steps.push(PathStep {
            t,
            u,
            mv: Move::Token,
        });
        walk(
            table,
            keyword_len,
            i,
            u + 1,
            steps,
            score + table.log_y[i][u],
            visit,
        );
        steps.pop();
    }
    if u >= 1 && i < last {
        steps.push(PathStep {
            t,
            u,
            mv: Move::Blank,
        });
        walk(
            table,
            keyword_len,
            i + 1,
            u,
            steps,
            score + table.log_phi[i][u],
            visit,
        );
        steps.pop();
    }
}

fn for_each_path(table: &Table, keyword_len: usize, visit: &mut dyn FnMut(&[PathStep], f64)) {
    let mut steps = Vec::new();
    for start in 0..table.frames.len() {
        let t = table.frames[start];
        steps.push(PathStep {
            t,
            u: 0,
            mv: Move::Token,
        });
        walk(
            table,
            keyword_len,
            start,
            1,
            &mut steps,
            table.log_y[start][0],
            visit,
        );
        steps.pop();
    }
}

/// Every alignment path ending at `(end_frame, U)` over the `processed` frames.
pub fn enumerate_paths<O: EmissionOracle + ?Sized>(
    oracle: &O,
    keyword: &KeywordSpec,
    end_frame: usize,
    processed: &[usize],
) -> Result<Vec<AlignmentPath>> {
    let Some(table) = build_table(oracle, keyword, end_frame, processed)? else {
        return Ok(Vec::new());
    };
    let mut paths = Vec::new();
    for_each_path(&table, keyword.len(), &mut |steps, score| {
        paths.push(AlignmentPath {
            steps: steps.to_vec(),
            log_score: score,
        })
    });
    Ok(paths)
}

/// Reference value of `Score[end_frame]` by exhaustive enumeration.
pub fn brute_force_score<O: EmissionOracle + ?Sized>(
    oracle: &O,
    keyword: &KeywordSpec,
    end_frame: usize,
    processed: &[usize],
) -> Result<BruteForceResult> {
    let unreachable = BruteForceResult {
        log_score: f64::NEG_INFINITY,
        best_path: None,
        paths_enumerated: 0,
    };
    let Some(table) = build_table(oracle, keyword, end_frame, processed)? else {
        return Ok(unreachable);
    };
    let u_len = keyword.len();
    let mut best: Option<(Vec<PathStep>, f64)> = None;
    let mut count = 0;
    for_each_path(&table, u_len, &mut |steps, score| {
        count += 1;
        if best.as_ref().is_none_or(|(_, b)| score > *b) {
            best = Some((steps.to_vec(), score));
        }
    });
    let final_phi = table.log_phi[table.frames.len() - 1][u_len];
    Ok(match best {
        Some((steps, score)) => BruteForceResult {
            log_score: score + final_phi,
            best_path: Some(AlignmentPath {
                steps,
                log_score: score,
            }),
            paths_enumerated: count,
        },
        None => unreachable,
    })
}

/// Random lattice whose every node comes from a proper distribution over
/// `V + 1` symbols (Dirichlet(1), with about one symbol in ten zeroed).
/// `y(t, u)` is the keyword token's probability and `phi(t, u)` blank's.
pub fn random_proper_lattice<R: Rng>(
    rng: &mut R,
    num_frames: usize,
    keyword_len: usize,
    vocab_size: usize,
    d_max: u16,
) -> (Lattice, KeywordSpec) {
    let tokens = (0..keyword_len)
        .map(|_| rng.random_range(1..=vocab_size as u32))
        .collect();
    let keyword = KeywordSpec {
        name: "random".into(),
        tokens,
    };
    let mut nodes = Vec::with_capacity(num_frames * (keyword_len + 1));
    for _ in 0..num_frames * (keyword_len + 1) {
        let mut weights: Vec<f64> = (0..=vocab_size)
            .map(|_| {
                if rng.random_bool(0.1) {
                    0.0
                } else {
                    -(1.0 - rng.random::<f64>()).ln()
                }
            })
            .collect();
        if weights.iter().all(|&w| w == 0.0) {
            weights[0] = 1.0;
        }
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
        nodes.push(weights);
    }
    let greedy: Vec<(u32, u16)> = (0..num_frames)
        .map(|_| {
            (
                rng.random_range(0..=vocab_size as u32),
                rng.random_range(0..=d_max),
            )
        })
        .collect();
    let ln = |p: f64| (p.ln() as f32).min(0.0);
    let lattice = Lattice::from_fn(
        num_frames,
        keyword_len,
        d_max,
        0.03,
        |t, u| {
            let p = &nodes[(t - 1) * (keyword_len + 1) + u];
            let y = keyword.tokens.get(u).map_or(0.0, |&k| p[k as usize]);
            (ln(y), ln(p[0]))
        },
        |t| greedy[t - 1],
    )
    .expect("generated lattice is well formed");
    (lattice, keyword)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleCheckReport {
    pub cases: usize,
    pub frames_checked: usize,
    /// Largest `|DP - brute force|` in log domain; infinite when one side is
    /// `-inf` and the other is not.
    pub max_abs_deviation: f64,
}

/// Compares RNN-T decoding with exhaustive enumeration on `cases` random
/// proper lattices (T <= 12, U <= 4).
pub fn oracle_check(cases: usize, seed: u64) -> Result<OracleCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = OracleCheckReport {
        cases,
        frames_checked: 0,
        max_abs_deviation: 0.0,
    };
    for _ in 0..cases {
        let num_frames = rng.random_range(1..=MAX_FRAMES);
        let keyword_len = rng.random_range(1..=MAX_KEYWORD_LEN);
        let vocab = rng.random_range(1..=8);
        let (lattice, keyword) = random_proper_lattice(&mut rng, num_frames, keyword_len, vocab, 0);
        let stream = decode_kws(&lattice, &keyword, &DecodeConfig::rnnt())?;
        for t in 1..=num_frames {
            let reference = brute_force_score(&lattice, &keyword, t, &all_frames(t))?;
            let dev = log_deviation(stream.scores[t - 1], reference.log_score);
            report.max_abs_deviation = report.max_abs_deviation.max(dev);
            report.frames_checked += 1;
        }
    }
    Ok(report)
}

/// `|a - b|`, zero when both are `-inf`, infinite when exactly one is.
pub fn log_deviation(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY && b == f64::NEG_INFINITY {
        0.0
    } else if a.is_finite() && b.is_finite() {
        (a - b).abs()
    } else {
        f64::INFINITY
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    const NEG: f32 = f32::NEG_INFINITY;

    fn binomial(n: usize, k: usize) -> usize {
        (0..k).fold(1, |acc, i| acc * (n - i) / (i + 1))
    }

    fn uniform(t: usize, u: usize) -> Lattice {
        Lattice::from_fn(t, u, 0, 0.03, |_, _| (-1.0, -1.0), |_| (0, 0)).unwrap()
    }

    fn kw(n: usize) -> KeywordSpec {
        KeywordSpec::new("kw", (1..=n as u32).collect()).unwrap()
    }

    #[test]
    fn path_count_matches_combinatorics() {
        for t in 1..=7 {
            for u in 1..=4 {
                let lattice = uniform(t, u);
                let paths = enumerate_paths(&lattice, &kw(u), t, &all_frames(t)).unwrap();
                assert_eq!(paths.len(), binomial(t - 1 + u, u), "t={t} u={u}");
            }
        }
    }

    #[test]
    fn paths_are_valid_and_distinct() {
        let lattice = uniform(6, 3);
        let frames = all_frames(6);
        let paths = enumerate_paths(&lattice, &kw(3), 6, &frames).unwrap();
        let mut seen = HashSet::new();
        for p in &paths {
            assert!(p.is_valid(&frames, 6, 3));
            assert!(seen.insert(p.steps.clone()));
        }
    }

    #[test]
    fn diagonal_lattice_has_one_live_path() {
        // token u is only possible at frame u, and blank only after it
        let u_len = 4;
        let lattice = Lattice::from_fn(
            u_len,
            u_len,
            0,
            0.03,
            |t, u| {
                let y = if u + 1 == t { -0.25 * t as f32 } else { NEG };
                let phi = if u == t && u < u_len {
                    0.0
                } else if t == u_len && u == u_len {
                    -0.5
                } else {
                    NEG
                };
                (y, phi)
            },
            |_| (0, 0),
        )
        .unwrap();
        let frames = all_frames(u_len);
        let live: Vec<_> = enumerate_paths(&lattice, &kw(u_len), u_len, &frames)
            .unwrap()
            .into_iter()
            .filter(|p| p.log_score.is_finite())
            .collect();
        assert_eq!(live.len(), 1);
        let result = brute_force_score(&lattice, &kw(u_len), u_len, &frames).unwrap();
        let expected: f64 = (1..=u_len).map(|t| -0.25 * t as f64).sum::<f64>() - 0.5;
        assert!((result.log_score - expected).abs() < 1e-12);
    }

    #[test]
    fn constant_example_by_enumeration() {
        let lattice = Lattice::from_fn(
            3,
            1,
            0,
            0.03,
            |_, u| {
                if u == 0 {
                    (0.6f32.ln(), 0.4f32.ln())
                } else {
                    (NEG, 0.5f32.ln())
                }
            },
            |_| (0, 0),
        )
        .unwrap();
        for t in 1..=3 {
            let r = brute_force_score(&lattice, &kw(1), t, &all_frames(t)).unwrap();
            assert_eq!(r.paths_enumerated, t);
            assert!((r.log_score - 0.3f64.ln()).abs() < 1e-6);
        }
    }

    #[test]
    fn too_few_processed_frames_is_unreachable_only_when_skipped() {
        let lattice = uniform(6, 3);
        let r = brute_force_score(&lattice, &kw(3), 5, &[1, 3]).unwrap();
        assert_eq!(r.log_score, f64::NEG_INFINITY);
        assert!(r.best_path.is_none());
        // processed {1, 3, 5}: 3 tokens over 3 frames still fit
        let r = brute_force_score(&lattice, &kw(3), 5, &[1, 3, 5]).unwrap();
        assert!(r.log_score.is_finite());
    }

    #[test]
    fn size_limits_enforced() {
        let lattice = uniform(13, 2);
        assert!(matches!(
            brute_force_score(&lattice, &kw(2), 13, &all_frames(13)),
            Err(KwsError::TooLarge(_))
        ));
        let lattice = uniform(3, 5);
        assert!(matches!(
            brute_force_score(&lattice, &kw(5), 3, &all_frames(3)),
            Err(KwsError::TooLarge(_))
        ));
    }

    #[test]
    fn small_oracle_check_passes() {
        let report = oracle_check(50, 1).unwrap();
        assert!(report.max_abs_deviation <= 1e-9, "{report:?}");
        assert!(report.frames_checked > 50);
    }
}
