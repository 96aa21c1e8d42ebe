use std::collections::HashMap;
use std::sync::Mutex;

use kws_core::alignment::{brute_force_score, processed_frames, random_proper_lattice};
use kws_core::baselines::{beam_search, greedy_search, keyword_hit, SearchConfig};
use kws_core::emission::{EmissionQuery, GreedyStepOutput, KeywordEmissions, BLANK};
use kws_core::{
    decode_kws, decode_kws_streaming, DecodeConfig, EmissionOracle, GenerativeOracle,
    GreedyHistory, KeywordSpec, KwsError, KwsStream, Lattice, SyntheticJoiner,
    SyntheticJoinerConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const A: u32 = 1;
const B: u32 = 2;

/// Two frames, tokens A and B, probabilities looked up by (frame, history).
/// Unlisted histories put 0.98 on blank.
struct Toy {
    table: HashMap<(usize, Vec<u32>), [f64; 3]>,
}

impl Toy {
    fn new() -> Self {
        let rows = [
            (1, vec![], [0.1, 0.5, 0.4]),
            (1, vec![A], [0.9, 0.05, 0.05]),
            (1, vec![B], [0.9, 0.05, 0.05]),
            (2, vec![], [0.9, 0.05, 0.05]),
            (2, vec![A], [0.4, 0.3, 0.3]),
            (2, vec![B], [0.95, 0.025, 0.025]),
        ];
        Toy {
            table: rows.into_iter().map(|(t, h, p)| ((t, h), p)).collect(),
        }
    }

    fn probs(&self, t: usize, history: &[u32]) -> [f64; 3] {
        self.table
            .get(&(t, history.to_vec()))
            .copied()
            .unwrap_or([0.98, 0.01, 0.01])
    }
}

impl GenerativeOracle for Toy {
    fn num_frames(&self) -> usize {
        2
    }

    fn vocab_size(&self) -> usize {
        2
    }

    fn d_max(&self) -> u16 {
        0
    }

    fn token_log_probs(&self, t: usize, context: &[u32]) -> kws_core::Result<Vec<f64>> {
        Ok(self.probs(t, context).iter().map(|p| p.ln()).collect())
    }

    fn duration_log_probs(&self, _t: usize, _context: &[u32]) -> kws_core::Result<Vec<f64>> {
        Err(KwsError::Mode("toy has no durations".into()))
    }
}

impl EmissionOracle for Toy {
    fn num_frames(&self) -> usize {
        2
    }

    fn d_max(&self) -> u16 {
        0
    }

    fn keyword_emissions(
        &self,
        keyword: &KeywordSpec,
        q: EmissionQuery,
    ) -> kws_core::Result<KeywordEmissions> {
        let p = self.probs(q.t, &keyword.tokens[..q.u]);
        let log_y = keyword
            .tokens
            .get(q.u)
            .map_or(f64::NEG_INFINITY, |&k| p[k as usize].ln());
        Ok(KeywordEmissions {
            log_y,
            log_phi: p[0].ln(),
        })
    }

    fn greedy_step(
        &self,
        _t: usize,
        _history: GreedyHistory,
    ) -> kws_core::Result<(GreedyStepOutput, GreedyHistory)> {
        Err(KwsError::Mode("toy has no greedy track".into()))
    }

    fn as_generative(&self) -> Option<&dyn GenerativeOracle> {
        Some(self)
    }
}

#[test]
fn beam_recovers_what_greedy_commits_away() {
    let toy = Toy::new();
    let greedy = greedy_search(&toy, &SearchConfig::rnnt()).unwrap();
    assert_eq!(greedy.tokens, vec![A]);
    assert_eq!(greedy.emit_frames, vec![1]);
    assert!((greedy.log_prob - (0.5f64 * 0.9 * 0.4).ln()).abs() < 1e-12);

    let beam = beam_search(&toy, 4, &SearchConfig::rnnt()).unwrap();
    assert_eq!(beam[0].tokens, vec![B]);
    assert!(beam[0].log_prob > greedy.log_prob);
    assert!(beam[0].log_prob >= (0.4f64 * 0.9 * 0.95).ln() - 1e-12);
    assert!(beam.windows(2).all(|w| w[0].log_prob >= w[1].log_prob));

    let kw_b = KeywordSpec::new("b", vec![B]).unwrap();
    assert!(keyword_hit(&greedy, &kw_b).is_none());
    assert!(keyword_hit(&beam[0], &kw_b).is_some());
}

#[test]
fn keyword_search_scores_the_path_greedy_missed() {
    let toy = Toy::new();
    let kw = KeywordSpec::new("b", vec![B]).unwrap();
    let stream = decode_kws(&toy, &kw, &DecodeConfig::rnnt()).unwrap();
    // B then blank at frame 1; frame 2 adds one more blank.
    assert!((stream.scores[0] - (0.4f64 * 0.9).ln()).abs() < 1e-12);
    assert!((stream.scores[1] - (0.4f64 * 0.9 * 0.95).ln()).abs() < 1e-12);
    for t in 1..=2 {
        let reference = brute_force_score(&toy, &kw, t, &[1, 2][..t]).unwrap();
        assert!((reference.log_score - stream.scores[t - 1]).abs() < 1e-12);
    }
}

/// Records every frame the decoder asks about.
struct Recording<'a, O> {
    inner: &'a O,
    column_frames: Mutex<Vec<usize>>,
    greedy_frames: Mutex<Vec<usize>>,
}

impl<'a, O: EmissionOracle> Recording<'a, O> {
    fn new(inner: &'a O) -> Self {
        Recording {
            inner,
            column_frames: Mutex::new(Vec::new()),
            greedy_frames: Mutex::new(Vec::new()),
        }
    }
}

impl<O: EmissionOracle> EmissionOracle for Recording<'_, O> {
    fn num_frames(&self) -> usize {
        self.inner.num_frames()
    }

    fn d_max(&self) -> u16 {
        self.inner.d_max()
    }

    fn keyword_emissions(
        &self,
        keyword: &KeywordSpec,
        q: EmissionQuery,
    ) -> kws_core::Result<KeywordEmissions> {
        self.inner.keyword_emissions(keyword, q)
    }

    fn column_emissions(
        &self,
        keyword: &KeywordSpec,
        t: usize,
        log_y: &mut [f64],
        log_phi: &mut [f64],
    ) -> kws_core::Result<()> {
        self.column_frames.lock().unwrap().push(t);
        self.inner.column_emissions(keyword, t, log_y, log_phi)
    }

    fn greedy_step(
        &self,
        t: usize,
        history: GreedyHistory,
    ) -> kws_core::Result<(GreedyStepOutput, GreedyHistory)> {
        self.greedy_frames.lock().unwrap().push(t);
        self.inner.greedy_step(t, history)
    }
}

fn planted(layout: &[(u32, usize)], d_max: u16) -> SyntheticJoiner {
    let mut config = SyntheticJoinerConfig::tiled(9, layout);
    config.d_max = d_max;
    SyntheticJoiner::new(config).unwrap()
}

#[test]
fn tdt_visits_exactly_the_frames_the_durations_point_to() {
    let layout = [(1, 2), (BLANK, 5), (2, 1), (3, 4), (BLANK, 3)];
    let joiner = planted(&layout, 4);
    let kw = KeywordSpec::new("k", vec![2, 3]).unwrap();
    let recording = Recording::new(&joiner);
    let stream = decode_kws(&recording, &kw, &DecodeConfig::tdt(4)).unwrap();

    let mut expected = Vec::new();
    let mut t = 1;
    while t <= joiner.config().num_frames {
        expected.push(t);
        t += usize::from(joiner.duration_target(t).clamp(1, 4));
    }
    let visited = recording.column_frames.lock().unwrap().clone();
    assert_eq!(visited, expected);
    assert_eq!(*recording.greedy_frames.lock().unwrap(), expected);
    assert_eq!(processed_frames(&stream), expected);
    assert_eq!(stream.columns_evaluated, expected.len());
    for (i, &p) in stream.processed.iter().enumerate() {
        if !p {
            assert_eq!(stream.scores[i], f64::NEG_INFINITY);
        }
    }
}

#[test]
fn streaming_never_looks_ahead() {
    let layout = [(4, 3), (5, 3), (6, 3), (BLANK, 3)];
    let joiner = planted(&layout, 6);
    let kw = KeywordSpec::new("k", vec![4, 5, 6]).unwrap();
    for config in [DecodeConfig::rnnt(), DecodeConfig::tdt(6)] {
        let recording = Recording::new(&joiner);
        let mut stream = KwsStream::new(&kw, &config).unwrap();
        for t in 1..=joiner.config().num_frames {
            stream.push_frame(&recording, t).unwrap();
            let seen = recording.column_frames.lock().unwrap();
            assert!(seen.iter().all(|&f| f <= t));
            assert!(recording
                .greedy_frames
                .lock()
                .unwrap()
                .iter()
                .all(|&f| f <= t));
            drop(seen);
        }
    }
}

#[test]
fn out_of_order_frames_are_rejected() {
    let joiner = planted(&[(1, 3)], 2);
    let kw = KeywordSpec::new("k", vec![1]).unwrap();
    let mut stream = KwsStream::new(&kw, &DecodeConfig::rnnt()).unwrap();
    stream.push_frame(&joiner, 1).unwrap();
    match stream.push_frame(&joiner, 3) {
        Err(KwsError::Protocol { expected, got }) => assert_eq!((expected, got), (2, 3)),
        other => panic!("expected a protocol error, got {other:?}"),
    }
}

#[test]
fn tdt_needs_a_duration_head() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (lattice, kw) = random_proper_lattice(&mut rng, 8, 2, 5, 0);
    assert!(matches!(
        decode_kws(&lattice, &kw, &DecodeConfig::tdt(4)),
        Err(KwsError::Mode(_))
    ));
    assert!(matches!(
        decode_kws(&lattice, &kw, &DecodeConfig::tdt(0)),
        Err(KwsError::Validation(_))
    ));
    assert!(decode_kws(&lattice, &kw, &DecodeConfig::rnnt()).is_ok());
}

/// Rebuilds `lattice` with `shift` added to `log y(t, u_shift)` at every frame.
fn shift_token_column(lattice: &Lattice, u_shift: usize, shift: f32) -> Lattice {
    let header = lattice.header();
    let u_len = lattice.keyword_len();
    let (tokens, durations) = lattice.greedy_track();
    Lattice::from_fn(
        header.num_frames as usize,
        u_len,
        header.d_max,
        header.frame_seconds,
        |t, u| {
            let y = if u == u_len {
                f32::NEG_INFINITY
            } else if u == u_shift {
                lattice.log_y(t, u) + shift
            } else {
                lattice.log_y(t, u)
            };
            (y, lattice.log_phi(t, u))
        },
        |t| (tokens[t - 1], durations[t - 1]),
    )
    .unwrap()
}

#[test]
fn every_keyword_path_emits_each_token_once() {
    // Scaling one keyword token's probability everywhere scales every
    // reachable score by the same factor.
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..200 {
        let t = rng.random_range(1..=30);
        let u = rng.random_range(1..=5);
        let (lattice, kw) = random_proper_lattice(&mut rng, t, u, 6, 3);
        let u_shift = rng.random_range(0..u);
        let shift = -rng.random_range(0.1f32..3.0);
        let shifted = shift_token_column(&lattice, u_shift, shift);
        for config in [DecodeConfig::rnnt(), DecodeConfig::tdt(3)] {
            let before = decode_kws(&lattice, &kw, &config).unwrap();
            let after = decode_kws(&shifted, &kw, &config).unwrap();
            assert_eq!(before.processed, after.processed);
            for (a, b) in before.scores.iter().zip(&after.scores) {
                if a.is_finite() {
                    assert!((b - a - f64::from(shift)).abs() < 1e-4, "{a} -> {b}");
                } else {
                    assert_eq!(a, b);
                }
            }
        }
    }
}

#[test]
fn keyword_scores_only_after_it_could_have_been_spoken() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..100 {
        let u = rng.random_range(1..=6);
        let t = rng.random_range(1..=20);
        let (lattice, kw) = random_proper_lattice(&mut rng, t, u, 4, 2);
        let stream = decode_kws(&lattice, &kw, &DecodeConfig::rnnt()).unwrap();
        assert!(stream.scores.iter().all(|&s| s <= 0.0));
        let single = decode_kws_streaming(&lattice, &kw, &DecodeConfig::rnnt(), |_| {}).unwrap();
        assert!(stream.bit_identical(&single));
    }
}

#[test]
fn snapshot_replays_the_synthetic_joiner() {
    let layout = [(7, 2), (BLANK, 4), (8, 3), (9, 1), (BLANK, 2)];
    let mut config = SyntheticJoinerConfig::tiled(12, &layout);
    config.d_max = 4;
    config.epsilon = 0.4;
    config.seed = 99;
    let joiner = SyntheticJoiner::new(config).unwrap();
    let kw = KeywordSpec::new("k", vec![8, 9]).unwrap();
    let lattice = Lattice::snapshot(&joiner, &kw).unwrap();
    let reloaded = Lattice::from_bytes(&lattice.to_bytes()).unwrap();
    for cfg in [DecodeConfig::rnnt(), DecodeConfig::tdt(4)] {
        let live = decode_kws(&joiner, &kw, &cfg).unwrap();
        let replay = decode_kws(&lattice, &kw, &cfg).unwrap();
        let reread = decode_kws(&reloaded, &kw, &cfg).unwrap();
        assert!(replay.bit_identical(&reread));
        assert_eq!(live.processed, replay.processed);
        for (a, b) in live.scores.iter().zip(&replay.scores) {
            assert!(
                a == b || (a - b).abs() < 1e-5 * a.abs().max(1.0),
                "{a} vs {b}"
            );
        }
    }
}
