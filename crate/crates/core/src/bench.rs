//! Benchmark driver: decodes a suite with a baseline and a candidate KWS
//! configuration (and optionally ASR baselines), then reports recall at a
//! target false-alarm rate and the candidate's speed-up.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{beam_search, greedy_search, keyword_hit, Hypothesis, SearchConfig};
use crate::decoder::{DecodeConfig, DecodeMode, KwsStream, ScoreStream};
use crate::emission::{load_lattice, EmissionOracle, KeywordSpec, SyntheticJoiner};
use crate::error::{KwsError, Result};
use crate::metrics::{
    self, peak_events, recall_at_far, threshold_sweep, SpeedCounters, SweepPoint,
};
use crate::synth::{Manifest, UtteranceRecord};

/// Where emissions come from during a benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OracleSource {
    /// Replay the suite's KWL1 files.
    Lattice,
    /// Rebuild the synthetic joiner from the manifest.
    Synth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub baseline: DecodeMode,
    pub candidate: DecodeMode,
    pub d_max: u16,
    pub target_far: f64,
    pub refractory_frames: usize,
    pub source: OracleSource,
    pub asr_baselines: bool,
    pub beam_width: usize,
    /// Worker threads; 0 uses every core.
    pub jobs: usize,
    /// Decode every job this many times and keep the fastest timings.
    pub timing_repeats: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            baseline: DecodeMode::Rnnt,
            candidate: DecodeMode::Tdt,
            d_max: 4,
            target_far: 0.0,
            refractory_frames: crate::decoder::DEFAULT_REFRACTORY_FRAMES,
            source: OracleSource::Lattice,
            asr_baselines: false,
            beam_width: 10,
            jobs: 0,
            timing_repeats: 1,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.target_far.is_finite() && self.target_far >= 0.0) {
            return Err(KwsError::validation(format!(
                "target FAR must be a finite value >= 0, got {}",
                self.target_far
            )));
        }
        if self.asr_baselines && self.beam_width == 0 {
            return Err(KwsError::validation("beam width must be >= 1"));
        }
        if self.timing_repeats == 0 {
            return Err(KwsError::validation("timing repeats must be >= 1"));
        }
        self.decode_config(self.baseline).validate()?;
        self.decode_config(self.candidate).validate()
    }

    fn decode_config(&self, mode: DecodeMode) -> DecodeConfig {
        let base = match mode {
            DecodeMode::Rnnt => DecodeConfig::rnnt(),
            DecodeMode::Tdt => DecodeConfig::tdt(self.d_max),
        };
        base.with_refractory(self.refractory_frames)
    }
}

/// Emissions for one utterance, either replayed or regenerated.
pub enum UtteranceOracle {
    Lattice(crate::emission::Lattice),
    Synth(SyntheticJoiner),
}

impl UtteranceOracle {
    pub fn as_dyn(&self) -> &dyn EmissionOracle {
        match self {
            UtteranceOracle::Lattice(l) => l,
            UtteranceOracle::Synth(s) => s,
        }
    }
}

pub fn synth_oracle(utt: &UtteranceRecord) -> Result<SyntheticJoiner> {
    let config = utt.synth.clone().ok_or_else(|| {
        KwsError::Capability(format!(
            "{}: no synthetic config in the manifest; the utterance is not generative",
            utt.utt_id
        ))
    })?;
    SyntheticJoiner::new(config)
}

/// Loads the oracle `utt` should be decoded against for `keyword`.
pub fn open_oracle(
    suite_dir: &Path,
    utt: &UtteranceRecord,
    keyword: &str,
    source: OracleSource,
) -> Result<UtteranceOracle> {
    match source {
        OracleSource::Synth => synth_oracle(utt).map(UtteranceOracle::Synth),
        OracleSource::Lattice => {
            let rel = utt.lattices.get(keyword).ok_or_else(|| {
                KwsError::validation(format!(
                    "{}: no lattice for keyword {keyword:?}",
                    utt.utt_id
                ))
            })?;
            load_lattice(suite_dir.join(rel)).map(UtteranceOracle::Lattice)
        }
    }
}

/// Result of decoding one (utterance, keyword) pair.
#[derive(Debug, Clone)]
pub struct KwsRun {
    pub stream: ScoreStream,
    pub counters: SpeedCounters,
}

/// Decodes one pair and times it. Total time covers opening the oracle.
pub fn run_kws(
    suite_dir: &Path,
    utt: &UtteranceRecord,
    keyword: &KeywordSpec,
    config: &DecodeConfig,
    source: OracleSource,
) -> Result<KwsRun> {
    let started = Instant::now();
    let oracle = open_oracle(suite_dir, utt, &keyword.name, source)?;
    let oracle = oracle.as_dyn();
    let mut stream = KwsStream::new(keyword, config)?;
    for t in 1..=oracle.num_frames() {
        stream.push_frame(oracle, t)?;
    }
    let search = stream.search_time();
    let queries = stream.oracle_queries();
    let scores = stream.finish();
    Ok(KwsRun {
        counters: SpeedCounters {
            columns_evaluated: scores.columns_evaluated as u64,
            oracle_queries: queries,
            search_wall_seconds: search.as_secs_f64(),
            total_wall_seconds: started.elapsed().as_secs_f64(),
        },
        stream: scores,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeywordResult {
    pub keyword: String,
    pub recall: f64,
    #[serde(with = "crate::logjson::value")]
    pub threshold: f64,
    pub false_alarms: usize,
    pub far_per_hour: f64,
    pub positives: usize,
    pub negative_hours: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpsilonResult {
    pub epsilon: f64,
    pub macro_recall: f64,
    pub keywords: Vec<KeywordResult>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SystemKind {
    Kws,
    Asr,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemResult {
    pub name: String,
    pub kind: SystemKind,
    pub by_epsilon: Vec<EpsilonResult>,
}

impl SystemResult {
    pub fn at_epsilon(&self, epsilon: f64) -> Option<&EpsilonResult> {
        self.by_epsilon.iter().find(|e| e.epsilon == epsilon)
    }
}

/// Deterministic work counts of both KWS runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkReport {
    pub baseline_columns: u64,
    pub candidate_columns: u64,
    pub baseline_oracle_queries: u64,
    pub candidate_oracle_queries: u64,
    pub column_ratio: f64,
}

/// Wall-clock measurements. The only part of a report that varies between
/// runs with the same inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub baseline: SpeedCounters,
    pub candidate: SpeedCounters,
    pub rel_search_speedup: f64,
    pub rel_running_speedup: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub suite_seed: u64,
    pub bench: BenchConfig,
    pub keywords: Vec<String>,
    pub epsilons: Vec<f64>,
    pub utterances: usize,
    pub frame_seconds: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub config: ConfigEcho,
    pub systems: Vec<SystemResult>,
    pub work: WorkReport,
    pub timing: TimingReport,
}

impl BenchmarkReport {
    pub fn system(&self, name: &str) -> Option<&SystemResult> {
        self.systems.iter().find(|s| s.name == name)
    }

    /// The report with wall-clock fields zeroed, for determinism checks.
    pub fn without_timing(&self) -> BenchmarkReport {
        let mut r = self.clone();
        r.timing = TimingReport {
            baseline: SpeedCounters::default(),
            candidate: SpeedCounters::default(),
            rel_search_speedup: 0.0,
            rel_running_speedup: 0.0,
        };
        r
    }

    /// Fixed-width tables: macro-recall per system and noise level, then
    /// the candidate's speed-up over the baseline.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let bench = &self.config.bench;
        let _ = writeln!(
            out,
            "Macro-recall at FAR <= {}/h (refractory {} frames)",
            bench.target_far, bench.refractory_frames
        );
        let _ = write!(out, "{:<20}", "Decoding");
        for eps in &self.config.epsilons {
            let _ = write!(out, "{:>10}", format!("eps={eps:.2}"));
        }
        out.push('\n');
        for sys in &self.systems {
            let _ = write!(out, "{:<20}", sys.name);
            for e in &sys.by_epsilon {
                let _ = write!(out, "{:>10.4}", e.macro_recall);
            }
            out.push('\n');
        }
        out.push('\n');

        let eps0 = self.config.epsilons.first().copied().unwrap_or(0.0);
        let _ = writeln!(
            out,
            "{:<8}{:>7}{:>15}{:>19}{:>19}{:>14}",
            "Model",
            "D_max",
            "Macro-recall",
            "Rel. S. Speed-up",
            "Rel. R. Speed-up",
            "Column ratio"
        );
        let rows = [
            (bench.baseline, 0, 1.0, 1.0, 1.0),
            (
                bench.candidate,
                1,
                self.timing.rel_search_speedup,
                self.timing.rel_running_speedup,
                self.work.column_ratio,
            ),
        ];
        for (mode, idx, rs, rr, cr) in rows {
            let d = match mode {
                DecodeMode::Rnnt => "-".to_string(),
                DecodeMode::Tdt => bench.d_max.to_string(),
            };
            let recall = self.systems[idx]
                .at_epsilon(eps0)
                .map_or(f64::NAN, |e| e.macro_recall);
            let _ = writeln!(
                out,
                "{:<8}{:>7}{:>15.4}{:>19.2}{:>19.2}{:>14.3}",
                mode.to_string(),
                d,
                recall,
                rs,
                rr,
                cr
            );
        }
        let _ = writeln!(out, "(macro-recall at eps={eps0:.2})");
        out
    }
}

/// Raw detection scores behind one keyword result, for threshold sweeps.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTable {
    pub system: String,
    pub epsilon: f64,
    pub keyword: String,
    pub pos_scores: Vec<f64>,
    pub neg_events: Vec<f64>,
    pub neg_hours: f64,
}

impl ScoreTable {
    pub fn sweep(&self) -> Vec<SweepPoint> {
        threshold_sweep(&self.pos_scores, &self.neg_events, self.neg_hours)
    }
}

#[derive(Debug, Clone)]
pub struct BenchOutcome {
    pub report: BenchmarkReport,
    pub tables: Vec<ScoreTable>,
}

/// CSV of every threshold sweep: `system,epsilon,keyword,threshold,far_per_hour,recall`.
pub fn sweep_csv(tables: &[ScoreTable]) -> String {
    let mut out = String::from("system,epsilon,keyword,threshold,far_per_hour,recall\n");
    for table in tables {
        for p in table.sweep() {
            let _ = writeln!(
                out,
                "{},{},{},{:?},{},{}",
                table.system, table.epsilon, table.keyword, p.threshold, p.far_per_hour, p.recall
            );
        }
    }
    out
}

/// Per-utterance evidence for one system and keyword.
#[derive(Debug, Clone)]
enum Evidence {
    /// Best score on a positive.
    Positive(f64),
    /// Candidate false-alarm scores on a negative.
    Negative(Vec<f64>),
}

struct PairResult {
    epsilon_index: usize,
    keyword: String,
    duration_seconds: f64,
    baseline: (Evidence, SpeedCounters),
    candidate: (Evidence, SpeedCounters),
}

fn evidence(utt: &UtteranceRecord, stream: &ScoreStream, refractory: usize) -> Evidence {
    if utt.is_positive() {
        Evidence::Positive(stream.max_score())
    } else {
        Evidence::Negative(
            peak_events(&stream.scores, refractory)
                .into_iter()
                .map(|(_, s)| s)
                .collect(),
        )
    }
}

fn timed_kws(
    suite_dir: &Path,
    utt: &UtteranceRecord,
    keyword: &KeywordSpec,
    config: &DecodeConfig,
    bench: &BenchConfig,
) -> Result<(Evidence, SpeedCounters)> {
    let mut best: Option<KwsRun> = None;
    for _ in 0..bench.timing_repeats {
        let run = run_kws(suite_dir, utt, keyword, config, bench.source)?;
        best = Some(match best {
            None => run,
            Some(mut b) => {
                b.counters.search_wall_seconds = b
                    .counters
                    .search_wall_seconds
                    .min(run.counters.search_wall_seconds);
                b.counters.total_wall_seconds = b
                    .counters
                    .total_wall_seconds
                    .min(run.counters.total_wall_seconds);
                b
            }
        });
    }
    let run = best.expect("timing_repeats >= 1");
    Ok((
        evidence(utt, &run.stream, bench.refractory_frames),
        run.counters,
    ))
}

/// Which ASR searches run when baselines are requested.
fn asr_systems(bench: &BenchConfig, manifest: &Manifest) -> Vec<String> {
    if !bench.asr_baselines {
        return Vec::new();
    }
    let mut names = vec![
        "greedy-rnnt".to_string(),
        format!("beam{}-rnnt", bench.beam_width),
    ];
    if manifest.d_max > 0 {
        names.push("greedy-tdt".to_string());
    }
    names
}

fn asr_hypotheses(
    utt: &UtteranceRecord,
    bench: &BenchConfig,
    systems: &[String],
) -> Result<Vec<Hypothesis>> {
    let joiner = synth_oracle(utt)?;
    let mut hyps = Vec::with_capacity(systems.len());
    hyps.push(greedy_search(&joiner, &SearchConfig::rnnt())?);
    let mut beams = beam_search(&joiner, bench.beam_width, &SearchConfig::rnnt())?;
    hyps.push(beams.swap_remove(0));
    if systems.len() > 2 {
        hyps.push(greedy_search(&joiner, &SearchConfig::tdt())?);
    }
    Ok(hyps)
}

fn kws_name(mode: DecodeMode, role: &str) -> String {
    format!("{mode}-kws-{role}")
}

fn with_pool<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    if jobs == 0 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| KwsError::validation(format!("cannot start {jobs} workers: {e}")))?;
    Ok(pool.install(f))
}

/// Accumulates evidence into per-(epsilon, keyword) score tables.
#[derive(Default)]
struct Tally {
    pos: Vec<f64>,
    neg: Vec<f64>,
    neg_seconds: f64,
}

impl Tally {
    fn add(&mut self, ev: Evidence, duration_seconds: f64) {
        match ev {
            Evidence::Positive(s) => self.pos.push(s),
            Evidence::Negative(events) => {
                self.neg.extend(events);
                self.neg_seconds += duration_seconds;
            }
        }
    }
}

fn summarize(
    name: String,
    kind: SystemKind,
    tallies: BTreeMap<(usize, String), Tally>,
    manifest: &Manifest,
    target_far: f64,
    tables: &mut Vec<ScoreTable>,
) -> Result<SystemResult> {
    let mut by_epsilon = Vec::with_capacity(manifest.epsilons.len());
    for (ei, &epsilon) in manifest.epsilons.iter().enumerate() {
        let mut keywords = Vec::new();
        for kw in &manifest.keywords {
            let tally = tallies.get(&(ei, kw.name.clone()));
            let Some(tally) = tally.filter(|t| !t.pos.is_empty()) else {
                continue;
            };
            if tally.neg_seconds <= 0.0 {
                return Err(KwsError::validation(format!(
                    "no negative audio at epsilon {epsilon} for keyword {:?}",
                    kw.name
                )));
            }
            let hours = tally.neg_seconds / 3600.0;
            let op = recall_at_far(&tally.pos, &tally.neg, hours, target_far)?;
            keywords.push(KeywordResult {
                keyword: kw.name.clone(),
                recall: op.recall,
                threshold: op.threshold,
                false_alarms: op.false_alarms,
                far_per_hour: op.far_per_hour,
                positives: tally.pos.len(),
                negative_hours: hours,
            });
            tables.push(ScoreTable {
                system: name.clone(),
                epsilon,
                keyword: kw.name.clone(),
                pos_scores: tally.pos.clone(),
                neg_events: tally.neg.clone(),
                neg_hours: hours,
            });
        }
        if keywords.is_empty() {
            continue;
        }
        let recalls: Vec<f64> = keywords.iter().map(|k| k.recall).collect();
        by_epsilon.push(EpsilonResult {
            epsilon,
            macro_recall: metrics::macro_recall(&recalls)?,
            keywords,
        });
    }
    Ok(SystemResult {
        name,
        kind,
        by_epsilon,
    })
}

/// Runs the whole benchmark over `manifest`, whose lattice paths resolve
/// against `suite_dir`.
pub fn run_bench(
    manifest: &Manifest,
    suite_dir: &Path,
    bench: &BenchConfig,
) -> Result<BenchOutcome> {
    bench.validate()?;
    manifest.validate()?;
    let base_cfg = bench.decode_config(bench.baseline);
    let cand_cfg = bench.decode_config(bench.candidate);
    let eps_index: BTreeMap<u64, usize> = manifest
        .epsilons
        .iter()
        .enumerate()
        .map(|(i, e)| (e.to_bits(), i))
        .collect();

    let mut utterances: Vec<&UtteranceRecord> = manifest.utterances.iter().collect();
    utterances.sort_by(|a, b| a.utt_id.cmp(&b.utt_id));
    let epsilon_of = |utt: &UtteranceRecord| -> Result<usize> {
        eps_index
            .get(&utt.epsilon.to_bits())
            .copied()
            .ok_or_else(|| {
                KwsError::validation(format!(
                    "{}: epsilon {} is not listed in the manifest",
                    utt.utt_id, utt.epsilon
                ))
            })
    };

    let pairs: Vec<(&UtteranceRecord, &KeywordSpec)> = utterances
        .iter()
        .flat_map(|utt| {
            utt.keywords_under_test(&manifest.keywords)
                .into_iter()
                .map(move |kw| (*utt, kw))
        })
        .collect();

    let asr_names = asr_systems(bench, manifest);
    let (kws_results, asr_results) = with_pool(bench.jobs, || {
        let kws: Result<Vec<PairResult>> = pairs
            .par_iter()
            .map(|&(utt, kw)| {
                Ok(PairResult {
                    epsilon_index: epsilon_of(utt)?,
                    keyword: kw.name.clone(),
                    duration_seconds: utt.duration_seconds,
                    baseline: timed_kws(suite_dir, utt, kw, &base_cfg, bench)?,
                    candidate: timed_kws(suite_dir, utt, kw, &cand_cfg, bench)?,
                })
            })
            .collect();
        let asr: Result<Vec<Vec<Hypothesis>>> = if asr_names.is_empty() {
            Ok(Vec::new())
        } else {
            utterances
                .par_iter()
                .map(|utt| asr_hypotheses(utt, bench, &asr_names))
                .collect()
        };
        (kws, asr)
    })?;
    let kws_results = kws_results?;
    let asr_results = asr_results?;

    let mut base_tally: BTreeMap<(usize, String), Tally> = BTreeMap::new();
    let mut cand_tally: BTreeMap<(usize, String), Tally> = BTreeMap::new();
    let mut base_speed = SpeedCounters::default();
    let mut cand_speed = SpeedCounters::default();
    for pair in kws_results {
        let key = (pair.epsilon_index, pair.keyword);
        base_speed.add(&pair.baseline.1);
        cand_speed.add(&pair.candidate.1);
        base_tally
            .entry(key.clone())
            .or_default()
            .add(pair.baseline.0, pair.duration_seconds);
        cand_tally
            .entry(key)
            .or_default()
            .add(pair.candidate.0, pair.duration_seconds);
    }

    let mut tables = Vec::new();
    let mut systems = vec![
        summarize(
            kws_name(bench.baseline, "baseline"),
            SystemKind::Kws,
            base_tally,
            manifest,
            bench.target_far,
            &mut tables,
        )?,
        summarize(
            kws_name(bench.candidate, "candidate"),
            SystemKind::Kws,
            cand_tally,
            manifest,
            bench.target_far,
            &mut tables,
        )?,
    ];

    for (si, name) in asr_names.iter().enumerate() {
        let mut tally: BTreeMap<(usize, String), Tally> = BTreeMap::new();
        for (utt, hyps) in utterances.iter().zip(&asr_results) {
            let ei = epsilon_of(utt)?;
            for kw in utt.keywords_under_test(&manifest.keywords) {
                let hit = keyword_hit(&hyps[si], kw).is_some();
                let ev = if utt.is_positive() {
                    Evidence::Positive(if hit { 0.0 } else { f64::NEG_INFINITY })
                } else {
                    Evidence::Negative(if hit { vec![0.0] } else { Vec::new() })
                };
                tally
                    .entry((ei, kw.name.clone()))
                    .or_default()
                    .add(ev, utt.duration_seconds);
            }
        }
        systems.push(summarize(
            name.clone(),
            SystemKind::Asr,
            tally,
            manifest,
            bench.target_far,
            &mut tables,
        )?);
    }

    let speed = metrics::speedup(&base_speed, &cand_speed)?;
    let report = BenchmarkReport {
        config: ConfigEcho {
            suite_seed: manifest.seed,
            bench: bench.clone(),
            keywords: manifest.keywords.iter().map(|k| k.name.clone()).collect(),
            epsilons: manifest.epsilons.clone(),
            utterances: manifest.utterances.len(),
            frame_seconds: manifest.frame_seconds,
        },
        systems,
        work: WorkReport {
            baseline_columns: base_speed.columns_evaluated,
            candidate_columns: cand_speed.columns_evaluated,
            baseline_oracle_queries: base_speed.oracle_queries,
            candidate_oracle_queries: cand_speed.oracle_queries,
            column_ratio: speed.column_ratio,
        },
        timing: TimingReport {
            baseline: base_speed,
            candidate: cand_speed,
            rel_search_speedup: speed.rel_search,
            rel_running_speedup: speed.rel_running,
        },
    };
    Ok(BenchOutcome { report, tables })
}

/// Loads `suite_dir/manifest.json` and runs the benchmark.
pub fn run_bench_dir(suite_dir: impl AsRef<Path>, bench: &BenchConfig) -> Result<BenchOutcome> {
    let dir: PathBuf = suite_dir.as_ref().to_path_buf();
    let manifest = Manifest::load(&dir)?;
    run_bench(&manifest, &dir, bench)
}
