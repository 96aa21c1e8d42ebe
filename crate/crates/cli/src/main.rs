use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use thiserror::Error;

use kws_core::alignment::oracle_check;
use kws_core::baselines::{beam_search, greedy_search, HypothesisRecord, SearchConfig};
use kws_core::bench::{
    open_oracle, run_bench_dir, sweep_csv, synth_oracle, BenchConfig, OracleSource,
};
use kws_core::emission::{load_lattice, LatticeSidecar};
use kws_core::synth::{gen_suite, Manifest, SuiteSpec, DEFAULT_KEYWORD_NAMES};
use kws_core::{
    decode_kws_streaming, dump_delta_matrix, DecodeConfig, DecodeMode, KwsError, ScoreRecord,
};

const ORACLE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error)]
enum CliError {
    #[error(transparent)]
    Core(#[from] KwsError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{0}")]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) if e.is_io_or_parse() => 2,
            CliError::Io { .. } | CliError::Json(_) => 2,
            _ => 1,
        }
    }
}

type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(
    name = "kws",
    version,
    about = "Keyword-spotting search for transducer lattices"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Decode every (utterance, keyword) pair of a suite to JSON lines.
    Decode(DecodeArgs),
    /// Recall at a target FAR and speed-up of a candidate over a baseline.
    Bench(BenchArgs),
    /// Generate a synthetic suite.
    Gen(GenArgs),
    /// Write the delta matrix of one lattice as CSV.
    DumpDelta(DumpDeltaArgs),
    /// Compare the DP against exhaustive path enumeration.
    OracleCheck(OracleCheckArgs),
    /// Run an ASR search over a generative suite and write hypotheses.
    Asr(AsrArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Rnnt,
    Tdt,
}

impl From<ModeArg> for DecodeMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Rnnt => DecodeMode::Rnnt,
            ModeArg::Tdt => DecodeMode::Tdt,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SourceArg {
    Lattice,
    Synth,
}

impl From<SourceArg> for OracleSource {
    fn from(s: SourceArg) -> Self {
        match s {
            SourceArg::Lattice => OracleSource::Lattice,
            SourceArg::Synth => OracleSource::Synth,
        }
    }
}

#[derive(Debug, Args)]
#[group(id = "threshold", multiple = false)]
struct ThresholdArgs {
    /// Detection threshold on the log-domain score.
    #[arg(long, group = "threshold", allow_negative_numbers = true)]
    threshold_log: Option<f64>,
    /// Detection threshold as a probability in (0, 1].
    #[arg(long, group = "threshold")]
    threshold_prob: Option<f64>,
}

impl ThresholdArgs {
    fn log_threshold(&self) -> CliResult<f64> {
        match (self.threshold_log, self.threshold_prob) {
            (Some(x), _) => Ok(x),
            (None, Some(p)) if p > 0.0 && p <= 1.0 => Ok(p.ln()),
            (None, Some(p)) => Err(KwsError::Validation(format!(
                "--threshold-prob must be in (0, 1], got {p}"
            ))
            .into()),
            (None, None) => Ok(f64::INFINITY),
        }
    }
}

#[derive(Debug, Args)]
struct DecodeArgs {
    #[arg(long)]
    suite: PathBuf,
    #[arg(long, value_enum, default_value = "rnnt")]
    mode: ModeArg,
    /// Cap on the predicted duration hop in TDT mode.
    #[arg(long, default_value_t = 4)]
    d_max: u16,
    #[command(flatten)]
    threshold: ThresholdArgs,
    /// Minimum frames between two events for the same keyword.
    #[arg(long, default_value_t = kws_core::decoder::DEFAULT_REFRACTORY_FRAMES)]
    refractory: usize,
    #[arg(long, value_enum, default_value = "lattice")]
    source: SourceArg,
    /// Worker threads (0 = all cores).
    #[arg(long, default_value_t = 0)]
    jobs: usize,
    /// Output JSON-lines file; `-` for stdout.
    #[arg(long, default_value = "-")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[arg(long)]
    suite: PathBuf,
    #[arg(long, value_enum, default_value = "rnnt")]
    baseline: ModeArg,
    #[arg(long, value_enum, default_value = "tdt")]
    candidate: ModeArg,
    #[arg(long, default_value_t = 4)]
    d_max: u16,
    /// Allowed false alarms per hour of negative audio.
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    target_far: f64,
    #[arg(long, default_value_t = kws_core::decoder::DEFAULT_REFRACTORY_FRAMES)]
    refractory: usize,
    #[arg(long, value_enum, default_value = "lattice")]
    source: SourceArg,
    /// Also score greedy RNN-T, beam RNN-T and greedy TDT ASR decoding.
    #[arg(long)]
    also_asr_baselines: bool,
    #[arg(long, default_value_t = 10)]
    beam: usize,
    #[arg(long, default_value_t = 0)]
    jobs: usize,
    /// Decode each pair this many times and keep the fastest timing.
    #[arg(long, default_value_t = 1)]
    repeats: usize,
    /// Write the JSON report here.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Write every threshold sweep as CSV here.
    #[arg(long)]
    sweep_csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, env = "KWS_SEED", default_value_t = 0)]
    seed: u64,
    /// Comma-separated keyword names.
    #[arg(long, value_delimiter = ',')]
    keywords: Option<Vec<String>>,
    #[arg(long, default_value_t = 10)]
    n_pos: usize,
    #[arg(long, default_value_t = 200)]
    n_neg: usize,
    #[arg(long, default_value_t = 60)]
    t_min: usize,
    #[arg(long, default_value_t = 120)]
    t_max: usize,
    #[arg(long, default_value_t = 2)]
    dur_min: usize,
    #[arg(long, default_value_t = 4)]
    dur_max: usize,
    #[arg(long, default_value_t = 3)]
    keyword_len_min: usize,
    #[arg(long, default_value_t = 6)]
    keyword_len_max: usize,
    /// Comma-separated emission-noise levels.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    epsilon: Vec<f64>,
    /// Duration output size of the synthetic model; 0 makes an RNN-T-only suite.
    #[arg(long, default_value_t = 4)]
    d_max: u16,
    #[arg(long, default_value_t = 70)]
    vocab: usize,
    #[arg(long, default_value_t = 40)]
    keyword_vocab: usize,
    #[arg(long, default_value_t = 1.0)]
    concentration: f64,
    #[arg(long, default_value_t = 0.0)]
    distractor_mass: f64,
    /// Write only the manifest (decode with `--source synth`).
    #[arg(long)]
    no_lattices: bool,
}

#[derive(Debug, Args)]
struct DumpDeltaArgs {
    /// KWL1 file; the keyword is read from its JSON sidecar.
    #[arg(long)]
    lattice: PathBuf,
    #[arg(long, value_enum, default_value = "rnnt")]
    mode: ModeArg,
    #[arg(long, default_value_t = 4)]
    d_max: u16,
    #[arg(long, default_value = "-")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct OracleCheckArgs {
    #[arg(long, default_value_t = 1000)]
    cases: usize,
    #[arg(long, env = "KWS_SEED", default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SearchArg {
    GreedyRnnt,
    Beam,
    GreedyTdt,
}

#[derive(Debug, Args)]
struct AsrArgs {
    #[arg(long)]
    suite: PathBuf,
    #[arg(long, value_enum, default_value = "greedy-rnnt")]
    search: SearchArg,
    #[arg(long, default_value_t = 10)]
    beam: usize,
    #[arg(long, default_value_t = 0)]
    jobs: usize,
    #[arg(long, default_value = "-")]
    out: PathBuf,
}

fn write_output(path: &Path, text: &str) -> CliResult<()> {
    if path == Path::new("-") {
        let mut stdout = io::stdout().lock();
        return stdout
            .write_all(text.as_bytes())
            .map_err(|source| CliError::Io {
                path: path.to_path_buf(),
                source,
            });
    }
    fs::write(path, text).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn thread_pool(jobs: usize) -> CliResult<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start {jobs} workers: {e}")))
}

fn decode(args: &DecodeArgs) -> CliResult<()> {
    let manifest = Manifest::load(&args.suite)?;
    let mode = DecodeMode::from(args.mode);
    let config = match mode {
        DecodeMode::Rnnt => DecodeConfig::rnnt(),
        DecodeMode::Tdt => DecodeConfig::tdt(args.d_max),
    }
    .with_threshold(args.threshold.log_threshold()?)
    .with_refractory(args.refractory);
    config.validate()?;

    let mut utterances: Vec<_> = manifest.utterances.iter().collect();
    utterances.sort_by(|a, b| a.utt_id.cmp(&b.utt_id));
    let pairs: Vec<_> = utterances
        .iter()
        .flat_map(|utt| {
            utt.keywords_under_test(&manifest.keywords)
                .into_iter()
                .map(move |kw| (*utt, kw))
        })
        .collect();

    let source = OracleSource::from(args.source);
    let records: Result<Vec<String>, CliError> = thread_pool(args.jobs)?.install(|| {
        pairs
            .par_iter()
            .map(|&(utt, kw)| {
                let oracle = open_oracle(&args.suite, utt, &kw.name, source)?;
                let oracle = oracle.as_dyn();
                let mut events = Vec::new();
                let stream = decode_kws_streaming(oracle, kw, &config, |e| events.push(e))?;
                let record = ScoreRecord::new(
                    &utt.utt_id,
                    &kw.name,
                    oracle.frame_seconds(),
                    stream,
                    events,
                );
                Ok(serde_json::to_string(&record)?)
            })
            .collect()
    });
    let mut text = records?.join("\n");
    if !text.is_empty() {
        text.push('\n');
    }
    write_output(&args.out, &text)
}

fn bench(args: &BenchArgs) -> CliResult<()> {
    let config = BenchConfig {
        baseline: args.baseline.into(),
        candidate: args.candidate.into(),
        d_max: args.d_max,
        target_far: args.target_far,
        refractory_frames: args.refractory,
        source: args.source.into(),
        asr_baselines: args.also_asr_baselines,
        beam_width: args.beam,
        jobs: args.jobs,
        timing_repeats: args.repeats,
    };
    config.validate()?;
    let outcome = run_bench_dir(&args.suite, &config)?;
    print!("{}", outcome.report.render_table());
    if let Some(path) = &args.report {
        let text = serde_json::to_string_pretty(&outcome.report)? + "\n";
        write_output(path, &text)?;
    }
    if let Some(path) = &args.sweep_csv {
        write_output(path, &sweep_csv(&outcome.tables))?;
    }
    Ok(())
}

fn gen(args: &GenArgs) -> CliResult<()> {
    let spec = SuiteSpec {
        keywords: args.keywords.clone().unwrap_or_else(|| {
            DEFAULT_KEYWORD_NAMES
                .iter()
                .map(|s| s.to_string())
                .collect()
        }),
        n_pos: args.n_pos,
        n_neg: args.n_neg,
        t_min: args.t_min,
        t_max: args.t_max,
        dur_min: args.dur_min,
        dur_max: args.dur_max,
        keyword_len_min: args.keyword_len_min,
        keyword_len_max: args.keyword_len_max,
        epsilons: args.epsilon.clone(),
        d_max: args.d_max,
        vocab_size: args.vocab,
        keyword_vocab: args.keyword_vocab,
        duration_concentration: args.concentration,
        distractor_mass: args.distractor_mass,
        frame_seconds: kws_core::emission::DEFAULT_FRAME_SECONDS,
        seed: args.seed,
    };
    let mut suite = gen_suite(&spec)?;
    if args.no_lattices {
        fs::create_dir_all(&args.out).map_err(|source| CliError::Io {
            path: args.out.clone(),
            source,
        })?;
        suite.manifest.save(&args.out)?;
    } else {
        suite.write_to(&args.out)?;
    }
    eprintln!(
        "wrote {} utterances, {} keywords to {}",
        suite.manifest.utterances.len(),
        suite.manifest.keywords.len(),
        args.out.display()
    );
    Ok(())
}

fn dump_delta(args: &DumpDeltaArgs) -> CliResult<()> {
    let lattice = load_lattice(&args.lattice)?;
    let sidecar = LatticeSidecar::load(&args.lattice)?;
    let config = match DecodeMode::from(args.mode) {
        DecodeMode::Rnnt => DecodeConfig::rnnt(),
        DecodeMode::Tdt => DecodeConfig::tdt(args.d_max),
    };
    config.validate()?;
    let csv = dump_delta_matrix(&lattice, &sidecar.keyword, &config)?;
    write_output(&args.out, &csv)
}

/// Returns whether the deviation is within tolerance.
fn oracle_check_cmd(args: &OracleCheckArgs) -> CliResult<bool> {
    let report = oracle_check(args.cases, args.seed)?;
    println!(
        "cases={} frames={} max_abs_deviation={:e}",
        report.cases, report.frames_checked, report.max_abs_deviation
    );
    Ok(report.max_abs_deviation <= ORACLE_TOLERANCE)
}

fn asr(args: &AsrArgs) -> CliResult<()> {
    let manifest = Manifest::load(&args.suite)?;
    let mut utterances: Vec<_> = manifest.utterances.iter().collect();
    utterances.sort_by(|a, b| a.utt_id.cmp(&b.utt_id));
    let lines: Result<Vec<String>, CliError> = thread_pool(args.jobs)?.install(|| {
        utterances
            .par_iter()
            .map(|utt| {
                let joiner = synth_oracle(utt)?;
                let hypothesis = match args.search {
                    SearchArg::GreedyRnnt => greedy_search(&joiner, &SearchConfig::rnnt())?,
                    SearchArg::GreedyTdt => greedy_search(&joiner, &SearchConfig::tdt())?,
                    SearchArg::Beam => {
                        beam_search(&joiner, args.beam, &SearchConfig::rnnt())?.swap_remove(0)
                    }
                };
                let record = HypothesisRecord {
                    utt_id: utt.utt_id.clone(),
                    hypothesis,
                };
                Ok(serde_json::to_string(&record)?)
            })
            .collect()
    });
    let mut text = lines?.join("\n");
    if !text.is_empty() {
        text.push('\n');
    }
    write_output(&args.out, &text)
}

fn run(cli: &Cli) -> CliResult<ExitCode> {
    match &cli.command {
        Command::Decode(a) => decode(a)?,
        Command::Bench(a) => bench(a)?,
        Command::Gen(a) => gen(a)?,
        Command::DumpDelta(a) => dump_delta(a)?,
        Command::Asr(a) => asr(a)?,
        Command::OracleCheck(a) => {
            if !oracle_check_cmd(a)? {
                eprintln!("kws: deviation exceeds {ORACLE_TOLERANCE:e}");
                return Ok(ExitCode::from(1));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("kws: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
