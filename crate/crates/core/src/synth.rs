//! Reproducible synthetic evaluation suites: positive utterances with one
//! planted keyword, keyword-free negatives, and an emission-noise sweep.
//!
//! Layout on disk:
//!
//! ```text
//! suite/
//!   manifest.json
//!   lattices/{utt_id}.{keyword}.kwl
//!   lattices/{utt_id}.{keyword}.json
//! ```
//!
//! A positive has a lattice for its own keyword, a negative one per keyword.
//! Every record also carries the synthetic joiner config it was rendered
//! from, which lets ASR baselines run against the same utterance.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::emission::{
    save_lattice, KeywordSpec, Lattice, LatticeSidecar, Segment, SyntheticJoiner,
    SyntheticJoinerConfig,
};
use crate::error::{KwsError, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const LATTICE_DIR: &str = "lattices";
pub const MANIFEST_VERSION: u32 = 1;

pub const DEFAULT_KEYWORD_NAMES: [&str; 20] = [
    "almost",
    "anything",
    "behind",
    "captain",
    "children",
    "company",
    "continued",
    "country",
    "everything",
    "hardly",
    "himself",
    "husband",
    "moment",
    "morning",
    "necessary",
    "perhaps",
    "silent",
    "something",
    "therefore",
    "together",
];

/// Parameters of a generated suite. Tokens `1..=keyword_vocab` are reserved
/// for keywords and `keyword_vocab+1..=vocab_size` for filler, so negatives
/// can never contain a keyword.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteSpec {
    pub keywords: Vec<String>,
    pub n_pos: usize,
    pub n_neg: usize,
    pub t_min: usize,
    pub t_max: usize,
    pub dur_min: usize,
    pub dur_max: usize,
    pub keyword_len_min: usize,
    pub keyword_len_max: usize,
    pub epsilons: Vec<f64>,
    pub d_max: u16,
    pub vocab_size: usize,
    pub keyword_vocab: usize,
    pub duration_concentration: f64,
    pub distractor_mass: f64,
    pub frame_seconds: f32,
    pub seed: u64,
}

impl Default for SuiteSpec {
    fn default() -> Self {
        SuiteSpec {
            keywords: DEFAULT_KEYWORD_NAMES
                .iter()
                .map(|s| s.to_string())
                .collect(),
            n_pos: 10,
            n_neg: 200,
            t_min: 60,
            t_max: 120,
            dur_min: 2,
            dur_max: 4,
            keyword_len_min: 3,
            keyword_len_max: 6,
            epsilons: vec![0.0],
            d_max: 4,
            vocab_size: 70,
            keyword_vocab: 40,
            duration_concentration: 1.0,
            distractor_mass: 0.0,
            frame_seconds: crate::emission::DEFAULT_FRAME_SECONDS,
            seed: 0,
        }
    }
}

impl SuiteSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(KwsError::Validation(msg));
        if self.keywords.is_empty() {
            return fail("at least one keyword is required".into());
        }
        let names: BTreeSet<&str> = self.keywords.iter().map(String::as_str).collect();
        if names.len() != self.keywords.len() {
            return fail("keyword names must be distinct".into());
        }
        if let Some(bad) = self
            .keywords
            .iter()
            .find(|k| k.is_empty() || !k.chars().all(|c| c.is_ascii_alphanumeric() || c == '_'))
        {
            return fail(format!(
                "keyword name {bad:?} must be non-empty ASCII letters, digits or '_'"
            ));
        }
        if self.n_pos == 0 || self.n_neg == 0 {
            return fail("n_pos and n_neg must be >= 1".into());
        }
        if self.t_min == 0 || self.t_min > self.t_max {
            return fail(format!("bad frame range {}..={}", self.t_min, self.t_max));
        }
        if self.dur_min == 0 || self.dur_min > self.dur_max {
            return fail(format!(
                "bad duration range {}..={}",
                self.dur_min, self.dur_max
            ));
        }
        if self.keyword_len_min == 0 || self.keyword_len_min > self.keyword_len_max {
            return fail(format!(
                "bad keyword length range {}..={}",
                self.keyword_len_min, self.keyword_len_max
            ));
        }
        let longest = self.keyword_len_max * self.dur_max;
        if longest > self.t_min {
            return fail(format!(
                "a keyword can span up to {longest} frames, longer than the shortest \
                 utterance ({} frames)",
                self.t_min
            ));
        }
        if self.epsilons.is_empty() {
            return fail("at least one epsilon is required".into());
        }
        if let Some(e) = self.epsilons.iter().find(|e| !(0.0..1.0).contains(*e)) {
            return fail(format!("epsilon {e} outside [0, 1)"));
        }
        if self.keyword_vocab < 2 || self.vocab_size < self.keyword_vocab + 2 {
            return fail(format!(
                "need >= 2 keyword tokens and >= 2 filler tokens (vocab {}, keyword vocab {})",
                self.vocab_size, self.keyword_vocab
            ));
        }
        let mut distinct = 0f64;
        for len in self.keyword_len_min..=self.keyword_len_max {
            distinct +=
                self.keyword_vocab as f64 * ((self.keyword_vocab - 1) as f64).powi(len as i32 - 1);
        }
        if distinct < self.keywords.len() as f64 {
            return fail(format!(
                "keyword alphabet too small for {} distinct keywords",
                self.keywords.len()
            ));
        }
        Ok(())
    }
}

/// Frames occupied by the planted keyword, inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlantedKeyword {
    pub start_frame: usize,
    pub end_frame: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceRecord {
    pub utt_id: String,
    /// Keyword name for positives, `None` for negatives.
    pub label: Option<String>,
    pub epsilon: f64,
    pub num_frames: usize,
    pub duration_seconds: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub planted: Option<PlantedKeyword>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<SyntheticJoinerConfig>,
    /// Keyword name to lattice path, relative to the suite directory.
    #[serde(default)]
    pub lattices: BTreeMap<String, String>,
}

impl UtteranceRecord {
    pub fn is_positive(&self) -> bool {
        self.label.is_some()
    }

    /// Keywords this utterance is scored against.
    pub fn keywords_under_test<'a>(&'a self, all: &'a [KeywordSpec]) -> Vec<&'a KeywordSpec> {
        match &self.label {
            Some(name) => all.iter().filter(|k| &k.name == name).collect(),
            None => all.iter().collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub seed: u64,
    pub vocab_size: usize,
    pub d_max: u16,
    pub frame_seconds: f32,
    pub epsilons: Vec<f64>,
    pub keywords: Vec<KeywordSpec>,
    pub utterances: Vec<UtteranceRecord>,
}

impl Manifest {
    pub fn validate(&self) -> Result<()> {
        if self.version != MANIFEST_VERSION {
            return Err(KwsError::validation(format!(
                "manifest version {} is not supported (expected {MANIFEST_VERSION})",
                self.version
            )));
        }
        if self.keywords.is_empty() {
            return Err(KwsError::validation("manifest lists no keywords"));
        }
        let names: BTreeSet<&str> = self.keywords.iter().map(|k| k.name.as_str()).collect();
        for kw in &self.keywords {
            kw.validate()?;
        }
        let mut ids = BTreeSet::new();
        for utt in &self.utterances {
            if !ids.insert(utt.utt_id.as_str()) {
                return Err(KwsError::validation(format!(
                    "duplicate utt_id {:?}",
                    utt.utt_id
                )));
            }
            if utt.duration_seconds.is_nan() || utt.duration_seconds <= 0.0 {
                return Err(KwsError::validation(format!(
                    "{}: duration_seconds must be > 0",
                    utt.utt_id
                )));
            }
            if let Some(label) = &utt.label {
                if !names.contains(label.as_str()) {
                    return Err(KwsError::validation(format!(
                        "{}: label {label:?} is not a keyword under test",
                        utt.utt_id
                    )));
                }
            }
            if let Some(bad) = utt.lattices.keys().find(|k| !names.contains(k.as_str())) {
                return Err(KwsError::validation(format!(
                    "{}: lattice for unknown keyword {bad:?}",
                    utt.utt_id
                )));
            }
        }
        Ok(())
    }

    pub fn keyword(&self, name: &str) -> Option<&KeywordSpec> {
        self.keywords.iter().find(|k| k.name == name)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let path = dir.as_ref().join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| KwsError::io(&path, e))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| KwsError::json(&path, e))?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let path = dir.as_ref().join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).map_err(|e| KwsError::json(&path, e))?;
        fs::write(&path, text + "\n").map_err(|e| KwsError::io(&path, e))
    }
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Draws a token from `lo..=hi` different from `prev`.
fn draw_token(rng: &mut ChaCha8Rng, lo: u32, hi: u32, prev: Option<u32>) -> u32 {
    loop {
        let tok = rng.random_range(lo..=hi);
        if Some(tok) != prev {
            return tok;
        }
    }
}

fn generate_keywords(spec: &SuiteSpec) -> Vec<KeywordSpec> {
    let mut rng = rng_for(spec.seed, 0);
    let mut seen = BTreeSet::new();
    let hi = spec.keyword_vocab as u32;
    spec.keywords
        .iter()
        .map(|name| loop {
            let len = rng.random_range(spec.keyword_len_min..=spec.keyword_len_max);
            let mut tokens = Vec::with_capacity(len);
            for _ in 0..len {
                let tok = draw_token(&mut rng, 1, hi, tokens.last().copied());
                tokens.push(tok);
            }
            if seen.insert(tokens.clone()) {
                break KeywordSpec {
                    name: name.clone(),
                    tokens,
                };
            }
        })
        .collect()
}

/// One source utterance before it is rendered at each noise level.
#[derive(Debug, Clone)]
struct SourceUtterance {
    stem: String,
    label: Option<usize>,
    num_frames: usize,
    alignment: Vec<Segment>,
    planted: Option<PlantedKeyword>,
    noise_seed: u64,
}

fn filler_durations(rng: &mut ChaCha8Rng, spec: &SuiteSpec, cover: usize) -> Vec<usize> {
    let mut durs = Vec::new();
    let mut total = 0;
    while total < cover {
        let d = rng.random_range(spec.dur_min..=spec.dur_max);
        durs.push(d);
        total += d;
    }
    durs
}

fn generate_source(
    spec: &SuiteSpec,
    keywords: &[KeywordSpec],
    index: usize,
    label: Option<usize>,
    stem: String,
) -> SourceUtterance {
    let mut rng = rng_for(spec.seed, index as u64 + 1);
    let num_frames = rng.random_range(spec.t_min..=spec.t_max);
    let filler_lo = spec.keyword_vocab as u32 + 1;
    let filler_hi = spec.vocab_size as u32;

    let keyword: Vec<(u32, usize)> = match label {
        Some(k) => keywords[k]
            .tokens
            .iter()
            .map(|&tok| (tok, rng.random_range(spec.dur_min..=spec.dur_max)))
            .collect(),
        None => Vec::new(),
    };
    let keyword_frames: usize = keyword.iter().map(|&(_, d)| d).sum();
    let room = num_frames - keyword_frames;
    let filler = filler_durations(&mut rng, spec, room.max(1));

    // The keyword goes in at a segment boundary that leaves it fully inside
    // the utterance, chosen uniformly.
    let mut boundaries = vec![0usize];
    let mut acc = 0;
    for &d in &filler {
        acc += d;
        if acc <= room {
            boundaries.push(acc);
        }
    }
    let insert_at = if label.is_some() {
        rng.random_range(0..boundaries.len())
    } else {
        filler.len()
    };

    let mut tokens: Vec<(u32, usize)> = Vec::with_capacity(filler.len() + keyword.len());
    let mut prev = None;
    for (i, &d) in filler.iter().enumerate() {
        if i == insert_at {
            tokens.extend(&keyword);
        }
        let tok = draw_token(&mut rng, filler_lo, filler_hi, prev);
        prev = Some(tok);
        tokens.push((tok, d));
    }
    if insert_at == filler.len() {
        tokens.extend(&keyword);
    }

    let mut alignment = Vec::with_capacity(tokens.len());
    let mut planted = None;
    let mut start = 1;
    for (i, &(token, d)) in tokens.iter().enumerate() {
        if start > num_frames {
            break;
        }
        let duration = d.min(num_frames + 1 - start);
        alignment.push(Segment {
            token,
            start,
            duration,
        });
        if label.is_some() && i == insert_at {
            planted = Some(PlantedKeyword {
                start_frame: start,
                end_frame: start + keyword_frames - 1,
            });
        }
        start += duration;
    }
    SourceUtterance {
        stem,
        label,
        num_frames,
        alignment,
        planted,
        noise_seed: rng.random(),
    }
}

/// Number of places where `keyword` appears as consecutive segments.
pub fn count_occurrences(alignment: &[Segment], keyword: &KeywordSpec) -> usize {
    let n = keyword.len();
    if n == 0 || alignment.len() < n {
        return 0;
    }
    alignment
        .windows(n)
        .filter(|w| w.iter().zip(&keyword.tokens).all(|(s, &k)| s.token == k))
        .count()
}

/// A generated suite held in memory.
#[derive(Debug, Clone)]
pub struct Suite {
    pub spec: SuiteSpec,
    pub manifest: Manifest,
}

fn epsilon_tag(index: usize) -> String {
    format!("e{index}")
}

/// Builds the manifest (synthetic configs only; no lattice files yet).
pub fn gen_suite(spec: &SuiteSpec) -> Result<Suite> {
    spec.validate()?;
    let keywords = generate_keywords(spec);

    let mut plan: Vec<(Option<usize>, String)> = Vec::new();
    for (k, kw) in keywords.iter().enumerate() {
        for i in 0..spec.n_pos {
            plan.push((Some(k), format!("pos-{}-{i:03}", kw.name)));
        }
    }
    for i in 0..spec.n_neg {
        plan.push((None, format!("neg-{i:04}")));
    }
    let sources: Vec<SourceUtterance> = plan
        .into_par_iter()
        .enumerate()
        .map(|(index, (label, stem))| generate_source(spec, &keywords, index, label, stem))
        .collect();

    let mut utterances = Vec::with_capacity(sources.len() * spec.epsilons.len());
    for (ei, &epsilon) in spec.epsilons.iter().enumerate() {
        for src in &sources {
            let synth = SyntheticJoinerConfig {
                vocab_size: spec.vocab_size,
                num_frames: src.num_frames,
                alignment: src.alignment.clone(),
                epsilon,
                d_max: spec.d_max,
                duration_concentration: spec.duration_concentration,
                distractor_mass: spec.distractor_mass,
                seed: src.noise_seed,
                frame_seconds: spec.frame_seconds,
            };
            utterances.push(UtteranceRecord {
                utt_id: format!("{}-{}", epsilon_tag(ei), src.stem),
                label: src.label.map(|k| keywords[k].name.clone()),
                epsilon,
                num_frames: src.num_frames,
                duration_seconds: src.num_frames as f64 * f64::from(spec.frame_seconds),
                planted: src.planted,
                synth: Some(synth),
                lattices: BTreeMap::new(),
            });
        }
    }
    utterances.sort_by(|a, b| a.utt_id.cmp(&b.utt_id));

    let manifest = Manifest {
        version: MANIFEST_VERSION,
        seed: spec.seed,
        vocab_size: spec.vocab_size,
        d_max: spec.d_max,
        frame_seconds: spec.frame_seconds,
        epsilons: spec.epsilons.clone(),
        keywords,
        utterances,
    };
    manifest.validate()?;
    Ok(Suite {
        spec: spec.clone(),
        manifest,
    })
}

/// Writes `oracle`'s keyword-conditioned view and greedy track to `path`,
/// plus the sidecar.
pub fn snapshot_generative(
    oracle: &SyntheticJoiner,
    keyword: &KeywordSpec,
    path: &Path,
    provenance: serde_json::Map<String, serde_json::Value>,
) -> Result<()> {
    let lattice = Lattice::snapshot(oracle, keyword)?;
    save_lattice(&lattice, path)?;
    LatticeSidecar {
        keyword: keyword.clone(),
        provenance,
    }
    .save(path)
}

impl Suite {
    /// Writes the manifest and every lattice under `dir`, filling in the
    /// manifest's lattice paths. Output bytes depend only on the spec.
    pub fn write_to(&mut self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let lattice_dir = dir.join(LATTICE_DIR);
        fs::create_dir_all(&lattice_dir).map_err(|e| KwsError::io(&lattice_dir, e))?;
        let keywords = &self.manifest.keywords;
        let seed = self.manifest.seed;

        let written: Vec<BTreeMap<String, String>> = self
            .manifest
            .utterances
            .par_iter()
            .map(|utt| {
                let config = utt.synth.clone().ok_or_else(|| {
                    KwsError::validation(format!("{}: no synthetic config", utt.utt_id))
                })?;
                let joiner = SyntheticJoiner::new(config)?;
                let mut paths = BTreeMap::new();
                for kw in utt.keywords_under_test(keywords) {
                    let rel = format!("{LATTICE_DIR}/{}.{}.kwl", utt.utt_id, kw.name);
                    let mut provenance = serde_json::Map::new();
                    provenance.insert("utt_id".into(), utt.utt_id.clone().into());
                    provenance.insert("epsilon".into(), utt.epsilon.into());
                    provenance.insert("suite_seed".into(), seed.into());
                    provenance.insert(
                        "label".into(),
                        utt.label
                            .clone()
                            .map_or(serde_json::Value::Null, Into::into),
                    );
                    snapshot_generative(&joiner, kw, &dir.join(&rel), provenance)?;
                    paths.insert(kw.name.clone(), rel);
                }
                Ok(paths)
            })
            .collect::<Result<_>>()?;

        for (utt, paths) in self.manifest.utterances.iter_mut().zip(written) {
            utt.lattices = paths;
        }
        self.manifest.save(dir)
    }
}

/// Resolves a manifest-relative lattice path.
pub fn lattice_path(suite_dir: &Path, rel: &str) -> PathBuf {
    suite_dir.join(rel)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SuiteSpec {
        SuiteSpec {
            keywords: vec!["alpha".into(), "beta".into(), "gamma".into()],
            n_pos: 3,
            n_neg: 4,
            t_min: 30,
            t_max: 50,
            epsilons: vec![0.0, 0.4],
            seed: 7,
            ..SuiteSpec::default()
        }
    }

    #[test]
    fn keywords_are_distinct_and_in_range() {
        let suite = gen_suite(&SuiteSpec::default()).unwrap();
        let kws = &suite.manifest.keywords;
        assert_eq!(kws.len(), 20);
        let distinct: BTreeSet<_> = kws.iter().map(|k| k.tokens.clone()).collect();
        assert_eq!(distinct.len(), 20);
        for kw in kws {
            assert!((3..=6).contains(&kw.len()));
            assert!(kw.tokens.iter().all(|&t| (1..=40).contains(&t)));
            assert!(kw.tokens.windows(2).all(|w| w[0] != w[1]));
        }
    }

    #[test]
    fn positives_hold_exactly_one_planted_keyword() {
        let suite = gen_suite(&small()).unwrap();
        let m = &suite.manifest;
        assert_eq!(m.utterances.len(), (3 * 3 + 4) * 2);
        for utt in &m.utterances {
            let synth = utt.synth.as_ref().unwrap();
            SyntheticJoiner::new(synth.clone()).unwrap();
            assert_eq!(synth.alignment.first().unwrap().start, 1);
            assert_eq!(synth.alignment.last().unwrap().end(), utt.num_frames + 1);
            for kw in &m.keywords {
                let n = count_occurrences(&synth.alignment, kw);
                let expected = usize::from(utt.label.as_deref() == Some(kw.name.as_str()));
                assert_eq!(n, expected, "{} / {}", utt.utt_id, kw.name);
            }
            if let Some(p) = utt.planted {
                let kw = m.keyword(utt.label.as_ref().unwrap()).unwrap();
                let seg = synth
                    .alignment
                    .iter()
                    .find(|s| s.start == p.start_frame)
                    .unwrap();
                assert_eq!(seg.token, kw.tokens[0]);
                assert!(p.end_frame <= utt.num_frames);
            }
        }
    }

    #[test]
    fn noise_levels_share_alignments() {
        let m = gen_suite(&small()).unwrap().manifest;
        let a = m
            .utterances
            .iter()
            .find(|u| u.utt_id == "e0-neg-0002")
            .unwrap();
        let b = m
            .utterances
            .iter()
            .find(|u| u.utt_id == "e1-neg-0002")
            .unwrap();
        assert_eq!(
            a.synth.as_ref().unwrap().alignment,
            b.synth.as_ref().unwrap().alignment
        );
        assert_eq!(b.epsilon, 0.4);
    }

    #[test]
    fn keyword_longer_than_shortest_utterance_rejected() {
        let spec = SuiteSpec {
            t_min: 10,
            t_max: 40,
            ..small()
        };
        assert!(matches!(gen_suite(&spec), Err(KwsError::Validation(_))));
        let spec = SuiteSpec {
            epsilons: vec![1.0],
            ..small()
        };
        assert!(gen_suite(&spec).is_err());
        let spec = SuiteSpec {
            n_neg: 0,
            ..small()
        };
        assert!(gen_suite(&spec).is_err());
    }

    #[test]
    fn written_trees_are_byte_identical() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        gen_suite(&small()).unwrap().write_to(a.path()).unwrap();
        gen_suite(&small()).unwrap().write_to(b.path()).unwrap();
        let list = |dir: &Path| {
            let mut files: Vec<PathBuf> = fs::read_dir(dir.join(LATTICE_DIR))
                .unwrap()
                .map(|e| e.unwrap().path())
                .collect();
            files.push(dir.join(MANIFEST_FILE));
            files.sort();
            files
        };
        let (fa, fb) = (list(a.path()), list(b.path()));
        assert_eq!(fa.len(), fb.len());
        // positives: 1 keyword each; negatives: all 3
        assert_eq!(fa.len(), 1 + 2 * 2 * (3 * 3 + 4 * 3));
        for (x, y) in fa.iter().zip(&fb) {
            assert_eq!(x.file_name(), y.file_name());
            assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap());
        }
        let loaded = Manifest::load(a.path()).unwrap();
        assert_eq!(loaded.utterances[0].lattices.len(), 3);
    }

    #[test]
    fn manifest_validation_catches_unknown_label() {
        let mut m = gen_suite(&small()).unwrap().manifest;
        m.utterances[0].label = Some("delta".into());
        assert!(m.validate().is_err());
    }
}
