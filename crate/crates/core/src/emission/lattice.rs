//! File-backed replay lattice and the `KWL1` binary format.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic        [u8; 4]  "KWL1"
//! version      u16
//! T            u32
//! U            u32
//! D_max        u16      0 for RNN-T-only files
//! frame_secs   f32
//! log_y        f32 x T*U        row-major [t][u], u in [0, U-1]
//! log_phi      f32 x T*(U+1)    row-major [t][u], u in [0, U]
//! greedy_tok   u32 x T          only when D_max > 0
//! greedy_dur   u16 x T          only when D_max > 0
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{
    check_frame, EmissionOracle, EmissionQuery, GreedyHistory, GreedyStepOutput, KeywordEmissions,
    KeywordSpec,
};
use crate::error::{FormatError, KwsError, Result};

pub const LATTICE_MAGIC: [u8; 4] = *b"KWL1";
pub const LATTICE_VERSION: u16 = 1;
pub const LATTICE_HEADER_BYTES: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatticeHeader {
    pub version: u16,
    pub num_frames: u32,
    pub keyword_len: u32,
    pub d_max: u16,
    pub frame_seconds: f32,
}

impl LatticeHeader {
    /// Exact file length implied by the header, or `None` on overflow.
    pub fn expected_file_len(&self) -> Option<usize> {
        let t = self.num_frames as u64;
        let u = self.keyword_len as u64;
        let mut floats = t.checked_mul(u)?;
        floats = floats.checked_add(t.checked_mul(u + 1)?)?;
        let mut len = floats.checked_mul(4)?;
        if self.d_max > 0 {
            len = len.checked_add(t.checked_mul(6)?)?;
        }
        usize::try_from(len.checked_add(LATTICE_HEADER_BYTES as u64)?).ok()
    }
}

/// A keyword-conditioned emission lattice held in memory.
///
/// Serves as the replay oracle: the keyword track is read from the stored
/// tables and the greedy track from the per-frame channel, ignoring the
/// history argument.
#[derive(Debug, Clone, PartialEq)]
pub struct Lattice {
    num_frames: usize,
    keyword_len: usize,
    d_max: u16,
    frame_seconds: f32,
    log_y: Vec<f32>,
    log_phi: Vec<f32>,
    greedy_token: Vec<u32>,
    greedy_duration: Vec<u16>,
}

impl Lattice {
    /// Builds a lattice from per-node and per-frame closures. `emissions(t, u)`
    /// returns `(log_y, log_phi)`; `log_y` is ignored at `u = U`. `greedy(t)`
    /// is only called when `d_max > 0`.
    pub fn from_fn(
        num_frames: usize,
        keyword_len: usize,
        d_max: u16,
        frame_seconds: f32,
        mut emissions: impl FnMut(usize, usize) -> (f32, f32),
        mut greedy: impl FnMut(usize) -> (u32, u16),
    ) -> Result<Self> {
        let mut log_y = Vec::with_capacity(num_frames * keyword_len);
        let mut log_phi = Vec::with_capacity(num_frames * (keyword_len + 1));
        for t in 1..=num_frames {
            for u in 0..=keyword_len {
                let (y, phi) = emissions(t, u);
                if u < keyword_len {
                    log_y.push(y);
                }
                log_phi.push(phi);
            }
        }
        let (greedy_token, greedy_duration) = if d_max > 0 {
            (1..=num_frames).map(&mut greedy).unzip()
        } else {
            (Vec::new(), Vec::new())
        };
        Self::from_parts(
            num_frames,
            keyword_len,
            d_max,
            frame_seconds,
            log_y,
            log_phi,
            greedy_token,
            greedy_duration,
        )
    }

    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        num_frames: usize,
        keyword_len: usize,
        d_max: u16,
        frame_seconds: f32,
        log_y: Vec<f32>,
        log_phi: Vec<f32>,
        greedy_token: Vec<u32>,
        greedy_duration: Vec<u16>,
    ) -> Result<Self> {
        if keyword_len == 0 {
            return Err(KwsError::validation("lattice keyword length must be >= 1"));
        }
        let track_len = if d_max > 0 { num_frames } else { 0 };
        if log_y.len() != num_frames * keyword_len
            || log_phi.len() != num_frames * (keyword_len + 1)
            || greedy_token.len() != track_len
            || greedy_duration.len() != track_len
        {
            return Err(KwsError::validation(
                "lattice table sizes do not match T, U",
            ));
        }
        let lattice = Lattice {
            num_frames,
            keyword_len,
            d_max,
            frame_seconds,
            log_y,
            log_phi,
            greedy_token,
            greedy_duration,
        };
        lattice
            .check_values()
            .map_err(|e| KwsError::validation(e.to_string()))?;
        Ok(lattice)
    }

    /// Records every keyword-track node and the greedy track of `oracle`.
    ///
    /// The greedy channel stores, at every frame, the step the oracle returns
    /// for the history a TDT decode would hold on arriving there (frames are
    /// visited at hops of the predicted duration, clamped to at least 1).
    pub fn snapshot<O: EmissionOracle + ?Sized>(oracle: &O, keyword: &KeywordSpec) -> Result<Self> {
        let num_frames = oracle.num_frames();
        let u_len = keyword.len();
        let mut log_y = Vec::with_capacity(num_frames * u_len);
        let mut log_phi = Vec::with_capacity(num_frames * (u_len + 1));
        for t in 1..=num_frames {
            for u in 0..=u_len {
                let e = oracle.keyword_emissions(keyword, EmissionQuery::new(t, u))?;
                if u < u_len {
                    log_y.push(e.log_y as f32);
                }
                log_phi.push(e.log_phi as f32);
            }
        }
        let d_max = oracle.d_max();
        let mut greedy_token = Vec::new();
        let mut greedy_duration = Vec::new();
        if d_max > 0 {
            let mut history = GreedyHistory::new();
            let mut next_visit = 1;
            for t in 1..=num_frames {
                let (step, extended) = oracle.greedy_step(t, history.clone())?;
                greedy_token.push(step.token);
                greedy_duration.push(step.duration);
                if t == next_visit {
                    history = extended;
                    next_visit = t + usize::from(step.duration.max(1));
                }
            }
        }
        Self::from_parts(
            num_frames,
            u_len,
            d_max,
            oracle.frame_seconds(),
            log_y,
            log_phi,
            greedy_token,
            greedy_duration,
        )
    }

    pub fn header(&self) -> LatticeHeader {
        LatticeHeader {
            version: LATTICE_VERSION,
            num_frames: self.num_frames as u32,
            keyword_len: self.keyword_len as u32,
            d_max: self.d_max,
            frame_seconds: self.frame_seconds,
        }
    }

    pub fn keyword_len(&self) -> usize {
        self.keyword_len
    }

    /// Stored `log y(t, u)`, `u < U`.
    pub fn log_y(&self, t: usize, u: usize) -> f32 {
        self.log_y[(t - 1) * self.keyword_len + u]
    }

    /// Stored `log phi(t, u)`, `u <= U`.
    pub fn log_phi(&self, t: usize, u: usize) -> f32 {
        self.log_phi[(t - 1) * (self.keyword_len + 1) + u]
    }

    pub fn greedy_track(&self) -> (&[u32], &[u16]) {
        (&self.greedy_token, &self.greedy_duration)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = self.header();
        let mut out = Vec::with_capacity(header.expected_file_len().unwrap_or(0));
        out.extend_from_slice(&LATTICE_MAGIC);
        out.extend_from_slice(&header.version.to_le_bytes());
        out.extend_from_slice(&header.num_frames.to_le_bytes());
        out.extend_from_slice(&header.keyword_len.to_le_bytes());
        out.extend_from_slice(&header.d_max.to_le_bytes());
        out.extend_from_slice(&header.frame_seconds.to_le_bytes());
        for v in self.log_y.iter().chain(&self.log_phi) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in &self.greedy_token {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in &self.greedy_duration {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FormatError> {
        if bytes.len() < 4 || bytes[..4] != LATTICE_MAGIC {
            let mut found = [0u8; 4];
            let n = bytes.len().min(4);
            found[..n].copy_from_slice(&bytes[..n]);
            return Err(FormatError::BadMagic { found });
        }
        if bytes.len() < LATTICE_HEADER_BYTES {
            return Err(FormatError::Truncated {
                expected: LATTICE_HEADER_BYTES,
                actual: bytes.len(),
            });
        }
        let mut reader = LeReader::new(&bytes[4..]);
        let version = reader.u16();
        if version != LATTICE_VERSION {
            return Err(FormatError::UnsupportedVersion {
                found: version,
                supported: LATTICE_VERSION,
            });
        }
        let header = LatticeHeader {
            version,
            num_frames: reader.u32(),
            keyword_len: reader.u32(),
            d_max: reader.u16(),
            frame_seconds: reader.f32(),
        };
        let expected = header.expected_file_len().unwrap_or(usize::MAX);
        if bytes.len() < expected {
            return Err(FormatError::Truncated {
                expected,
                actual: bytes.len(),
            });
        }
        if bytes.len() > expected {
            return Err(FormatError::TrailingBytes {
                expected,
                actual: bytes.len(),
            });
        }

        let num_frames = header.num_frames as usize;
        let keyword_len = header.keyword_len as usize;
        let log_y = (0..num_frames * keyword_len)
            .map(|_| reader.f32())
            .collect();
        let log_phi = (0..num_frames * (keyword_len + 1))
            .map(|_| reader.f32())
            .collect();
        let (greedy_token, greedy_duration) = if header.d_max > 0 {
            let tokens = (0..num_frames).map(|_| reader.u32()).collect();
            let durations = (0..num_frames).map(|_| reader.u16()).collect();
            (tokens, durations)
        } else {
            (Vec::new(), Vec::new())
        };
        let lattice = Lattice {
            num_frames,
            keyword_len,
            d_max: header.d_max,
            frame_seconds: header.frame_seconds,
            log_y,
            log_phi,
            greedy_token,
            greedy_duration,
        };
        lattice.check_values()?;
        Ok(lattice)
    }

    fn check_values(&self) -> Result<(), FormatError> {
        let bad = |v: f32| v.is_nan() || v > 0.0;
        for (field, values) in [("log_y", &self.log_y), ("log_phi", &self.log_phi)] {
            if let Some(index) = values.iter().position(|&v| bad(v)) {
                return Err(FormatError::InvalidLogProb {
                    field,
                    index,
                    value: values[index],
                });
            }
        }
        if let Some(i) = self.greedy_duration.iter().position(|&d| d > self.d_max) {
            return Err(FormatError::DurationOutOfRange {
                frame: i + 1,
                value: self.greedy_duration[i],
                d_max: self.d_max,
            });
        }
        Ok(())
    }
}

impl EmissionOracle for Lattice {
    fn num_frames(&self) -> usize {
        self.num_frames
    }

    fn d_max(&self) -> u16 {
        self.d_max
    }

    fn frame_seconds(&self) -> f32 {
        self.frame_seconds
    }

    fn keyword_emissions(
        &self,
        keyword: &KeywordSpec,
        q: EmissionQuery,
    ) -> Result<KeywordEmissions> {
        self.check_keyword(keyword)?;
        q.check(self.num_frames, self.keyword_len)?;
        let log_y = if q.u < self.keyword_len {
            f64::from(self.log_y(q.t, q.u))
        } else {
            f64::NEG_INFINITY
        };
        Ok(KeywordEmissions {
            log_y,
            log_phi: f64::from(self.log_phi(q.t, q.u)),
        })
    }

    fn column_emissions(
        &self,
        keyword: &KeywordSpec,
        t: usize,
        log_y: &mut [f64],
        log_phi: &mut [f64],
    ) -> Result<()> {
        self.check_keyword(keyword)?;
        check_frame(t, self.num_frames)?;
        let u_len = self.keyword_len;
        let ys = &self.log_y[(t - 1) * u_len..t * u_len];
        let phis = &self.log_phi[(t - 1) * (u_len + 1)..t * (u_len + 1)];
        for (dst, &src) in log_y.iter_mut().zip(ys) {
            *dst = f64::from(src);
        }
        for (dst, &src) in log_phi.iter_mut().zip(phis) {
            *dst = f64::from(src);
        }
        Ok(())
    }

    /// Replays the stored channel. Probabilities are not stored, so both
    /// log-prob fields are NaN.
    fn greedy_step(
        &self,
        t: usize,
        history: GreedyHistory,
    ) -> Result<(GreedyStepOutput, GreedyHistory)> {
        if self.d_max == 0 {
            return Err(KwsError::Mode(
                "lattice has no greedy track (D_max = 0); TDT decoding needs one".into(),
            ));
        }
        check_frame(t, self.num_frames)?;
        let step = GreedyStepOutput {
            token: self.greedy_token[t - 1],
            duration: self.greedy_duration[t - 1],
            log_token_prob: f64::NAN,
            log_duration_prob: f64::NAN,
        };
        Ok((step, history.extended(step.token)))
    }
}

impl Lattice {
    fn check_keyword(&self, keyword: &KeywordSpec) -> Result<()> {
        if keyword.len() != self.keyword_len {
            return Err(KwsError::DimensionMismatch {
                expected: self.keyword_len,
                found: keyword.len(),
            });
        }
        Ok(())
    }
}

struct LeReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> LeReader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        LeReader { bytes, pos: 0 }
    }

    fn take<const N: usize>(&mut self) -> [u8; N] {
        let mut buf = [0u8; N];
        buf.copy_from_slice(&self.bytes[self.pos..self.pos + N]);
        self.pos += N;
        buf
    }

    fn u16(&mut self) -> u16 {
        u16::from_le_bytes(self.take())
    }

    fn u32(&mut self) -> u32 {
        u32::from_le_bytes(self.take())
    }

    fn f32(&mut self) -> f32 {
        f32::from_le_bytes(self.take())
    }
}

pub fn save_lattice(lattice: &Lattice, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, lattice.to_bytes()).map_err(|e| KwsError::io(path, e))
}

pub fn load_lattice(path: impl AsRef<Path>) -> Result<Lattice> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| KwsError::io(path, e))?;
    Lattice::from_bytes(&bytes).map_err(|source| KwsError::Format {
        path: path.to_path_buf(),
        source,
    })
}

/// JSON stored next to a lattice file (same basename, `.json`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatticeSidecar {
    pub keyword: KeywordSpec,
    #[serde(default)]
    pub provenance: serde_json::Map<String, serde_json::Value>,
}

impl LatticeSidecar {
    pub fn path_for(lattice_path: &Path) -> PathBuf {
        lattice_path.with_extension("json")
    }

    pub fn save(&self, lattice_path: &Path) -> Result<()> {
        let path = Self::path_for(lattice_path);
        let text = serde_json::to_string_pretty(self).map_err(|e| KwsError::json(&path, e))?;
        fs::write(&path, text + "\n").map_err(|e| KwsError::io(&path, e))
    }

    pub fn load(lattice_path: &Path) -> Result<Self> {
        let path = Self::path_for(lattice_path);
        let text = fs::read_to_string(&path).map_err(|e| KwsError::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| KwsError::json(&path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small(d_max: u16) -> Lattice {
        Lattice::from_fn(
            10,
            2,
            d_max,
            0.03,
            |t, u| (-(t as f32) * 0.1 - u as f32, -0.5),
            |t| (t as u32 % 3, 2.min(d_max)),
        )
        .unwrap()
    }

    #[test]
    fn expected_length_formula() {
        // 20 header + 4 * (10*2 + 10*3)
        assert_eq!(small(0).header().expected_file_len(), Some(220));
        // plus 10 * (4 + 2) for the greedy track
        assert_eq!(small(4).header().expected_file_len(), Some(280));
        assert_eq!(small(4).to_bytes().len(), 280);
    }

    #[test]
    fn bad_magic() {
        let mut bytes = small(0).to_bytes();
        bytes[..4].copy_from_slice(b"XXXX");
        assert_eq!(
            Lattice::from_bytes(&bytes),
            Err(FormatError::BadMagic { found: *b"XXXX" })
        );
    }

    #[test]
    fn truncated_body_names_both_lengths() {
        let bytes = small(0).to_bytes();
        let err = Lattice::from_bytes(&bytes[..bytes.len() - 4]).unwrap_err();
        assert_eq!(
            err,
            FormatError::Truncated {
                expected: 220,
                actual: 216
            }
        );
        assert!(err.to_string().contains("220") && err.to_string().contains("216"));
    }

    #[test]
    fn trailing_bytes_rejected() {
        let mut bytes = small(2).to_bytes();
        bytes.push(0);
        assert!(matches!(
            Lattice::from_bytes(&bytes),
            Err(FormatError::TrailingBytes { .. })
        ));
    }

    #[test]
    fn version_mismatch() {
        let mut bytes = small(0).to_bytes();
        bytes[4..6].copy_from_slice(&2u16.to_le_bytes());
        assert_eq!(
            Lattice::from_bytes(&bytes),
            Err(FormatError::UnsupportedVersion {
                found: 2,
                supported: 1
            })
        );
    }

    #[test]
    fn positive_log_prob_rejected() {
        let mut bytes = small(0).to_bytes();
        bytes[20..24].copy_from_slice(&0.5f32.to_le_bytes());
        assert!(matches!(
            Lattice::from_bytes(&bytes),
            Err(FormatError::InvalidLogProb {
                field: "log_y",
                index: 0,
                ..
            })
        ));
    }

    #[test]
    fn duration_above_d_max_rejected() {
        let mut bytes = small(2).to_bytes();
        let n = bytes.len();
        bytes[n - 2..].copy_from_slice(&3u16.to_le_bytes());
        assert!(matches!(
            Lattice::from_bytes(&bytes),
            Err(FormatError::DurationOutOfRange {
                frame: 10,
                value: 3,
                d_max: 2
            })
        ));
    }

    #[test]
    fn replay_channel_ignores_history() {
        let lattice = small(2);
        for t in 1..=10 {
            let history = GreedyHistory::new().extended(t as u32 + 40);
            let (step, _) = lattice.greedy_step(t, history).unwrap();
            assert_eq!(step.duration, 2);
        }
    }

    #[test]
    fn rnnt_only_lattice_has_no_greedy_track() {
        let err = small(0).greedy_step(1, GreedyHistory::new()).unwrap_err();
        assert!(matches!(err, KwsError::Mode(_)));
    }

    #[test]
    fn wrong_keyword_length() {
        let kw = KeywordSpec::new("k", vec![1, 2, 3]).unwrap();
        let err = small(0)
            .keyword_emissions(&kw, EmissionQuery::new(1, 0))
            .unwrap_err();
        assert!(matches!(
            err,
            KwsError::DimensionMismatch {
                expected: 2,
                found: 3
            }
        ));
    }

    #[test]
    fn sidecar_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.kwl");
        let mut provenance = serde_json::Map::new();
        provenance.insert("seed".into(), 7.into());
        let sidecar = LatticeSidecar {
            keyword: KeywordSpec::new("hey", vec![4, 5]).unwrap(),
            provenance,
        };
        sidecar.save(&path).unwrap();
        assert_eq!(LatticeSidecar::load(&path).unwrap(), sidecar);
    }

    fn log_prob() -> impl Strategy<Value = f32> {
        prop_oneof![
            9 => -30.0f32..=0.0,
            1 => Just(f32::NEG_INFINITY),
        ]
    }

    proptest! {
        #[test]
        fn bytes_round_trip_bit_exact(
            t in 1usize..20,
            u in 1usize..6,
            d_max in 0u16..5,
            seed in proptest::collection::vec(log_prob(), 1..64),
        ) {
            let lattice = Lattice::from_fn(
                t, u, d_max, 0.03,
                |tt, uu| (seed[(tt * 7 + uu) % seed.len()], seed[(tt * 3 + uu * 5) % seed.len()]),
                |tt| (tt as u32, (tt as u16) % (d_max + 1)),
            ).unwrap();
            let back = Lattice::from_bytes(&lattice.to_bytes()).unwrap();
            prop_assert_eq!(back.to_bytes(), lattice.to_bytes());
            prop_assert_eq!(back.header(), lattice.header());
        }
    }
}
