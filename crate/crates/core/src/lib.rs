//! Keyword-spotting search for transducer models.
//!
//! The decoder in [`decoder`] constrains the transducer lattice to a single
//! keyword and scores every frame as a possible keyword end, either frame by
//! frame (RNN-T) or hopping by the predicted duration of a token-and-duration
//! transducer (TDT). Model outputs come from an [`emission::EmissionOracle`]:
//! a replayable `KWL1` lattice file or a seeded synthetic joiner.
//!
//! Around the decoder sit ASR-style baselines ([`baselines`]), an exhaustive
//! path enumerator used as a correctness reference ([`alignment`]), detection
//! metrics ([`metrics`]), a synthetic suite generator ([`synth`]) and the
//! benchmark driver ([`bench`]).

pub mod alignment;
pub mod baselines;
pub mod bench;
pub mod decoder;
pub mod emission;
pub mod error;
pub mod logjson;
pub mod metrics;
pub mod synth;

pub use decoder::{
    decode_kws, decode_kws_streaming, detect_events, dump_delta_matrix, DecodeConfig, DecodeMode,
    DetectionEvent, KwsStream, ScoreRecord, ScoreStream,
};
pub use emission::{
    EmissionOracle, EmissionQuery, GenerativeOracle, GreedyHistory, KeywordSpec, Lattice,
    SyntheticJoiner, SyntheticJoinerConfig,
};
pub use error::{FormatError, KwsError, Result};
