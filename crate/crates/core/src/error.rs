use std::io;

use thiserror::Error;

/// Every failure mode surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("ShapeMismatch: {0}")]
    ShapeMismatch(String),
    #[error("NotScalar: backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("DetachedGraph: {0}")]
    DetachedGraph(String),
    #[error("NonFinite: op `{0}` produced NaN or Inf")]
    NonFinite(&'static str),

    #[error("TargetTooLong: target needs {needed} frames but only {frames} are available")]
    TargetTooLong { needed: usize, frames: usize },
    #[error("BlankInTarget: class 0 is reserved for the CTC blank")]
    BlankInTarget,
    #[error("VocabMismatch: posterior has {classes} classes, vocabulary implies {expected}")]
    VocabMismatch { classes: usize, expected: usize },
    #[error("TooLarge: brute-force enumeration is limited to T <= 8 and C <= 4 (got T={frames}, C={classes})")]
    TooLarge { frames: usize, classes: usize },

    #[error("BadConfig: {0}")]
    BadConfig(String),
    #[error("AlreadyAttached: model already carries a correction BiLSTM")]
    AlreadyAttached,
    #[error("ArchMismatch: {0}")]
    ArchMismatch(String),
    #[error("BadMagic: not a checkpoint file")]
    BadMagic,
    #[error("HashMismatch: checkpoint vocabulary hash {found} differs from supplied {expected}")]
    HashMismatch { expected: String, found: String },
    #[error("Corrupt: {0}")]
    Corrupt(String),

    #[error("InvalidEncoding: input is not valid UTF-8 (byte offset {0})")]
    InvalidEncoding(usize),
    #[error("EmptyCorpus: no usable text after cleaning")]
    EmptyCorpus,
    #[error("OovCodepoint: U+{cp:04X} {0:?} is not in the vocabulary", cp = *.0 as u32)]
    OovCodepoint(char),
    #[error("UnknownClass: class id {0} is outside the vocabulary")]
    UnknownClass(usize),
    #[error("BadOrder: n-gram order must be in 1..=5, got {0}")]
    BadOrder(usize),

    #[error("MissingGlyph: script {script} has no glyph for U+{:04X}", *.codepoint as u32)]
    MissingGlyph { script: String, codepoint: char },
    #[error("EmptyLexicon: nothing to sample from")]
    EmptyLexicon,
    #[error("BadImage: {0}")]
    BadImage(String),

    #[error("EmptySet: nothing to evaluate")]
    EmptySet,
    #[error("EmptyDataset: training requires at least one sample")]
    EmptyDataset,
    #[error("InfeasibleTarget: label {label:?} cannot be aligned to {frames} frames")]
    InfeasibleTarget { label: String, frames: usize },

    #[error("Io: {0}")]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
