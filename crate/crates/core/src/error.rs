use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("joint {joint} ({name}) is at or behind the camera plane (z = {z:.4} m)")]
    BehindCamera {
        joint: usize,
        name: &'static str,
        z: f64,
    },
    #[error("only {found} joints above confidence {threshold}, need at least {needed}")]
    InsufficientJoints {
        found: usize,
        needed: usize,
        threshold: f64,
    },
    #[error("pose fit diverged: objective increased for {0} consecutive accepted steps")]
    Diverged(usize),
    #[error("head orientation is degenerate (planar eye-ear vector norm {0:e})")]
    DegenerateHead(f64),
    #[error("no valid ground-truth future positions")]
    NoGroundTruth,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("missing parameter '{0}'")]
    MissingParameter(String),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
