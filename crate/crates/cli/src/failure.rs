use std::fmt;

use metashift_core::eval::EvalError;
use metashift_core::meta::MetaError;
use metashift_core::nn::NnError;
use metashift_core::shift::ShiftError;
use metashift_core::taskgen::TaskgenError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Validation,
    Missing,
    Numerical,
}

impl Kind {
    pub fn code(self) -> i32 {
        match self {
            Kind::Validation => 2,
            Kind::Missing => 3,
            Kind::Numerical => 4,
        }
    }
}

/// An error with a known exit status.
#[derive(Debug)]
pub struct Failure {
    pub kind: Kind,
    pub message: String,
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Failure {}

pub fn validation(message: impl Into<String>) -> anyhow::Error {
    Failure {
        kind: Kind::Validation,
        message: message.into(),
    }
    .into()
}

pub fn missing(message: impl Into<String>) -> anyhow::Error {
    Failure {
        kind: Kind::Missing,
        message: message.into(),
    }
    .into()
}

fn nn_kind(e: &NnError) -> Option<Kind> {
    match e {
        NnError::NonFinite(_) => Some(Kind::Numerical),
        NnError::LearningRate(_) | NnError::Architecture(_) => Some(Kind::Validation),
        _ => None,
    }
}

fn taskgen_kind(e: &TaskgenError) -> Option<Kind> {
    match e {
        TaskgenError::Invalid(_) | TaskgenError::Sizing { .. } => Some(Kind::Validation),
        TaskgenError::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => {
            Some(Kind::Missing)
        }
        _ => None,
    }
}

fn classify(e: &(dyn std::error::Error + 'static)) -> Option<Kind> {
    if let Some(f) = e.downcast_ref::<Failure>() {
        return Some(f.kind);
    }
    if let Some(e) = e.downcast_ref::<NnError>() {
        return nn_kind(e);
    }
    if let Some(e) = e.downcast_ref::<TaskgenError>() {
        return taskgen_kind(e);
    }
    if let Some(e) = e.downcast_ref::<MetaError>() {
        return match e {
            MetaError::Nn(n) => nn_kind(n),
            MetaError::Taskgen(t) => taskgen_kind(t),
            MetaError::Shift(_) => None,
            _ => Some(Kind::Validation),
        };
    }
    if let Some(e) = e.downcast_ref::<EvalError>() {
        return match e {
            EvalError::Nn(n) => nn_kind(n),
            EvalError::Meta(m) => classify(m),
            _ => Some(Kind::Validation),
        };
    }
    if let Some(e) = e.downcast_ref::<ShiftError>() {
        return match e {
            ShiftError::Nn(n) => nn_kind(n),
            _ => Some(Kind::Validation),
        };
    }
    None
}

/// 2 for invalid input, 3 for a missing upstream artifact, 4 for a
/// numerical failure, 1 otherwise.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    err.chain().find_map(classify).map_or(1, Kind::code)
}
