use std::fmt;
use std::process::ExitCode;

use dgrade_core::config::ConfigError;
use dgrade_core::pipeline::PipelineError;
use dgrade_lora::LoraError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Config,
    Prerequisite,
    Runtime,
}

impl Kind {
    pub fn code(self) -> u8 {
        match self {
            Kind::Config => 2,
            Kind::Prerequisite => 3,
            Kind::Runtime => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Kind::Config => "config",
            Kind::Prerequisite => "prerequisite",
            Kind::Runtime => "runtime",
        }
    }
}

/// An error with the exit status it maps to.
#[derive(Debug)]
pub struct Failure {
    pub kind: Kind,
    pub error: anyhow::Error,
}

impl Failure {
    pub fn config(msg: impl fmt::Display) -> Self {
        Failure {
            kind: Kind::Config,
            error: anyhow::anyhow!("{msg}"),
        }
    }

    pub fn prerequisite(msg: impl fmt::Display) -> Self {
        Failure {
            kind: Kind::Prerequisite,
            error: anyhow::anyhow!("{msg}"),
        }
    }

    pub fn runtime(msg: impl fmt::Display) -> Self {
        Failure {
            kind: Kind::Runtime,
            error: anyhow::anyhow!("{msg}"),
        }
    }

    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(self.kind.code())
    }
}

fn classify(error: &anyhow::Error) -> Kind {
    if error.downcast_ref::<ConfigError>().is_some() {
        return Kind::Config;
    }
    if let Some(PipelineError::Config(_)) = error.downcast_ref::<PipelineError>() {
        return Kind::Config;
    }
    if let Some(LoraError::Config(_) | LoraError::UnknownTarget(_) | LoraError::RankTooLarge { .. }) =
        error.downcast_ref::<LoraError>()
    {
        return Kind::Config;
    }
    Kind::Runtime
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        Failure {
            kind: classify(&error),
            error,
        }
    }
}

macro_rules! from_error {
    ($($t:ty),*) => {$(
        impl From<$t> for Failure {
            fn from(e: $t) -> Self {
                anyhow::Error::from(e).into()
            }
        }
    )*};
}

from_error!(
    ConfigError,
    PipelineError,
    LoraError,
    std::io::Error,
    serde_json::Error,
    dgrade_core::evalharness::ReportError
);

pub type Result<T> = std::result::Result<T, Failure>;

/// Attaches context to a fallible value while keeping its classification.
pub trait Context<T> {
    fn context(self, msg: impl fmt::Display) -> Result<T>;
}

impl<T, E: Into<Failure>> Context<T> for std::result::Result<T, E> {
    fn context(self, msg: impl fmt::Display) -> Result<T> {
        self.map_err(|e| {
            let f: Failure = e.into();
            Failure {
                kind: f.kind,
                error: f.error.context(msg.to_string()),
            }
        })
    }
}
