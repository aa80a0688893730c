//! Exit codes and the mapping from library errors onto them.

use std::fmt;
use std::path::Path;

use metafollower::data::DataError;
use metafollower::eval::EvalError;
use metafollower::ga::GaError;
use metafollower::meta::MetaError;
use metafollower::nn::NnError;
use metafollower::pidl::PidlError;
use metafollower::pipeline::PipelineError;
use metafollower::style::StyleError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitCode {
    /// Bad arguments, config, or a missing input file.
    Usage = 1,
    /// Input data failed validation.
    Data = 2,
    /// Training or simulation produced non-finite numbers.
    Numeric = 3,
}

impl ExitCode {
    pub fn kind(self) -> &'static str {
        match self {
            ExitCode::Usage => "usage",
            ExitCode::Data => "data",
            ExitCode::Numeric => "numeric",
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub code: ExitCode,
    pub message: String,
}

impl CliError {
    pub fn new(code: ExitCode, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        Self::new(ExitCode::Usage, message)
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self::new(ExitCode::Data, message)
    }

    pub fn missing(path: &Path) -> Self {
        Self::usage(format!("missing input file {}", path.display()))
    }

    /// The single diagnostic line printed before exiting.
    pub fn line(&self) -> String {
        let msg = self.message.replace(['\n', '\r'], " ");
        format!("ERROR: code={} kind={} {msg}", self.code as i32, self.code.kind())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

fn code_of_nn(e: &NnError) -> ExitCode {
    match e {
        NnError::Io(_) => ExitCode::Usage,
        _ => ExitCode::Data,
    }
}

fn code_of_pidl(e: &PidlError) -> ExitCode {
    match e {
        PidlError::Physics(_) | PidlError::Autodiff(_) | PidlError::NonFiniteLoss(_) => ExitCode::Numeric,
        PidlError::Nn(n) => code_of_nn(n),
        _ => ExitCode::Data,
    }
}

fn code_of_meta(e: &MetaError) -> ExitCode {
    match e {
        MetaError::NonFinite { .. } | MetaError::Autodiff { .. } => ExitCode::Numeric,
        MetaError::Config(_) => ExitCode::Usage,
        MetaError::EmptyBatch => ExitCode::Data,
        MetaError::Pidl(p) => code_of_pidl(p),
    }
}

fn code_of_data(e: &DataError) -> ExitCode {
    match e {
        DataError::Io(_) => ExitCode::Usage,
        _ => ExitCode::Data,
    }
}

fn code_of_ga(e: &GaError) -> ExitCode {
    match e {
        GaError::NoEvents => ExitCode::Data,
        GaError::AllNonFinite => ExitCode::Numeric,
        _ => ExitCode::Usage,
    }
}

fn code_of_eval(e: &EvalError) -> ExitCode {
    match e {
        EvalError::Rollout { .. } | EvalError::FineTune { .. } => ExitCode::Numeric,
        EvalError::Samples(p) => code_of_pidl(p),
        _ => ExitCode::Data,
    }
}

macro_rules! classify {
    ($t:ty, $f:expr) => {
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::new($f(&e), e.to_string())
            }
        }
    };
}

classify!(NnError, code_of_nn);
classify!(PidlError, code_of_pidl);
classify!(MetaError, code_of_meta);
classify!(DataError, code_of_data);
classify!(GaError, code_of_ga);
classify!(EvalError, code_of_eval);
classify!(StyleError, |e: &StyleError| match e {
    StyleError::Edges(_) => ExitCode::Usage,
    _ => ExitCode::Data,
});
classify!(PipelineError, |e: &PipelineError| match e {
    PipelineError::Data(x) => code_of_data(x),
    PipelineError::Ga(x) => code_of_ga(x),
    PipelineError::Pidl(x) => code_of_pidl(x),
    PipelineError::Meta(x) => code_of_meta(x),
    PipelineError::Eval(x) => code_of_eval(x),
});

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagnostic_is_one_line() {
        let e = CliError::data("bad\nrow");
        assert_eq!(e.line(), "ERROR: code=2 kind=data bad row");
    }

    #[test]
    fn classification() {
        assert_eq!(CliError::from(GaError::AllNonFinite).code, ExitCode::Numeric);
        assert_eq!(CliError::from(MetaError::Config("x".into())).code, ExitCode::Usage);
        assert_eq!(CliError::from(PidlError::NoSamples).code, ExitCode::Data);
        assert_eq!(CliError::from(PidlError::NonFiniteLoss(f64::NAN)).code, ExitCode::Numeric);
    }
}
