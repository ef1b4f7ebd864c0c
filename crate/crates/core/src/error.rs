//! Crate-wide error type.
//!
//! Two broad families matter to callers: configuration/validation problems
//! (bad arguments, malformed files, constraint violations) and runtime
//! failures (I/O, numerical divergence). [`Error::is_validation`] makes the
//! split explicit so front ends can map them to distinct exit codes.

use std::fmt;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug)]
pub enum Error {
    /// Invalid argument or violated precondition.
    Invalid(String),
    /// Malformed content in a file being parsed. `line` is 1-based; 0 means
    /// the problem is not tied to a specific line.
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
    /// Underlying I/O failure.
    Io {
        context: String,
        source: std::io::Error,
    },
    /// A synaptic weight fell outside the programmable range [-k, +k].
    WeightRange {
        input: usize,
        neuron: usize,
        value: i64,
        k: u32,
    },
    /// Total synapse count onto one neuron exceeds the per-neuron budget.
    FanInExceeded {
        neuron: usize,
        total: u64,
        limit: u32,
    },
    /// Simulated membrane state became non-finite.
    Diverged { neuron: usize, time: f64 },
    /// Training loss or gradient became non-finite; the epoch was aborted.
    NonFiniteLoss { epoch: u32, detail: String },
}

impl Error {
    /// Shorthand for [`Error::Invalid`] from anything displayable.
    pub fn invalid(msg: impl fmt::Display) -> Self {
        Error::Invalid(msg.to_string())
    }

    /// True for errors caused by bad inputs or configuration, false for
    /// runtime failures (I/O, divergence).
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Invalid(_)
                | Error::Parse { .. }
                | Error::WeightRange { .. }
                | Error::FanInExceeded { .. }
        )
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Invalid(msg) => write!(f, "invalid input: {msg}"),
            Error::Parse { path, line, msg } => {
                if *line == 0 {
                    write!(f, "{path}: {msg}")
                } else {
                    write!(f, "{path}:{line}: {msg}")
                }
            }
            Error::Io { context, source } => write!(f, "{context}: {source}"),
            Error::WeightRange {
                input,
                neuron,
                value,
                k,
            } => write!(
                f,
                "weight {value} from input {input} to neuron {neuron} outside [-{k}, +{k}]"
            ),
            Error::FanInExceeded {
                neuron,
                total,
                limit,
            } => write!(
                f,
                "neuron {neuron} would receive {total} synapses, budget is {limit}"
            ),
            Error::Diverged { neuron, time } => write!(
                f,
                "membrane state of neuron {neuron} became non-finite at t = {time:.6} s"
            ),
            Error::NonFiniteLoss { epoch, detail } => {
                write!(f, "epoch {epoch} aborted, non-finite loss: {detail}")
            }
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}

/// Attach a path or operation description to an I/O error.
pub(crate) fn io_err(context: impl fmt::Display, source: std::io::Error) -> Error {
    Error::Io {
        context: context.to_string(),
        source,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation_split() {
        assert!(Error::invalid("x").is_validation());
        assert!(Error::FanInExceeded {
            neuron: 0,
            total: 65,
            limit: 64
        }
        .is_validation());
        assert!(!Error::Diverged {
            neuron: 3,
            time: 0.5
        }
        .is_validation());
        let io = io_err(
            "reading spikes.csv",
            std::io::Error::new(std::io::ErrorKind::NotFound, "gone"),
        );
        assert!(!io.is_validation());
    }

    #[test]
    fn display_includes_location() {
        let e = Error::Parse {
            path: "a.csv".into(),
            line: 7,
            msg: "bad field".into(),
        };
        assert_eq!(e.to_string(), "a.csv:7: bad field");
    }
}
