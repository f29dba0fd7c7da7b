//! Command-line driver: scenario configuration, the pipeline commands, golden
//! regression files and exit-code mapping.

// `!(x > 0.0)` style checks reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod golden;
pub mod output;

use wqms_core::Error;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] Error),
    #[error("no config file: pass --config or set {}", config::CONFIG_ENV)]
    NoConfig,
    #[error("golden comparison failed with {} difference(s):\n{}", .0.len(), .0.join("\n"))]
    Golden(Vec<String>),
}

impl CliError {
    /// Process exit status: 2 for input problems, 3 planning, 4 numerical,
    /// 5 solver, 1 for a golden mismatch.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(e) => match e {
                Error::Io { .. }
                | Error::Parse { .. }
                | Error::Validation(_)
                | Error::Dimension(_) => 2,
                Error::Planning(_) => 3,
                Error::Numerical(_) => 4,
                Error::Solver(_) => 5,
            },
            CliError::NoConfig => 2,
            CliError::Golden(_) => 1,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn error_classes_map_to_exit_codes() {
        let code = |e: Error| CliError::from(e).exit_code();
        assert_eq!(code(Error::Validation("x".into())), 2);
        assert_eq!(code(Error::parse("f", "x")), 2);
        assert_eq!(code(Error::Planning("x".into())), 3);
        assert_eq!(code(Error::Numerical("x".into())), 4);
        assert_eq!(code(Error::Solver("x".into())), 5);
        assert_eq!(CliError::Golden(vec![]).exit_code(), 1);
    }
}
