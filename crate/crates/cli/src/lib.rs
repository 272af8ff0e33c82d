//! Config loading, run manifests and the pipeline stages behind the
//! `peepscope` binary.

pub mod commands;
pub mod config;
pub mod manifest;

pub use commands::{
    cmd_evaluate, cmd_explain, cmd_fit_peephole, cmd_generate, cmd_inject, cmd_train, EvalSummary, ExplainOptions,
    ExplainOutcome,
};
pub use config::RunConfig;
pub use manifest::Manifest;

use peepscope_core::Error;

/// Process exit code for a failed command.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Param(_) => 2,
        Error::Numeric(_) | Error::Divergence { .. } => 3,
        _ => 4,
    }
}
