//! Operator surface for the two-stage pipeline: configuration, one function
//! per subcommand, the synthetic ablation harness and static reports.

use std::fmt;

pub mod ablation;
pub mod commands;
pub mod config;
pub mod plot;
pub mod report;

/// A configuration or validation problem; maps to exit code 2.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// 2 for configuration/validation errors, 1 for everything else.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    use selfcal_core::Error as E;
    for cause in err.chain() {
        if cause.downcast_ref::<UsageError>().is_some() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            if matches!(
                e,
                E::Config(_)
                    | E::EmptyManifest
                    | E::MalformedRow { .. }
                    | E::CategoryOutOfRange { .. }
                    | E::DuplicateImage(_)
                    | E::MissingCategory(_)
            ) {
                return 2;
            }
        }
    }
    1
}
