use perpcs::Error as CoreError;

/// Stable process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const CONFIG: i32 = 2;
    pub const MISSING: i32 = 3;
    pub const HASH_MISMATCH: i32 = 4;
    pub const RUNTIME: i32 = 5;
    pub const POSTCONDITION: i32 = 6;
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("missing prerequisite {name}: run `{stage}` first")]
    Missing { name: String, stage: &'static str },
    #[error("artifact {name} does not match the manifest (expected {expected}, found {found})")]
    Hash {
        name: String,
        expected: String,
        found: String,
    },
    #[error("postcondition failed: {0}")]
    Postcondition(String),
}

/// Exit code for an error chain.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<CliError>() {
            return match e {
                CliError::Config(_) => exit::CONFIG,
                CliError::Missing { .. } => exit::MISSING,
                CliError::Hash { .. } => exit::HASH_MISMATCH,
                CliError::Postcondition(_) => exit::POSTCONDITION,
            };
        }
        if let Some(e) = cause.downcast_ref::<CoreError>() {
            return match e {
                CoreError::Config(_) => exit::CONFIG,
                CoreError::HashMismatch { .. } => exit::HASH_MISMATCH,
                _ => exit::RUNTIME,
            };
        }
    }
    exit::RUNTIME
}
