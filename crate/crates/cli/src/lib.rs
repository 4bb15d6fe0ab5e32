//! Command-line front end: training, evaluation, gradient checks, timing and
//! scan-path rendering.

pub mod bench;
pub mod commands;
pub mod config;
pub mod gradsuite;
pub mod pnm;
pub mod viz;

/// Process exit status for a failed command.
///
/// Numerical blow-ups map to 3, everything else (bad flags, configs,
/// unreadable inputs) to 2.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    let numeric = err
        .chain()
        .any(|e| matches!(e.downcast_ref::<damamba::Error>(), Some(damamba::Error::Numerics(_))));
    if numeric {
        3
    } else {
        2
    }
}
