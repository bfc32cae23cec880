use std::process::ExitCode;

use serde::Serialize;

pub const UNKNOWN_VARIANT: u8 = 2;
pub const INVALID_CONFIG: u8 = 3;
pub const MISSING_FILE: u8 = 4;
pub const OTHER: u8 = 1;

#[derive(Serialize)]
struct ErrorReport<'a> {
    error: &'a str,
    message: String,
    exit_code: u8,
}

fn classify(err: &anyhow::Error) -> (&'static str, u8) {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<vmflow::Error>() {
            match e {
                vmflow::Error::UnknownVariant(_) => return ("unknown_variant", UNKNOWN_VARIANT),
                vmflow::Error::Config(_) => return ("invalid_config", INVALID_CONFIG),
                vmflow::Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => {
                    return ("missing_file", MISSING_FILE)
                }
                _ => {}
            }
        }
        if let Some(io) = cause.downcast_ref::<std::io::Error>() {
            if io.kind() == std::io::ErrorKind::NotFound {
                return ("missing_file", MISSING_FILE);
            }
        }
        if cause.downcast_ref::<serde_json::Error>().is_some() {
            return ("invalid_config", INVALID_CONFIG);
        }
    }
    ("error", OTHER)
}

/// Print a JSON error line on stderr and pick the exit code.
pub fn report(err: &anyhow::Error) -> ExitCode {
    let (kind, code) = classify(err);
    let body = ErrorReport {
        error: kind,
        message: format!("{err:#}"),
        exit_code: code,
    };
    eprintln!("{}", serde_json::to_string(&body).unwrap_or_else(|_| format!("{{\"error\":\"{kind}\"}}")));
    ExitCode::from(code)
}
