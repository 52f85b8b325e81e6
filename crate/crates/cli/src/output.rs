//! Every command prints a human table on stderr and one JSON document on
//! stdout; failures print a single JSON error line on stderr.

use std::io::Write;

use dleng::ErrorKind;
use serde::Serialize;
use serde_json::json;

/// Process exit codes by failure class.
pub const EXIT_IO: i32 = 3;
pub const EXIT_FORMAT: i32 = 4;
pub const EXIT_VALIDATION: i32 = 5;
pub const EXIT_NUMERICAL: i32 = 6;

#[derive(Debug)]
pub struct CliError {
    pub kind: ErrorKind,
    pub message: String,
}

impl CliError {
    pub fn validation(message: impl Into<String>) -> Self {
        Self { kind: ErrorKind::Validation, message: message.into() }
    }

    pub fn exit_code(&self) -> i32 {
        match self.kind {
            ErrorKind::Io => EXIT_IO,
            ErrorKind::Format => EXIT_FORMAT,
            ErrorKind::Validation => EXIT_VALIDATION,
            ErrorKind::Numerical => EXIT_NUMERICAL,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self.kind {
            ErrorKind::Io => "io",
            ErrorKind::Format => "format",
            ErrorKind::Validation => "validation",
            ErrorKind::Numerical => "numerical",
        }
    }

    pub fn line(&self) -> String {
        json!({ "error": { "kind": self.kind_name(), "exit_code": self.exit_code(), "message": self.message } })
            .to_string()
    }
}

impl From<dleng::Error> for CliError {
    fn from(e: dleng::Error) -> Self {
        Self { kind: e.kind(), message: e.to_string() }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self { kind: ErrorKind::Io, message: e.to_string() }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self { kind: ErrorKind::Format, message: e.to_string() }
    }
}

impl From<dleng_service::ServiceError> for CliError {
    fn from(e: dleng_service::ServiceError) -> Self {
        match e {
            dleng_service::ServiceError::Engine(inner) => inner.into(),
            other => Self::validation(other.to_string()),
        }
    }
}

pub type CliResult<T = ()> = Result<T, CliError>;

pub struct Table {
    title: String,
    rows: Vec<(String, String)>,
}

impl Table {
    pub fn new(title: impl Into<String>) -> Self {
        Self { title: title.into(), rows: Vec::new() }
    }

    pub fn row(mut self, key: impl Into<String>, value: impl ToString) -> Self {
        self.rows.push((key.into(), value.to_string()));
        self
    }

    pub fn render(&self) -> String {
        let width = self.rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        let mut out = format!("{}\n", self.title);
        for (k, v) in &self.rows {
            out.push_str(&format!("  {k:<width$}  {v}\n"));
        }
        out
    }
}

pub fn emit<T: Serialize>(table: &Table, report: &T, quiet: bool) -> CliResult {
    if !quiet {
        eprint!("{}", table.render());
    }
    let mut stdout = std::io::stdout().lock();
    serde_json::to_writer(&mut stdout, report)?;
    writeln!(stdout)?;
    Ok(())
}

pub fn fmt4(v: f64) -> String {
    format!("{v:.4}")
}
