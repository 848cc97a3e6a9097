//! Line-oriented subprocess protocol used to delegate a stage to an external
//! tool (for instance a neural quality estimator or denoiser).
//!
//! The child receives one absolute path per line on stdin, after which stdin
//! is closed. It answers with `path<TAB>value` lines on stdout, naming every
//! requested path exactly once, and exits with status zero.

use std::collections::{BTreeMap, HashSet};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ExternalError {
    #[error("external command is empty")]
    EmptyCommand,
    #[error("failed to launch '{program}': {source}")]
    Spawn { program: String, source: std::io::Error },
    #[error("external command exited with {status}: {stderr}")]
    Crashed { status: String, stderr: String },
    #[error("external command protocol violation: {0}")]
    Protocol(String),
    #[error("external command timed out after {0:?}")]
    Timeout(Duration),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExternalCommand {
    pub program: String,
    pub args: Vec<String>,
    pub timeout: Duration,
}

impl ExternalCommand {
    /// Splits a command line on whitespace: program followed by arguments.
    pub fn parse(command_line: &str, timeout: Duration) -> Result<Self, ExternalError> {
        let mut parts = command_line.split_whitespace().map(str::to_string);
        let program = parts.next().ok_or(ExternalError::EmptyCommand)?;
        Ok(Self { program, args: parts.collect(), timeout })
    }
}

fn absolute(path: &Path) -> Result<PathBuf, ExternalError> {
    Ok(std::path::absolute(path)?)
}

/// Runs one batch through the child. Keys of the result are the absolute
/// request paths, values the raw text after the tab.
pub fn run_batch(cmd: &ExternalCommand, paths: &[PathBuf]) -> Result<BTreeMap<PathBuf, String>, ExternalError> {
    if paths.is_empty() {
        return Ok(BTreeMap::new());
    }
    let requested: Vec<PathBuf> = paths.iter().map(|p| absolute(p)).collect::<Result<_, _>>()?;
    let mut input = String::new();
    for p in &requested {
        input.push_str(&p.to_string_lossy());
        input.push('\n');
    }

    let mut child = Command::new(&cmd.program)
        .args(&cmd.args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .map_err(|source| ExternalError::Spawn { program: cmd.program.clone(), source })?;

    let mut stdin = child.stdin.take().expect("stdin piped");
    let writer = thread::spawn(move || {
        // A child that exits early closes the pipe; that surfaces via its status.
        let _ = stdin.write_all(input.as_bytes());
    });
    let mut stdout = child.stdout.take().expect("stdout piped");
    let out_reader = thread::spawn(move || {
        let mut s = Vec::new();
        stdout.read_to_end(&mut s).map(|_| s)
    });
    let mut stderr = child.stderr.take().expect("stderr piped");
    let err_reader = thread::spawn(move || {
        let mut s = Vec::new();
        let _ = stderr.read_to_end(&mut s);
        s
    });

    let started = Instant::now();
    let status = loop {
        if let Some(status) = child.try_wait()? {
            break status;
        }
        if started.elapsed() >= cmd.timeout {
            let _ = child.kill();
            let _ = child.wait();
            return Err(ExternalError::Timeout(cmd.timeout));
        }
        thread::sleep(Duration::from_millis(5));
    };
    let _ = writer.join();
    let stdout = out_reader.join().expect("stdout reader panicked")?;
    let stderr = err_reader.join().expect("stderr reader panicked");

    if !status.success() {
        return Err(ExternalError::Crashed {
            status: status.to_string(),
            stderr: String::from_utf8_lossy(&stderr).trim().to_string(),
        });
    }
    let stdout = String::from_utf8(stdout).map_err(|_| ExternalError::Protocol("output is not UTF-8".into()))?;
    parse_response(&stdout, &requested)
}

fn parse_response(stdout: &str, requested: &[PathBuf]) -> Result<BTreeMap<PathBuf, String>, ExternalError> {
    let wanted: HashSet<&Path> = requested.iter().map(PathBuf::as_path).collect();
    let mut out = BTreeMap::new();
    for (i, line) in stdout.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let (path, value) = line
            .split_once('\t')
            .ok_or_else(|| ExternalError::Protocol(format!("line {}: expected 'path<TAB>value'", i + 1)))?;
        let path = PathBuf::from(path);
        if !wanted.contains(path.as_path()) {
            return Err(ExternalError::Protocol(format!("unrequested path {}", path.display())));
        }
        if out.insert(path.clone(), value.trim().to_string()).is_some() {
            return Err(ExternalError::Protocol(format!("duplicate path {}", path.display())));
        }
    }
    if let Some(missing) = requested.iter().find(|p| !out.contains_key(*p)) {
        return Err(ExternalError::Protocol(format!("missing path {}", missing.display())));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_command_line() {
        let c = ExternalCommand::parse("  python3 -m scorer --fast ", Duration::from_secs(1)).unwrap();
        assert_eq!(c.program, "python3");
        assert_eq!(c.args, vec!["-m", "scorer", "--fast"]);
        assert!(matches!(ExternalCommand::parse("   ", Duration::from_secs(1)), Err(ExternalError::EmptyCommand)));
    }

    #[test]
    fn response_validation() {
        let req = vec![PathBuf::from("/a.wav"), PathBuf::from("/b.wav")];
        let ok = parse_response("/b.wav\t4.0\n/a.wav\t3.0\n", &req).unwrap();
        assert_eq!(ok[Path::new("/a.wav")], "3.0");
        let missing = parse_response("/a.wav\t3.0\n", &req).unwrap_err();
        assert!(matches!(missing, ExternalError::Protocol(m) if m.contains("/b.wav")));
        let dup = parse_response("/a.wav\t3\n/a.wav\t3\n/b.wav\t1\n", &req).unwrap_err();
        assert!(matches!(dup, ExternalError::Protocol(m) if m.contains("duplicate")));
        assert!(parse_response("/a.wav 3\n", &req).is_err());
        assert!(parse_response("/c.wav\t3\n", &req).is_err());
    }

    #[test]
    fn empty_batch_skips_spawn() {
        let cmd = ExternalCommand::parse("/nonexistent/program", Duration::from_secs(1)).unwrap();
        assert!(run_batch(&cmd, &[]).unwrap().is_empty());
        assert!(matches!(run_batch(&cmd, &[PathBuf::from("/x")]), Err(ExternalError::Spawn { .. })));
    }
}
