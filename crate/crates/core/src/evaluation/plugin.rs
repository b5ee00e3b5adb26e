//! External feature-distance plugins.
//!
//! A plugin is any program that reads lines of `generated.png<TAB>reference.png`
//! on standard input and writes one scalar per line on standard output, in
//! the same order.

use std::io::Write;
use std::path::PathBuf;
use std::process::{Command, Stdio};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Plugin {
    pub name: String,
    pub program: String,
    pub args: Vec<String>,
}

impl Plugin {
    /// Parses a whitespace-separated command line; the column name is the
    /// program's file stem.
    pub fn parse(command: &str) -> Result<Self> {
        let mut parts = command.split_whitespace().map(str::to_owned);
        let program = parts.next().ok_or_else(|| Error::Config("empty plugin command".into()))?;
        let name = std::path::Path::new(&program)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "plugin".into());
        Ok(Self {
            name,
            program,
            args: parts.collect(),
        })
    }

    pub fn run(&self, pairs: &[(PathBuf, PathBuf)]) -> Result<Vec<f64>> {
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| Error::Plugin(format!("cannot start {}: {e}", self.program)))?;
        let mut input = String::new();
        for (gen, reference) in pairs {
            input.push_str(&format!("{}\t{}\n", gen.display(), reference.display()));
        }
        let mut stdin = child.stdin.take().expect("piped stdin");
        // Feed from a separate thread so a chatty plugin cannot deadlock us.
        let writer = std::thread::spawn(move || stdin.write_all(input.as_bytes()));
        let out = child
            .wait_with_output()
            .map_err(|e| Error::Plugin(format!("{}: {e}", self.program)))?;
        let stderr = String::from_utf8_lossy(&out.stderr).trim().to_string();
        let fed = writer.join().expect("plugin writer thread");
        if !out.status.success() {
            return Err(Error::Plugin(format!("{} exited with {}: {stderr}", self.program, out.status)));
        }
        fed.map_err(|e| Error::Plugin(format!("writing to {}: {e}; stderr: {stderr}", self.program)))?;
        let values = String::from_utf8_lossy(&out.stdout)
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                l.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Plugin(format!("{} printed {l:?}, not a number; stderr: {stderr}", self.program)))
            })
            .collect::<Result<Vec<_>>>()?;
        if values.len() != pairs.len() {
            return Err(Error::Plugin(format!(
                "{} returned {} values for {} pairs; stderr: {stderr}",
                self.program,
                values.len(),
                pairs.len()
            )));
        }
        Ok(values)
    }
}
