//! Output destinations and the manifest line heading every file.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, ValueEnum};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const MANIFEST_PREFIX: &str = "# riskmon v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Jsonl,
}

impl Format {
    pub fn extension(self) -> &'static str {
        match self {
            Format::Csv => "csv",
            Format::Jsonl => "jsonl",
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct OutputArgs {
    /// Output file (`-` for stdout). Relative paths resolve against the output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Default output directory; files are named after the subcommand.
    #[arg(long, env = "RISKMON_OUT_DIR")]
    pub out_dir: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
}

impl OutputArgs {
    /// Resolved destination, `None` meaning stdout.
    pub fn destination(&self, command: &str) -> Option<PathBuf> {
        match (&self.out, &self.out_dir) {
            (Some(p), _) if p == Path::new("-") => None,
            (Some(p), Some(dir)) if p.is_relative() => Some(dir.join(p)),
            (Some(p), _) => Some(p.clone()),
            (None, Some(dir)) => Some(dir.join(format!("{command}.{}", self.format.extension()))),
            (None, None) => None,
        }
    }

    /// Opens the destination and writes the manifest line.
    pub fn open(&self, command: &str, config: &impl Serialize, seed: Option<u64>) -> Result<Sink> {
        let inner: Box<dyn Write> = match self.destination(command) {
            None => Box::new(io::stdout().lock()),
            Some(path) => {
                if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                    std::fs::create_dir_all(dir)
                        .with_context(|| format!("creating {}", dir.display()))?;
                }
                Box::new(
                    File::create(&path).with_context(|| format!("creating {}", path.display()))?,
                )
            }
        };
        let mut sink = Sink {
            out: BufWriter::new(inner),
            format: self.format,
        };
        writeln!(sink.out, "{}", manifest_line(command, config, seed)?)?;
        Ok(sink)
    }
}

/// SHA-256 over the command name and its JSON-encoded configuration.
pub fn config_hash(command: &str, config: &impl Serialize) -> Result<String> {
    let doc = serde_json::to_string(&serde_json::json!({ "command": command, "config": config }))?;
    Ok(hex::encode(Sha256::digest(doc.as_bytes())))
}

pub fn manifest_line(command: &str, config: &impl Serialize, seed: Option<u64>) -> Result<String> {
    let seed = seed.map_or_else(|| "none".to_string(), |s| s.to_string());
    Ok(format!(
        "{MANIFEST_PREFIX} config_hash={} seed={seed}",
        config_hash(command, config)?
    ))
}

pub struct Sink {
    out: BufWriter<Box<dyn Write>>,
    pub format: Format,
}

impl Sink {
    pub fn header(&mut self, csv_header: &str) -> Result<()> {
        if self.format == Format::Csv {
            writeln!(self.out, "{csv_header}")?;
        }
        Ok(())
    }

    /// Writes the CSV row or the JSON encoding of `value`, whichever the format asks for.
    pub fn row(&mut self, csv: impl FnOnce() -> String, value: &impl Serialize) -> Result<()> {
        match self.format {
            Format::Csv => writeln!(self.out, "{}", csv())?,
            Format::Jsonl => writeln!(self.out, "{}", serde_json::to_string(value)?)?,
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn destination_rules() {
        let o = |out: Option<&str>, dir: Option<&str>| OutputArgs {
            out: out.map(PathBuf::from),
            out_dir: dir.map(PathBuf::from),
            format: Format::Jsonl,
        };
        assert_eq!(o(None, None).destination("x"), None);
        assert_eq!(o(Some("-"), Some("/d")).destination("x"), None);
        assert_eq!(
            o(None, Some("/d")).destination("sim"),
            Some(PathBuf::from("/d/sim.jsonl"))
        );
        assert_eq!(
            o(Some("a.csv"), Some("/d")).destination("x"),
            Some(PathBuf::from("/d/a.csv"))
        );
        assert_eq!(
            o(Some("/abs.csv"), Some("/d")).destination("x"),
            Some(PathBuf::from("/abs.csv"))
        );
    }

    #[test]
    fn hash_depends_on_config_only() {
        let a = config_hash("simulate", &serde_json::json!({"reps": 3})).unwrap();
        assert_eq!(a.len(), 64);
        assert_eq!(
            a,
            config_hash("simulate", &serde_json::json!({"reps": 3})).unwrap()
        );
        assert_ne!(
            a,
            config_hash("simulate", &serde_json::json!({"reps": 4})).unwrap()
        );
        assert_ne!(
            a,
            config_hash("baseline", &serde_json::json!({"reps": 3})).unwrap()
        );
        let line = manifest_line("simulate", &1, Some(9)).unwrap();
        assert!(line.starts_with("# riskmon v1 config_hash=") && line.ends_with(" seed=9"));
    }
}
