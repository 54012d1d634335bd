//! Config snapshots: `<primary output>.run.json`, written after a successful
//! run, holding the fully resolved command with absolute paths.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::args::Command;
use crate::error::{CliError, CliResult};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub gdr_version: String,
    pub run: Command,
}

/// `path` with `suffix` appended to its file name.
pub fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(suffix);
    path.with_file_name(name)
}

impl Command {
    fn inputs_mut(&mut self) -> Vec<&mut PathBuf> {
        match self {
            Command::GenCorpus(_) | Command::Gradcheck(_) => vec![],
            Command::Train(a) => vec![&mut a.corpus],
            Command::Query(a) => {
                let mut v = vec![&mut a.model, &mut a.corpus];
                v.extend(a.replay_session.as_mut());
                v.extend(a.align.as_mut());
                v
            }
            Command::Eval(a) => {
                let mut v = vec![&mut a.corpus];
                v.extend(a.model.as_mut());
                v.extend(a.align.as_mut());
                v
            }
            Command::Align(a) => vec![&mut a.model, &mut a.corpus],
            Command::Serve(a) => a
                .models
                .iter_mut()
                .chain(a.corpora.iter_mut())
                .map(|n| &mut n.path)
                .collect(),
            Command::Replay(a) => vec![&mut a.snapshot],
        }
    }

    /// The primary output file, if any; other outputs are sidecars of it.
    pub fn output(&self) -> Option<&Path> {
        match self {
            Command::GenCorpus(a) => Some(&a.out),
            Command::Train(a) => Some(&a.out),
            Command::Align(a) => Some(&a.out),
            Command::Query(a) => a.out.as_deref(),
            Command::Eval(a) => a.out.as_deref(),
            Command::Gradcheck(a) => a.out.as_deref(),
            Command::Serve(_) | Command::Replay(_) => None,
        }
    }

    fn output_mut(&mut self) -> Option<&mut PathBuf> {
        match self {
            Command::GenCorpus(a) => Some(&mut a.out),
            Command::Train(a) => Some(&mut a.out),
            Command::Align(a) => Some(&mut a.out),
            Command::Query(a) => a.out.as_mut(),
            Command::Eval(a) => a.out.as_mut(),
            Command::Gradcheck(a) => a.out.as_mut(),
            Command::Serve(_) | Command::Replay(_) => None,
        }
    }

    /// Makes every path absolute so the snapshot replays from any directory.
    /// A missing input is a file error.
    pub fn resolve_paths(&mut self) -> CliResult<()> {
        for p in self.inputs_mut() {
            *p = p.canonicalize().map_err(|e| CliError::file(p, e))?;
        }
        if let Some(out) = self.output_mut() {
            *out = std::path::absolute(&*out).map_err(|e| CliError::file(out, e))?;
        }
        Ok(())
    }

    /// Moves the primary output into `dir`, keeping its file name.
    pub fn rebase_output(&mut self, dir: &Path) -> CliResult<()> {
        if let Some(out) = self.output_mut() {
            let name = out
                .file_name()
                .ok_or_else(|| CliError::Usage(format!("output {} has no file name", out.display())))?
                .to_os_string();
            *out = dir.join(name);
        }
        Ok(())
    }
}

pub fn write_snapshot(cmd: &Command) -> CliResult<Option<PathBuf>> {
    let Some(out) = cmd.output() else {
        return Ok(None);
    };
    let path = sidecar(out, ".run.json");
    let snap = Snapshot {
        gdr_version: VERSION.to_string(),
        run: cmd.clone(),
    };
    let mut text = serde_json::to_string_pretty(&snap).expect("snapshot serializes");
    text.push('\n');
    std::fs::write(&path, text).map_err(|e| CliError::file(&path, e))?;
    Ok(Some(path))
}

pub fn read_snapshot(path: &Path) -> CliResult<Snapshot> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::file(path, e))?;
    let snap: Snapshot = serde_json::from_str(&text).map_err(|e| CliError::file(path, e))?;
    if snap.gdr_version != VERSION {
        eprintln!(
            "warning: snapshot written by gdr {}, replaying with {VERSION}; outputs may differ",
            snap.gdr_version
        );
    }
    if matches!(snap.run, Command::Replay(_)) {
        return Err(CliError::Usage("a replay snapshot cannot itself be replayed".into()));
    }
    Ok(snap)
}
