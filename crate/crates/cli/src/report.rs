//! Aggregation of run manifests into a summary table.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::run::{CheckSummary, RunManifest};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryEntry {
    pub run: String,
    pub subcommand: String,
    pub config_hash: String,
    pub exit_code: i32,
    pub pass: bool,
    pub checks: Vec<CheckSummary>,
    /// failed checks, each with the tag of the estimate it witnesses
    pub failed: Vec<CheckSummary>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub runs: Vec<SummaryEntry>,
    pub passed: usize,
    pub failed: usize,
    /// manifest files that could not be parsed
    pub unreadable: Vec<String>,
}

/// Run directories under `root` that carry a manifest, sorted by name.
/// `root` itself counts when it holds a manifest.
pub fn find_manifests(root: &Path) -> std::io::Result<Vec<PathBuf>> {
    let mut found = Vec::new();
    if root.join("manifest.json").is_file() {
        found.push(root.join("manifest.json"));
    }
    if root.is_dir() {
        for entry in fs::read_dir(root)? {
            let p = entry?.path().join("manifest.json");
            if p.is_file() {
                found.push(p);
            }
        }
    }
    found.sort();
    Ok(found)
}

pub fn summarize(root: &Path) -> std::io::Result<Summary> {
    let mut summary = Summary::default();
    for path in find_manifests(root)? {
        let run = path
            .parent()
            .and_then(Path::file_name)
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let parsed = fs::read_to_string(&path)
            .ok()
            .and_then(|t| serde_json::from_str::<RunManifest>(&t).ok());
        let Some(m) = parsed else {
            summary.unreadable.push(path.display().to_string());
            continue;
        };
        if m.pass {
            summary.passed += 1;
        } else {
            summary.failed += 1;
        }
        summary.runs.push(SummaryEntry {
            run,
            subcommand: m.subcommand,
            config_hash: m.config_hash,
            exit_code: m.exit_code,
            pass: m.pass,
            failed: m.checks.iter().filter(|c| !c.pass).cloned().collect(),
            checks: m.checks,
        });
    }
    Ok(summary)
}

/// Plain-text table, one line per run.
pub fn table(summary: &Summary) -> String {
    let mut s = format!("{:<40} {:<10} {:>4} {:>6}  failed\n", "run", "command", "exit", "checks");
    for r in &summary.runs {
        s.push_str(&format!(
            "{:<40} {:<10} {:>4} {:>6}  {}\n",
            r.run,
            r.subcommand,
            r.exit_code,
            r.checks.len(),
            r.failed.iter().map(|c| format!("{} [{}]", c.name, c.tag)).collect::<Vec<_>>().join(", ")
        ));
    }
    s.push_str(&format!(
        "{} run(s): {} passed, {} failed, {} unreadable\n",
        summary.runs.len(),
        summary.passed,
        summary.failed,
        summary.unreadable.len()
    ));
    s
}
