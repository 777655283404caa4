//! CSV output.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use fmlsim_core::federation::{RoundRecord, RunReport};
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::error::{HarnessError, Result};
use crate::runner::Prepared;

pub const HEADER: &str = "round,entity,model,split,accuracy,loss";

/// Renders one CSV line per record, sorted by `(round, entity, model, split)`.
pub fn render_csv(records: &[RoundRecord]) -> String {
    let mut rows: Vec<&RoundRecord> = records.iter().collect();
    rows.sort_by_key(|r| (r.round, r.entity, r.model, r.split));
    let mut out = String::with_capacity(48 * (rows.len() + 1));
    out.push_str(HEADER);
    out.push('\n');
    for r in rows {
        // `{:.N}` formatting is locale-independent.
        writeln!(
            out,
            "{},{},{},{},{:.4},{:.6}",
            r.round, r.entity, r.model, r.split, r.accuracy, r.loss
        )
        .expect("writing to a String");
    }
    out
}

/// Sidecar path: `results.csv` -> `results.meta.json`.
pub fn meta_path(csv: &Path) -> PathBuf {
    csv.with_extension("meta.json")
}

#[derive(Serialize)]
struct Meta<'a> {
    fmlsim_version: &'a str,
    core_version: &'a str,
    rows: usize,
    config: &'a ExperimentConfig,
}

/// Writes `contents` to a temp file next to `path`, then renames it over.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    }
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = path.with_file_name(format!(".{name}.tmp"));
    let mut file = fs::File::create(&tmp).map_err(|e| HarnessError::io(&tmp, e))?;
    file.write_all(contents)
        .and_then(|_| file.sync_all())
        .map_err(|e| HarnessError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| HarnessError::io(path, e))
}

/// Writes the report CSV to `path` and the resolved config to its sidecar.
pub fn emit_csv(report: &RunReport, config: &ExperimentConfig, path: &Path) -> Result<()> {
    write_atomic(path, render_csv(&report.records).as_bytes())?;
    let meta = Meta {
        fmlsim_version: env!("CARGO_PKG_VERSION"),
        core_version: fmlsim_core::VERSION,
        rows: report.records.len(),
        config,
    };
    let mut json = serde_json::to_string_pretty(&meta)?;
    json.push('\n');
    write_atomic(&meta_path(path), json.as_bytes())
}

/// Per-client class histograms, `client,split,class,count`, zero counts
/// omitted.
pub fn histogram_csv(prepared: &Prepared) -> String {
    let mut out = String::from("client,split,class,count\n");
    for setup in &prepared.setups {
        let pool = &prepared.pools[setup.pool];
        let c = setup.data.client;
        for (split, hist) in [
            ("train", setup.data.train_histogram(&pool.train)),
            ("validate", setup.data.validate_histogram(&pool.test)),
        ] {
            for (class, n) in hist.into_iter().enumerate().filter(|&(_, n)| n > 0) {
                writeln!(out, "{c},{split},{class},{n}").expect("writing to a String");
            }
        }
    }
    out
}
