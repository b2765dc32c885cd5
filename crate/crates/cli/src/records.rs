//! Output files of a run.
//!
//! Everything except `timing.json` is a pure function of the resolved
//! config and seed, so two identical runs produce identical bytes.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;

use manlab::detection::{AccuracyRow, DetectionScore, GroundTruth};
use manlab::training::EpochMetrics;

pub const METRICS_FILE: &str = "metrics.csv";
pub const PARTIAL_SUFFIX: &str = ".partial";
pub const SUMMARY_FILE: &str = "summary.json";
pub const TIMING_FILE: &str = "timing.json";
pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.toml";
pub const TARGET_FILE: &str = "target.json";
pub const TRANSITION_FILE: &str = "transition.json";
pub const EVAL_FILE: &str = "eval.csv";
pub const DETECT_FILE: &str = "detect.csv";
pub const TRANSFER_FILE: &str = "transfer.csv";
pub const MASKING_FILE: &str = "masking.json";

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "MANLAB_OUT";

/// Picks and creates the run directory. An explicit `out` must be empty
/// or absent; the default is `$MANLAB_OUT/<command>-<hash12>-seed<seed>`.
pub fn prepare_out_dir(out: Option<&Path>, command: &str, hash: &str, seed: u64) -> Result<PathBuf> {
    let dir = match out {
        Some(p) => p.to_path_buf(),
        None => {
            let root = std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"));
            root.join(format!("{command}-{}-seed{seed}", &hash[..12]))
        }
    };
    if dir.exists() && fs::read_dir(&dir).with_context(|| format!("reading {}", dir.display()))?.next().is_some() {
        bail!("output directory {} is not empty; choose another --out", dir.display());
    }
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

/// Writes via a temporary sibling and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming to {}", path.display()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:?}")).unwrap_or_default()
}

/// Per-epoch metric table, appended to `metrics.csv.partial` while
/// training and renamed to `metrics.csv` by [`MetricsWriter::finish`].
pub struct MetricsWriter {
    partial: PathBuf,
    file: File,
}

impl MetricsWriter {
    pub const HEADER: &'static str = "epoch,loss_T,loss_tar,nat_acc,adv_acc";

    pub fn create(dir: &Path) -> Result<Self> {
        let partial = dir.join(format!("{METRICS_FILE}{PARTIAL_SUFFIX}"));
        let mut file = OpenOptions::new()
            .create_new(true)
            .append(true)
            .open(&partial)
            .with_context(|| format!("creating {}", partial.display()))?;
        writeln!(file, "{}", Self::HEADER)?;
        Ok(MetricsWriter { partial, file })
    }

    pub fn append(&mut self, m: &EpochMetrics) -> Result<()> {
        writeln!(
            self.file,
            "{},{},{:?},{:?},{}",
            m.epoch,
            fmt_opt(m.loss_t),
            m.loss_tar,
            m.nat_acc,
            fmt_opt(m.adv_acc)
        )?;
        self.file.flush()?;
        Ok(())
    }

    pub fn finish(self) -> Result<()> {
        self.file.sync_all()?;
        let done = self.partial.with_extension("");
        fs::rename(&self.partial, &done).with_context(|| format!("finalizing {}", done.display()))
    }
}

pub fn accuracy_table(rows: &[AccuracyRow]) -> String {
    let mut s = String::from("attack,defended,target_only\n");
    for r in rows {
        s.push_str(&format!("{},{:?},{:?}\n", csv_field(&r.attack), r.defended, r.target_only));
    }
    s
}

pub fn detection_table(scores: &[DetectionScore]) -> String {
    let mut s = String::from("id,predicted,p,score,truth\n");
    for d in scores {
        let truth = match d.truth {
            GroundTruth::Natural => "natural",
            GroundTruth::Adversarial => "adversarial",
        };
        s.push_str(&format!("{},{},{:?},{:?},{truth}\n", d.id, d.predicted, d.p, d.score));
    }
    s
}

/// Quotes a CSV field when needed.
pub fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[derive(Debug, Serialize)]
pub struct Timing {
    pub command: String,
    pub seconds: f64,
}
