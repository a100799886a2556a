//! Plain-text plot data: one whitespace-separated `.dat` file per series.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

use crate::metrics::{parse_csv, MetricsRow};

type Column = (&'static str, fn(&MetricsRow) -> Option<f64>);

const COLUMNS: [Column; 8] = [
    ("eval_mean", |r| r.eval_mean),
    ("eval_std", |r| r.eval_std),
    ("train_return", |r| r.train_return),
    ("curl_loss", |r| r.curl_loss),
    ("curl_acc", |r| r.curl_acc),
    ("critic_loss", |r| r.critic_loss),
    ("actor_loss", |r| r.actor_loss),
    ("alpha", |r| r.alpha),
];

/// `env_step value` lines for every metric present in `rows`.
pub fn series(rows: &[MetricsRow]) -> Vec<(&'static str, String)> {
    let mut out = Vec::new();
    for (name, get) in COLUMNS {
        let mut s = format!("# env_step {name}\n");
        let mut any = false;
        for r in rows {
            if let Some(v) = get(r) {
                s.push_str(&format!("{} {v:.6}\n", r.env_step));
                any = true;
            }
        }
        if any {
            out.push((name, s));
        }
    }
    out
}

/// Exports each metrics CSV in `inputs` to `<out>/<stem>.<metric>.dat`.
pub fn export(inputs: &[PathBuf], out: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out)?;
    let mut written = Vec::new();
    for input in inputs {
        let text = fs::read_to_string(input).with_context(|| format!("reading {}", input.display()))?;
        let rows = parse_csv(&text).with_context(|| format!("parsing {}", input.display()))?;
        let stem = input.file_stem().and_then(|s| s.to_str()).unwrap_or("metrics");
        for (name, body) in series(&rows) {
            let path = out.join(format!("{stem}.{name}.dat"));
            fs::write(&path, body)?;
            written.push(path);
        }
    }
    Ok(written)
}
