use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use super::CheckpointSummary;
use crate::analysis::residuals;
use crate::engine::Trajectory;
use crate::error::{Error, Result};
use crate::linalg::{dist, norm};
use crate::problems::ProblemSpec;

/// Shortest representation that parses back to the same `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

fn opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

/// One line of `series.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesRow {
    pub k: u64,
    pub v: f64,
    pub mean_xhat_sq: f64,
    pub mean_yhat_sq: f64,
    pub log10_bound: Option<f64>,
}

impl From<&CheckpointSummary> for SeriesRow {
    fn from(c: &CheckpointSummary) -> Self {
        Self {
            k: c.k,
            v: c.v,
            mean_xhat_sq: c.mean_xhat_sq,
            mean_yhat_sq: c.mean_yhat_sq,
            log10_bound: c.log10_bound,
        }
    }
}

/// Ensemble series: `k,V_k,mean_xhat_sq,mean_yhat_sq,log10_bound`.
pub fn series_csv(rows: &[SeriesRow]) -> String {
    let mut s = String::from("k,V_k,mean_xhat_sq,mean_yhat_sq,log10_bound\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.k,
            fmt_f64(r.v),
            fmt_f64(r.mean_xhat_sq),
            fmt_f64(r.mean_yhat_sq),
            opt(r.log10_bound)
        );
    }
    s
}

/// Per-trial checkpoints:
/// `trial,k,norm_x_err,norm_y_err,norm_xhat,norm_yhat,norm_psi,norm_zeta`.
/// Quantities the problem cannot provide are left empty.
pub fn trajectories_csv(spec: &ProblemSpec, ensemble: &[Trajectory]) -> String {
    let mut s = String::from("trial,k,norm_x_err,norm_y_err,norm_xhat,norm_yhat,norm_psi,norm_zeta\n");
    let root = spec.fixed_point().ok();
    for (trial, t) in ensemble.iter().enumerate() {
        for cp in &t.checkpoints {
            let (ex, ey) = match root {
                Some((xs, ys)) => (Some(dist(&cp.x, xs)), Some(dist(&cp.y, ys))),
                None => (None, None),
            };
            let (xh, yh) = match residuals(spec, &cp.x, &cp.y) {
                Ok(r) => (Some(norm(&r.x_hat)), Some(norm(&r.y_hat))),
                Err(_) => (None, None),
            };
            let _ = writeln!(
                s,
                "{trial},{},{},{},{},{},{},{}",
                cp.k,
                opt(ex),
                opt(ey),
                opt(xh),
                opt(yh),
                opt(cp.psi.as_deref().map(norm)),
                opt(cp.zeta.as_deref().map(norm)),
            );
        }
    }
    s
}

pub(crate) fn write_text(dir: &Path, name: &str, text: &str) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(name);
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub(crate) fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(dir, name, &text)
}
