//! Metrics CSV rows.

use std::fmt::Write as _;

use anyhow::{bail, Context, Result};

pub const HEADER: &str =
    "env_step,interaction_step,train_return,eval_mean,eval_std,curl_loss,curl_acc,critic_loss,actor_loss,alpha,wall_s";

/// One evaluation-cadence row. Absent values are written as empty fields.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MetricsRow {
    pub env_step: u64,
    pub interaction_step: u64,
    pub train_return: Option<f64>,
    pub eval_mean: Option<f64>,
    pub eval_std: Option<f64>,
    pub curl_loss: Option<f64>,
    pub curl_acc: Option<f64>,
    pub critic_loss: Option<f64>,
    pub actor_loss: Option<f64>,
    pub alpha: Option<f64>,
    pub wall_s: f64,
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:.6}"))
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        let _ = write!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{:.3}",
            self.env_step,
            self.interaction_step,
            opt(self.train_return),
            opt(self.eval_mean),
            opt(self.eval_std),
            opt(self.curl_loss),
            opt(self.curl_acc),
            opt(self.critic_loss),
            opt(self.actor_loss),
            opt(self.alpha),
            self.wall_s
        );
        s
    }

    pub fn from_csv(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim_end().split(',').collect();
        if f.len() != 11 {
            bail!("metrics row has {} fields, expected 11: `{line}`", f.len());
        }
        let o = |i: usize| -> Result<Option<f64>> {
            if f[i].is_empty() {
                Ok(None)
            } else {
                Ok(Some(f[i].parse().with_context(|| format!("field {i} of `{line}`"))?))
            }
        };
        Ok(Self {
            env_step: f[0].parse()?,
            interaction_step: f[1].parse()?,
            train_return: o(2)?,
            eval_mean: o(3)?,
            eval_std: o(4)?,
            curl_loss: o(5)?,
            curl_acc: o(6)?,
            critic_loss: o(7)?,
            actor_loss: o(8)?,
            alpha: o(9)?,
            wall_s: f[10].parse()?,
        })
    }
}

pub fn to_csv(rows: &[MetricsRow]) -> String {
    let mut s = String::from(HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.to_csv());
        s.push('\n');
    }
    s
}

pub fn parse_csv(text: &str) -> Result<Vec<MetricsRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim_end() == HEADER => {}
        other => bail!("unexpected metrics header {other:?}"),
    }
    lines.filter(|l| !l.trim().is_empty()).map(MetricsRow::from_csv).collect()
}

/// Running mean of optional per-update scalars.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Mean {
    sum: f64,
    n: u64,
}

impl Mean {
    pub fn push(&mut self, v: Option<f64>) {
        if let Some(x) = v {
            self.sum += x;
            self.n += 1;
        }
    }

    pub fn take(&mut self) -> Option<f64> {
        let out = (self.n > 0).then(|| self.sum / self.n as f64);
        *self = Self::default();
        out
    }

    /// Raw `(sum, count)`, for persisting a partially filled accumulator.
    pub fn parts(&self) -> (f64, u64) {
        (self.sum, self.n)
    }

    pub fn from_parts(sum: f64, n: u64) -> Self {
        Self { sum, n }
    }
}

/// Population mean and standard deviation; `(0, 0)` for an empty slice.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_with_missing_fields() {
        let r = MetricsRow { env_step: 400, interaction_step: 100, eval_mean: Some(1.5), eval_std: Some(0.0), wall_s: 2.0, ..Default::default() };
        let csv = to_csv(&[r]);
        assert!(csv.starts_with(HEADER));
        assert_eq!(parse_csv(&csv).unwrap(), vec![r]);
    }

    #[test]
    fn single_sample_std_is_zero() {
        assert_eq!(mean_std(&[3.0]), (3.0, 0.0));
    }
}
