use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CSV_HEADER: &str = "k,f,grad_sq_norm,eps_cert,inner_steps,comm_bytes,opt_state_entries";

/// One logged iterate. For RSO, `k` is the outer iteration and the inner
/// columns describe the solve that starts from `W^k`; the final row has none.
/// For the baselines `k` is the optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub k: usize,
    pub f: f64,
    pub grad_sq_norm: f64,
    pub eps_cert: Option<f64>,
    pub inner_steps: usize,
    pub comm_bytes: u64,
    pub opt_state_entries: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TraceSummary {
    pub algorithm: String,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub mean_grad_sq_norm: f64,
    pub total_steps: usize,
    pub total_comm_bytes: u64,
    pub opt_state_entries: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunTrace {
    pub algorithm: String,
    pub rows: Vec<TraceRow>,
    /// `|f(W^{k+1}) − (g^k(B̃) − ‖B̃‖²/(2η))|`, relative.
    pub telescoping_residuals: Vec<f64>,
    /// Whether each certified inner solve met its target.
    pub certified: Vec<bool>,
    pub l_hat: Option<f64>,
    pub eta: Option<f64>,
    pub f_star: Option<f64>,
    /// GaLore refreshes that reused the previous basis after an SVD failure.
    pub svd_fallbacks: usize,
}

impl RunTrace {
    pub fn new(algorithm: &str) -> Self {
        Self {
            algorithm: algorithm.to_string(),
            ..Self::default()
        }
    }

    pub fn max_telescoping_residual(&self) -> f64 {
        self.telescoping_residuals.iter().copied().fold(0.0, f64::max)
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &self.rows {
            w.serialize(row).expect("in-memory csv write");
        }
        let bytes = w.into_inner().expect("in-memory csv flush");
        let text = String::from_utf8(bytes).expect("csv output is utf-8");
        if self.rows.is_empty() {
            format!("{CSV_HEADER}\n")
        } else {
            text
        }
    }

    pub fn from_csv(text: &str) -> Result<Vec<TraceRow>> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let header = r.headers().map_err(|e| Error::Config(e.to_string()))?;
        if header.iter().collect::<Vec<_>>().join(",") != CSV_HEADER {
            return Err(Error::Config(format!("unexpected trace header {header:?}")));
        }
        r.deserialize()
            .collect::<std::result::Result<Vec<TraceRow>, _>>()
            .map_err(|e| Error::Config(e.to_string()))
    }

    pub fn summary(&self) -> Option<TraceSummary> {
        let first = self.rows.first()?;
        let last = self.rows.last()?;
        Some(TraceSummary {
            algorithm: self.algorithm.clone(),
            initial_loss: first.f,
            final_loss: last.f,
            mean_grad_sq_norm: self.rows.iter().map(|r| r.grad_sq_norm).sum::<f64>() / self.rows.len() as f64,
            total_steps: self.rows.iter().map(|r| r.inner_steps).sum(),
            total_comm_bytes: self.rows.iter().map(|r| r.comm_bytes).sum(),
            opt_state_entries: last.opt_state_entries,
        })
    }

    /// `(1/K) Σ_{k<K} ‖∇f(W^k)‖²` over the first `K` rows.
    pub fn mean_grad_sq_prefix(&self, k: usize) -> Option<f64> {
        if k == 0 || k > self.rows.len() {
            return None;
        }
        Some(self.rows[..k].iter().map(|r| r.grad_sq_norm).sum::<f64>() / k as f64)
    }
}
