//! Analytic memory and communication accounting.
//!
//! Per-block counts follow the idealized block (attention `n × n` weights,
//! FFN `n × 4n`, single head). Whole-model reports use the actual LLaMA
//! shapes: gated FFN with intermediate width `I` and an untied embedding and
//! head trained with full Adam.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockShape {
    /// Sequence length.
    pub s: u64,
    /// Batch size.
    pub b: u64,
    /// Model width.
    pub n: u64,
    pub r: u64,
}

impl BlockShape {
    pub fn new(s: u64, b: u64, n: u64, r: u64) -> Result<Self> {
        if s == 0 || b == 0 || n == 0 || r == 0 || r > n {
            return Err(Error::Config(format!("invalid block shape s={s} b={b} n={n} r={r}")));
        }
        Ok(Self { s, b, n, r })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Rso,
    Galore,
    Lora,
    Adam,
}

impl Algorithm {
    pub const ALL: [Algorithm; 4] = [Algorithm::Rso, Algorithm::Galore, Algorithm::Lora, Algorithm::Adam];

    pub fn as_str(self) -> &'static str {
        match self {
            Algorithm::Rso => "rso",
            Algorithm::Galore => "galore",
            Algorithm::Lora => "lora",
            Algorithm::Adam => "adam",
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown algorithm `{s}` (rso, galore, lora, adam)")))
    }
}

/// Adam-moment entries per block: `24nr` (rso, galore), `48nr` (lora),
/// `24n²` (adam).
pub fn optimizer_state_entries(alg: Algorithm, shape: &BlockShape) -> u64 {
    let BlockShape { n, r, .. } = *shape;
    match alg {
        Algorithm::Rso | Algorithm::Galore => 24 * n * r,
        Algorithm::Lora => 48 * n * r,
        Algorithm::Adam => 24 * n * n,
    }
}

/// Per-block activation entries split into the attention projections, the
/// attention core, and the FFN.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActivationBreakdown {
    pub qkv: u64,
    pub attention: u64,
    pub ffn: u64,
}

impl ActivationBreakdown {
    pub fn total(&self) -> u64 {
        self.qkv + self.attention + self.ffn
    }
}

/// Stored activation entries for one block over a batch of `b` sequences.
/// rso: `b(8sn + 4sr + 2s²)`; every full-weight method: `b(15sn + 2s²)`.
pub fn activation_entries(alg: Algorithm, shape: &BlockShape) -> (u64, ActivationBreakdown) {
    let BlockShape { s, b, n, r } = *shape;
    let per_seq = match alg {
        Algorithm::Rso => ActivationBreakdown {
            qkv: 3 * s * n + s * r,
            attention: 2 * s * s + 2 * s * r,
            ffn: 5 * s * n + s * r,
        },
        _ => ActivationBreakdown {
            qkv: 4 * s * n,
            attention: 2 * s * s + 2 * s * n,
            ffn: 9 * s * n,
        },
    };
    let scaled = ActivationBreakdown {
        qkv: b * per_seq.qkv,
        attention: b * per_seq.attention,
        ffn: b * per_seq.ffn,
    };
    (scaled.total(), scaled)
}

/// Bytes exchanged per data-parallel gradient sync over the given layers:
/// `Σ r_ℓ n_ℓ` entries for rso, `Σ r_ℓ (m_ℓ + n_ℓ)` for lora, `Σ m_ℓ n_ℓ`
/// otherwise.
pub fn comm_bytes_per_sync(
    alg: Algorithm,
    layers: &[(usize, usize)],
    ranks: &[usize],
    element_bytes: usize,
) -> Result<u64> {
    check_element_bytes(element_bytes)?;
    if ranks.len() != layers.len() {
        return Err(Error::shape("comm_bytes_per_sync", "one rank per layer"));
    }
    let entries: u64 = layers
        .iter()
        .zip(ranks)
        .map(|(&(m, n), &r)| {
            let (m, n, r) = (m as u64, n as u64, r as u64);
            match alg {
                Algorithm::Rso => r * n,
                Algorithm::Lora => r * (m + n),
                Algorithm::Adam | Algorithm::Galore => m * n,
            }
        })
        .sum();
    Ok(entries * element_bytes as u64)
}

fn check_element_bytes(element_bytes: usize) -> Result<()> {
    if element_bytes == 2 || element_bytes == 4 {
        Ok(())
    } else {
        Err(Error::Config(format!("element_bytes must be 2 or 4, got {element_bytes}")))
    }
}

/// Wire encoding of a gradient message: little-endian f32 (4 bytes) or
/// bfloat16 with round-to-nearest-even (2 bytes), tensors concatenated.
pub fn encode_gradients<T: Scalar>(grads: &[Matrix<T>], element_bytes: usize) -> Result<Vec<u8>> {
    check_element_bytes(element_bytes)?;
    let total: usize = grads.iter().map(Matrix::len).sum();
    let mut out = Vec::with_capacity(total * element_bytes);
    for g in grads {
        for &x in g.as_slice() {
            let bits = (x.to_f64_lossy() as f32).to_bits();
            if element_bytes == 4 {
                out.extend_from_slice(&bits.to_le_bytes());
            } else {
                let rounded = bits.wrapping_add(0x7fff + ((bits >> 16) & 1)) >> 16;
                out.extend_from_slice(&(rounded as u16).to_le_bytes());
            }
        }
    }
    Ok(out)
}

/// LLaMA-style model dimensions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Arch {
    pub name: &'static str,
    pub hidden: u64,
    pub intermediate: u64,
    pub heads: u64,
    pub layers: u64,
    pub vocab: u64,
}

pub const ARCHS: [Arch; 5] = [
    Arch { name: "60M", hidden: 512, intermediate: 1376, heads: 8, layers: 8, vocab: 32000 },
    Arch { name: "130M", hidden: 768, intermediate: 2048, heads: 12, layers: 12, vocab: 32000 },
    Arch { name: "350M", hidden: 1024, intermediate: 2736, heads: 16, layers: 24, vocab: 32000 },
    Arch { name: "1B", hidden: 2048, intermediate: 5461, heads: 32, layers: 24, vocab: 32000 },
    Arch { name: "7B", hidden: 4096, intermediate: 11008, heads: 32, layers: 32, vocab: 32000 },
];

pub fn arch(name: &str) -> Result<Arch> {
    ARCHS
        .iter()
        .find(|a| a.name.eq_ignore_ascii_case(name))
        .copied()
        .ok_or_else(|| Error::UnknownArch(name.to_string()))
}

impl Arch {
    /// `(m, n)` of the seven projected matrices in one layer: q, k, v, o,
    /// gate, up, down.
    pub fn layer_matrices(&self) -> [(u64, u64); 7] {
        let (h, i) = (self.hidden, self.intermediate);
        [(h, h), (h, h), (h, h), (h, h), (h, i), (h, i), (i, h)]
    }
}

/// Moment entries (`M` and `V`) for one `m × n` matrix.
fn matrix_state_entries(alg: Algorithm, m: u64, n: u64, rank: u64) -> u64 {
    match alg {
        Algorithm::Adam => 2 * m * n,
        Algorithm::Rso => 2 * rank.min(m) * n,
        Algorithm::Galore => 2 * rank.min(m.min(n)) * m.max(n),
        Algorithm::Lora => 2 * rank * (m + n),
    }
}

/// Sequence length and batch used for the activation figure of a report.
pub const REPORT_SEQ_LEN: u64 = 256;
pub const REPORT_BATCH: u64 = 1;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReportBreakdown {
    pub hidden: u64,
    pub intermediate: u64,
    pub heads: u64,
    pub layers: u64,
    pub vocab: u64,
    pub element_bytes: u64,
    pub comm_element_bytes: u64,
    /// Moment entries of all projected matrices.
    pub block_state_entries: u64,
    /// Moment entries of the embedding and head (full Adam for every method).
    pub embedding_state_entries: u64,
    /// Idealized per-block count (`24nr`, `48nr` or `24n²`) times layers.
    pub idealized_block_state_entries: u64,
    pub optimizer_state_gib: f64,
    pub activation_seq_len: u64,
    pub activation_batch: u64,
    pub activation_entries: u64,
}

/// Whole-model cost summary. Field names are a stable JSON schema.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostReport {
    pub arch: String,
    pub alg: Algorithm,
    pub rank: u64,
    pub optimizer_state_bytes: u64,
    pub activation_bytes: u64,
    pub comm_bytes: u64,
    pub breakdown: ReportBreakdown,
}

pub const GIB: f64 = (1u64 << 30) as f64;

/// Optimizer-state, activation and per-sync communication totals for a named
/// architecture. `element_bytes` applies to states and activations;
/// communication uses `comm_element_bytes`.
pub fn model_memory_report(
    arch_name: &str,
    alg: Algorithm,
    rank: u64,
    element_bytes: usize,
    comm_element_bytes: usize,
) -> Result<CostReport> {
    let a = arch(arch_name)?;
    check_element_bytes(element_bytes)?;
    check_element_bytes(comm_element_bytes)?;
    if rank == 0 && alg != Algorithm::Adam {
        return Err(Error::Config("rank must be positive".into()));
    }
    let block_state_entries: u64 = a.layers
        * a.layer_matrices()
            .iter()
            .map(|&(m, n)| matrix_state_entries(alg, m, n, rank))
            .sum::<u64>();
    let embedding_state_entries = 2 * (2 * a.vocab * a.hidden);
    let state_entries = block_state_entries + embedding_state_entries;
    let idealized = BlockShape {
        s: REPORT_SEQ_LEN,
        b: REPORT_BATCH,
        n: a.hidden,
        r: rank.min(a.hidden),
    };
    let idealized_block_state_entries = a.layers * optimizer_state_entries(alg, &idealized);
    let activation = a.layers * activation_entries(alg, &idealized).0;
    let layers: Vec<(usize, usize)> = (0..a.layers)
        .flat_map(|_| a.layer_matrices())
        .map(|(m, n)| (m as usize, n as usize))
        .collect();
    let ranks: Vec<usize> = layers.iter().map(|&(m, _)| (rank as usize).min(m)).collect();
    let comm_bytes = comm_bytes_per_sync(alg, &layers, &ranks, comm_element_bytes)?;
    let eb = element_bytes as u64;
    Ok(CostReport {
        arch: a.name.to_string(),
        alg,
        rank,
        optimizer_state_bytes: state_entries * eb,
        activation_bytes: activation * eb,
        comm_bytes,
        breakdown: ReportBreakdown {
            hidden: a.hidden,
            intermediate: a.intermediate,
            heads: a.heads,
            layers: a.layers,
            vocab: a.vocab,
            element_bytes: eb,
            comm_element_bytes: comm_element_bytes as u64,
            block_state_entries,
            embedding_state_entries,
            idealized_block_state_entries,
            optimizer_state_gib: (state_entries * eb) as f64 / GIB,
            activation_seq_len: REPORT_SEQ_LEN,
            activation_batch: REPORT_BATCH,
            activation_entries: activation,
        },
    })
}
