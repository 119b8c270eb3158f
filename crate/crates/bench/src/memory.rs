use rso_core::cost::{model_memory_report, Algorithm, CostReport};
use rso_core::Error;

use crate::outcome::CliError;

/// `model_memory_report` with CLI error mapping: an unknown architecture or
/// algorithm is a usage error.
pub fn memory_report(
    arch: &str,
    alg: &str,
    rank: u64,
    element_bytes: usize,
    comm_element_bytes: usize,
) -> Result<CostReport, CliError> {
    let alg: Algorithm = alg.parse().map_err(|e: Error| CliError::usage(e.to_string()))?;
    model_memory_report(arch, alg, rank, element_bytes, comm_element_bytes).map_err(|e| CliError::usage(e.to_string()))
}
