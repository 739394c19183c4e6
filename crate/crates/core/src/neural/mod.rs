//! Differentiable building blocks: LSTM and dense layers, inverted dropout,
//! Adam, the weighted squared-error loss, and a finite-difference gradient
//! checker.

use std::sync::atomic::{AtomicU64, Ordering};

use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;

use crate::error::{Error, Result};

mod adam;
mod dense;
mod dropout;
pub mod gradcheck;
mod loss;
mod lstm;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use dense::{DenseCache, DenseGrads, DenseLayer};
pub use dropout::{Dropout, DropoutMask};
pub use loss::weighted_mse;
pub use lstm::{LstmActivation, LstmCache, LstmGrads, LstmLayer, LstmOutput};
pub use tensor::{gemm, sigmoid, Tensor2};

static LAYER_IDS: AtomicU64 = AtomicU64::new(1);

pub(crate) fn next_layer_id() -> u64 {
    LAYER_IDS.fetch_add(1, Ordering::Relaxed)
}

/// A layer whose parameters live in one flat buffer. Taking the buffer
/// mutably invalidates every cache produced before.
pub trait ParamBlock {
    fn params(&self) -> &[f64];
    fn params_mut(&mut self) -> &mut [f64];
}

/// Base64 of the little-endian bytes of `values`.
pub fn encode_params(values: &[f64]) -> String {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    STANDARD.encode(bytes)
}

pub fn decode_params(blob: &str) -> Result<Vec<f64>> {
    let bytes = STANDARD
        .decode(blob)
        .map_err(|e| Error::Checkpoint(format!("invalid base64 parameter blob: {e}")))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Checkpoint(format!(
            "parameter blob of {} bytes is not a whole number of f64 values",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn param_blob_round_trips_bitwise() {
        let v = vec![0.1, -0.0, f64::MIN_POSITIVE, 1e300, -7.25];
        let back = decode_params(&encode_params(&v)).unwrap();
        assert_eq!(
            v.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            back.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let blob = STANDARD.encode([1u8, 2, 3]);
        assert!(matches!(decode_params(&blob), Err(Error::Checkpoint(_))));
    }
}
