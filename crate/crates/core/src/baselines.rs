//! Simplified comparator primitives: magnitude top-k sparsification and
//! per-tensor uniform quantization.
//!
//! These stand in for the selective-masking and quantized-averaging families
//! of federated baselines. Both transmit element-wise — index+value pairs for
//! top-k, a dense code stream for quantization — and neither compresses the
//! downstream direction.

use crate::{Error, Result};

/// Keep the `ceil(k_fraction · N)` largest-magnitude entries, zero the rest.
/// Ties are broken toward the lower index. Kept values are returned bit-exact.
pub fn topk_mask(delta: &[f64], k_fraction: f64) -> Result<Vec<f64>> {
    if delta.is_empty() {
        return Err(Error::Domain("topk_mask needs a nonempty array".into()));
    }
    if !(k_fraction > 0.0 && k_fraction <= 1.0) {
        return Err(Error::Domain(format!(
            "k_fraction must lie in (0, 1], got {k_fraction}"
        )));
    }
    let n = delta.len();
    let keep = ((k_fraction * n as f64).ceil() as usize).clamp(1, n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        delta[j]
            .abs()
            .partial_cmp(&delta[i].abs())
            .expect("finite magnitudes")
            .then(i.cmp(&j))
    });
    let mut out = vec![0.0; n];
    for &i in order.iter().take(keep) {
        out[i] = delta[i];
    }
    Ok(out)
}

/// Number of entries [`topk_mask`] keeps for a given length and fraction.
pub fn topk_keep_count(n: usize, k_fraction: f64) -> usize {
    ((k_fraction * n as f64).ceil() as usize).clamp(1, n)
}

/// Per-tensor min/max uniform quantization with 2^bits levels and exact
/// endpoint reproduction. A degenerate range (min = max) reproduces every
/// value exactly.
pub fn uniform_quantize(values: &[f64], bits: u32) -> Result<Vec<f64>> {
    if bits == 0 || bits > 32 {
        return Err(Error::Domain(format!("bits must lie in [1, 32], got {bits}")));
    }
    if values.is_empty() {
        return Ok(Vec::new());
    }
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(lo.is_finite() && hi.is_finite()) {
        return Err(Error::Domain("quantization needs finite values".into()));
    }
    if hi <= lo {
        return Ok(values.to_vec());
    }
    let levels = (1u64 << bits) as f64;
    let steps = levels - 1.0;
    Ok(values
        .iter()
        .map(|&v| {
            let code = ((v - lo) / (hi - lo) * steps).round().clamp(0.0, steps);
            lo + code * (hi - lo) / steps
        })
        .collect())
}
