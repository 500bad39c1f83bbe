//! Sinusoidal timestep features at geometrically spaced frequencies.

use ndarray::Array1;

use crate::error::{Error, Result};

/// Interleaved sin/cos of `t` scaled by `10000^(-2i/dim)`. `dim` must be even.
pub fn timestep_embedding(t: usize, dim: usize) -> Result<Array1<f64>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::invalid(format!(
            "embedding dim must be even and positive, got {dim}"
        )));
    }
    let mut out = Array1::zeros(dim);
    for i in 0..dim / 2 {
        let freq = 10000f64.powf(-2.0 * i as f64 / dim as f64);
        let arg = t as f64 * freq;
        out[2 * i] = arg.sin();
        out[2 * i + 1] = arg.cos();
    }
    Ok(out)
}
