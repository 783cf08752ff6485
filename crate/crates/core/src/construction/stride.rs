//! Rebuilding a full univariate copy of a channel from strided filters:
//! each pruned filter only sees one residue class of positions, so `s`
//! of them (per axis) are summed back together.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{convolve, output_dims, pad_low, Filter};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StridePosition {
    /// Flat kernel tap kept by this pruned filter.
    pub tap: usize,
    /// Per-axis residue this filter reads: `o * s + offset`.
    pub offset: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StrideSchedule {
    pub kernel: Vec<usize>,
    pub stride: usize,
    pub input_dims: Vec<usize>,
    pub positions: Vec<StridePosition>,
    /// Pruned filters needed per replicated channel.
    pub width_multiplier: usize,
}

/// One single-entry filter per residue class of the input positions.
pub fn stride_replication(kernel: &[usize], stride: usize, input_dims: &[usize]) -> Result<StrideSchedule> {
    if stride == 0 || kernel.is_empty() || kernel.len() != input_dims.len() {
        return Err(Error::InvalidArgument("stride schedule needs matching kernel and input ranks".into()));
    }
    let mut zero = Vec::with_capacity(kernel.len());
    for (&k, &n) in kernel.iter().zip(input_dims) {
        let z = (k - 1).checked_sub(pad_low(n, k, stride));
        match z {
            Some(z) if z + 1 >= stride => zero.push(z),
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "a {k}-tap window at stride {stride} on extent {n} cannot reach every residue"
                )))
            }
        }
    }
    let rank = kernel.len();
    let count = stride.pow(rank as u32);
    let positions = (0..count)
        .map(|c| {
            let offset: Vec<usize> = if rank == 1 {
                vec![c]
            } else {
                vec![c / stride, c % stride]
            };
            let tap = zero
                .iter()
                .zip(&offset)
                .zip(kernel)
                .fold(0, |acc, ((&z, &off), &k)| acc * k + (z - off));
            StridePosition { tap, offset }
        })
        .collect();
    Ok(StrideSchedule {
        kernel: kernel.to_vec(),
        stride,
        input_dims: input_dims.to_vec(),
        positions,
        width_multiplier: count,
    })
}

impl StrideSchedule {
    /// Convolves `input` with each pruned filter (entry `lambda`) and
    /// scatters the partial outputs back to full resolution. The result is
    /// `lambda * input`.
    pub fn reconstruct(&self, lambda: f64, input: &[f64]) -> Result<Vec<f64>> {
        let dims = &self.input_dims;
        let n: usize = dims.iter().product();
        if input.len() != n {
            return Err(Error::Shape(format!("expected {n} input entries, got {}", input.len())));
        }
        let klen: usize = self.kernel.iter().product();
        let mut out = vec![0.0; n];
        for pos in &self.positions {
            let mut entries = vec![0.0; klen];
            entries[pos.tap] = lambda;
            let f = Filter::new(entries, self.kernel.clone(), self.stride)?;
            let (partial, odims) = convolve(&f, input, dims)?;
            debug_assert_eq!(odims, output_dims(dims, self.stride));
            for (flat, v) in partial.iter().enumerate() {
                let (o0, o1) = if odims.len() == 1 { (flat, 0) } else { (flat / odims[1], flat % odims[1]) };
                let p0 = o0 * self.stride + pos.offset[0];
                if p0 >= dims[0] {
                    continue;
                }
                let target = if dims.len() == 1 {
                    p0
                } else {
                    let p1 = o1 * self.stride + pos.offset[1];
                    if p1 >= dims[1] {
                        continue;
                    }
                    p0 * dims[1] + p1
                };
                out[target] += v;
            }
        }
        Ok(out)
    }
}
