use serde::{Deserialize, Serialize};

use super::tape::{Tape, Var};

/// Frequency encoding `[x, sin(2^k pi x), cos(2^k pi x)]` for `k = 0..octaves`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PositionalEncoding {
    pub octaves: usize,
    pub include_input: bool,
}

impl PositionalEncoding {
    pub fn new(octaves: usize) -> Self {
        Self {
            octaves,
            include_input: true,
        }
    }

    pub fn output_dim(&self, input_dim: usize) -> usize {
        input_dim * (2 * self.octaves + usize::from(self.include_input))
    }

    pub fn encode(&self, x: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.output_dim(x.len()));
        if self.include_input {
            out.extend_from_slice(x);
        }
        for k in 0..self.octaves {
            let f = (1u64 << k) as f64 * std::f64::consts::PI;
            out.extend(x.iter().map(|v| (f * v).sin()));
            out.extend(x.iter().map(|v| (f * v).cos()));
        }
        out
    }

    /// Row-wise encoding of an `N x d` node.
    pub fn encode_tape(&self, tape: &mut Tape, x: Var) -> Var {
        let mut parts = Vec::with_capacity(2 * self.octaves + 1);
        if self.include_input {
            parts.push(x);
        }
        for k in 0..self.octaves {
            let f = (1u64 << k) as f64 * std::f64::consts::PI;
            let fx = tape.scale(x, f);
            parts.push(tape.sin(fx));
            parts.push(tape.cos(fx));
        }
        if parts.is_empty() {
            // Zero-width encoding: keep the row count.
            return tape.slice_cols(x, 0, 0);
        }
        tape.concat(&parts)
    }
}
