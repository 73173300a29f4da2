use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Token partition of one block: `n` U-tokens then `m` G-tokens at the input,
/// `c_u` U-rows then `c_g` G-rows after mixup.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct UGPartition {
    pub n: usize,
    pub m: usize,
    pub c_u: usize,
    pub c_g: usize,
}

impl UGPartition {
    pub fn new(n: usize, m: usize, c_u: usize, c_g: usize) -> Result<Self> {
        let p = Self { n, m, c_u, c_g };
        p.validate()?;
        Ok(p)
    }

    /// Output split proportional to the input split, rounded to the nearest
    /// integer and kept inside `[0, heads - 1]`.
    pub fn proportional(n: usize, m: usize, heads: usize) -> Result<Self> {
        if heads == 0 || n + m == 0 {
            return Err(Error::config("empty partition"));
        }
        let c_u = ((heads * n) as f64 / (n + m) as f64).round() as usize;
        let c_u = c_u.min(heads - 1);
        Self::new(n, m, c_u, heads - c_u)
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(Error::config("partition needs at least one G input token (m >= 1)"));
        }
        if self.c_g == 0 {
            return Err(Error::config("partition needs at least one G row (c_g >= 1)"));
        }
        Ok(())
    }

    pub fn tokens(&self) -> usize {
        self.n + self.m
    }

    pub fn heads(&self) -> usize {
        self.c_u + self.c_g
    }

    /// Input and output splits coincide, so a direct residual keeps U rows clean.
    pub fn allows_plain_residual(&self) -> bool {
        self.n == self.c_u && self.m == self.c_g
    }
}

/// Binary `H×(T·D′)` mask: zero exactly where a U row would read a G token's slice.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UGMask {
    heads: usize,
    cols: usize,
    bits: Vec<u8>,
}

/// Builds the mask for `part` with head width `head_dim`.
///
/// Entry `(i, j)` is zero iff `i < c_u` and `j >= n·D′`, for `j` in `[0, T·D′)`.
pub fn build_ug_mask(part: &UGPartition, head_dim: usize, tokens: usize) -> Result<UGMask> {
    part.validate()?;
    if part.tokens() != tokens {
        return Err(Error::config(format!(
            "partition covers {} tokens, block has {tokens}",
            part.tokens()
        )));
    }
    if head_dim == 0 {
        return Err(Error::config("head dimension must be positive"));
    }
    let heads = part.heads();
    let cols = tokens * head_dim;
    let boundary = part.n * head_dim;
    let bits = (0..heads)
        .flat_map(|i| (0..cols).map(move |j| u8::from(!(i < part.c_u && j >= boundary))))
        .collect();
    Ok(UGMask { heads, cols, bits })
}

impl UGMask {
    pub fn all_ones(heads: usize, cols: usize) -> Self {
        Self {
            heads,
            cols,
            bits: vec![1; heads * cols],
        }
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.cols + j] != 0
    }

    pub fn row(&self, i: usize) -> &[u8] {
        &self.bits[i * self.cols..(i + 1) * self.cols]
    }

    pub fn zero_count(&self) -> usize {
        self.bits.iter().filter(|&&b| b == 0).count()
    }

    pub fn is_all_ones(&self) -> bool {
        self.bits.iter().all(|&b| b == 1)
    }

    /// Fault injection: turns the first zero entry into a one. Returns its
    /// `(row, col)`, or `None` when the mask has no zeros.
    pub fn flip_first_zero(&mut self) -> Option<(usize, usize)> {
        let idx = self.bits.iter().position(|&b| b == 0)?;
        self.bits[idx] = 1;
        Some((idx / self.cols, idx % self.cols))
    }
}
