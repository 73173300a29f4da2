use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::block::USide;
use super::stack::Stack;
use crate::error::{Error, Result};
use crate::numeric::{Linear, Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Divergence {
    pub row: usize,
    pub col: usize,
    pub trial: usize,
    pub stage: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockCheck {
    pub block_index: usize,
    pub rows_checked: usize,
    pub trials: usize,
    pub pass: bool,
    pub first_divergence: Option<Divergence>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeparabilityReport {
    pub seed: u64,
    pub trials: usize,
    pub pass: bool,
    pub blocks: Vec<BlockCheck>,
}

fn stages<S: Scalar>(u: &USide<S>) -> Vec<(&'static str, Tensor<S>)> {
    let mut out = vec![
        ("mixed", u.mixed.clone()),
        ("normed", u.normed.clone()),
        ("reusable_ffn", u.ffn_out.clone()),
    ];
    if let Some(c) = &u.comp {
        out.push(("compensation", Tensor::vector(c.clone())));
    }
    out.push(("output", u.out.clone()));
    out
}

fn locate<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Option<(usize, usize)> {
    let idx = a.first_bit_difference(b)?;
    let w = a.row_len().max(1);
    Some((idx / w, idx % w))
}

/// Fixes the U-token inputs, redraws the G tokens `trials` times and checks
/// that every block's U-side activations keep the same bits.
///
/// Each trial runs the ordinary full forward pass and inspects the U rows
/// it produced; nothing is cached between trials.
pub fn verify_separability<S: Scalar, W: Linear<S>>(
    stack: &Stack<S, W>,
    trials: usize,
    seed: u64,
) -> Result<SeparabilityReport> {
    if trials == 0 {
        return Err(Error::config("separability check needs at least one trial"));
    }
    let part = stack.input_partition();
    let d = stack.cfg.d_model;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u_tokens: Tensor<S> = Tensor::normal(&[part.n, d], 1.0, &mut rng);

    let mut reference: Vec<Vec<(&'static str, Tensor<S>)>> = Vec::new();
    let mut blocks: Vec<BlockCheck> = stack
        .blocks
        .iter()
        .enumerate()
        .map(|(i, b)| BlockCheck {
            block_index: i,
            rows_checked: b.cfg.c_u(),
            trials,
            pass: true,
            first_divergence: None,
        })
        .collect();

    for trial in 0..trials {
        let g_tokens: Tensor<S> = Tensor::normal(&[part.m, d], 1.0, &mut rng);
        let mut x = Tensor::concat_rows(&[&u_tokens, &g_tokens])?;
        for (bi, block) in stack.blocks.iter().enumerate() {
            let u = block.u_side(&x)?;
            let current = stages(&u);
            x = block.forward(&x)?;
            if trial == 0 {
                reference.push(current);
                continue;
            }
            let check = &mut blocks[bi];
            if check.first_divergence.is_some() {
                continue;
            }
            for ((name, want), (_, got)) in reference[bi].iter().zip(&current) {
                if let Some((row, col)) = locate(want, got) {
                    check.pass = false;
                    check.first_divergence = Some(Divergence {
                        row,
                        col,
                        trial,
                        stage: name.to_string(),
                    });
                    break;
                }
            }
        }
    }
    let pass = blocks.iter().all(|b| b.pass);
    Ok(SeparabilityReport {
        seed,
        trials,
        pass,
        blocks,
    })
}
