//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Every export takes plain numbers and returns a JSON string.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use ugsep_core::serving::flops_count;
use ugsep_core::ugattn::{attention_weights, AttentionParams, AttnUGMask, MaskMode};
use ugsep_core::ugsep::{build_ug_mask, StackConfig, UGPartition};
use ugsep_core::{Result, Tensor};
use wasm_bindgen::prelude::*;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MaskView {
    pub heads: usize,
    pub cols: usize,
    pub head_dim: usize,
    /// Column where G-token slices begin.
    pub boundary: usize,
    pub zeros: usize,
    pub rows: Vec<Vec<u8>>,
}

/// Mixup-space UG mask for `n` U tokens, `m` G tokens and `c_u`/`c_g` output rows.
pub fn mask_view(n: usize, m: usize, c_u: usize, c_g: usize, d_model: usize) -> Result<MaskView> {
    let part = UGPartition::new(n, m, c_u, c_g)?;
    let heads = part.heads();
    if heads == 0 || !d_model.is_multiple_of(heads) {
        return Err(ugsep_core::Error::Config(format!("{heads} heads must divide d_model {d_model}")));
    }
    let head_dim = d_model / heads;
    let mask = build_ug_mask(&part, head_dim, n + m)?;
    Ok(MaskView {
        heads,
        cols: mask.cols(),
        head_dim,
        boundary: n * head_dim,
        zeros: mask.zero_count(),
        rows: (0..heads).map(|i| mask.row(i).to_vec()).collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CurvePoint {
    pub c_u: usize,
    pub c_g: usize,
    pub f_u: u64,
    pub f_g: u64,
    pub cached_over_naive: f64,
    pub reusable_ffn_fraction: f64,
}

/// Cached/naive FLOPs for every split of `tokens` rows, with `users` users of
/// `per_user` candidates each. Inputs are split evenly into U and G tokens.
pub fn reuse_curve(
    tokens: usize,
    d_model: usize,
    d_hidden: usize,
    layers: usize,
    users: usize,
    per_user: usize,
) -> Result<Vec<CurvePoint>> {
    if tokens < 2 || users == 0 || per_user == 0 {
        return Err(ugsep_core::Error::Config("need at least 2 tokens, 1 user and 1 candidate".into()));
    }
    let n = tokens / 2;
    let sizes = vec![per_user; users];
    (0..tokens)
        .map(|c_u| {
            let cfg = StackConfig::ugsep(n, tokens - n, c_u, tokens - c_u, layers, d_model, d_hidden)?;
            let l = flops_count(&cfg, &sizes)?;
            Ok(CurvePoint {
                c_u,
                c_g: tokens - c_u,
                f_u: l.f_u,
                f_g: l.f_g,
                cached_over_naive: l.cached_over_naive,
                reusable_ffn_fraction: l.reusable_ffn_fraction,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AttentionView {
    pub tokens: usize,
    pub u_tokens: usize,
    pub mode: MaskMode,
    pub weights: Vec<Vec<f64>>,
    pub row_sums: Vec<f64>,
}

/// Effective attention weights for random tokens and projections drawn from `seed`.
pub fn attention_view(n: usize, m: usize, d_model: usize, seed: u64, additive: bool) -> Result<AttentionView> {
    let t = n + m;
    let mask = AttnUGMask::new(t, n)?;
    if d_model == 0 {
        return Err(ugsep_core::Error::Config("d_model must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = AttentionParams::<f64>::init(d_model, d_model, &mut rng);
    let x = Tensor::normal(&[t, d_model], 1.0, &mut rng);
    let mode = if additive { MaskMode::Additive } else { MaskMode::Multiplicative };
    let w = attention_weights(&x, &params, &mask, mode)?;
    let weights: Vec<Vec<f64>> = (0..t).map(|i| w.row(i).to_vec()).collect();
    Ok(AttentionView {
        tokens: t,
        u_tokens: n,
        mode,
        row_sums: weights.iter().map(|r| r.iter().sum()).collect(),
        weights,
    })
}

fn to_js<T: Serialize>(r: Result<T>) -> std::result::Result<String, JsError> {
    r.map(|v| serde_json::to_string(&v).expect("view serialises"))
        .map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen(js_name = maskView)]
pub fn mask_view_js(n: usize, m: usize, c_u: usize, c_g: usize, d_model: usize) -> std::result::Result<String, JsError> {
    to_js(mask_view(n, m, c_u, c_g, d_model))
}

#[wasm_bindgen(js_name = reuseCurve)]
pub fn reuse_curve_js(
    tokens: usize,
    d_model: usize,
    d_hidden: usize,
    layers: usize,
    users: usize,
    per_user: usize,
) -> std::result::Result<String, JsError> {
    to_js(reuse_curve(tokens, d_model, d_hidden, layers, users, per_user))
}

#[wasm_bindgen(js_name = attentionView)]
pub fn attention_view_js(n: usize, m: usize, d_model: usize, seed: u32, additive: bool) -> std::result::Result<String, JsError> {
    to_js(attention_view(n, m, d_model, seed as u64, additive))
}
