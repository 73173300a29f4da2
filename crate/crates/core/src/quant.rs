//! Weight-only 8-bit quantization with 16-bit activations (W8A16).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{Linear, ParamRef, Params, Scalar, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum QuantFormat {
    #[default]
    #[serde(rename = "int8")]
    Int8,
    #[serde(rename = "fp8-e4m3")]
    Fp8E4M3,
}

impl QuantFormat {
    /// Largest representable code magnitude.
    pub fn max_value(self) -> f64 {
        match self {
            Self::Int8 => 127.0,
            Self::Fp8E4M3 => 448.0,
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            Self::Int8 => 0,
            Self::Fp8E4M3 => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Self::Int8),
            1 => Some(Self::Fp8E4M3),
            _ => None,
        }
    }
}

/// Symmetric scaling with one scale per stored row.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantScheme {
    pub format: QuantFormat,
}

impl QuantScheme {
    pub fn int8() -> Self {
        Self {
            format: QuantFormat::Int8,
        }
    }

    pub fn fp8() -> Self {
        Self {
            format: QuantFormat::Fp8E4M3,
        }
    }
}

/// Truncates an `f32` to bfloat16 precision (low 16 bits cleared).
pub fn bf16_truncate(v: f32) -> f32 {
    f32::from_bits(v.to_bits() & 0xFFFF_0000)
}

/// Decodes an E4M3 byte (bias 7, no infinities, `S.1111.111` is NaN).
pub fn e4m3_decode(code: u8) -> f32 {
    let sign = if code & 0x80 != 0 { -1.0 } else { 1.0 };
    let e = ((code >> 3) & 0x0F) as i32;
    let m = (code & 0x07) as f32;
    if e == 0x0F && code & 0x07 == 0x07 {
        return f32::NAN;
    }
    let mag = if e == 0 {
        m / 8.0 * 2f32.powi(-6)
    } else {
        (1.0 + m / 8.0) * 2f32.powi(e - 7)
    };
    sign * mag
}

/// Nearest E4M3 code to `v`, ties to the even code; saturates at ±448.
pub fn e4m3_encode(v: f64) -> u8 {
    let sign = if v.is_sign_negative() && v != 0.0 { 0x80 } else { 0 };
    let a = v.abs().min(448.0);
    let mut best = 0u8;
    let mut best_err = f64::INFINITY;
    for code in 0u8..0x7F {
        let err = (e4m3_decode(code) as f64 - a).abs();
        if err < best_err || (err == best_err && code & 1 == 0) {
            best = code;
            best_err = err;
        }
    }
    if best == 0 {
        0
    } else {
        best | sign
    }
}

fn e4m3_table() -> &'static [f32; 256] {
    use std::sync::OnceLock;
    static TABLE: OnceLock<[f32; 256]> = OnceLock::new();
    TABLE.get_or_init(|| std::array::from_fn(|c| e4m3_decode(c as u8)))
}

fn round_half_even(v: f64) -> f64 {
    let r = v.round();
    if (v - v.trunc()).abs() == 0.5 {
        2.0 * (v / 2.0).round()
    } else {
        r
    }
}

/// 8-bit codes with a per-row `f32` scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantizedMatrix {
    rows: usize,
    cols: usize,
    format: QuantFormat,
    codes: Vec<u8>,
    scales: Vec<f32>,
}

impl QuantizedMatrix {
    pub fn from_parts(rows: usize, cols: usize, format: QuantFormat, codes: Vec<u8>, scales: Vec<f32>) -> Result<Self> {
        if codes.len() != rows * cols || scales.len() != rows {
            return Err(Error::shape("quantized matrix", &[codes.len(), scales.len()], &[rows * cols, rows]));
        }
        if format == QuantFormat::Int8 && codes.iter().any(|&c| c as i8 == i8::MIN) {
            return Err(Error::config("int8 code -128 is outside the symmetric range"));
        }
        Ok(Self {
            rows,
            cols,
            format,
            codes,
            scales,
        })
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    pub fn format(&self) -> QuantFormat {
        self.format
    }

    pub fn codes(&self) -> &[u8] {
        &self.codes
    }

    pub fn scales(&self) -> &[f32] {
        &self.scales
    }

    /// Code of entry `(i, j)` as a real number before scaling.
    pub fn code_value(&self, i: usize, j: usize) -> f32 {
        decode(self.format, self.codes[i * self.cols + j])
    }
}

fn decode(format: QuantFormat, code: u8) -> f32 {
    match format {
        QuantFormat::Int8 => code as i8 as f32,
        QuantFormat::Fp8E4M3 => e4m3_table()[code as usize],
    }
}

pub fn quantize<S: Scalar>(w: &Tensor<S>, scheme: QuantScheme) -> Result<QuantizedMatrix> {
    if w.rank() != 2 {
        return Err(Error::shape("quantize", w.shape(), &[0, 0]));
    }
    if !w.is_finite() {
        return Err(Error::NonFinite("quantize: weight matrix".into()));
    }
    let (rows, cols) = (w.shape()[0], w.shape()[1]);
    let qmax = scheme.format.max_value();
    let mut codes = Vec::with_capacity(rows * cols);
    let mut scales = Vec::with_capacity(rows);
    for i in 0..rows {
        let row = w.row(i);
        let max = row.iter().map(|v| v.as_f64().abs()).fold(0.0, f64::max);
        let scale = (max / qmax) as f32;
        scales.push(scale);
        for &v in row {
            let code = if scale == 0.0 {
                0
            } else {
                let q = v.as_f64() / scale as f64;
                match scheme.format {
                    QuantFormat::Int8 => round_half_even(q).clamp(-127.0, 127.0) as i8 as u8,
                    QuantFormat::Fp8E4M3 => e4m3_encode(q),
                }
            };
            codes.push(code);
        }
    }
    Ok(QuantizedMatrix {
        rows,
        cols,
        format: scheme.format,
        codes,
        scales,
    })
}

/// `W′[i][j] = code·scale_i`, evaluated in `S` (exact for `f64`).
pub fn dequantize<S: Scalar>(qw: &QuantizedMatrix) -> Tensor<S> {
    let mut out = Tensor::zeros(&[qw.rows, qw.cols]);
    for i in 0..qw.rows {
        let s = qw.scales[i] as f64;
        for (j, v) in out.row_mut(i).iter_mut().enumerate() {
            *v = S::lit(qw.code_value(i, j) as f64 * s);
        }
    }
    out
}

fn qvecmat(x: &[f32], qw: &QuantizedMatrix, out: &mut [f32]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    for (t, &xt) in x.iter().enumerate() {
        let s = qw.scales[t];
        let row = &qw.codes[t * qw.cols..(t + 1) * qw.cols];
        for (o, &c) in out.iter_mut().zip(row) {
            *o += xt * (decode(qw.format, c) * s);
        }
    }
}

/// `bf16(x)·dequantize(W)` with `f32` accumulation.
pub fn qmatmul(x: &Tensor<f32>, qw: &QuantizedMatrix) -> Result<Tensor<f32>> {
    if x.rank() != 2 || x.shape()[1] != qw.rows {
        return Err(Error::shape("qmatmul", x.shape(), &qw.shape()));
    }
    let mut out = Tensor::zeros(&[x.rows(), qw.cols]);
    for r in 0..x.rows() {
        let xb: Vec<f32> = x.row(r).iter().map(|&v| bf16_truncate(v)).collect();
        qvecmat(&xb, qw, out.row_mut(r));
    }
    Ok(out)
}

impl<S: Scalar> Linear<S> for QuantizedMatrix {
    fn in_dim(&self) -> usize {
        self.rows
    }

    fn out_dim(&self) -> usize {
        self.cols
    }

    fn apply_row(&self, x: &[S]) -> Vec<S> {
        let xb: Vec<f32> = x.iter().map(|v| bf16_truncate(v.as_f32())).collect();
        let mut out = vec![0.0f32; self.cols];
        qvecmat(&xb, self, &mut out);
        out.into_iter().map(|v| S::lit(v as f64)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FootprintReport {
    pub matrices: usize,
    pub weights: usize,
    pub rows: usize,
    pub bytes_16bit: usize,
    pub bytes_w8a16: usize,
    /// `bytes_16bit / bytes_w8a16`; 0 for an empty model.
    pub ratio: f64,
}

/// Byte counts for matrices of the given `(rows, cols)` shapes.
pub fn footprint_of(shapes: &[[usize; 2]]) -> FootprintReport {
    let weights: usize = shapes.iter().map(|s| s[0] * s[1]).sum();
    let rows: usize = shapes.iter().map(|s| s[0]).sum();
    let bytes_16bit = 2 * weights;
    let bytes_w8a16 = weights + 4 * rows;
    FootprintReport {
        matrices: shapes.len(),
        weights,
        rows,
        bytes_16bit,
        bytes_w8a16,
        ratio: if bytes_w8a16 == 0 {
            0.0
        } else {
            bytes_16bit as f64 / bytes_w8a16 as f64
        },
    }
}

/// Shapes of every weight matrix (biases and norms excluded) of a parameter set.
pub fn weight_shapes<S: Scalar, P: Params<S, Tensor<S>>>(params: &P) -> Vec<(String, [usize; 2])> {
    let mut out = Vec::new();
    params.visit("", &mut |name, r| {
        if let ParamRef::Weight(t) = r {
            out.push((name, [t.shape()[0], t.shape()[1]]));
        }
    });
    out
}

pub fn footprint<S: Scalar, P: Params<S, Tensor<S>>>(params: &P) -> FootprintReport {
    let shapes: Vec<[usize; 2]> = weight_shapes(params).into_iter().map(|(_, s)| s).collect();
    footprint_of(&shapes)
}

/// Quantizes every weight matrix of a stack; vectors (biases, norms, readout) stay dense.
pub fn quantize_stack<S: Scalar>(
    stack: &crate::ugsep::Stack<S>,
    scheme: QuantScheme,
) -> Result<crate::ugsep::Stack<S, QuantizedMatrix>> {
    let mut bad = None;
    stack.visit("", &mut |name, r| {
        if let ParamRef::Weight(t) = r {
            if bad.is_none() && !t.is_finite() {
                bad = Some(name);
            }
        }
    });
    if let Some(name) = bad {
        return Err(Error::NonFinite(format!("quantize: {name}")));
    }
    Ok(stack.map_weights(&|w: &Tensor<S>| quantize(w, scheme).expect("finite 2-D weight")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::vecmat;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn representable_row_round_trips() {
        let w = Tensor::from_rows(&[vec![0.0, 127.0, -127.0]]).unwrap();
        let q = quantize(&w, QuantScheme::int8()).unwrap();
        assert_eq!(q.scales(), &[1.0]);
        assert_eq!(q.codes().iter().map(|&c| c as i8).collect::<Vec<_>>(), vec![0, 127, -127]);
        assert!(dequantize::<f64>(&q).bitwise_eq(&w));
    }

    #[test]
    fn zero_matrix() {
        let w = Tensor::<f64>::zeros(&[3, 4]);
        let q = quantize(&w, QuantScheme::int8()).unwrap();
        assert!(q.codes().iter().all(|&c| c == 0));
        assert!(q.scales().iter().all(|&s| s == 0.0));
        assert!(dequantize::<f64>(&q).bitwise_eq(&w));
    }

    #[test]
    fn non_finite_rejected() {
        let w = Tensor::from_rows(&[vec![1.0, f64::NAN]]).unwrap();
        assert!(matches!(quantize(&w, QuantScheme::int8()), Err(Error::NonFinite(_))));
    }

    #[test]
    fn ties_round_to_even() {
        assert_eq!(round_half_even(2.5), 2.0);
        assert_eq!(round_half_even(3.5), 4.0);
        assert_eq!(round_half_even(-2.5), -2.0);
        assert_eq!(round_half_even(2.4), 2.0);
        // scale 1: 0.5 -> 0, 1.5 -> 2
        let w = Tensor::from_rows(&[vec![127.0, 0.5, 1.5, -126.5]]).unwrap();
        let q = quantize(&w, QuantScheme::int8()).unwrap();
        assert_eq!(q.codes().iter().map(|&c| c as i8).collect::<Vec<_>>(), vec![127, 0, 2, -126]);
    }

    #[test]
    fn random_round_trip_bound_int8() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = Tensor::<f64>::normal(&[8, 16], 1.0, &mut rng);
        let q = quantize(&w, QuantScheme::int8()).unwrap();
        let back = dequantize::<f64>(&q);
        for i in 0..8 {
            let s = q.scales()[i] as f64;
            let max = w.row(i).iter().fold(0.0f64, |a, v| a.max(v.abs()));
            for j in 0..16 {
                let err = (w.at(i, j) - back.at(i, j)).abs();
                assert!(err <= s / 2.0);
                assert!(err <= max / 254.0 + 1e-12);
            }
        }
    }

    #[test]
    fn idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for scheme in [QuantScheme::int8(), QuantScheme::fp8()] {
            let w = Tensor::<f64>::normal(&[5, 7], 2.0, &mut rng);
            let q1 = quantize(&w, scheme).unwrap();
            let q2 = quantize(&dequantize::<f64>(&q1), scheme).unwrap();
            assert_eq!(q1, q2);
        }
    }

    #[test]
    fn e4m3_codes() {
        assert_eq!(e4m3_decode(0x7E), 448.0);
        assert_eq!(e4m3_decode(0x01), 2f32.powi(-9));
        assert_eq!(e4m3_decode(0x38), 1.0);
        assert!(e4m3_decode(0x7F).is_nan());
        assert_eq!(e4m3_encode(1.0), 0x38);
        assert_eq!(e4m3_encode(-1.0), 0xB8);
        assert_eq!(e4m3_encode(1000.0), 0x7E);
        // 1.0625 lies halfway between 1.0 (0x38) and 1.125 (0x39).
        assert_eq!(e4m3_encode(1.0625), 0x38);
        assert_eq!(e4m3_encode(1.1875), 0x3A);
        for code in 0u8..0x7F {
            assert_eq!(e4m3_encode(e4m3_decode(code) as f64), code);
        }
    }

    #[test]
    fn fp8_codes_decode_to_representable_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = Tensor::<f64>::normal(&[4, 9], 1.0, &mut rng);
        let q = quantize(&w, QuantScheme::fp8()).unwrap();
        for i in 0..4 {
            let s = q.scales()[i] as f64;
            for j in 0..9 {
                let c = q.code_value(i, j);
                assert!(c.is_finite() && c.abs() <= 448.0);
                // Nearest representable value: no other code is closer.
                let target = w.at(i, j) / s;
                let err = (c as f64 - target).abs();
                for other in 0u8..0x7F {
                    let v = e4m3_decode(other) as f64 * target.signum();
                    assert!(err <= (v - target).abs() + 1e-12);
                }
            }
        }
    }

    #[test]
    fn bf16_truncation() {
        assert_eq!(bf16_truncate(1.0), 1.0);
        let v = f32::from_bits(0x3F80_FFFF);
        assert_eq!(bf16_truncate(v).to_bits(), 0x3F80_0000);
        assert_eq!(bf16_truncate(-v).to_bits(), 0xBF80_0000);
    }

    #[test]
    fn qmatmul_identity_and_definition() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Tensor::<f32>::normal(&[3, 4], 1.0, &mut rng);
        let mut eye = Tensor::<f32>::zeros(&[4, 4]);
        for i in 0..4 {
            eye.data_mut()[i * 5] = 127.0;
        }
        let q = quantize(&eye, QuantScheme::int8()).unwrap();
        let out = qmatmul(&x, &q).unwrap();
        assert!(out.bitwise_eq(&x.map(bf16_truncate).map(|v| v * 127.0)));

        let w = Tensor::<f32>::normal(&[4, 5], 1.0, &mut rng);
        let q = quantize(&w, QuantScheme::int8()).unwrap();
        let xb = x.map(bf16_truncate);
        let deq = dequantize::<f32>(&q);
        let out = qmatmul(&x, &q).unwrap();
        for r in 0..3 {
            assert_eq!(out.row(r), &vecmat(xb.row(r), &deq)[..]);
        }
        let lin: Vec<f32> = Linear::<f32>::apply_row(&q, x.row(1));
        assert_eq!(&lin[..], out.row(1));
        assert!(qmatmul(&w, &q).is_err());
    }

    #[test]
    fn footprint_arithmetic() {
        let r = footprint_of(&[[1280, 2560]]);
        assert_eq!(r.bytes_16bit, 6_553_600);
        assert_eq!(r.bytes_w8a16, 3_276_800 + 5_120);
        assert!((r.ratio - 1.9968).abs() < 1e-4);
        let empty = footprint_of(&[]);
        assert_eq!((empty.bytes_16bit, empty.bytes_w8a16), (0, 0));
    }

    proptest! {
        #[test]
        fn round_trip_bound(seed in any::<u64>(), r in 1usize..9, c in 1usize..17, mag in 1e-3f64..1e3) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w = Tensor::<f64>::normal(&[r, c], mag, &mut rng);
            let q = quantize(&w, QuantScheme::int8()).unwrap();
            let back = dequantize::<f64>(&q);
            for i in 0..r {
                let s = q.scales()[i] as f64;
                for j in 0..c {
                    prop_assert!((w.at(i, j) - back.at(i, j)).abs() <= s / 2.0);
                }
            }
        }
    }
}
