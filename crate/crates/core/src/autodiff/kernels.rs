//! Elementwise and row kernels shared by the tape and the inference path.
//!
//! `exp` is branch-free so loops over slices vectorise; it agrees with the
//! libm result to within a few ulp on the whole finite range.

const INV_LN2: f64 = std::f64::consts::LOG2_E;
const LN2_HI: f64 = 6.931_471_803_691_238e-1;
const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
/// `1.5 * 2^52`: adding it rounds to an integer held in the low mantissa bits.
const ROUND_MAGIC: f64 = 6_755_399_441_055_744.0;
const EXP_MAX: f64 = 709.0;
const EXP_MIN: f64 = -708.0;
const UNDERFLOW: f64 = -745.2;

#[inline(always)]
pub fn exp(x: f64) -> f64 {
    let xc = x.clamp(EXP_MIN, EXP_MAX);
    let t = xc * INV_LN2 + ROUND_MAGIC;
    let k = t - ROUND_MAGIC;
    let r = (xc - k * LN2_HI) - k * LN2_LO;
    // Taylor series to r^13; |r| <= ln2 / 2 keeps the remainder below 1e-17
    let mut p = 1.0 / 6_227_020_800.0;
    p = p * r + 1.0 / 479_001_600.0;
    p = p * r + 1.0 / 39_916_800.0;
    p = p * r + 1.0 / 3_628_800.0;
    p = p * r + 1.0 / 362_880.0;
    p = p * r + 1.0 / 40_320.0;
    p = p * r + 1.0 / 5_040.0;
    p = p * r + 1.0 / 720.0;
    p = p * r + 1.0 / 120.0;
    p = p * r + 1.0 / 24.0;
    p = p * r + 1.0 / 6.0;
    p = p * r + 0.5;
    p = p * r + 1.0;
    p = p * r + 1.0;
    let ki = (t.to_bits() as i64).wrapping_sub(ROUND_MAGIC.to_bits() as i64);
    let scale = f64::from_bits(((ki + 1023) << 52) as u64);
    let y = p * scale;
    let y = if x > EXP_MAX { f64::INFINITY } else { y };
    let y = if x < UNDERFLOW { 0.0 } else { y };
    if x.is_nan() {
        x
    } else {
        y
    }
}

#[inline(always)]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + exp(-x))
}

pub fn silu_in_place(xs: &mut [f64]) {
    for v in xs {
        *v *= sigmoid(*v);
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Normalise each row of a row-major `[_, cols]` buffer; returns nothing,
/// writes the per-row inverse std into `inv_std` when given.
pub fn layer_norm_rows(data: &mut [f64], cols: usize, mut inv_std: Option<&mut Vec<f64>>) {
    for row in data.chunks_mut(cols) {
        let m = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / cols as f64;
        let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        for v in row.iter_mut() {
            *v = (*v - m) * is;
        }
        if let Some(out) = inv_std.as_deref_mut() {
            out.push(is);
        }
    }
}

pub fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        *o = exp(x - max);
        sum += *o;
    }
    let inv = 1.0 / sum;
    for o in out.iter_mut() {
        *o *= inv;
    }
}

pub fn softmax_rows_in_place(data: &mut [f64], cols: usize) {
    let mut tmp = vec![0.0; cols];
    for row in data.chunks_mut(cols) {
        softmax_row(row, &mut tmp);
        row.copy_from_slice(&tmp);
    }
}

pub fn log_softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|&x| exp(x - max)).sum::<f64>().ln();
    for (o, &x) in out.iter_mut().zip(row) {
        *o = x - lse;
    }
}
