//! Shared numerical helpers: packed-state RK4, seed mixing, log-log slope fits.

use crate::algebra::{Complex, Mat2C};

/// One classical RK4 step over a packed complex state.
///
/// `f(θ, y)` returns the time derivative at the fractional step position `θ ∈ {0, ½, 1}`.
pub fn rk4_step<E>(
    y: &[Complex],
    dt: f64,
    mut f: impl FnMut(f64, &[Complex]) -> Result<Vec<Complex>, E>,
) -> Result<Vec<Complex>, E> {
    let k1 = f(0.0, y)?;
    let y2: Vec<Complex> = y.iter().zip(&k1).map(|(a, k)| a + k * (0.5 * dt)).collect();
    let k2 = f(0.5, &y2)?;
    let y3: Vec<Complex> = y.iter().zip(&k2).map(|(a, k)| a + k * (0.5 * dt)).collect();
    let k3 = f(0.5, &y3)?;
    let y4: Vec<Complex> = y.iter().zip(&k3).map(|(a, k)| a + k * dt).collect();
    let k4 = f(1.0, &y4)?;
    Ok((0..y.len())
        .map(|i| y[i] + (k1[i] + (k2[i] + k3[i]) * 2.0 + k4[i]) * (dt / 6.0))
        .collect())
}

pub fn push_mat(buf: &mut Vec<Complex>, m: &Mat2C) {
    buf.extend_from_slice(&m.entries());
}

pub fn read_mat(buf: &[Complex], at: usize) -> Mat2C {
    Mat2C::new(buf[at], buf[at + 1], buf[at + 2], buf[at + 3])
}

/// SplitMix64 finalizer.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Order-sensitive hash of a key tuple.
pub fn mix_key(parts: &[u64]) -> u64 {
    parts.iter().fold(0x6A09_E667_F3BC_C908, |h, &p| splitmix64(h ^ splitmix64(p)))
}

/// Least-squares slope of `log y` against `log x`; `None` when fewer than two usable points.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = x
        .iter()
        .zip(y)
        .filter(|(a, b)| **a > 0.0 && **b > 0.0 && a.is_finite() && b.is_finite())
        .map(|(a, b)| (a.ln(), b.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx == 0.0 {
        return None;
    }
    Some(sxy / sxx)
}
