//! Image-fidelity metrics: PSNR, SSIM and Dice.

use std::io::Write;

use crate::error::{Error, Result};
use crate::image::Image;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn check_dims(x: &Image, reference: &Image) -> Result<()> {
    x.check_same_grid(reference)?;
    if x.data.len() != reference.data.len() {
        return Err(Error::DimensionMismatch("image buffers differ in length".into()));
    }
    Ok(())
}

/// `10 log10(peak^2 / MSE)` with `peak` the range of `reference`;
/// `+inf` when the images agree exactly.
pub fn psnr(x: &Image, reference: &Image) -> Result<f64> {
    check_dims(x, reference)?;
    let (lo, hi) = reference.min_max();
    let peak = hi - lo;
    if !(peak > 0.0) {
        return Err(Error::ConstantReference);
    }
    let mse = x
        .data
        .iter()
        .zip(&reference.data)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / x.data.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable weighted sum over every fully contained window position.
fn filter_valid(data: &[f64], side: usize, w: &[f64]) -> Vec<f64> {
    let k = w.len();
    let out_side = side + 1 - k;
    let mut rows = vec![0.0; side * out_side];
    for r in 0..side {
        for c in 0..out_side {
            rows[r * out_side + c] = (0..k).map(|i| w[i] * data[r * side + c + i]).sum();
        }
    }
    let mut out = vec![0.0; out_side * out_side];
    for r in 0..out_side {
        for c in 0..out_side {
            out[r * out_side + c] = (0..k).map(|i| w[i] * rows[(r + i) * out_side + c]).sum();
        }
    }
    out
}

/// Mean local SSIM with an 11x11 Gaussian window (sigma 1.5) over all
/// window positions inside the image; dynamic range from `reference`.
pub fn ssim(x: &Image, reference: &Image) -> Result<f64> {
    check_dims(x, reference)?;
    let side = x.side();
    if side < SSIM_WINDOW {
        return Err(Error::DimensionMismatch(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, image is {side}x{side}"
        )));
    }
    if x.data == reference.data {
        return Ok(1.0);
    }
    let (lo, hi) = reference.min_max();
    let range = hi - lo;
    let c1 = (SSIM_K1 * range).powi(2);
    let c2 = (SSIM_K2 * range).powi(2);
    let w = gaussian_window();
    let a = &x.data;
    let b = &reference.data;
    let prod = |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> { a.iter().zip(b).map(|(&p, &q)| f(p, q)).collect() };
    let mu_a = filter_valid(a, side, &w);
    let mu_b = filter_valid(b, side, &w);
    let aa = filter_valid(&prod(&|p, _| p * p), side, &w);
    let bb = filter_valid(&prod(&|_, q| q * q), side, &w);
    let ab = filter_valid(&prod(&|p, q| p * q), side, &w);
    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        let num = (2.0 * ma * mb + c1) * (2.0 * cov + c2);
        let den = (ma * ma + mb * mb + c1) * (va + vb + c2);
        total += if den == 0.0 { 1.0 } else { num / den };
    }
    Ok(total / mu_a.len() as f64)
}

fn check_binary(mask: &Image) -> Result<()> {
    match mask.data.iter().find(|&&v| v != 0.0 && v != 1.0) {
        Some(&v) => Err(Error::NonBinaryMask(v)),
        None => Ok(()),
    }
}

/// `2 |A and B| / (|A| + |B|)`; two empty masks score 1.
pub fn dice(a: &Image, b: &Image) -> Result<f64> {
    check_dims(a, b)?;
    check_binary(a)?;
    check_binary(b)?;
    let inter = a
        .data
        .iter()
        .zip(&b.data)
        .filter(|(p, q)| **p == 1.0 && **q == 1.0)
        .count();
    let total = a.data.iter().chain(&b.data).filter(|v| **v == 1.0).count();
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

/// PSNR and SSIM after rescaling both images to `[0, 1]`, so
/// reconstructions on unrelated intensity scales can be compared.
pub fn normalized_scores(x: &Image, reference: &Image) -> Result<(f64, f64)> {
    let (lo, hi) = reference.min_max();
    if !(hi > lo) {
        return Err(Error::ConstantReference);
    }
    let (xn, rn) = (x.normalized(), reference.normalized());
    Ok((psnr(&xn, &rn)?, ssim(&xn, &rn)?))
}

/// One line of a metrics report.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub method: String,
    pub slice: usize,
    pub wavelength_nm: f64,
    pub psnr_db: f64,
    pub ssim: f64,
    pub dice_hb: Option<f64>,
    pub dice_hbo2: Option<f64>,
}

pub const METRICS_HEADER: &str = "method,slice,wavelength,psnr_db,ssim,dice_hb,dice_hbo2";

pub fn write_metrics_csv<W: Write>(mut w: W, rows: &[MetricRow]) -> Result<()> {
    writeln!(w, "{METRICS_HEADER}")?;
    let opt = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_default();
    for r in rows {
        writeln!(
            w,
            "{},{},{},{:.6},{:.6},{},{}",
            r.method,
            r.slice,
            r.wavelength_nm,
            r.psnr_db,
            r.ssim,
            opt(r.dice_hb),
            opt(r.dice_hbo2)
        )?;
    }
    Ok(())
}

pub fn read_metrics_csv(text: &str) -> Result<Vec<MetricRow>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(METRICS_HEADER) {
        return Err(Error::Format("missing metrics header".into()));
    }
    let num = |s: &str| s.parse::<f64>().map_err(|e| Error::Format(format!("{s:?}: {e}")));
    let opt = |s: &str| if s.is_empty() { Ok(None) } else { num(s).map(Some) };
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.trim().split(',').collect();
            if f.len() != 7 {
                return Err(Error::Format(format!("expected 7 fields: {l}")));
            }
            Ok(MetricRow {
                method: f[0].to_string(),
                slice: f[1].parse().map_err(|e| Error::Format(format!("{e}")))?,
                wavelength_nm: num(f[2])?,
                psnr_db: num(f[3])?,
                ssim: num(f[4])?,
                dice_hb: opt(f[5])?,
                dice_hbo2: opt(f[6])?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::GridSpec;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn image(side: usize, f: impl Fn(usize, usize) -> f64) -> Image {
        let grid = GridSpec::new(side, 10.0).unwrap();
        let data = (0..side * side).map(|i| f(i / side, i % side)).collect();
        Image::from_vec(grid, data).unwrap()
    }

    fn binary(side: usize) -> Image {
        image(side, |r, c| if (r / 4 + c / 4) % 2 == 0 { 1.0 } else { 0.0 })
    }

    fn noisy(reference: &Image, sigma: f64, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = rand_distr_normal();
        Image {
            grid: reference.grid,
            data: reference.data.iter().map(|v| v + sigma * normal(&mut rng)).collect(),
        }
    }

    // Box-Muller; keeps the test free of an extra distribution crate
    fn rand_distr_normal() -> impl Fn(&mut ChaCha8Rng) -> f64 {
        |rng| {
            let u: f64 = rng.gen_range(f64::EPSILON..1.0);
            let v: f64 = rng.gen();
            (-2.0 * u.ln()).sqrt() * (std::f64::consts::TAU * v).cos()
        }
    }

    #[test]
    fn psnr_of_identical_images_is_infinite() {
        let r = binary(16);
        assert_eq!(psnr(&r, &r).unwrap(), f64::INFINITY);
    }

    #[test]
    fn psnr_of_constant_offset() {
        let r = binary(16);
        let x = Image {
            grid: r.grid,
            data: r.data.iter().map(|v| v + 0.1).collect(),
        };
        assert!((psnr(&x, &r).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn psnr_single_pixel_error() {
        let r = binary(16);
        let mut x = r.clone();
        x.data[7] += 1.0;
        assert!((psnr(&x, &r).unwrap() - 10.0 * 256f64.log10()).abs() < 1e-9);
    }

    #[test]
    fn psnr_rejects_constant_reference_and_mismatch() {
        let c = image(16, |_, _| 0.3);
        assert!(matches!(psnr(&binary(16), &c), Err(Error::ConstantReference)));
        assert!(matches!(
            psnr(&binary(16), &binary(12)),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn psnr_decreases_with_noise() {
        let r = binary(32);
        let mut last = f64::INFINITY;
        for sigma in [0.01, 0.02, 0.05, 0.1, 0.2] {
            let p = psnr(&noisy(&r, sigma, 3), &r).unwrap();
            assert!(p < last);
            last = p;
        }
    }

    #[test]
    fn ssim_identity_and_anticorrelation() {
        let r = image(24, |row, col| ((row as f64) * 0.7).sin() * ((col as f64) * 0.3).cos());
        assert_eq!(ssim(&r, &r).unwrap(), 1.0);
        let c = image(24, |_, _| 2.0);
        assert_eq!(ssim(&c, &c).unwrap(), 1.0);
        let zero_mean = image(24, |row, col| if (row + col) % 2 == 0 { 1.0 } else { -1.0 });
        let neg = Image {
            grid: r.grid,
            data: zero_mean.data.iter().map(|v| -v).collect(),
        };
        assert!(ssim(&neg, &zero_mean).unwrap() < 0.0);
        assert!(ssim(&r, &image(8, |_, _| 0.0)).is_err());
    }

    #[test]
    fn ssim_with_noise_on_unit_range_image() {
        // frozen from scikit-image structural_similarity (gaussian_weights,
        // sigma 1.5, population covariance, data_range 1) on the same inputs
        let r = binary(32);
        let x = Image {
            grid: r.grid,
            data: r
                .data
                .iter()
                .enumerate()
                .map(|(k, v)| v + 0.1 * 12f64.sqrt() * (((k * 7919) % 1000) as f64 / 1000.0 - 0.5))
                .collect(),
        };
        let s = ssim(&x, &r).unwrap();
        assert!((s - 0.9793475624087292).abs() < 1e-9, "{s}");
    }

    #[test]
    fn ssim_of_smooth_gradient_against_shifted_copy() {
        // oracle: for x = ref + d with constant d, every window has equal
        // variances and covariance, so SSIM reduces to the luminance term
        let r = image(16, |row, col| (row + col) as f64 / 30.0);
        let d = 0.1;
        let x = Image {
            grid: r.grid,
            data: r.data.iter().map(|v| v + d).collect(),
        };
        let c1 = (SSIM_K1 * 1.0f64).powi(2);
        let w = gaussian_window();
        let mu = filter_valid(&r.data, 16, &w);
        let expected = mu
            .iter()
            .map(|m| (2.0 * m * (m + d) + c1) / (m * m + (m + d) * (m + d) + c1))
            .sum::<f64>()
            / mu.len() as f64;
        assert!((ssim(&x, &r).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn dice_cases() {
        let a = image(8, |r, _| if r < 4 { 1.0 } else { 0.0 });
        let b = image(8, |r, _| if r >= 4 { 1.0 } else { 0.0 });
        let half = image(8, |r, _| if (2..6).contains(&r) { 1.0 } else { 0.0 });
        let empty = image(8, |_, _| 0.0);
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        assert_eq!(dice(&a, &b).unwrap(), 0.0);
        assert_eq!(dice(&a, &half).unwrap(), 0.5);
        assert_eq!(dice(&empty, &empty).unwrap(), 1.0);
        assert!(matches!(dice(&a, &image(8, |_, _| 0.5)), Err(Error::NonBinaryMask(_))));
    }

    #[test]
    fn normalized_scores_ignore_affine_rescaling() {
        let r = binary(16);
        let x = Image {
            grid: r.grid,
            data: r.data.iter().map(|v| 3.0 * v - 1.0).collect(),
        };
        let (p, s) = normalized_scores(&x, &r).unwrap();
        assert_eq!(p, f64::INFINITY);
        assert_eq!(s, 1.0);
    }

    #[test]
    fn metrics_csv_round_trip() {
        let rows = vec![
            MetricRow {
                method: "u3s".into(),
                slice: 8,
                wavelength_nm: 760.0,
                psnr_db: 31.25,
                ssim: 0.875,
                dice_hb: None,
                dice_hbo2: Some(0.5),
            },
            MetricRow {
                method: "ss".into(),
                slice: 8,
                wavelength_nm: 700.0,
                psnr_db: f64::INFINITY,
                ssim: 1.0,
                dice_hb: Some(1.0),
                dice_hbo2: None,
            },
        ];
        let mut buf = Vec::new();
        write_metrics_csv(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with(METRICS_HEADER));
        assert_eq!(read_metrics_csv(&text).unwrap(), rows);
    }

    proptest! {
        #[test]
        fn dice_is_symmetric(bits_a in proptest::collection::vec(any::<bool>(), 36),
                             bits_b in proptest::collection::vec(any::<bool>(), 36)) {
            let a = image(6, |r, c| bits_a[r * 6 + c] as u8 as f64);
            let b = image(6, |r, c| bits_b[r * 6 + c] as u8 as f64);
            prop_assert_eq!(dice(&a, &b).unwrap(), dice(&b, &a).unwrap());
        }

        #[test]
        fn ssim_of_self_is_one(values in proptest::collection::vec(-1e3f64..1e3, 144)) {
            let x = image(12, |r, c| values[r * 12 + c]);
            prop_assert_eq!(ssim(&x, &x).unwrap(), 1.0);
        }
    }
}
