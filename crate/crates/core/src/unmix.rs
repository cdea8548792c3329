//! Per-pixel two-chromophore linear unmixing with a non-negativity
//! constraint.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::phantom::{condition_number, SpectralLibrary};

/// Mixing matrices worse than this are refused.
pub const MAX_CONDITION: f64 = 1e12;

/// Default mask threshold as a fraction of each map's maximum.
pub const DEFAULT_MASK_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct Unmixed {
    pub hbo2: Image,
    pub hb: Image,
}

fn residual(rows: &[[f64; 2]], s: &[f64], c: [f64; 2]) -> f64 {
    rows.iter()
        .zip(s)
        .map(|(e, v)| {
            let r = e[0] * c[0] + e[1] * c[1] - v;
            r * r
        })
        .sum()
}

/// Unconstrained least-squares solution of `min ||E c - s||`.
fn least_squares(rows: &[[f64; 2]], inv: [[f64; 2]; 2], s: &[f64]) -> [f64; 2] {
    let (mut b0, mut b1) = (0.0, 0.0);
    for (e, v) in rows.iter().zip(s) {
        b0 += e[0] * v;
        b1 += e[1] * v;
    }
    [inv[0][0] * b0 + inv[0][1] * b1, inv[1][0] * b0 + inv[1][1] * b1]
}

/// Exact non-negative least squares for two columns: the unconstrained
/// optimum if feasible, otherwise the best single-column fit (or zero).
fn solve_pixel(rows: &[[f64; 2]], inv: [[f64; 2]; 2], norms: [f64; 2], s: &[f64]) -> [f64; 2] {
    let c = least_squares(rows, inv, s);
    if c[0] >= 0.0 && c[1] >= 0.0 {
        return c;
    }
    let mut best = [0.0, 0.0];
    let mut best_r = residual(rows, s, best);
    for j in 0..2 {
        let proj: f64 = rows.iter().zip(s).map(|(e, v)| e[j] * v).sum();
        let cj = (proj / norms[j]).max(0.0);
        let mut cand = [0.0, 0.0];
        cand[j] = cj;
        let r = residual(rows, s, cand);
        if r < best_r {
            best = cand;
            best_r = r;
        }
    }
    best
}

/// Unmixes a `W`-image stack whose image `i` was acquired with mixing row
/// `matrix[i] = [eps_HbO2, eps_Hb]`.
pub fn unmix(stack: &[Image], matrix: &[[f64; 2]]) -> Result<Unmixed> {
    if stack.is_empty() || stack.len() != matrix.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} images for {} mixing rows",
            stack.len(),
            matrix.len()
        )));
    }
    for img in &stack[1..] {
        img.check_same_grid(&stack[0])?;
    }
    let condition = condition_number(matrix);
    if !(condition <= MAX_CONDITION) {
        return Err(Error::Conditioning { condition });
    }
    let (mut a, mut b, mut c) = (0.0, 0.0, 0.0);
    for e in matrix {
        a += e[0] * e[0];
        b += e[0] * e[1];
        c += e[1] * e[1];
    }
    let det = a * c - b * b;
    let inv = [[c / det, -b / det], [-b / det, a / det]];
    let norms = [a, c];
    let n = stack[0].data.len();
    let solved: Vec<[f64; 2]> = (0..n)
        .into_par_iter()
        .map(|i| {
            let s: Vec<f64> = stack.iter().map(|img| img.data[i]).collect();
            solve_pixel(matrix, inv, norms, &s)
        })
        .collect();
    let grid = stack[0].grid;
    Ok(Unmixed {
        hbo2: Image {
            grid,
            data: solved.iter().map(|c| c[0]).collect(),
        },
        hb: Image {
            grid,
            data: solved.iter().map(|c| c[1]).collect(),
        },
    })
}

/// Unmixes images acquired at `wavelengths_nm` using the library's
/// coefficients.
pub fn unmix_with_library(stack: &[Image], lib: &SpectralLibrary, wavelengths_nm: &[f64]) -> Result<Unmixed> {
    unmix(stack, &lib.matrix(wavelengths_nm)?)
}

/// Binary mask of pixels at or above `fraction` of the image maximum; empty
/// when the maximum is not positive.
pub fn threshold_mask(image: &Image, fraction: f64) -> Image {
    let max = image.min_max().1;
    let data = if max > 0.0 {
        let t = fraction * max;
        image.data.iter().map(|&v| if v >= t { 1.0 } else { 0.0 }).collect()
    } else {
        vec![0.0; image.data.len()]
    };
    Image { grid: image.grid, data }
}
