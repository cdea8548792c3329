//! Discrete circular-projection forward model, its exact adjoint, and
//! universal back-projection (UBP).
//!
//! The forward operator maps an image to one time series per detector: the
//! sample at `(d, t_j)` is the line integral of the bilinearly interpolated
//! image along the circle of radius `c * t_j` centred on detector `d`,
//! restricted to the field of view. Arcs are sampled with the midpoint rule
//! at half-pixel spacing. The operator is assembled row by row into a sparse
//! matrix, so the adjoint is the exact transpose.

use rayon::prelude::*;
use rustfft::{num_complex::Complex64, FftPlanner};

use crate::error::{Error, Result};
use crate::geometry::RingGeometry;
use crate::image::{GridSpec, Image};

pub const DEFAULT_SPEED_OF_SOUND_M_S: f64 = 1536.0;
pub const DEFAULT_SAMPLING_HZ: f64 = 40e6;

/// Arc step as a fraction of the pixel size.
const ARC_STEP_PIXELS: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    pub t0_s: f64,
    pub dt_s: f64,
    pub num_samples: usize,
    pub speed_of_sound_m_s: f64,
}

impl TimeGrid {
    pub fn time(&self, j: usize) -> f64 {
        self.t0_s + j as f64 * self.dt_s
    }

    fn c_mm_per_s(&self) -> f64 {
        self.speed_of_sound_m_s * 1e3
    }

    /// Acoustic radius in millimetres reached at sample `j`.
    pub fn radius_mm(&self, j: usize) -> f64 {
        self.time(j) * self.c_mm_per_s()
    }

    pub fn end_s(&self) -> f64 {
        self.time(self.num_samples.saturating_sub(1))
    }

    /// Equal up to floating-point representation of the same grid.
    pub fn matches(&self, other: &TimeGrid) -> bool {
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1e-30);
        self.num_samples == other.num_samples
            && close(self.t0_s, other.t0_s)
            && close(self.dt_s, other.dt_s)
            && close(self.speed_of_sound_m_s, other.speed_of_sound_m_s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_samples == 0 || !(self.dt_s > 0.0) || !(self.speed_of_sound_m_s > 0.0) || !(self.t0_s >= 0.0) {
            return Err(Error::InvalidParameter(format!("invalid time grid {self:?}")));
        }
        Ok(())
    }
}

/// Half-diagonal of the field of view: radius of its circumscribed disc.
fn fov_half_diagonal(grid: &GridSpec) -> f64 {
    grid.fov_mm * std::f64::consts::SQRT_2 / 2.0
}

/// Smallest time grid sampled at `fs_hz` whose acoustic radii span every
/// detector-to-FOV distance.
pub fn make_time_grid(
    geometry: &RingGeometry,
    grid: &GridSpec,
    speed_of_sound_m_s: f64,
    fs_hz: f64,
) -> Result<TimeGrid> {
    geometry.validate()?;
    grid.validate()?;
    if !(fs_hz > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "sampling rate must be positive, got {fs_hz}"
        )));
    }
    if !(speed_of_sound_m_s > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "speed of sound must be positive, got {speed_of_sound_m_s}"
        )));
    }
    if grid.fov_mm >= 2.0 * geometry.ring_radius_mm {
        return Err(Error::InvalidGeometry(format!(
            "field of view {} mm does not fit inside ring of radius {} mm",
            grid.fov_mm, geometry.ring_radius_mm
        )));
    }
    let c = speed_of_sound_m_s * 1e3;
    let dt = 1.0 / fs_hz;
    let half_diag = fov_half_diagonal(grid);
    let near = (geometry.ring_radius_mm - half_diag).max(0.0);
    let far = geometry.ring_radius_mm + half_diag;
    let t0 = ((near / c) / dt).floor() * dt;
    let span = (far / c - t0) / dt;
    // guard against the ceiling landing one short through rounding
    let mut num_samples = span.ceil().max(0.0) as usize + 1;
    while (t0 + (num_samples - 1) as f64 * dt) * c < far {
        num_samples += 1;
    }
    Ok(TimeGrid {
        t0_s: t0,
        dt_s: dt,
        num_samples,
        speed_of_sound_m_s,
    })
}

/// Time-resolved signals, one row of `num_samples` per detector.
#[derive(Debug, Clone, PartialEq)]
pub struct Sinogram {
    pub geometry: RingGeometry,
    pub time: TimeGrid,
    pub samples: Vec<f64>,
    pub wavelength_nm: f64,
    pub slice_index: usize,
}

impl Sinogram {
    pub fn zeros(geometry: RingGeometry, time: TimeGrid) -> Self {
        let len = geometry.num_elements * time.num_samples;
        Sinogram {
            geometry,
            time,
            samples: vec![0.0; len],
            wavelength_nm: 0.0,
            slice_index: 0,
        }
    }

    pub fn num_detectors(&self) -> usize {
        self.geometry.num_elements
    }

    pub fn channel(&self, d: usize) -> &[f64] {
        let nt = self.time.num_samples;
        &self.samples[d * nt..(d + 1) * nt]
    }

    pub fn check(&self) -> Result<()> {
        if self.samples.len() != self.geometry.num_elements * self.time.num_samples {
            return Err(Error::DimensionMismatch(format!(
                "sinogram has {} samples, expected {} x {}",
                self.samples.len(),
                self.geometry.num_elements,
                self.time.num_samples
            )));
        }
        Ok(())
    }

    pub fn dot(&self, other: &Sinogram) -> f64 {
        self.samples.iter().zip(&other.samples).map(|(a, b)| a * b).sum()
    }

    pub fn squared_norm(&self) -> f64 {
        self.samples.iter().map(|v| v * v).sum()
    }
}

fn check_coverage(grid: &GridSpec, geometry: &RingGeometry, time: &TimeGrid) -> Result<()> {
    time.validate()?;
    let h = grid.fov_mm / 2.0 - grid.pixel_mm() / 2.0;
    let first = time.radius_mm(0);
    let last = time.radius_mm(time.num_samples - 1);
    for (qx, qy) in geometry.element_positions() {
        let nx = qx.clamp(-h, h);
        let ny = qy.clamp(-h, h);
        let near = ((qx - nx).powi(2) + (qy - ny).powi(2)).sqrt();
        let far = ((qx.abs() + h).powi(2) + (qy.abs() + h).powi(2)).sqrt();
        if first > near + 1e-9 || last < far - 1e-9 {
            return Err(Error::Coverage(format!(
                "radii {first:.4}..{last:.4} mm do not span pixel distances {near:.4}..{far:.4} mm"
            )));
        }
    }
    Ok(())
}

/// Rows of the forward operator belonging to one detector, in CSR layout
/// with row offsets relative to the block.
struct DetectorBlock {
    row_ptr: Vec<usize>,
    cols: Vec<u32>,
    vals: Vec<f64>,
}

fn detector_block(grid: &GridSpec, time: &TimeGrid, q: (f64, f64)) -> DetectorBlock {
    let n = grid.side;
    let pixel = grid.pixel_mm();
    let half = grid.fov_mm / 2.0;
    let ds = ARC_STEP_PIXELS * pixel;
    let rho = fov_half_diagonal(grid) + pixel;
    let dist = (q.0 * q.0 + q.1 * q.1).sqrt();
    let toward_center = (-q.1).atan2(-q.0);

    let mut row_ptr = Vec::with_capacity(time.num_samples + 1);
    let mut cols = Vec::new();
    let mut vals = Vec::new();
    let mut row: Vec<(u32, f64)> = Vec::new();
    row_ptr.push(0);

    for j in 0..time.num_samples {
        row.clear();
        let r = time.radius_mm(j);
        if r > 0.0 && r > dist - rho && r < dist + rho {
            let cos_half = ((dist * dist + r * r - rho * rho) / (2.0 * dist * r)).clamp(-1.0, 1.0);
            let half_angle = cos_half.acos();
            let count = ((2.0 * half_angle * r / ds).ceil() as usize).max(1);
            let step = 2.0 * half_angle / count as f64;
            let weight = r * step;
            for k in 0..count {
                let psi = toward_center - half_angle + (k as f64 + 0.5) * step;
                let x = q.0 + r * psi.cos();
                let y = q.1 + r * psi.sin();
                let fx = (x + half) / pixel - 0.5;
                let fy = (y + half) / pixel - 0.5;
                if fx <= -1.0 || fy <= -1.0 || fx >= n as f64 || fy >= n as f64 {
                    continue;
                }
                let ix = fx.floor();
                let iy = fy.floor();
                let ax = fx - ix;
                let ay = fy - iy;
                let ix = ix as isize;
                let iy = iy as isize;
                for (dy, wy) in [(0isize, 1.0 - ay), (1, ay)] {
                    let yy = iy + dy;
                    if yy < 0 || yy >= n as isize || wy == 0.0 {
                        continue;
                    }
                    for (dx, wx) in [(0isize, 1.0 - ax), (1, ax)] {
                        let xx = ix + dx;
                        if xx < 0 || xx >= n as isize || wx == 0.0 {
                            continue;
                        }
                        row.push(((yy as usize * n + xx as usize) as u32, weight * wx * wy));
                    }
                }
            }
            row.sort_by_key(|&(c, _)| c);
            let mut last: Option<u32> = None;
            for &(c, v) in &row {
                if last == Some(c) {
                    *vals.last_mut().expect("merged entry") += v;
                } else {
                    cols.push(c);
                    vals.push(v);
                    last = Some(c);
                }
            }
        }
        row_ptr.push(cols.len());
    }
    DetectorBlock { row_ptr, cols, vals }
}

impl DetectorBlock {
    fn apply(&self, image: &[f64], out: &mut [f64]) {
        for (j, o) in out.iter_mut().enumerate() {
            let (a, b) = (self.row_ptr[j], self.row_ptr[j + 1]);
            *o = self.cols[a..b]
                .iter()
                .zip(&self.vals[a..b])
                .map(|(&c, &v)| v * image[c as usize])
                .sum();
        }
    }

    fn adjoint_into(&self, samples: &[f64], image: &mut [f64]) {
        for (j, &y) in samples.iter().enumerate() {
            if y == 0.0 {
                continue;
            }
            let (a, b) = (self.row_ptr[j], self.row_ptr[j + 1]);
            for (&c, &v) in self.cols[a..b].iter().zip(&self.vals[a..b]) {
                image[c as usize] += v * y;
            }
        }
    }

    fn nnz(&self) -> usize {
        self.vals.len()
    }
}

/// Assembled forward operator for one grid, detector geometry and time grid.
pub struct ForwardOperator {
    grid: GridSpec,
    geometry: RingGeometry,
    time: TimeGrid,
    blocks: Vec<DetectorBlock>,
}

impl ForwardOperator {
    pub fn new(grid: GridSpec, geometry: &RingGeometry, time: TimeGrid) -> Result<Self> {
        grid.validate()?;
        geometry.validate()?;
        check_coverage(&grid, geometry, &time)?;
        let blocks = geometry
            .element_positions()
            .into_par_iter()
            .map(|q| detector_block(&grid, &time, q))
            .collect();
        Ok(ForwardOperator {
            grid,
            geometry: geometry.clone(),
            time,
            blocks,
        })
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn geometry(&self) -> &RingGeometry {
        &self.geometry
    }

    pub fn time(&self) -> &TimeGrid {
        &self.time
    }

    pub fn nnz(&self) -> usize {
        self.blocks.iter().map(DetectorBlock::nnz).sum()
    }

    pub fn rows(&self) -> usize {
        self.blocks.len() * self.time.num_samples
    }

    /// `A x` into a raw sample buffer of length `Nd * Nt`.
    pub fn apply_raw(&self, image: &[f64], out: &mut [f64]) {
        let nt = self.time.num_samples;
        self.blocks
            .par_iter()
            .zip(out.par_chunks_mut(nt))
            .for_each(|(block, o)| block.apply(image, o));
    }

    /// `A^T y` into a raw image buffer (overwritten).
    ///
    /// Per-detector partial images are summed in detector order, so the
    /// result does not depend on the thread count.
    pub fn adjoint_raw(&self, samples: &[f64], image: &mut [f64]) {
        let nt = self.time.num_samples;
        let partials: Vec<Vec<f64>> = self
            .blocks
            .par_iter()
            .zip(samples.par_chunks(nt))
            .map(|(block, y)| {
                let mut part = vec![0.0; image.len()];
                block.adjoint_into(y, &mut part);
                part
            })
            .collect();
        image.iter_mut().for_each(|v| *v = 0.0);
        for part in partials {
            for (v, p) in image.iter_mut().zip(part) {
                *v += p;
            }
        }
    }

    pub fn apply(&self, image: &Image) -> Result<Sinogram> {
        if image.grid.side != self.grid.side {
            return Err(Error::DimensionMismatch(format!(
                "image side {} does not match operator side {}",
                image.grid.side, self.grid.side
            )));
        }
        let mut sino = Sinogram::zeros(self.geometry.clone(), self.time);
        self.apply_raw(&image.data, &mut sino.samples);
        Ok(sino)
    }

    pub fn adjoint(&self, sino: &Sinogram) -> Result<Image> {
        sino.check()?;
        if sino.geometry.num_elements != self.geometry.num_elements || sino.time.num_samples != self.time.num_samples {
            return Err(Error::DimensionMismatch(format!(
                "sinogram {}x{} does not match operator {}x{}",
                sino.geometry.num_elements, sino.time.num_samples, self.geometry.num_elements, self.time.num_samples
            )));
        }
        let mut image = Image::zeros(self.grid);
        self.adjoint_raw(&sino.samples, &mut image.data);
        Ok(image)
    }
}

/// `A x` without keeping the assembled operator in memory.
pub fn forward_project(image: &Image, geometry: &RingGeometry, time: &TimeGrid) -> Result<Sinogram> {
    let grid = image.grid;
    grid.validate()?;
    geometry.validate()?;
    check_coverage(&grid, geometry, time)?;
    let nt = time.num_samples;
    let mut sino = Sinogram::zeros(geometry.clone(), *time);
    geometry
        .element_positions()
        .into_par_iter()
        .zip(sino.samples.par_chunks_mut(nt))
        .for_each(|(q, out)| detector_block(&grid, time, q).apply(&image.data, out));
    Ok(sino)
}

/// `A^T y` without keeping the assembled operator in memory.
pub fn adjoint_project(sino: &Sinogram, grid: &GridSpec) -> Result<Image> {
    sino.check()?;
    grid.validate()?;
    check_coverage(grid, &sino.geometry, &sino.time)?;
    let nt = sino.time.num_samples;
    let partials: Vec<Vec<f64>> = sino
        .geometry
        .element_positions()
        .into_par_iter()
        .zip(sino.samples.par_chunks(nt))
        .map(|(q, y)| {
            let mut part = vec![0.0; grid.len()];
            detector_block(grid, &sino.time, q).adjoint_into(y, &mut part);
            part
        })
        .collect();
    let mut image = Image::zeros(*grid);
    for part in partials {
        for (v, p) in image.data.iter_mut().zip(part) {
            *v += p;
        }
    }
    Ok(image)
}

/// Discrete Hilbert transform of a real sequence (zero-padded FFT).
pub fn hilbert_transform(signal: &[f64]) -> Vec<f64> {
    let n = signal.len();
    if n == 0 {
        return Vec::new();
    }
    let len = (2 * n).next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(len);
    let inv = planner.plan_fft_inverse(len);
    let mut buf: Vec<Complex64> = signal
        .iter()
        .map(|&v| Complex64::new(v, 0.0))
        .chain(std::iter::repeat(Complex64::new(0.0, 0.0)))
        .take(len)
        .collect();
    fwd.process(&mut buf);
    let half = len / 2;
    for (k, z) in buf.iter_mut().enumerate() {
        // multiply by -i sign(f)
        *z = if k == 0 || k == half {
            Complex64::new(0.0, 0.0)
        } else if k < half {
            Complex64::new(z.im, -z.re)
        } else {
            Complex64::new(-z.im, z.re)
        };
    }
    inv.process(&mut buf);
    buf.iter().take(n).map(|z| z.re / len as f64).collect()
}

/// UBP filter for one channel: `b(t) = p(t) - t dp/dt`.
///
/// The sinogram stores circular projections `g`, not acoustic pressure, so
/// the pressure-equivalent trace is formed first as `p = -H{g} / (2 c t)`
/// (Hilbert transform along time). With it the dominant `-t dp/dt` term is
/// the ramp filter of the projection and the back-projection is
/// approximately scale-preserving under full angular coverage.
pub fn ubp_filter(channel: &[f64], time: &TimeGrid) -> Vec<f64> {
    let nt = channel.len();
    let c = time.c_mm_per_s();
    let h = hilbert_transform(channel);
    let pressure: Vec<f64> = (0..nt)
        .map(|j| {
            let t = time.time(j).max(0.5 * time.dt_s);
            -h[j] / (2.0 * c * t)
        })
        .collect();
    (0..nt)
        .map(|j| {
            let deriv = if nt == 1 {
                0.0
            } else if j == 0 {
                (pressure[1] - pressure[0]) / time.dt_s
            } else if j == nt - 1 {
                (pressure[nt - 1] - pressure[nt - 2]) / time.dt_s
            } else {
                (pressure[j + 1] - pressure[j - 1]) / (2.0 * time.dt_s)
            };
            pressure[j] - time.time(j) * deriv
        })
        .collect()
}

/// Filtered back-projection of one or more sinograms sharing a time grid.
///
/// Each sinogram carries its own rotated geometry. Every channel of every
/// sinogram is filtered with [`ubp_filter`], back-projected with uniform
/// weight, and the sum is divided by the total channel count.
pub fn ubp_reconstruct(sinos: &[&Sinogram], grid: &GridSpec) -> Result<Image> {
    let first = sinos
        .first()
        .ok_or_else(|| Error::InvalidParameter("UBP needs at least one sinogram".into()))?;
    grid.validate()?;
    for s in sinos {
        s.check()?;
        if !s.time.matches(&first.time) {
            return Err(Error::InvalidParameter(format!(
                "inconsistent time grids: {:?} vs {:?}",
                s.time, first.time
            )));
        }
    }
    let time = first.time;
    let c = time.c_mm_per_s();
    let nt = time.num_samples;

    let channels: Vec<((f64, f64), Vec<f64>)> = sinos
        .iter()
        .flat_map(|s| {
            s.geometry
                .element_positions()
                .into_iter()
                .enumerate()
                .map(move |(d, q)| (q, s.channel(d)))
        })
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|(q, ch)| (q, ubp_filter(ch, &time)))
        .collect();

    let total = channels.len() as f64;
    let n = grid.side;
    let mut image = Image::zeros(*grid);
    image.data.par_chunks_mut(n).enumerate().for_each(|(row, out)| {
        for (col, o) in out.iter_mut().enumerate() {
            let (x, y) = grid.pixel_center(row, col);
            let mut acc = 0.0;
            for ((qx, qy), b) in &channels {
                let r = ((x - qx).powi(2) + (y - qy).powi(2)).sqrt();
                let f = (r / c - time.t0_s) / time.dt_s;
                if f < 0.0 || f > (nt - 1) as f64 {
                    continue;
                }
                let i = f.floor() as usize;
                let a = f - i as f64;
                acc += if i + 1 < nt {
                    b[i] * (1.0 - a) + b[i + 1] * a
                } else {
                    b[i]
                };
            }
            *o = acc / total;
        }
    });
    Ok(image)
}
