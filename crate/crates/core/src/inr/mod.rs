//! Self-supervised reconstruction with a sinusoidal coordinate network.
//!
//! The network is first fitted to a structural prior image (mean squared
//! error over all pixels), then copied and refined per wavelength against
//! sparse measurements through the forward operator:
//!
//! * own wavelength of slice `m`: `||A_m M - y_m||^2`
//! * other wavelengths: `||A_m M - y_m||^2 + delta ||A_{m+k} M - y_{m+k}||^2`
//!   where slice `m + k` of the window carries the target wavelength.
//!
//! All training uses full-grid batches and Adam.

mod adam;
pub mod network;
pub mod real;

use rayon::prelude::*;

pub use adam::Adam;
pub use network::{CoordinateNetwork, DEFAULT_DEPTH, DEFAULT_OMEGA0, DEFAULT_WIDTH};
pub use real::Real;

use crate::error::{Error, Result};
use crate::geometry::SpiralSchedule;
use crate::image::{GridSpec, Image};
use crate::physics::{ForwardOperator, Sinogram};

/// Abort once the loss exceeds this multiple of its initial value.
pub const DIVERGENCE_FACTOR: f64 = 1e6;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingConfig {
    pub embed_iterations: usize,
    pub iterations: usize,
    pub lr_embed: f64,
    pub lr_reconstruct: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Weight of the neighbour-slice data term.
    pub delta: f64,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            embed_iterations: 2000,
            iterations: 2000,
            lr_embed: 1e-4,
            lr_reconstruct: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            delta: 0.8,
            seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_embed > 0.0) || !(self.lr_reconstruct > 0.0) {
            return Err(Error::InvalidParameter("learning rates must be positive".into()));
        }
        if !(self.delta >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "delta must be >= 0, got {}",
                self.delta
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::InvalidParameter("invalid Adam moments".into()));
        }
        Ok(())
    }

    fn adam(&self, lr: f64) -> Adam {
        Adam::new(lr, self.beta1, self.beta2, self.eps)
    }
}

/// Trained parameters and the loss recorded before every update.
#[derive(Debug, Clone)]
pub struct Trained<T: Real> {
    pub net: CoordinateNetwork<T>,
    pub losses: Vec<f64>,
}

/// Sparse measurement of one slice together with its operator.
#[derive(Clone, Copy)]
pub struct Measurement<'a> {
    pub op: &'a ForwardOperator,
    pub sino: &'a Sinogram,
}

impl<'a> Measurement<'a> {
    pub fn new(op: &'a ForwardOperator, sino: &'a Sinogram) -> Result<Self> {
        sino.check()?;
        if sino.geometry.num_elements != op.geometry().num_elements
            || sino.time.num_samples != op.time().num_samples
            || (sino.geometry.rotation_deg - op.geometry().rotation_deg).abs() > 1e-9
        {
            return Err(Error::DimensionMismatch(
                "sinogram does not match its forward operator".into(),
            ));
        }
        Ok(Measurement { op, sino })
    }
}

/// One weighted term `weight * ||A v - y||^2`.
#[derive(Clone, Copy)]
pub struct DataTerm<'a> {
    pub op: &'a ForwardOperator,
    pub measurements: &'a [f64],
    pub weight: f64,
}

impl<'a> DataTerm<'a> {
    pub fn from_measurement(m: Measurement<'a>, weight: f64) -> Self {
        DataTerm {
            op: m.op,
            measurements: &m.sino.samples,
            weight,
        }
    }
}

fn check_loss(loss: f64, initial: Option<f64>, iteration: usize) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::Divergence { iteration, loss });
    }
    if let Some(l0) = initial {
        if l0 > 0.0 && loss > DIVERGENCE_FACTOR * l0 {
            return Err(Error::Divergence { iteration, loss });
        }
    }
    Ok(())
}

/// Mean squared error against `target` and its parameter gradient.
pub fn image_loss_gradient<T: Real>(
    net: &CoordinateNetwork<T>,
    coords: &[[f64; 2]],
    target: &[f64],
) -> Result<(f64, Vec<T>)> {
    let (v, cache) = net.forward_cached(coords)?;
    let n = v.len() as f64;
    let residual: Vec<f64> = v.iter().zip(target).map(|(a, b)| a - b).collect();
    let loss = residual.iter().map(|r| r * r).sum::<f64>() / n;
    let dv: Vec<f64> = residual.iter().map(|r| 2.0 * r / n).collect();
    Ok((loss, net.backward(&cache, &dv)))
}

/// `sum_t w_t ||A_t M - y_t||^2` and its parameter gradient, formed as
/// `2 sum_t w_t A_t^T (A_t M - y_t)` back-propagated through the network.
pub fn data_loss_gradient<T: Real>(
    net: &CoordinateNetwork<T>,
    grid: &GridSpec,
    terms: &[DataTerm<'_>],
) -> Result<(f64, Vec<T>)> {
    let coords = grid.normalized_coords();
    let (v, cache) = net.forward_cached(&coords)?;
    let (loss, dv) = data_loss_image_gradient(&v, terms)?;
    Ok((loss, net.backward(&cache, &dv)))
}

/// Loss and gradient with respect to the image itself.
pub fn data_loss_image_gradient(image: &[f64], terms: &[DataTerm<'_>]) -> Result<(f64, Vec<f64>)> {
    let mut loss = 0.0;
    let mut dv = vec![0.0; image.len()];
    let mut back = vec![0.0; image.len()];
    for term in terms {
        if term.op.grid().len() != image.len() || term.measurements.len() != term.op.rows() {
            return Err(Error::DimensionMismatch("data term does not match image grid".into()));
        }
        if term.weight == 0.0 {
            continue;
        }
        let mut residual = vec![0.0; term.op.rows()];
        term.op.apply_raw(image, &mut residual);
        for (r, y) in residual.iter_mut().zip(term.measurements) {
            *r -= y;
        }
        loss += term.weight * residual.iter().map(|r| r * r).sum::<f64>();
        term.op.adjoint_raw(&residual, &mut back);
        for (d, b) in dv.iter_mut().zip(&back) {
            *d += 2.0 * term.weight * b;
        }
    }
    if !loss.is_finite() || dv.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("data loss or gradient is not finite".into()));
    }
    Ok((loss, dv))
}

/// Fits the network to the prior image by minimising the per-pixel mean
/// squared error.
pub fn embed_prior<T: Real>(net: &CoordinateNetwork<T>, prior: &Image, cfg: &TrainingConfig) -> Result<Trained<T>> {
    cfg.validate()?;
    if cfg.embed_iterations == 0 {
        return Err(Error::NoOptimization);
    }
    if !prior.is_finite() {
        return Err(Error::Numeric("prior image has non-finite values".into()));
    }
    let coords = prior.grid.normalized_coords();
    let mut net = net.clone();
    let mut adam = cfg.adam(cfg.lr_embed);
    let mut losses = Vec::with_capacity(cfg.embed_iterations);
    for it in 0..cfg.embed_iterations {
        let (loss, grad) = image_loss_gradient(&net, &coords, &prior.data)?;
        check_loss(loss, losses.first().copied(), it)?;
        losses.push(loss);
        adam.step(net.params_mut(), &grad);
    }
    Ok(Trained { net, losses })
}

/// Data-consistency training from a copy of `init`.
pub fn train_data<T: Real>(
    init: &CoordinateNetwork<T>,
    grid: &GridSpec,
    terms: &[DataTerm<'_>],
    cfg: &TrainingConfig,
) -> Result<Trained<T>> {
    cfg.validate()?;
    let mut net = init.clone();
    let mut adam = cfg.adam(cfg.lr_reconstruct);
    let mut losses = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let (loss, grad) = data_loss_gradient(&net, grid, terms)?;
        check_loss(loss, losses.first().copied(), it)?;
        losses.push(loss);
        adam.step(net.params_mut(), &grad);
    }
    Ok(Trained { net, losses })
}

/// Network output over a pixel grid.
#[derive(Debug, Clone)]
pub struct Inference {
    /// Output clamped to `[0, inf)`.
    pub image: Image,
    /// Unclamped network output.
    pub raw: Image,
    pub negative_pixels: usize,
    pub min_value: f64,
}

pub fn infer<T: Real>(net: &CoordinateNetwork<T>, grid: &GridSpec) -> Result<Inference> {
    let values = net.evaluate(&grid.normalized_coords())?;
    let raw = Image::from_vec(*grid, values)?;
    let negative_pixels = raw.data.iter().filter(|&&v| v < 0.0).count();
    let min_value = raw.min_max().0;
    let image = Image {
        grid: *grid,
        data: raw.data.iter().map(|v| v.max(0.0)).collect(),
    };
    Ok(Inference {
        image,
        raw,
        negative_pixels,
        min_value,
    })
}

/// Trained network, its loss trace and the inferred image.
#[derive(Debug, Clone)]
pub struct Reconstruction<T: Real> {
    pub trained: Trained<T>,
    pub inference: Inference,
    pub wavelength_nm: f64,
}

/// Reconstructs the image at the wavelength acquired on the centre slice.
pub fn train_center<T: Real>(
    prior_net: &CoordinateNetwork<T>,
    center: Measurement<'_>,
    cfg: &TrainingConfig,
) -> Result<Reconstruction<T>> {
    let grid = *center.op.grid();
    let trained = train_data(prior_net, &grid, &[DataTerm::from_measurement(center, 1.0)], cfg)?;
    let inference = infer(&trained.net, &grid)?;
    Ok(Reconstruction {
        trained,
        inference,
        wavelength_nm: center.sino.wavelength_nm,
    })
}

/// Reconstructs the centre-slice image at the wavelength carried by the
/// neighbouring slice at offset `k`.
pub fn train_neighbor<T: Real>(
    prior_net: &CoordinateNetwork<T>,
    center: Measurement<'_>,
    neighbor: Measurement<'_>,
    k: isize,
    target_wavelength_nm: f64,
    cfg: &TrainingConfig,
) -> Result<Reconstruction<T>> {
    if k == 0 {
        return Err(Error::InvalidParameter(
            "neighbour offset k must be non-zero; use train_center".into(),
        ));
    }
    if neighbor.sino.wavelength_nm != target_wavelength_nm {
        return Err(Error::Schedule(format!(
            "neighbour at offset {k} carries {} nm, target is {} nm",
            neighbor.sino.wavelength_nm, target_wavelength_nm
        )));
    }
    let grid = *center.op.grid();
    let terms = [
        DataTerm::from_measurement(center, 1.0),
        DataTerm::from_measurement(neighbor, cfg.delta),
    ];
    let trained = train_data(prior_net, &grid, &terms, cfg)?;
    let inference = infer(&trained.net, &grid)?;
    Ok(Reconstruction {
        trained,
        inference,
        wavelength_nm: target_wavelength_nm,
    })
}

/// The training jobs needed for slice `m`: `(wavelength index, offset k)`
/// ordered by wavelength, `k = 0` marking the centre-wavelength job.
pub fn slice_jobs(schedule: &SpiralSchedule, m: usize) -> Result<Vec<(usize, isize)>> {
    (1..=schedule.num_wavelengths())
        .map(|omega| Ok((omega, schedule.offset_for_wavelength(m, omega)?)))
        .collect()
}

/// All `W` wavelength images at slice `m`, each trained from its own copy of
/// `prior_net`. `measurement(s)` returns the measurement of slice `s`.
pub fn reconstruct_slice<'a, T, F>(
    prior_net: &CoordinateNetwork<T>,
    schedule: &SpiralSchedule,
    measurement: F,
    m: usize,
    cfg: &TrainingConfig,
) -> Result<Vec<Reconstruction<T>>>
where
    T: Real,
    F: Fn(usize) -> Result<Measurement<'a>> + Sync,
{
    let jobs = slice_jobs(schedule, m)?;
    let center = measurement(m)?;
    jobs.par_iter()
        .map(|&(omega, k)| {
            if k == 0 {
                train_center(prior_net, center, cfg)
            } else {
                let neighbor = measurement((m as isize + k) as usize)?;
                train_neighbor(prior_net, center, neighbor, k, schedule.wavelengths_nm[omega - 1], cfg)
            }
        })
        .collect()
}

/// Writes `iteration,loss` rows, iterations counted from 1.
pub fn write_loss_trace<W: std::io::Write>(mut w: W, losses: &[f64]) -> Result<()> {
    writeln!(w, "iteration,loss")?;
    for (i, l) in losses.iter().enumerate() {
        writeln!(w, "{},{:e}", i + 1, l)?;
    }
    Ok(())
}
