//! Square image grids centred on the ring axis.

use crate::error::{Error, Result};

/// Default reconstruction field of view in millimetres.
pub const DEFAULT_FOV_MM: f64 = 25.4;

/// Pixel layout of a square field of view centred at the ring centre.
///
/// Pixel `(row, col)` has its centre at
/// `x = -fov/2 + (col + 0.5) * pixel`, `y = -fov/2 + (row + 0.5) * pixel`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub side: usize,
    pub fov_mm: f64,
}

impl GridSpec {
    pub fn new(side: usize, fov_mm: f64) -> Result<Self> {
        let spec = GridSpec { side, fov_mm };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.side == 0 {
            return Err(Error::InvalidGeometry("grid side must be at least 1".into()));
        }
        if !(self.fov_mm > 0.0) || !self.fov_mm.is_finite() {
            return Err(Error::InvalidGeometry(format!(
                "field of view must be positive, got {}",
                self.fov_mm
            )));
        }
        Ok(())
    }

    pub fn pixel_mm(&self) -> f64 {
        self.fov_mm / self.side as f64
    }

    pub fn len(&self) -> usize {
        self.side * self.side
    }

    pub fn is_empty(&self) -> bool {
        self.side == 0
    }

    /// Physical centre of pixel `(row, col)` in millimetres.
    pub fn pixel_center(&self, row: usize, col: usize) -> (f64, f64) {
        let p = self.pixel_mm();
        let h = self.fov_mm / 2.0;
        (-h + (col as f64 + 0.5) * p, -h + (row as f64 + 0.5) * p)
    }

    /// Pixel-centre coordinates normalised to `[0, 1)^2`, row-major.
    pub fn normalized_coords(&self) -> Vec<[f64; 2]> {
        let n = self.side as f64;
        let mut out = Vec::with_capacity(self.len());
        for row in 0..self.side {
            for col in 0..self.side {
                out.push([(col as f64 + 0.5) / n, (row as f64 + 0.5) / n]);
            }
        }
        out
    }
}

/// Row-major intensity image on a [`GridSpec`].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub grid: GridSpec,
    pub data: Vec<f64>,
}

impl Image {
    pub fn zeros(grid: GridSpec) -> Self {
        Image {
            grid,
            data: vec![0.0; grid.len()],
        }
    }

    pub fn from_vec(grid: GridSpec, data: Vec<f64>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::DimensionMismatch(format!(
                "image data has {} values, grid needs {}",
                data.len(),
                grid.len()
            )));
        }
        Ok(Image { grid, data })
    }

    pub fn side(&self) -> usize {
        self.grid.side
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.grid.side + col]
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    /// Min-max normalisation to `[0, 1]`; a constant image maps to zeros.
    pub fn normalized(&self) -> Image {
        let (lo, hi) = self.min_max();
        let span = hi - lo;
        let data = if span > 0.0 {
            self.data.iter().map(|v| (v - lo) / span).collect()
        } else {
            vec![0.0; self.data.len()]
        };
        Image { grid: self.grid, data }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_same_grid(&self, other: &Image) -> Result<()> {
        if self.grid.side != other.grid.side {
            return Err(Error::DimensionMismatch(format!(
                "image sides differ: {} vs {}",
                self.grid.side, other.grid.side
            )));
        }
        Ok(())
    }

    pub fn dot(&self, other: &Image) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }
}
