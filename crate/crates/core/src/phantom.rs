//! Multispectral numerical phantoms and simulated spiral acquisition.
//!
//! A phantom is a set of primitives whose cross-section centre follows a
//! piecewise-linear path in `z`. Each primitive carries oxy- and
//! deoxy-haemoglobin concentrations; the initial pressure at wavelength
//! `lambda` is `eps_HbO2(lambda) * C_HbO2 + eps_Hb(lambda) * C_Hb`.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{RingGeometry, SpiralSchedule};
use crate::image::{GridSpec, Image};
use crate::physics::{forward_project, Sinogram, TimeGrid};

/// Wavelengths are matched to library entries within this tolerance.
pub const WAVELENGTH_TOLERANCE_NM: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralLibrary {
    pub wavelengths_nm: Vec<f64>,
    pub eps_hbo2: Vec<f64>,
    pub eps_hb: Vec<f64>,
}

impl SpectralLibrary {
    pub fn new(wavelengths_nm: Vec<f64>, eps_hbo2: Vec<f64>, eps_hb: Vec<f64>) -> Result<Self> {
        let lib = SpectralLibrary {
            wavelengths_nm,
            eps_hbo2,
            eps_hb,
        };
        lib.validate()?;
        Ok(lib)
    }

    /// Synthetic, well-conditioned coefficients: `eps_HbO2 = i / W` rising
    /// and `eps_Hb = (W + 1 - i) / W` falling over the wavelength list.
    pub fn synthetic(wavelengths_nm: &[f64]) -> Result<Self> {
        let w = wavelengths_nm.len() as f64;
        let rising = (1..=wavelengths_nm.len()).map(|i| i as f64 / w).collect();
        let falling = (1..=wavelengths_nm.len()).map(|i| (w + 1.0 - i as f64) / w).collect();
        Self::new(wavelengths_nm.to_vec(), rising, falling)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.wavelengths_nm.len();
        if n == 0 || self.eps_hbo2.len() != n || self.eps_hb.len() != n {
            return Err(Error::InvalidParameter(
                "spectral library columns must be non-empty and of equal length".into(),
            ));
        }
        let all = self.eps_hbo2.iter().chain(&self.eps_hb).chain(&self.wavelengths_nm);
        if all.clone().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::InvalidParameter(
                "spectral library entries must be finite and positive".into(),
            ));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.wavelengths_nm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.wavelengths_nm.is_empty()
    }

    pub fn index_of(&self, wavelength_nm: f64) -> Result<usize> {
        self.wavelengths_nm
            .iter()
            .position(|w| (w - wavelength_nm).abs() <= WAVELENGTH_TOLERANCE_NM)
            .ok_or(Error::UnknownWavelength(wavelength_nm))
    }

    /// `(eps_HbO2, eps_Hb)` at a wavelength.
    pub fn extinction(&self, wavelength_nm: f64) -> Result<(f64, f64)> {
        let i = self.index_of(wavelength_nm)?;
        Ok((self.eps_hbo2[i], self.eps_hb[i]))
    }

    /// Rows `[eps_HbO2, eps_Hb]` of the mixing matrix for the given wavelengths.
    pub fn matrix(&self, wavelengths_nm: &[f64]) -> Result<Vec<[f64; 2]>> {
        wavelengths_nm
            .iter()
            .map(|&w| self.extinction(w).map(|(a, b)| [a, b]))
            .collect()
    }

    /// Two-norm condition number of the full `W x 2` mixing matrix
    /// (infinite when the columns are dependent).
    pub fn condition_number(&self) -> f64 {
        let rows: Vec<[f64; 2]> = self.eps_hbo2.iter().zip(&self.eps_hb).map(|(&a, &b)| [a, b]).collect();
        condition_number(&rows)
    }

    /// Text table with one `wavelength_nm eps_HbO2 eps_Hb` row per line.
    pub fn to_table(&self) -> String {
        let mut out = String::from("# wavelength_nm eps_HbO2 eps_Hb\n");
        for i in 0..self.len() {
            out.push_str(&format!(
                "{} {} {}\n",
                self.wavelengths_nm[i], self.eps_hbo2[i], self.eps_hb[i]
            ));
        }
        out
    }

    pub fn from_table(text: &str) -> Result<Self> {
        let (mut w, mut a, mut b) = (Vec::new(), Vec::new(), Vec::new());
        for (no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let cols: Vec<f64> = line
                .split(|c: char| c.is_whitespace() || c == ',')
                .filter(|s| !s.is_empty())
                .map(|s| s.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Format(format!("line {}: {e}", no + 1)))?;
            if cols.len() != 3 {
                return Err(Error::Format(format!("line {}: expected 3 columns", no + 1)));
            }
            w.push(cols[0]);
            a.push(cols[1]);
            b.push(cols[2]);
        }
        Self::new(w, a, b)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_table(&std::fs::read_to_string(path)?)
    }
}

/// Two-norm condition number of a `n x 2` matrix.
pub fn condition_number(rows: &[[f64; 2]]) -> f64 {
    let (mut a, mut b, mut c) = (0.0, 0.0, 0.0);
    for r in rows {
        a += r[0] * r[0];
        b += r[0] * r[1];
        c += r[1] * r[1];
    }
    // eigenvalues of the 2x2 normal matrix [[a, b], [b, c]]
    let mean = 0.5 * (a + c);
    let disc = (0.25 * (a - c) * (a - c) + b * b).sqrt();
    let (hi, lo) = (mean + disc, mean - disc);
    if !(lo > hi * 1e-28) {
        return f64::INFINITY;
    }
    (hi / lo).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Shape {
    Disc {
        radius_mm: f64,
    },
    Ellipse {
        semi_major_mm: f64,
        semi_minor_mm: f64,
        angle_deg: f64,
    },
}

impl Shape {
    fn extent(&self) -> f64 {
        match *self {
            Shape::Disc { radius_mm } => radius_mm,
            Shape::Ellipse {
                semi_major_mm,
                semi_minor_mm,
                ..
            } => semi_major_mm.max(semi_minor_mm),
        }
    }

    fn contains(&self, dx: f64, dy: f64) -> bool {
        match *self {
            Shape::Disc { radius_mm } => dx * dx + dy * dy <= radius_mm * radius_mm,
            Shape::Ellipse {
                semi_major_mm,
                semi_minor_mm,
                angle_deg,
            } => {
                let (s, c) = angle_deg.to_radians().sin_cos();
                let u = (c * dx + s * dy) / semi_major_mm;
                let v = (-s * dx + c * dy) / semi_minor_mm;
                u * u + v * v <= 1.0
            }
        }
    }
}

/// A cross-section swept along a centre path. A disc with several knots is a
/// tube.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    #[serde(flatten)]
    pub shape: Shape,
    /// Knots `[z, x, y]` in mm with strictly increasing `z`; the centre is
    /// interpolated linearly between knots and held constant beyond them.
    pub path: Vec<[f64; 3]>,
    pub hbo2: f64,
    pub hb: f64,
}

impl Primitive {
    pub fn center(&self, z: f64) -> (f64, f64) {
        let p = &self.path;
        if z <= p[0][0] {
            return (p[0][1], p[0][2]);
        }
        for pair in p.windows(2) {
            let (a, b) = (pair[0], pair[1]);
            if z <= b[0] {
                let t = (z - a[0]) / (b[0] - a[0]);
                return (a[1] + t * (b[1] - a[1]), a[2] + t * (b[2] - a[2]));
            }
        }
        let last = p[p.len() - 1];
        (last[1], last[2])
    }

    fn validate(&self) -> Result<()> {
        if !(self.hbo2 >= 0.0 && self.hb >= 0.0) {
            return Err(Error::InvalidParameter("concentrations must be non-negative".into()));
        }
        let sizes_ok = match self.shape {
            Shape::Disc { radius_mm } => radius_mm > 0.0,
            Shape::Ellipse {
                semi_major_mm,
                semi_minor_mm,
                angle_deg,
            } => semi_major_mm > 0.0 && semi_minor_mm > 0.0 && angle_deg.is_finite(),
        };
        if !sizes_ok {
            return Err(Error::InvalidParameter("primitive sizes must be positive".into()));
        }
        if self.path.is_empty() || self.path.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("primitive path needs finite knots".into()));
        }
        if self.path.windows(2).any(|w| w[1][0] <= w[0][0]) {
            return Err(Error::InvalidParameter("path knots must have increasing z".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChromophorePhantom {
    pub z_min_mm: f64,
    pub z_max_mm: f64,
    /// Background `(C_HbO2, C_Hb)` added everywhere.
    #[serde(default)]
    pub background: [f64; 2],
    #[serde(rename = "primitive", default)]
    pub primitives: Vec<Primitive>,
}

/// Concentration maps of one slice.
#[derive(Debug, Clone, PartialEq)]
pub struct ConcentrationMaps {
    pub hbo2: Image,
    pub hb: Image,
}

impl ChromophorePhantom {
    pub fn validate(&self) -> Result<()> {
        if !(self.z_max_mm >= self.z_min_mm) {
            return Err(Error::InvalidParameter("phantom axial extent is empty".into()));
        }
        if !(self.background[0] >= 0.0 && self.background[1] >= 0.0) {
            return Err(Error::InvalidParameter(
                "background concentrations must be non-negative".into(),
            ));
        }
        self.primitives.iter().try_for_each(Primitive::validate)
    }

    /// Default family: a weakly absorbing body disc and `num_tubes` vessels
    /// whose centres wander at most `max_slope` mm per mm of depth.
    pub fn default_family(seed: u64, num_tubes: usize, max_slope: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (z_min, z_max) = (0.0, 80.0);
        let knot_z: Vec<f64> = (0..=8).map(|k| 10.0 * k as f64).collect();
        let mut primitives = vec![Primitive {
            shape: Shape::Ellipse {
                semi_major_mm: 10.5,
                semi_minor_mm: 9.0,
                angle_deg: 20.0,
            },
            path: vec![[0.0, 0.0, 0.0]],
            hbo2: 0.12,
            hb: 0.08,
        }];
        for _ in 0..num_tubes {
            let radius = rng.gen_range(0.5..2.0);
            let r = rng.gen_range(0.0..(7.5 - radius));
            let a = rng.gen_range(0.0..std::f64::consts::TAU);
            let (mut x, mut y) = (r * a.cos(), r * a.sin());
            let mut path = vec![[knot_z[0], x, y]];
            for pair in knot_z.windows(2) {
                let dz = pair[1] - pair[0];
                let step = rng.gen_range(0.0..max_slope * dz);
                let dir = rng.gen_range(0.0..std::f64::consts::TAU);
                let (nx, ny) = (x + step * dir.cos(), y + step * dir.sin());
                // stay inside the body
                if nx.hypot(ny) + radius < 8.5 {
                    x = nx;
                    y = ny;
                }
                path.push([pair[1], x, y]);
            }
            primitives.push(Primitive {
                shape: Shape::Disc { radius_mm: radius },
                path,
                hbo2: rng.gen_range(0.0..1.0),
                hb: rng.gen_range(0.0..1.0),
            });
        }
        ChromophorePhantom {
            z_min_mm: z_min,
            z_max_mm: z_max,
            background: [0.0, 0.0],
            primitives,
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let p: Self = toml::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
        p.validate()?;
        Ok(p)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    fn check_slice(&self, z: f64, grid: &GridSpec) -> Result<()> {
        if !(z >= self.z_min_mm - 1e-9 && z <= self.z_max_mm + 1e-9) {
            return Err(Error::Domain(z, self.z_max_mm));
        }
        let half = grid.fov_mm / 2.0;
        for p in &self.primitives {
            let (cx, cy) = p.center(z);
            let e = p.shape.extent();
            if cx.abs() + e > half || cy.abs() + e > half {
                return Err(Error::InvalidGeometry(format!(
                    "primitive centred at ({cx:.2}, {cy:.2}) mm extends outside the field of view at z = {z}"
                )));
            }
        }
        Ok(())
    }

    /// Anti-aliased concentration maps (2x2 subpixel samples per pixel).
    pub fn concentrations(&self, z: f64, grid: &GridSpec) -> Result<ConcentrationMaps> {
        grid.validate()?;
        self.check_slice(z, grid)?;
        let mut hbo2 = Image::from_vec(*grid, vec![self.background[0]; grid.len()])?;
        let mut hb = Image::from_vec(*grid, vec![self.background[1]; grid.len()])?;
        let px = grid.pixel_mm();
        let offsets = [-0.25 * px, 0.25 * px];
        for p in &self.primitives {
            let (cx, cy) = p.center(z);
            let reach = p.shape.extent() + px;
            for row in 0..grid.side {
                for col in 0..grid.side {
                    let (x, y) = grid.pixel_center(row, col);
                    if (x - cx).abs() > reach || (y - cy).abs() > reach {
                        continue;
                    }
                    let mut hits = 0;
                    for oy in offsets {
                        for ox in offsets {
                            if p.shape.contains(x + ox - cx, y + oy - cy) {
                                hits += 1;
                            }
                        }
                    }
                    if hits > 0 {
                        let f = hits as f64 / 4.0;
                        let i = row * grid.side + col;
                        hbo2.data[i] += f * p.hbo2;
                        hb.data[i] += f * p.hb;
                    }
                }
            }
        }
        Ok(ConcentrationMaps { hbo2, hb })
    }

    /// Initial pressure of slice `z` at one wavelength.
    pub fn render_slice(&self, z: f64, wavelength_nm: f64, lib: &SpectralLibrary, grid: &GridSpec) -> Result<Image> {
        let (ea, eb) = lib.extinction(wavelength_nm)?;
        let maps = self.concentrations(z, grid)?;
        Ok(mix(&maps, ea, eb))
    }
}

fn mix(maps: &ConcentrationMaps, ea: f64, eb: f64) -> Image {
    Image {
        grid: maps.hbo2.grid,
        data: maps
            .hbo2
            .data
            .iter()
            .zip(&maps.hb.data)
            .map(|(a, b)| ea * a + eb * b)
            .collect(),
    }
}

/// Simulated measurements of a spiral scan.
#[derive(Debug, Clone)]
pub struct Acquisition {
    /// One sparse sinogram per schedule record, in slice order.
    pub sparse: Vec<Sinogram>,
    /// Dense reference per slice, one sinogram per wavelength.
    pub dense: Option<Vec<Vec<Sinogram>>>,
}

/// Renders every scheduled slice and projects it with the sparse ring
/// rotated by the slice's rotation angle. With `dense` set, every slice is
/// additionally measured at all wavelengths with the unrotated dense ring.
pub fn acquire_u3s(
    phantom: &ChromophorePhantom,
    schedule: &SpiralSchedule,
    sparse: &RingGeometry,
    dense: Option<&RingGeometry>,
    lib: &SpectralLibrary,
    grid: &GridSpec,
    time: &TimeGrid,
) -> Result<Acquisition> {
    phantom.validate()?;
    sparse.validate()?;
    let sparse_sinos = schedule
        .records
        .par_iter()
        .map(|rec| {
            let img = phantom.render_slice(rec.z_mm, rec.wavelength_nm, lib, grid)?;
            let mut s = forward_project(&img, &sparse.rotated(rec.theta_deg), time)?;
            s.wavelength_nm = rec.wavelength_nm;
            s.slice_index = rec.slice_index;
            Ok(s)
        })
        .collect::<Result<Vec<_>>>()?;
    let dense_sinos = match dense {
        None => None,
        Some(geo) => {
            geo.validate()?;
            Some(
                schedule
                    .records
                    .par_iter()
                    .map(|rec| {
                        dense_slice(
                            phantom,
                            rec.z_mm,
                            rec.slice_index,
                            &schedule.wavelengths_nm,
                            geo,
                            lib,
                            grid,
                            time,
                        )
                    })
                    .collect::<Result<Vec<_>>>()?,
            )
        }
    };
    Ok(Acquisition {
        sparse: sparse_sinos,
        dense: dense_sinos,
    })
}

/// All-wavelength measurement of one slice with a fixed ring.
#[allow(clippy::too_many_arguments)]
pub fn dense_slice(
    phantom: &ChromophorePhantom,
    z: f64,
    slice_index: usize,
    wavelengths_nm: &[f64],
    geometry: &RingGeometry,
    lib: &SpectralLibrary,
    grid: &GridSpec,
    time: &TimeGrid,
) -> Result<Vec<Sinogram>> {
    let maps = phantom.concentrations(z, grid)?;
    wavelengths_nm
        .iter()
        .map(|&w| {
            let (ea, eb) = lib.extinction(w)?;
            let mut s = forward_project(&mix(&maps, ea, eb), geometry, time)?;
            s.wavelength_nm = w;
            s.slice_index = slice_index;
            Ok(s)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_spiral_schedule, DEFAULT_WAVELENGTHS_NM};
    use crate::physics::make_time_grid;
    use nalgebra::DMatrix;

    fn grid() -> GridSpec {
        GridSpec::new(48, 25.4).unwrap()
    }

    fn single_disc(hbo2: f64, hb: f64) -> ChromophorePhantom {
        ChromophorePhantom {
            z_min_mm: 0.0,
            z_max_mm: 10.0,
            background: [0.0, 0.0],
            primitives: vec![Primitive {
                shape: Shape::Disc { radius_mm: 4.0 },
                path: vec![[0.0, 0.0, 0.0], [10.0, 5.0, 0.0]],
                hbo2,
                hb,
            }],
        }
    }

    #[test]
    fn synthetic_library_matches_default_values() {
        let lib = SpectralLibrary::synthetic(&DEFAULT_WAVELENGTHS_NM).unwrap();
        assert_eq!(lib.eps_hbo2, vec![0.2, 0.4, 0.6, 0.8, 1.0]);
        assert_eq!(lib.eps_hb, vec![1.0, 0.8, 0.6, 0.4, 0.2]);
        assert!(lib.condition_number().is_finite());
        assert!(matches!(lib.extinction(905.0), Err(Error::UnknownWavelength(_))));
    }

    #[test]
    fn library_table_round_trip() {
        let lib = SpectralLibrary::synthetic(&DEFAULT_WAVELENGTHS_NM).unwrap();
        assert_eq!(SpectralLibrary::from_table(&lib.to_table()).unwrap(), lib);
        assert!(SpectralLibrary::from_table("700 1 0\n").is_err());
        assert!(SpectralLibrary::from_table("700 1\n").is_err());
    }

    #[test]
    fn dependent_columns_have_infinite_condition() {
        assert_eq!(condition_number(&[[1.0, 2.0], [2.0, 4.0]]), f64::INFINITY);
        assert!((condition_number(&[[1.0, 0.0], [0.0, 1.0]]) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_concentrations_render_zero() {
        let lib = SpectralLibrary::synthetic(&DEFAULT_WAVELENGTHS_NM).unwrap();
        let img = single_disc(0.0, 0.0).render_slice(2.0, 700.0, &lib, &grid()).unwrap();
        assert!(img.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn disc_renders_extinction_inside() {
        let lib = SpectralLibrary::synthetic(&DEFAULT_WAVELENGTHS_NM).unwrap();
        let g = grid();
        let img = single_disc(1.0, 0.0).render_slice(0.0, 760.0, &lib, &g).unwrap();
        let centre = img.at(24, 24);
        assert_eq!(centre, 0.6);
        assert_eq!(img.at(0, 0), 0.0);
        assert!(img.data.iter().all(|&v| v == 0.0 || v <= 0.6));
    }

    #[test]
    fn straight_tube_shifts_by_slope() {
        // slope 0.5 mm/mm, 0.5 mm step, pixel 25.4/48 mm: compare centroids
        let g = grid();
        let ph = single_disc(1.0, 0.0);
        let centroid = |z: f64| {
            let m = ph.concentrations(z, &g).unwrap().hbo2;
            let (mut sx, mut s) = (0.0, 0.0);
            for r in 0..g.side {
                for c in 0..g.side {
                    let v = m.at(r, c);
                    sx += v * g.pixel_center(r, c).0;
                    s += v;
                }
            }
            sx / s
        };
        let shift = centroid(2.5) - centroid(2.0);
        assert!((shift - 0.25).abs() < 0.05, "shift {shift}");
    }

    #[test]
    fn wavelength_stack_has_rank_two() {
        let lib = SpectralLibrary::synthetic(&DEFAULT_WAVELENGTHS_NM).unwrap();
        let g = grid();
        let ph = ChromophorePhantom::default_family(3, 8, 0.15);
        let cols: Vec<Vec<f64>> = DEFAULT_WAVELENGTHS_NM
            .iter()
            .map(|&w| ph.render_slice(4.0, w, &lib, &g).unwrap().data)
            .collect();
        let m = DMatrix::from_fn(g.len(), cols.len(), |i, j| cols[j][i]);
        let sv = m.singular_values();
        let mut s: Vec<f64> = sv.iter().copied().collect();
        s.sort_by(|a, b| b.partial_cmp(a).unwrap());
        assert!(s[2] / s[0] < 1e-10, "{s:?}");
        assert!(s[1] / s[0] > 1e-3);
    }

    #[test]
    fn slice_correlation_decreases_with_distance() {
        let lib = SpectralLibrary::synthetic(&DEFAULT_WAVELENGTHS_NM).unwrap();
        let g = GridSpec::new(64, 25.4).unwrap();
        let ph = ChromophorePhantom::default_family(0, 8, 0.15);
        let base = ph.render_slice(5.0, 800.0, &lib, &g).unwrap();
        let corr = |img: &Image| {
            let n = img.data.len() as f64;
            let (ma, mb) = (base.data.iter().sum::<f64>() / n, img.data.iter().sum::<f64>() / n);
            let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
            for (a, b) in base.data.iter().zip(&img.data) {
                ab += (a - ma) * (b - mb);
                aa += (a - ma) * (a - ma);
                bb += (b - mb) * (b - mb);
            }
            ab / (aa * bb).sqrt()
        };
        let mut last = 1.0 + 1e-12;
        for dz in [0.0, 0.5, 1.0, 2.0, 4.0, 8.0] {
            let c = corr(&ph.render_slice(5.0 + dz, 800.0, &lib, &g).unwrap());
            assert!(c <= last, "dz {dz}: {c} > {last}");
            last = c;
        }
    }

    #[test]
    fn default_family_is_deterministic_and_bounded() {
        let a = ChromophorePhantom::default_family(11, 8, 0.15);
        assert_eq!(a, ChromophorePhantom::default_family(11, 8, 0.15));
        assert_eq!(a.primitives.len(), 9);
        a.validate().unwrap();
        for p in &a.primitives[1..] {
            for pair in p.path.windows(2) {
                let d = (pair[1][1] - pair[0][1]).hypot(pair[1][2] - pair[0][2]);
                // at most 0.3 mm lateral drift per 0.5 mm of depth
                assert!(d / (pair[1][0] - pair[0][0]) <= 0.6);
            }
        }
    }

    #[test]
    fn toml_round_trip() {
        let a = ChromophorePhantom::default_family(2, 3, 0.15);
        let text = a.to_toml().unwrap();
        assert!(text.contains("kind = \"disc\""));
        assert_eq!(ChromophorePhantom::from_toml(&text).unwrap(), a);
        assert!(ChromophorePhantom::from_toml("z_min_mm = 1\nz_max_mm = 0\n").is_err());
    }

    #[test]
    fn out_of_extent_slice_is_rejected() {
        let lib = SpectralLibrary::synthetic(&DEFAULT_WAVELENGTHS_NM).unwrap();
        assert!(single_disc(1.0, 0.0).render_slice(11.0, 700.0, &lib, &grid()).is_err());
    }

    #[test]
    fn acquisition_follows_schedule() {
        let lib = SpectralLibrary::synthetic(&DEFAULT_WAVELENGTHS_NM).unwrap();
        let g = GridSpec::new(24, 25.4).unwrap();
        let sparse = RingGeometry::new(40.5, 270.0, 4).unwrap();
        let dense = RingGeometry::new(40.5, 270.0, 8).unwrap();
        let time = make_time_grid(&sparse, &g, 1536.0, 40e6).unwrap();
        let sched = build_spiral_schedule(5, 1.0, 0.0, &DEFAULT_WAVELENGTHS_NM, 13.5).unwrap();
        let ph = ChromophorePhantom::default_family(1, 4, 0.15);
        let acq = acquire_u3s(&ph, &sched, &sparse, Some(&dense), &lib, &g, &time).unwrap();
        assert_eq!(acq.sparse.len(), 5);
        for (i, s) in acq.sparse.iter().enumerate() {
            assert_eq!(s.wavelength_nm, DEFAULT_WAVELENGTHS_NM[i]);
            assert_eq!(s.slice_index, i + 1);
            assert_eq!(s.geometry.rotation_deg, (i + 1) as f64 * 13.5);
        }
        let dense = acq.dense.unwrap();
        assert_eq!(dense.len(), 5);
        assert!(dense.iter().all(|d| d.len() == 5 && d[0].num_detectors() == 8));
        // zero slice spacing: identical dense data on every slice
        assert_eq!(dense[0][2].samples, dense[4][2].samples);
    }
}
