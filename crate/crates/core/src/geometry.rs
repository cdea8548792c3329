//! Ring-array detector geometry and the spiral acquisition schedule.
//!
//! A sparse ring of `Nd` elements with pitch `phi = arc / Nd` is rotated by
//! `dtheta = phi / W` and translated by `dz` at every wavelength switch.
//! Slice `m` (1-based) is acquired at wavelength index `(m - 1) mod W + 1`
//! with rotation `theta_m = m * dtheta`. Over any `W` consecutive slices the
//! union of element positions fills the arc with pitch `phi / W`.
//!
//! Angles are kept in degrees here; numeric kernels convert to radians.

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Tolerance, in degrees, for deciding whether two angles coincide.
pub const ANGLE_TOLERANCE_DEG: f64 = 1e-9;

/// Ring radius of the reference 128-element system, in millimetres.
pub const DEFAULT_RING_RADIUS_MM: f64 = 40.5;

/// Angular span populated by elements, in degrees.
pub const DEFAULT_ARC_DEG: f64 = 270.0;

/// Excitation wavelengths of the reference protocol, in nanometres.
pub const DEFAULT_WAVELENGTHS_NM: [f64; 5] = [700.0, 730.0, 760.0, 800.0, 850.0];

#[derive(Debug, Clone, PartialEq)]
pub struct RingGeometry {
    pub ring_radius_mm: f64,
    pub arc_deg: f64,
    pub num_elements: usize,
    pub rotation_deg: f64,
}

impl RingGeometry {
    pub fn new(ring_radius_mm: f64, arc_deg: f64, num_elements: usize) -> Result<Self> {
        let geometry = RingGeometry {
            ring_radius_mm,
            arc_deg,
            num_elements,
            rotation_deg: 0.0,
        };
        geometry.validate()?;
        Ok(geometry)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.ring_radius_mm > 0.0) || !self.ring_radius_mm.is_finite() {
            return Err(Error::InvalidGeometry(format!(
                "ring radius must be positive, got {}",
                self.ring_radius_mm
            )));
        }
        if !self.rotation_deg.is_finite() {
            return Err(Error::InvalidGeometry("rotation offset is not finite".into()));
        }
        angular_pitch(self.arc_deg, self.num_elements).map(|_| ())
    }

    /// Same ring rotated to an absolute offset `theta_deg`.
    pub fn rotated(&self, theta_deg: f64) -> Self {
        RingGeometry {
            rotation_deg: theta_deg,
            ..self.clone()
        }
    }

    pub fn pitch_deg(&self) -> f64 {
        self.arc_deg / self.num_elements as f64
    }

    /// Element angles before rotation: `k * phi` for `k = 0..Nd`.
    pub fn base_angles(&self) -> Vec<f64> {
        let pitch = self.pitch_deg();
        (0..self.num_elements).map(|k| k as f64 * pitch).collect()
    }

    /// Element angles including this geometry's own rotation offset.
    pub fn angles_deg(&self) -> Vec<f64> {
        effective_angles(self, self.rotation_deg)
    }

    /// Element positions `(x, y)` in millimetres, ring centred at the origin.
    pub fn element_positions(&self) -> Vec<(f64, f64)> {
        self.angles_deg()
            .into_iter()
            .map(|a| {
                let rad = a.to_radians();
                (self.ring_radius_mm * rad.cos(), self.ring_radius_mm * rad.sin())
            })
            .collect()
    }
}

/// Angle between adjacent elements: `arc / Nd`.
pub fn angular_pitch(arc_deg: f64, num_elements: usize) -> Result<f64> {
    if num_elements == 0 {
        return Err(Error::InvalidGeometry("element count must be at least 1".into()));
    }
    if !(arc_deg > 0.0 && arc_deg <= 360.0) {
        return Err(Error::InvalidGeometry(format!(
            "arc coverage must lie in (0, 360], got {arc_deg}"
        )));
    }
    Ok(arc_deg / num_elements as f64)
}

/// Rotation applied at each wavelength switch: `phi / W`.
pub fn rotation_step(pitch_deg: f64, num_wavelengths: usize) -> Result<f64> {
    if num_wavelengths == 0 {
        return Err(Error::InvalidParameter(
            "number of wavelengths must be at least 1".into(),
        ));
    }
    Ok(pitch_deg / num_wavelengths as f64)
}

/// Reduce an angle to `[0, 360)`.
pub fn wrap_deg(angle: f64) -> f64 {
    let a = angle.rem_euclid(360.0);
    // rem_euclid can return 360.0 for tiny negative inputs
    if a >= 360.0 {
        0.0
    } else {
        a
    }
}

/// `base_angles + theta`, each reduced modulo 360.
pub fn effective_angles(geometry: &RingGeometry, theta_deg: f64) -> Vec<f64> {
    geometry
        .base_angles()
        .into_iter()
        .map(|a| wrap_deg(a + theta_deg))
        .collect()
}

/// Sorts the angles and merges those closer than `tol` on the circle.
pub fn distinct_angles(angles: &[f64], tol: f64) -> Vec<f64> {
    let mut sorted: Vec<f64> = angles.iter().map(|&a| wrap_deg(a)).collect();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let mut out: Vec<f64> = Vec::with_capacity(sorted.len());
    for a in sorted {
        match out.last() {
            Some(&last) if a - last <= tol => {}
            _ => out.push(a),
        }
    }
    if out.len() > 1 {
        let first = out[0];
        let last = out[out.len() - 1];
        if first + 360.0 - last <= tol {
            out.pop();
        }
    }
    out
}

/// Element-count ratio and overall data ratio of spiral sparse sampling.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplingRate {
    /// `r = Nd_sparse / Nd_dense`.
    pub element_ratio: f64,
    /// `r / W`.
    pub total: f64,
}

pub fn sampling_rate(nd_sparse: usize, nd_dense: usize, num_wavelengths: usize) -> Result<SamplingRate> {
    if nd_sparse == 0 || nd_dense == 0 || num_wavelengths == 0 {
        return Err(Error::InvalidParameter("sampling counts must be at least 1".into()));
    }
    let element_ratio = nd_sparse as f64 / nd_dense as f64;
    Ok(SamplingRate {
        element_ratio,
        total: element_ratio / num_wavelengths as f64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleRecord {
    /// 1-based slice index `m`.
    pub slice_index: usize,
    pub z_mm: f64,
    /// 1-based wavelength index `omega`.
    pub wavelength_index: usize,
    pub wavelength_nm: f64,
    pub theta_deg: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpiralSchedule {
    pub wavelengths_nm: Vec<f64>,
    pub slice_spacing_mm: f64,
    pub rotation_step_deg: f64,
    pub records: Vec<ScheduleRecord>,
}

/// Wavelength index acquired at slice `m`: `(m - 1) mod W + 1`.
pub fn wavelength_index(slice_index: usize, num_wavelengths: usize) -> usize {
    (slice_index - 1) % num_wavelengths + 1
}

pub fn build_spiral_schedule(
    num_slices: usize,
    z_first_mm: f64,
    slice_spacing_mm: f64,
    wavelengths_nm: &[f64],
    rotation_step_deg: f64,
) -> Result<SpiralSchedule> {
    if wavelengths_nm.is_empty() {
        return Err(Error::InvalidParameter("wavelength list is empty".into()));
    }
    if num_slices == 0 {
        return Err(Error::InvalidParameter("number of slices must be at least 1".into()));
    }
    if !slice_spacing_mm.is_finite() || slice_spacing_mm < 0.0 {
        return Err(Error::InvalidParameter(format!(
            "slice spacing must be finite and non-negative, got {slice_spacing_mm}"
        )));
    }
    let w = wavelengths_nm.len();
    let records = (1..=num_slices)
        .map(|m| {
            let omega = wavelength_index(m, w);
            ScheduleRecord {
                slice_index: m,
                z_mm: z_first_mm + (m - 1) as f64 * slice_spacing_mm,
                wavelength_index: omega,
                wavelength_nm: wavelengths_nm[omega - 1],
                theta_deg: m as f64 * rotation_step_deg,
            }
        })
        .collect();
    Ok(SpiralSchedule {
        wavelengths_nm: wavelengths_nm.to_vec(),
        slice_spacing_mm,
        rotation_step_deg,
        records,
    })
}

/// Offsets `k` of the neighbouring slices used for a window of `W` slices:
/// `{1 - (W+1)/2, ..., W - (W+1)/2} \ {0}`. Requires odd `W`.
pub fn neighbor_offsets(num_wavelengths: usize) -> Result<Vec<isize>> {
    if num_wavelengths == 0 || num_wavelengths % 2 == 0 {
        return Err(Error::InvalidParameter(format!(
            "slice window needs an odd wavelength count, got {num_wavelengths}"
        )));
    }
    let half = ((num_wavelengths + 1) / 2) as isize;
    Ok((1..=num_wavelengths as isize)
        .map(|i| i - half)
        .filter(|&k| k != 0)
        .collect())
}

impl SpiralSchedule {
    pub fn num_slices(&self) -> usize {
        self.records.len()
    }

    pub fn num_wavelengths(&self) -> usize {
        self.wavelengths_nm.len()
    }

    /// Record for 1-based slice index `m`.
    pub fn record(&self, m: usize) -> Result<&ScheduleRecord> {
        if m == 0 || m > self.records.len() {
            return Err(Error::Schedule(format!("slice {m} outside 1..={}", self.records.len())));
        }
        Ok(&self.records[m - 1])
    }

    /// 1-based slice indices of the `W`-slice window centred on `m`.
    pub fn window(&self, m: usize) -> Result<Vec<usize>> {
        let w = self.num_wavelengths();
        let offsets = neighbor_offsets(w)?;
        let half = w / 2;
        if m <= half || m + half > self.records.len() {
            return Err(Error::Window(format!(
                "slice {m} needs neighbours {}..={} but schedule has slices 1..={}",
                m as isize - half as isize,
                m + half,
                self.records.len()
            )));
        }
        let mut slices: Vec<usize> = offsets
            .iter()
            .map(|&k| (m as isize + k) as usize)
            .chain(std::iter::once(m))
            .collect();
        slices.sort_unstable();
        Ok(slices)
    }

    /// Offset `k` such that slice `m + k` of the window carries wavelength
    /// index `omega`; `0` when slice `m` itself does.
    pub fn offset_for_wavelength(&self, m: usize, omega: usize) -> Result<isize> {
        for s in self.window(m)? {
            if self.records[s - 1].wavelength_index == omega {
                return Ok(s as isize - m as isize);
            }
        }
        Err(Error::Schedule(format!(
            "wavelength index {omega} absent from window around slice {m}"
        )))
    }

    /// Line-oriented table: `m z_mm wavelength_nm theta_deg`.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# U3S spiral schedule");
        let _ = writeln!(
            out,
            "# wavelengths={} slice_spacing_mm={} rotation_step_deg={:.6}",
            self.num_wavelengths(),
            self.slice_spacing_mm,
            self.rotation_step_deg
        );
        let _ = writeln!(out, "# m z_mm wavelength_nm theta_deg");
        for r in &self.records {
            let _ = writeln!(
                out,
                "{} {:.6} {} {:.6}",
                r.slice_index, r.z_mm, r.wavelength_nm, r.theta_deg
            );
        }
        out
    }

    /// Parses a table written by [`SpiralSchedule::to_table`].
    pub fn from_table(text: &str) -> Result<Self> {
        let mut rows: Vec<(usize, f64, f64, f64)> = Vec::new();
        for (line_no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = line.split_whitespace().collect();
            if cols.len() != 4 {
                return Err(Error::Format(format!(
                    "schedule line {}: expected 4 columns, got {}",
                    line_no + 1,
                    cols.len()
                )));
            }
            let parse = |s: &str| -> Result<f64> {
                s.parse::<f64>()
                    .map_err(|e| Error::Format(format!("schedule line {}: {e}", line_no + 1)))
            };
            let m = cols[0]
                .parse::<usize>()
                .map_err(|e| Error::Format(format!("schedule line {}: {e}", line_no + 1)))?;
            rows.push((m, parse(cols[1])?, parse(cols[2])?, parse(cols[3])?));
        }
        if rows.is_empty() {
            return Err(Error::Format("schedule table has no rows".into()));
        }
        // wavelengths in first-appearance order define the cycle
        let mut wavelengths: Vec<f64> = Vec::new();
        for &(_, _, wl, _) in &rows {
            if wavelengths.contains(&wl) {
                break;
            }
            wavelengths.push(wl);
        }
        let spacing = if rows.len() > 1 { rows[1].1 - rows[0].1 } else { 0.0 };
        let step = rows[0].3 / rows[0].0 as f64;
        let schedule = build_spiral_schedule(rows.len(), rows[0].1, spacing, &wavelengths, step)?;
        for (rec, &(m, z, wl, th)) in schedule.records.iter().zip(&rows) {
            if rec.slice_index != m
                || (rec.z_mm - z).abs() > 1e-5
                || rec.wavelength_nm != wl
                || (rec.theta_deg - th).abs() > 1e-5
            {
                return Err(Error::Format(format!(
                    "schedule row for slice {m} is inconsistent with a spiral schedule"
                )));
            }
        }
        Ok(schedule)
    }
}
