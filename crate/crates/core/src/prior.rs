//! Structural prior from the interlaced sinograms of a slice window.

use crate::error::{Error, Result};
use crate::geometry::{distinct_angles, SpiralSchedule, ANGLE_TOLERANCE_DEG};
use crate::image::{GridSpec, Image};
use crate::io::ImageMeta;
use crate::physics::{ubp_reconstruct, Sinogram};

/// The `W` sinograms of a window, each keeping its own rotated ring.
#[derive(Debug, Clone)]
pub struct FusedWindow {
    pub center: usize,
    pub slices: Vec<usize>,
    pub sinograms: Vec<Sinogram>,
    /// Sorted distinct effective detector angles over the window.
    pub angles_deg: Vec<f64>,
}

impl FusedWindow {
    pub fn num_angles(&self) -> usize {
        self.angles_deg.len()
    }
}

/// Collects the window around slice `m`. `sinos[s - 1]` must be the
/// measurement of slice `s` with the ring rotated by that slice's angle.
pub fn fuse_window(sinos: &[Sinogram], schedule: &SpiralSchedule, m: usize) -> Result<FusedWindow> {
    if sinos.len() != schedule.num_slices() {
        return Err(Error::DimensionMismatch(format!(
            "{} sinograms for a schedule of {} slices",
            sinos.len(),
            schedule.num_slices()
        )));
    }
    let slices = schedule.window(m)?;
    let mut sinograms = Vec::with_capacity(slices.len());
    let mut all = Vec::new();
    let mut expected = 0;
    for &s in &slices {
        let sino = &sinos[s - 1];
        sino.check()?;
        let rec = schedule.record(s)?;
        if (sino.geometry.rotation_deg - rec.theta_deg).abs() > ANGLE_TOLERANCE_DEG {
            return Err(Error::Schedule(format!(
                "slice {s} measured at {} deg, schedule says {} deg",
                sino.geometry.rotation_deg, rec.theta_deg
            )));
        }
        all.extend(sino.geometry.angles_deg());
        expected += sino.num_detectors();
        sinograms.push(sino.clone());
    }
    let angles_deg = distinct_angles(&all, ANGLE_TOLERANCE_DEG);
    if angles_deg.len() != expected {
        return Err(Error::InvalidGeometry(format!(
            "window around slice {m} has {} distinct detector angles, expected {expected}",
            angles_deg.len()
        )));
    }
    Ok(FusedWindow {
        center: m,
        slices,
        sinograms,
        angles_deg,
    })
}

/// Back-projects every fused sinogram onto one image and rescales it to
/// `[0, 1]`.
pub fn make_prior(fused: &FusedWindow, grid: &GridSpec) -> Result<Image> {
    let refs: Vec<&Sinogram> = fused.sinograms.iter().collect();
    Ok(ubp_reconstruct(&refs, grid)?.normalized())
}

/// Provenance fields stored with a prior image.
pub fn prior_meta(fused: &FusedWindow, slice_spacing_mm: f64) -> ImageMeta {
    vec![
        ("window_center".into(), fused.center as f64),
        ("slice_spacing_mm".into(), slice_spacing_mm),
        ("num_elements".into(), fused.sinograms[0].num_detectors() as f64),
        ("num_wavelengths".into(), fused.sinograms.len() as f64),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_spiral_schedule, rotation_step, RingGeometry, DEFAULT_WAVELENGTHS_NM};
    use crate::phantom::{acquire_u3s, ChromophorePhantom, SpectralLibrary};
    use crate::physics::{forward_project, make_time_grid, TimeGrid};

    struct Setup {
        grid: GridSpec,
        ring: RingGeometry,
        time: TimeGrid,
        schedule: SpiralSchedule,
    }

    fn setup(nd: usize, slices: usize, dz: f64, wavelengths: &[f64]) -> Setup {
        let grid = GridSpec::new(32, 25.4).unwrap();
        let ring = RingGeometry::new(40.5, 270.0, nd).unwrap();
        let time = make_time_grid(&ring, &grid, 1536.0, 40e6).unwrap();
        let step = rotation_step(ring.pitch_deg(), wavelengths.len()).unwrap();
        let schedule = build_spiral_schedule(slices, 2.0, dz, wavelengths, step).unwrap();
        Setup {
            grid,
            ring,
            time,
            schedule,
        }
    }

    fn acquire(s: &Setup, ph: &ChromophorePhantom) -> Vec<Sinogram> {
        let lib = SpectralLibrary::synthetic(&s.schedule.wavelengths_nm).unwrap();
        acquire_u3s(ph, &s.schedule, &s.ring, None, &lib, &s.grid, &s.time)
            .unwrap()
            .sparse
    }

    #[test]
    fn window_of_21_elements_covers_105_angles() {
        let s = setup(21, 7, 0.5, &DEFAULT_WAVELENGTHS_NM);
        let sinos: Vec<Sinogram> = s
            .schedule
            .records
            .iter()
            .map(|r| Sinogram::zeros(s.ring.rotated(r.theta_deg), s.time))
            .collect();
        let fused = fuse_window(&sinos, &s.schedule, 4).unwrap();
        assert_eq!(fused.num_angles(), 105);
        assert_eq!(fused.slices, vec![2, 3, 4, 5, 6]);
        assert!(matches!(fuse_window(&sinos, &s.schedule, 1), Err(Error::Window(_))));
        assert!(matches!(fuse_window(&sinos, &s.schedule, 6), Err(Error::Window(_))));
    }

    #[test]
    fn repeated_angles_are_rejected() {
        let s = setup(8, 5, 0.5, &DEFAULT_WAVELENGTHS_NM);
        let mut schedule = s.schedule.clone();
        for r in &mut schedule.records {
            r.theta_deg = 0.0;
        }
        let sinos: Vec<Sinogram> = (0..5).map(|_| Sinogram::zeros(s.ring.clone(), s.time)).collect();
        assert!(matches!(
            fuse_window(&sinos, &schedule, 3),
            Err(Error::InvalidGeometry(_))
        ));
    }

    #[test]
    fn single_wavelength_window_is_the_slice_itself() {
        let s = setup(8, 3, 0.5, &[800.0]);
        let ph = ChromophorePhantom::default_family(0, 4, 0.15);
        let sinos = acquire(&s, &ph);
        let fused = fuse_window(&sinos, &s.schedule, 2).unwrap();
        assert_eq!(fused.sinograms.len(), 1);
        assert_eq!(fused.sinograms[0], sinos[1]);
    }

    #[test]
    fn identical_slices_give_the_dense_reconstruction() {
        let s = setup(8, 5, 0.0, &[800.0, 800.0, 800.0, 800.0, 800.0]);
        let ph = ChromophorePhantom::default_family(0, 4, 0.15);
        let sinos = acquire(&s, &ph);
        let prior = make_prior(&fuse_window(&sinos, &s.schedule, 3).unwrap(), &s.grid).unwrap();
        // one ring carrying all 40 interlaced angles, in window order
        let lib = SpectralLibrary::synthetic(&s.schedule.wavelengths_nm).unwrap();
        let img = ph.render_slice(2.0, 800.0, &lib, &s.grid).unwrap();
        let dense: Vec<Sinogram> = (1..=5)
            .map(|m| forward_project(&img, &s.ring.rotated(s.schedule.record(m).unwrap().theta_deg), &s.time).unwrap())
            .collect();
        let refs: Vec<&Sinogram> = dense.iter().collect();
        let expected = ubp_reconstruct(&refs, &s.grid).unwrap().normalized();
        let err = prior
            .data
            .iter()
            .zip(&expected.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-12, "{err}");
    }

    #[test]
    fn prior_is_normalised_and_tolerates_a_zeroed_sinogram() {
        let s = setup(8, 5, 0.5, &DEFAULT_WAVELENGTHS_NM);
        let ph = ChromophorePhantom::default_family(0, 4, 0.15);
        let mut sinos = acquire(&s, &ph);
        sinos[1].samples.iter_mut().for_each(|v| *v = 0.0);
        let fused = fuse_window(&sinos, &s.schedule, 3).unwrap();
        let prior = make_prior(&fused, &s.grid).unwrap();
        let (lo, hi) = prior.min_max();
        assert_eq!((lo, hi), (0.0, 1.0));
        let meta = prior_meta(&fused, 0.5);
        assert_eq!(meta[0], ("window_center".to_string(), 3.0));
    }
}
