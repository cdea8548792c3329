//! End-to-end experiments: dense reference, sparse baseline, spiral
//! reconstruction with and without the prior, unmixing and sweeps.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::geometry::{RingGeometry, SpiralSchedule};
use crate::image::{GridSpec, Image};
use crate::inr::{embed_prior, reconstruct_slice, CoordinateNetwork, Measurement, Reconstruction, Trained};
use crate::metrics::{dice, normalized_scores, MetricRow};
use crate::phantom::{acquire_u3s, dense_slice, ChromophorePhantom, SpectralLibrary};
use crate::physics::{ubp_reconstruct, ForwardOperator, Sinogram, TimeGrid};
use crate::prior::{fuse_window, make_prior, FusedWindow};
use crate::unmix::{threshold_mask, unmix_with_library, Unmixed};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Dense,
    Sparse,
    Spiral,
    SpiralNoPrior,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Dense, Method::Sparse, Method::Spiral, Method::SpiralNoPrior];

    pub fn name(self) -> &'static str {
        match self {
            Method::Dense => "ds",
            Method::Sparse => "ss",
            Method::Spiral => "u3s",
            Method::SpiralNoPrior => "u3s-noprior",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}; expected ds, ss, u3s or u3s-noprior")))
    }
}

/// Everything fixed by a configuration before any measurement.
#[derive(Debug, Clone)]
pub struct Scene {
    pub config: Config,
    pub grid: GridSpec,
    pub sparse_ring: RingGeometry,
    pub dense_ring: RingGeometry,
    pub time: TimeGrid,
    pub schedule: SpiralSchedule,
    pub phantom: ChromophorePhantom,
    pub library: SpectralLibrary,
    pub center: usize,
}

impl Scene {
    pub fn new(config: &Config) -> Result<Scene> {
        config.validate()?;
        let phantom = match config.phantom_path() {
            Some(p) => ChromophorePhantom::load(&p)?,
            None => ChromophorePhantom::default_family(
                config.phantom.seed,
                config.phantom.num_tubes,
                config.phantom.max_slope,
            ),
        };
        let library = match config.library_path() {
            Some(p) => SpectralLibrary::load(&p)?,
            None => SpectralLibrary::synthetic(&config.acquisition.wavelengths_nm)?,
        };
        Ok(Scene {
            config: config.clone(),
            grid: config.grid()?,
            sparse_ring: config.sparse_ring()?,
            dense_ring: config.dense_ring()?,
            time: config.time_grid()?,
            schedule: config.schedule()?,
            phantom,
            library,
            center: config.center_slice()?,
        })
    }

    pub fn wavelengths(&self) -> &[f64] {
        &self.schedule.wavelengths_nm
    }

    pub fn center_z(&self) -> f64 {
        self.schedule.records[self.center - 1].z_mm
    }

    /// Sparse spiral measurements of every scheduled slice.
    pub fn acquire(&self) -> Result<Vec<Sinogram>> {
        Ok(acquire_u3s(
            &self.phantom,
            &self.schedule,
            &self.sparse_ring,
            None,
            &self.library,
            &self.grid,
            &self.time,
        )?
        .sparse)
    }

    /// All-wavelength measurements of the centre slice with a fixed ring.
    pub fn measure_center(&self, ring: &RingGeometry) -> Result<Vec<Sinogram>> {
        dense_slice(
            &self.phantom,
            self.center_z(),
            self.center,
            self.wavelengths(),
            ring,
            &self.library,
            &self.grid,
            &self.time,
        )
    }

    /// UBP of each wavelength measured with the dense ring (reference).
    pub fn dense_reference(&self) -> Result<Vec<Image>> {
        self.measure_center(&self.dense_ring)?
            .iter()
            .map(|s| ubp_reconstruct(&[s], &self.grid))
            .collect()
    }

    /// UBP of each wavelength measured with the unrotated sparse ring.
    pub fn sparse_baseline(&self) -> Result<Vec<Image>> {
        self.measure_center(&self.sparse_ring)?
            .iter()
            .map(|s| ubp_reconstruct(&[s], &self.grid))
            .collect()
    }

    /// Ground-truth initial pressure of the centre slice per wavelength.
    pub fn truth(&self) -> Result<Vec<Image>> {
        self.wavelengths()
            .iter()
            .map(|&w| self.phantom.render_slice(self.center_z(), w, &self.library, &self.grid))
            .collect()
    }

    pub fn fuse(&self, sinos: &[Sinogram]) -> Result<FusedWindow> {
        fuse_window(sinos, &self.schedule, self.center)
    }

    pub fn prior(&self, sinos: &[Sinogram]) -> Result<Image> {
        make_prior(&self.fuse(sinos)?, &self.grid)
    }

    pub fn fresh_network(&self) -> Result<CoordinateNetwork<f32>> {
        let n = &self.config.network;
        CoordinateNetwork::new(n.depth, n.width, n.omega0, self.config.seed)
    }

    pub fn embed(&self, prior: &Image) -> Result<Trained<f32>> {
        embed_prior(&self.fresh_network()?, prior, &self.config.training())
    }

    /// Forward operators of the window slices, keyed by slice index.
    pub fn window_operators(&self) -> Result<Vec<(usize, ForwardOperator)>> {
        self.schedule
            .window(self.center)?
            .into_par_iter()
            .map(|s| {
                let theta = self.schedule.records[s - 1].theta_deg;
                Ok((
                    s,
                    ForwardOperator::new(self.grid, &self.sparse_ring.rotated(theta), self.time)?,
                ))
            })
            .collect()
    }

    /// Trains all wavelengths of the centre slice from copies of `init`.
    pub fn reconstruct(
        &self,
        init: &CoordinateNetwork<f32>,
        sinos: &[Sinogram],
        ops: &[(usize, ForwardOperator)],
    ) -> Result<Vec<Reconstruction<f32>>> {
        let lookup = |s: usize| -> Result<Measurement<'_>> {
            let op = ops
                .iter()
                .find(|(i, _)| *i == s)
                .map(|(_, op)| op)
                .ok_or_else(|| Error::Window(format!("no operator for slice {s}")))?;
            Measurement::new(op, &sinos[s - 1])
        };
        reconstruct_slice(init, &self.schedule, lookup, self.center, &self.config.training())
    }

    pub fn unmix(&self, stack: &[Image]) -> Result<Unmixed> {
        unmix_with_library(stack, &self.library, self.wavelengths())
    }
}

/// Runs `f` inside a worker pool of `jobs` threads (`0` keeps the default).
pub fn with_jobs<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    if jobs == 0 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    Ok(pool.install(f))
}

/// One artefact written by a run, with its checksum.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub sha256: String,
}

/// Provenance written next to the outputs of every run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub config_hash: String,
    pub seed: u64,
    #[serde(default)]
    pub outputs: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn new(command: &str, config: &Config) -> Self {
        Manifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: config.hash(),
            seed: config.seed,
            outputs: Vec::new(),
        }
    }

    /// Records `bytes` as written to `file` (relative to the manifest).
    pub fn record(&mut self, file: &str, bytes: &[u8]) {
        self.outputs.push(ManifestEntry {
            file: file.to_string(),
            sha256: crate::io::sha256_hex(bytes),
        });
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serialises")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Format(e.to_string()))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct MethodSummary {
    pub method: String,
    pub mean_psnr_db: f64,
    pub mean_ssim: f64,
    pub dice_hb: f64,
    pub dice_hbo2: f64,
}

/// Images and scores of one method comparison.
#[derive(Debug, Clone)]
pub struct Comparison {
    pub center: usize,
    pub wavelengths_nm: Vec<f64>,
    pub reference: Vec<Image>,
    pub prior: Image,
    pub images: Vec<(Method, Vec<Image>)>,
    pub losses: Vec<(Method, Vec<Vec<f64>>)>,
    pub rows: Vec<MetricRow>,
    pub summaries: Vec<MethodSummary>,
    pub prior_scores: (f64, f64),
    /// Diagnostic only: mean normalised `(psnr, ssim)` of every method,
    /// including the reference, against the phantom's true initial pressure.
    pub truth_scores: Vec<(Method, f64, f64)>,
}

/// Required margins of the ordering verdict.
pub const PSNR_MARGIN_DB: f64 = 2.0;
pub const SSIM_MARGIN: f64 = 0.03;

impl Comparison {
    pub fn summary(&self, method: Method) -> Option<&MethodSummary> {
        self.summaries.iter().find(|s| s.method == method.name())
    }

    pub fn images(&self, method: Method) -> Option<&[Image]> {
        self.images
            .iter()
            .find(|(m, _)| *m == method)
            .map(|(_, v)| v.as_slice())
    }

    /// `u3s > u3s-noprior > ss` in mean PSNR and SSIM by the fixed margins.
    pub fn ordering_holds(&self) -> bool {
        let (Some(u), Some(n), Some(s)) = (
            self.summary(Method::Spiral),
            self.summary(Method::SpiralNoPrior),
            self.summary(Method::Sparse),
        ) else {
            return false;
        };
        u.mean_psnr_db >= n.mean_psnr_db + PSNR_MARGIN_DB
            && n.mean_psnr_db >= s.mean_psnr_db + PSNR_MARGIN_DB
            && u.mean_ssim >= n.mean_ssim + SSIM_MARGIN
            && n.mean_ssim >= s.mean_ssim + SSIM_MARGIN
    }
}

fn score_stack(
    method: Method,
    center: usize,
    wavelengths: &[f64],
    images: &[Image],
    reference: &[Image],
    masks: Option<(&Unmixed, &Unmixed, f64)>,
) -> Result<(Vec<MetricRow>, MethodSummary)> {
    let (dice_hb, dice_hbo2) = match masks {
        Some((mine, refr, frac)) => (
            Some(dice(&threshold_mask(&mine.hb, frac), &threshold_mask(&refr.hb, frac))?),
            Some(dice(
                &threshold_mask(&mine.hbo2, frac),
                &threshold_mask(&refr.hbo2, frac),
            )?),
        ),
        None => (None, None),
    };
    let mut rows = Vec::new();
    for ((img, r), &w) in images.iter().zip(reference).zip(wavelengths) {
        let (p, s) = normalized_scores(img, r)?;
        rows.push(MetricRow {
            method: method.name().to_string(),
            slice: center,
            wavelength_nm: w,
            psnr_db: p,
            ssim: s,
            dice_hb,
            dice_hbo2,
        });
    }
    let n = rows.len() as f64;
    let summary = MethodSummary {
        method: method.name().to_string(),
        mean_psnr_db: rows.iter().map(|r| r.psnr_db).sum::<f64>() / n,
        mean_ssim: rows.iter().map(|r| r.ssim).sum::<f64>() / n,
        dice_hb: dice_hb.unwrap_or(f64::NAN),
        dice_hbo2: dice_hbo2.unwrap_or(f64::NAN),
    };
    Ok((rows, summary))
}

/// Scores every non-reference stack against the `Method::Dense` stack after
/// min-max normalisation. Dice compares unmixed masks with the unmixed
/// reference.
pub fn score_methods(scene: &Scene, images: &[(Method, Vec<Image>)]) -> Result<(Vec<MetricRow>, Vec<MethodSummary>)> {
    let reference = images
        .iter()
        .find(|(m, _)| *m == Method::Dense)
        .map(|(_, v)| v)
        .ok_or_else(|| Error::InvalidParameter("no dense reference to score against".into()))?;
    let wavelengths = scene.wavelengths();
    if reference.len() != wavelengths.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} reference images for {} wavelengths",
            reference.len(),
            wavelengths.len()
        )));
    }
    let frac = scene.config.evaluation.mask_fraction;
    let ref_unmixed = scene.unmix(reference)?;
    let mut rows = Vec::new();
    let mut summaries = Vec::new();
    for (method, stack) in images {
        if *method == Method::Dense {
            continue;
        }
        let mine = scene.unmix(stack)?;
        let (r, s) = score_stack(
            *method,
            scene.center,
            wavelengths,
            stack,
            reference,
            Some((&mine, &ref_unmixed, frac)),
        )?;
        rows.extend(r);
        summaries.push(s);
    }
    Ok((rows, summaries))
}

/// Which reconstructions a comparison runs besides the reference.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MethodSet {
    pub sparse: bool,
    pub spiral: bool,
    pub no_prior: bool,
}

impl MethodSet {
    pub const ALL: MethodSet = MethodSet {
        sparse: true,
        spiral: true,
        no_prior: true,
    };
    pub const PRIOR_ONLY: MethodSet = MethodSet {
        sparse: false,
        spiral: false,
        no_prior: false,
    };
    pub const SPIRAL_ONLY: MethodSet = MethodSet {
        sparse: false,
        spiral: true,
        no_prior: false,
    };
}

/// Reconstructs the centre slice with the selected methods and scores each
/// against the dense reference after min-max normalisation.
pub fn run_comparison(config: &Config, methods: MethodSet) -> Result<Comparison> {
    with_jobs(config.jobs, || run_comparison_inner(config, methods))?
}

fn run_comparison_inner(config: &Config, methods: MethodSet) -> Result<Comparison> {
    let scene = Scene::new(config)?;
    let wavelengths = scene.wavelengths().to_vec();
    let reference = scene.dense_reference()?;
    let sinos = scene.acquire()?;
    let prior = scene.prior(&sinos)?;
    let mean_reference = Image {
        grid: scene.grid,
        data: (0..scene.grid.len())
            .map(|i| reference.iter().map(|r| r.data[i]).sum::<f64>() / reference.len() as f64)
            .collect(),
    };
    let prior_scores = normalized_scores(&prior, &mean_reference)?;

    let mut images = vec![(Method::Dense, reference.clone())];
    let mut losses = Vec::new();
    if methods.sparse {
        images.push((Method::Sparse, scene.sparse_baseline()?));
    }
    if methods.spiral || methods.no_prior {
        let ops = scene.window_operators()?;
        if methods.spiral {
            let embedded = scene.embed(&prior)?;
            let recs = scene.reconstruct(&embedded.net, &sinos, &ops)?;
            losses.push((Method::Spiral, recs.iter().map(|r| r.trained.losses.clone()).collect()));
            images.push((Method::Spiral, recs.into_iter().map(|r| r.inference.image).collect()));
        }
        if methods.no_prior {
            let recs = scene.reconstruct(&scene.fresh_network()?, &sinos, &ops)?;
            losses.push((
                Method::SpiralNoPrior,
                recs.iter().map(|r| r.trained.losses.clone()).collect(),
            ));
            images.push((
                Method::SpiralNoPrior,
                recs.into_iter().map(|r| r.inference.image).collect(),
            ));
        }
    }

    let (rows, summaries) = score_methods(&scene, &images)?;
    let truth = scene.truth()?;
    let truth_scores = images
        .iter()
        .map(|(method, stack)| {
            let scores = stack
                .iter()
                .zip(&truth)
                .map(|(x, t)| normalized_scores(x, t))
                .collect::<Result<Vec<_>>>()?;
            let n = scores.len() as f64;
            Ok((
                *method,
                scores.iter().map(|s| s.0).sum::<f64>() / n,
                scores.iter().map(|s| s.1).sum::<f64>() / n,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Comparison {
        center: scene.center,
        wavelengths_nm: wavelengths,
        reference,
        prior,
        images,
        losses,
        rows,
        summaries,
        prior_scores,
        truth_scores,
    })
}

/// The full method comparison: SS, U3S without prior and U3S.
pub fn run_method_comparison(config: &Config) -> Result<Comparison> {
    run_comparison(config, MethodSet::ALL)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    SliceSpacing,
    NumElements,
    Depth,
    Width,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::SliceSpacing => "slice_spacing",
            SweepAxis::NumElements => "num_elements",
            SweepAxis::Depth => "depth",
            SweepAxis::Width => "width",
        }
    }

    fn key(self) -> &'static str {
        match self {
            SweepAxis::SliceSpacing => "acquisition.slice_spacing_mm",
            SweepAxis::NumElements => "geometry.num_elements_sparse",
            SweepAxis::Depth => "network.depth",
            SweepAxis::Width => "network.width",
        }
    }
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            SweepAxis::SliceSpacing,
            SweepAxis::NumElements,
            SweepAxis::Depth,
            SweepAxis::Width,
        ]
        .into_iter()
        .find(|a| a.name() == s)
        .ok_or_else(|| Error::Config(format!("unknown sweep axis {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub value: f64,
    pub prior_psnr_db: f64,
    pub prior_ssim: f64,
    pub psnr_db: Option<f64>,
    pub ssim: Option<f64>,
}

/// Re-runs the comparison for each value of one axis, sorted ascending.
/// With `train` unset only the prior image is scored. Slice-spacing sweeps
/// keep the centre slice at the same depth so every value images the same
/// anatomy.
pub fn run_sweep(config: &Config, axis: SweepAxis, values: &[f64], train: bool) -> Result<Vec<SweepRow>> {
    let mut values = values.to_vec();
    values.sort_by(|a, b| a.total_cmp(b));
    values.dedup();
    let center = config.center_slice()?;
    let center_z = config.schedule()?.record(center)?.z_mm;
    values
        .iter()
        .map(|&v| {
            let mut cfg = config.clone();
            cfg.set(axis.key(), &format!("{v}"))?;
            if axis == SweepAxis::SliceSpacing {
                cfg.acquisition.z_first_mm = center_z - (center - 1) as f64 * v;
            }
            let methods = if train {
                MethodSet::SPIRAL_ONLY
            } else {
                MethodSet::PRIOR_ONLY
            };
            let cmp = run_comparison(&cfg, methods)?;
            let spiral = cmp.summary(Method::Spiral);
            Ok(SweepRow {
                value: v,
                prior_psnr_db: cmp.prior_scores.0,
                prior_ssim: cmp.prior_scores.1,
                psnr_db: spiral.map(|s| s.mean_psnr_db),
                ssim: spiral.map(|s| s.mean_ssim),
            })
        })
        .collect()
}

pub fn sweep_csv(axis: SweepAxis, rows: &[SweepRow]) -> String {
    let mut out = format!("{},prior_psnr_db,prior_ssim,psnr_db,ssim\n", axis.name());
    let opt = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_default();
    for r in rows {
        out.push_str(&format!(
            "{},{:.6},{:.6},{},{}\n",
            r.value,
            r.prior_psnr_db,
            r.prior_ssim,
            opt(r.psnr_db),
            opt(r.ssim)
        ));
    }
    out
}

/// Spearman rank correlation (average ranks for ties).
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for k in i..=j {
                r[idx[k]] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx * syy).sqrt()
}
