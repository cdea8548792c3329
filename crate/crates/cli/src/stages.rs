//! Pipeline stages. Each stage writes into its own directory under the
//! output root together with `config.toml` and `manifest.toml`. Upstream
//! artefacts are reused when their manifest carries the current config
//! hash and recomputed otherwise.

use std::fs;
use std::path::{Path, PathBuf};

use u3s::config::Config;
use u3s::harness::{
    run_comparison, run_sweep, score_methods, spearman, sweep_csv, Manifest, Method, MethodSet, MethodSummary, Scene,
    SweepAxis,
};
use u3s::image::Image;
use u3s::inr::{write_loss_trace, CoordinateNetwork};
use u3s::io::{load_image, load_sinogram, to_gray8, to_pgm, write_atomic, write_image, write_sinogram};
use u3s::metrics::{write_metrics_csv, MetricRow};
use u3s::physics::{ubp_reconstruct, Sinogram};
use u3s::{Error, Result};

pub struct Workspace {
    out: PathBuf,
    scene: Scene,
}

struct Stage {
    name: String,
    dir: PathBuf,
    manifest: Manifest,
}

impl Stage {
    fn write(&mut self, file: &str, bytes: &[u8]) -> Result<()> {
        write_atomic(&self.dir.join(file), bytes)?;
        self.manifest.record(file, bytes);
        Ok(())
    }

    fn write_image(&mut self, file: &str, image: &Image, meta: &[(String, f64)]) -> Result<()> {
        let mut buf = Vec::new();
        write_image(&mut buf, image, meta)?;
        self.write(file, &buf)
    }

    fn finish(self, config: &Config) -> Result<()> {
        write_atomic(&self.dir.join("config.toml"), config.to_toml().as_bytes())?;
        write_atomic(&self.dir.join("manifest.toml"), self.manifest.to_toml().as_bytes())?;
        eprintln!(
            "{}: {} files in {}",
            self.name,
            self.manifest.outputs.len(),
            self.dir.display()
        );
        Ok(())
    }
}

fn wavelength_tag(w: f64) -> String {
    format!("{w}nm")
}

fn stack_meta(slice: usize, w: f64) -> Vec<(String, f64)> {
    vec![("slice".into(), slice as f64), ("wavelength_nm".into(), w)]
}

fn metrics_bytes(rows: &[MetricRow]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_metrics_csv(&mut buf, rows)?;
    Ok(buf)
}

fn print_summaries(summaries: &[MethodSummary]) {
    println!("method,mean_psnr_db,mean_ssim,dice_hb,dice_hbo2");
    for s in summaries {
        println!(
            "{},{:.4},{:.4},{:.4},{:.4}",
            s.method, s.mean_psnr_db, s.mean_ssim, s.dice_hb, s.dice_hbo2
        );
    }
}

impl Workspace {
    pub fn new(config: &Config, out: PathBuf) -> Result<Self> {
        Ok(Workspace {
            out,
            scene: Scene::new(config)?,
        })
    }

    fn config(&self) -> &Config {
        &self.scene.config
    }

    fn stage(&self, name: &str) -> Result<Stage> {
        let dir = self.out.join(name);
        fs::create_dir_all(&dir)?;
        Ok(Stage {
            name: name.to_string(),
            dir,
            manifest: Manifest::new(name, self.config()),
        })
    }

    /// True when `name` was produced under the current configuration.
    fn is_current(&self, name: &str) -> bool {
        fs::read_to_string(self.out.join(name).join("manifest.toml"))
            .ok()
            .and_then(|t| Manifest::from_toml(&t).ok())
            .is_some_and(|m| m.config_hash == self.config().hash())
    }

    fn reuse<T>(
        &self,
        name: &str,
        load: impl FnOnce(&Path) -> Result<T>,
        compute: impl FnOnce() -> Result<T>,
    ) -> Result<T> {
        if self.is_current(name) {
            if let Ok(v) = load(&self.out.join(name)) {
                return Ok(v);
            }
        }
        compute()
    }

    pub fn phantom(&self) -> Result<()> {
        let s = &self.scene;
        let mut stage = self.stage("phantom")?;
        stage.write("phantom.toml", s.phantom.to_toml()?.as_bytes())?;
        stage.write("library.txt", s.library.to_table().as_bytes())?;
        for r in &s.schedule.records {
            let maps = s.phantom.concentrations(r.z_mm, &s.grid)?;
            let meta = vec![
                ("slice".to_string(), r.slice_index as f64),
                ("z_mm".to_string(), r.z_mm),
            ];
            stage.write_image(&format!("hbo2_{:03}.u3simg", r.slice_index), &maps.hbo2, &meta)?;
            stage.write_image(&format!("hb_{:03}.u3simg", r.slice_index), &maps.hb, &meta)?;
        }
        stage.finish(self.config())
    }

    pub fn schedule(&self) -> Result<()> {
        let table = self.scene.schedule.to_table();
        let mut stage = self.stage("schedule")?;
        stage.write("schedule.txt", table.as_bytes())?;
        print!("{table}");
        stage.finish(self.config())
    }

    pub fn acquire(&self, dense: bool) -> Result<()> {
        self.compute_sparse()?;
        if dense {
            self.compute_dense()?;
        }
        Ok(())
    }

    fn compute_sparse(&self) -> Result<Vec<Sinogram>> {
        let sinos = self.scene.acquire()?;
        let mut stage = self.stage("sino")?;
        for (i, sino) in sinos.iter().enumerate() {
            let mut buf = Vec::new();
            write_sinogram(&mut buf, sino)?;
            stage.write(&format!("slice_{:03}.u3ssino", i + 1), &buf)?;
        }
        stage.finish(self.config())?;
        Ok(sinos)
    }

    fn sparse(&self) -> Result<Vec<Sinogram>> {
        let n = self.scene.schedule.num_slices();
        self.reuse(
            "sino",
            |dir| {
                (1..=n)
                    .map(|m| load_sinogram(&dir.join(format!("slice_{m:03}.u3ssino"))))
                    .collect()
            },
            || self.compute_sparse(),
        )
    }

    fn compute_dense(&self) -> Result<Vec<Sinogram>> {
        let sinos = self.scene.measure_center(&self.scene.dense_ring)?;
        let mut stage = self.stage("dense")?;
        for (sino, &w) in sinos.iter().zip(self.scene.wavelengths()) {
            let mut buf = Vec::new();
            write_sinogram(&mut buf, sino)?;
            stage.write(&format!("center_{}.u3ssino", wavelength_tag(w)), &buf)?;
        }
        stage.finish(self.config())?;
        Ok(sinos)
    }

    fn dense(&self) -> Result<Vec<Sinogram>> {
        let wls = self.scene.wavelengths().to_vec();
        self.reuse(
            "dense",
            |dir| {
                wls.iter()
                    .map(|&w| load_sinogram(&dir.join(format!("center_{}.u3ssino", wavelength_tag(w)))))
                    .collect()
            },
            || self.compute_dense(),
        )
    }

    pub fn prior(&self) -> Result<Image> {
        let sinos = self.sparse()?;
        let fused = self.scene.fuse(&sinos)?;
        let prior = u3s::prior::make_prior(&fused, &self.scene.grid)?;
        let mut stage = self.stage("prior")?;
        let meta = u3s::prior::prior_meta(&fused, self.config().acquisition.slice_spacing_mm);
        stage.write_image("prior.u3simg", &prior, &meta)?;
        stage.finish(self.config())?;
        Ok(prior)
    }

    fn cached_prior(&self) -> Result<Image> {
        self.reuse(
            "prior",
            |dir| Ok(load_image(&dir.join("prior.u3simg"))?.0),
            || self.prior(),
        )
    }

    pub fn embed(&self) -> Result<CoordinateNetwork<f32>> {
        let prior = self.cached_prior()?;
        let trained = self.scene.embed(&prior)?;
        let mut stage = self.stage("embed")?;
        let mut net = Vec::new();
        trained.net.write_checkpoint(&mut net)?;
        stage.write("prior.u3snet", &net)?;
        let mut trace = Vec::new();
        write_loss_trace(&mut trace, &trained.losses)?;
        stage.write("loss.csv", &trace)?;
        stage.finish(self.config())?;
        Ok(trained.net)
    }

    fn cached_embedding(&self) -> Result<CoordinateNetwork<f32>> {
        self.reuse(
            "embed",
            |dir| {
                CoordinateNetwork::read_checkpoint(std::io::BufReader::new(fs::File::open(dir.join("prior.u3snet"))?))
            },
            || self.embed(),
        )
    }

    fn stage_name(method: Method) -> String {
        format!("recon-{}", method.name())
    }

    pub fn reconstruct(&self, method: Method) -> Result<Vec<Image>> {
        let s = &self.scene;
        let mut stage = self.stage(&Self::stage_name(method))?;
        let images = match method {
            Method::Dense => self
                .dense()?
                .iter()
                .map(|sino| ubp_reconstruct(&[sino], &s.grid))
                .collect::<Result<Vec<_>>>()?,
            Method::Sparse => s.sparse_baseline()?,
            Method::Spiral | Method::SpiralNoPrior => {
                let init = match method {
                    Method::Spiral => self.cached_embedding()?,
                    _ => s.fresh_network()?,
                };
                let sinos = self.sparse()?;
                let ops = s.window_operators()?;
                let recs = s.reconstruct(&init, &sinos, &ops)?;
                let mut images = Vec::with_capacity(recs.len());
                for rec in recs {
                    let tag = wavelength_tag(rec.wavelength_nm);
                    let mut net = Vec::new();
                    rec.trained.net.write_checkpoint(&mut net)?;
                    stage.write(&format!("net_{tag}.u3snet"), &net)?;
                    let mut trace = Vec::new();
                    write_loss_trace(&mut trace, &rec.trained.losses)?;
                    stage.write(&format!("loss_{tag}.csv"), &trace)?;
                    if rec.inference.negative_pixels > 0 {
                        eprintln!(
                            "{tag}: {} negative pixels clamped (min {:.3e})",
                            rec.inference.negative_pixels, rec.inference.min_value
                        );
                    }
                    images.push(rec.inference.image);
                }
                images
            }
        };
        for (img, &w) in images.iter().zip(s.wavelengths()) {
            stage.write_image(
                &format!("img_{}.u3simg", wavelength_tag(w)),
                img,
                &stack_meta(s.center, w),
            )?;
        }
        stage.finish(self.config())?;
        Ok(images)
    }

    /// The stored stack of `method`; an error when it is missing or stale.
    fn stored_stack(&self, method: Method) -> Result<Vec<Image>> {
        let name = Self::stage_name(method);
        if !self.is_current(&name) {
            return Err(Error::InvalidParameter(format!(
                "no {} reconstruction for this configuration; run `reconstruct --method {}` first",
                method.name(),
                method.name()
            )));
        }
        self.scene
            .wavelengths()
            .iter()
            .map(|&w| Ok(load_image(&self.out.join(&name).join(format!("img_{}.u3simg", wavelength_tag(w))))?.0))
            .collect()
    }

    pub fn unmix(&self, method: Method) -> Result<()> {
        let stack = self.stored_stack(method)?;
        let maps = self.scene.unmix(&stack)?;
        let mut stage = self.stage(&format!("unmix-{}", method.name()))?;
        let meta = vec![("slice".to_string(), self.scene.center as f64)];
        stage.write_image("hbo2.u3simg", &maps.hbo2, &meta)?;
        stage.write_image("hb.u3simg", &maps.hb, &meta)?;
        stage.finish(self.config())
    }

    pub fn evaluate(&self) -> Result<()> {
        let mut images = vec![(Method::Dense, self.stored_stack(Method::Dense)?)];
        for method in [Method::Sparse, Method::SpiralNoPrior, Method::Spiral] {
            if self.is_current(&Self::stage_name(method)) {
                images.push((method, self.stored_stack(method)?));
            }
        }
        let (rows, summaries) = score_methods(&self.scene, &images)?;
        let mut stage = self.stage("evaluate")?;
        stage.write("metrics.csv", &metrics_bytes(&rows)?)?;
        print_summaries(&summaries);
        stage.finish(self.config())
    }

    pub fn compare(&self) -> Result<()> {
        let cmp = run_comparison(self.config(), MethodSet::ALL)?;
        let mut stage = self.stage("compare")?;
        stage.write("metrics.csv", &metrics_bytes(&cmp.rows)?)?;
        stage.write_image("prior.u3simg", &cmp.prior, &[("slice".into(), cmp.center as f64)])?;
        for (method, stack) in &cmp.images {
            for (img, &w) in stack.iter().zip(&cmp.wavelengths_nm) {
                let file = format!("{}_{}.u3simg", method.name(), wavelength_tag(w));
                stage.write_image(&file, img, &stack_meta(cmp.center, w))?;
            }
        }
        print_summaries(&cmp.summaries);
        println!(
            "prior vs mean DS: psnr {:.4} dB, ssim {:.4}",
            cmp.prior_scores.0, cmp.prior_scores.1
        );
        for (method, p, q) in &cmp.truth_scores {
            println!("{} vs ground truth: psnr {p:.4} dB, ssim {q:.4}", method.name());
        }
        println!(
            "ordering u3s > u3s-noprior > ss: {}",
            if cmp.ordering_holds() { "pass" } else { "fail" }
        );
        stage.finish(self.config())
    }

    pub fn sweep(&self, axis: SweepAxis, values: &[f64], train: bool) -> Result<()> {
        let rows = run_sweep(self.config(), axis, values, train)?;
        let csv = sweep_csv(axis, &rows);
        let mut stage = self.stage(&format!("sweep-{}", axis.name()))?;
        stage.write("sweep.csv", csv.as_bytes())?;
        print!("{csv}");
        let x: Vec<f64> = rows.iter().map(|r| r.value).collect();
        if rows.len() > 1 {
            let prior: Vec<f64> = rows.iter().map(|r| r.prior_psnr_db).collect();
            println!("spearman(prior_psnr_db) = {:.4}", spearman(&x, &prior));
            if train {
                let psnr: Vec<f64> = rows.iter().filter_map(|r| r.psnr_db).collect();
                println!("spearman(psnr_db) = {:.4}", spearman(&x, &psnr));
            }
        }
        stage.finish(self.config())
    }
}

/// Writes an image as 8-bit greyscale: PGM for a `.pgm` target, PNG
/// otherwise.
pub fn export_png(input: &Path, output: &Path) -> Result<()> {
    let (image, _) = load_image(input)?;
    if output.extension().is_some_and(|e| e.eq_ignore_ascii_case("pgm")) {
        return write_atomic(output, &to_pgm(&image));
    }
    let side = image.side() as u32;
    let mut buf = Vec::new();
    {
        let mut encoder = png::Encoder::new(&mut buf, side, side);
        encoder.set_color(png::ColorType::Grayscale);
        encoder.set_depth(png::BitDepth::Eight);
        let mut writer = encoder.write_header().map_err(|e| Error::Format(e.to_string()))?;
        writer
            .write_image_data(&to_gray8(&image))
            .map_err(|e| Error::Format(e.to_string()))?;
    }
    write_atomic(output, &buf)
}
