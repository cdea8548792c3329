//! Experiment configuration: sectioned key-value text (TOML) with `desk`
//! and `paper` presets.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    angular_pitch, build_spiral_schedule, rotation_step, RingGeometry, SpiralSchedule, DEFAULT_ARC_DEG,
    DEFAULT_RING_RADIUS_MM, DEFAULT_WAVELENGTHS_NM,
};
use crate::image::{GridSpec, DEFAULT_FOV_MM};
use crate::inr::TrainingConfig;
use crate::physics::{make_time_grid, TimeGrid, DEFAULT_SAMPLING_HZ, DEFAULT_SPEED_OF_SOUND_M_S};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometrySection {
    pub ring_radius_mm: f64,
    pub arc_deg: f64,
    pub num_elements_sparse: usize,
    pub num_elements_dense: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AcquisitionSection {
    pub speed_of_sound_m_s: f64,
    pub sampling_hz: f64,
    pub wavelengths_nm: Vec<f64>,
    pub slice_spacing_mm: f64,
    pub num_slices: usize,
    pub z_first_mm: f64,
    /// Centre slice of the evaluated window; `0` picks the middle slice.
    pub center_slice: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageSection {
    pub side: usize,
    pub fov_mm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSection {
    /// Phantom description file; the built-in family is used when empty.
    pub file: String,
    /// Extinction table; synthetic coefficients are used when empty.
    pub library: String,
    /// Seed of the built-in phantom family.
    pub seed: u64,
    pub num_tubes: usize,
    pub max_slope: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSection {
    pub depth: usize,
    pub width: usize,
    pub omega0: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    pub embed_iterations: usize,
    pub iterations: usize,
    pub lr_embed: f64,
    pub lr_reconstruct: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationSection {
    pub mask_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub jobs: usize,
    pub geometry: GeometrySection,
    pub acquisition: AcquisitionSection,
    pub image: ImageSection,
    pub phantom: PhantomSection,
    pub network: NetworkSection,
    pub training: TrainingSection,
    pub evaluation: EvaluationSection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Desk,
    Paper,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            _ => Err(Error::Config(format!("unknown preset {s:?}; expected desk or paper"))),
        }
    }
}

impl Default for Config {
    fn default() -> Self {
        Config::preset(Preset::Desk)
    }
}

impl Config {
    pub fn preset(preset: Preset) -> Self {
        let paper = Config {
            seed: 0,
            jobs: 0,
            geometry: GeometrySection {
                ring_radius_mm: DEFAULT_RING_RADIUS_MM,
                arc_deg: DEFAULT_ARC_DEG,
                num_elements_sparse: 21,
                num_elements_dense: 128,
            },
            acquisition: AcquisitionSection {
                speed_of_sound_m_s: DEFAULT_SPEED_OF_SOUND_M_S,
                sampling_hz: DEFAULT_SAMPLING_HZ,
                wavelengths_nm: DEFAULT_WAVELENGTHS_NM.to_vec(),
                slice_spacing_mm: 0.5,
                num_slices: 15,
                z_first_mm: 36.5,
                center_slice: 0,
            },
            image: ImageSection {
                side: 220,
                fov_mm: DEFAULT_FOV_MM,
            },
            phantom: PhantomSection {
                file: String::new(),
                library: String::new(),
                seed: 0,
                num_tubes: 8,
                max_slope: 0.15,
            },
            network: NetworkSection {
                depth: 4,
                width: 512,
                omega0: 30.0,
            },
            training: TrainingSection {
                embed_iterations: 2000,
                iterations: 2000,
                lr_embed: 1e-4,
                lr_reconstruct: 1e-5,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                delta: 0.8,
            },
            evaluation: EvaluationSection { mask_fraction: 0.1 },
        };
        match preset {
            Preset::Paper => paper,
            Preset::Desk => Config {
                geometry: GeometrySection {
                    num_elements_sparse: 11,
                    num_elements_dense: 64,
                    ..paper.geometry
                },
                image: ImageSection {
                    side: 96,
                    ..paper.image
                },
                network: NetworkSection {
                    width: 128,
                    ..paper.network
                },
                training: TrainingSection {
                    embed_iterations: 800,
                    iterations: 800,
                    ..paper.training
                },
                ..paper
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let a = &self.acquisition;
        if a.wavelengths_nm.is_empty() || a.wavelengths_nm.len() % 2 == 0 {
            return Err(Error::Config("the wavelength count must be odd".into()));
        }
        if a.num_slices < a.wavelengths_nm.len() {
            return Err(Error::Config("need at least one full slice window".into()));
        }
        if self.geometry.num_elements_sparse == 0 || self.geometry.num_elements_dense == 0 {
            return Err(Error::Config("element counts must be positive".into()));
        }
        if self.network.depth < 2 || self.network.width == 0 {
            return Err(Error::Config("network needs depth >= 2 and width >= 1".into()));
        }
        self.training().validate()?;
        self.grid()?;
        self.sparse_ring()?;
        self.dense_ring()?;
        self.center_slice()?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// Parses a config file; missing keys fall back to `base`.
    pub fn from_toml_with_base(text: &str, base: &Config) -> Result<Self> {
        let overlay: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut merged: toml::Table = toml::from_str(&base.to_toml()).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut merged, overlay);
        let cfg: Config = toml::Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_toml_with_base(text, &Config::default())
    }

    pub fn load(path: &Path, base: &Config) -> Result<Self> {
        Self::from_toml_with_base(&std::fs::read_to_string(path)?, base)
    }

    /// Hex SHA-256 of the canonical serialisation.
    pub fn hash(&self) -> String {
        crate::io::sha256_hex(self.to_toml().as_bytes())
    }

    pub fn grid(&self) -> Result<GridSpec> {
        GridSpec::new(self.image.side, self.image.fov_mm)
    }

    pub fn sparse_ring(&self) -> Result<RingGeometry> {
        RingGeometry::new(
            self.geometry.ring_radius_mm,
            self.geometry.arc_deg,
            self.geometry.num_elements_sparse,
        )
    }

    pub fn dense_ring(&self) -> Result<RingGeometry> {
        RingGeometry::new(
            self.geometry.ring_radius_mm,
            self.geometry.arc_deg,
            self.geometry.num_elements_dense,
        )
    }

    pub fn time_grid(&self) -> Result<TimeGrid> {
        make_time_grid(
            &self.sparse_ring()?,
            &self.grid()?,
            self.acquisition.speed_of_sound_m_s,
            self.acquisition.sampling_hz,
        )
    }

    pub fn schedule(&self) -> Result<SpiralSchedule> {
        let a = &self.acquisition;
        let pitch = angular_pitch(self.geometry.arc_deg, self.geometry.num_elements_sparse)?;
        let step = rotation_step(pitch, a.wavelengths_nm.len())?;
        build_spiral_schedule(a.num_slices, a.z_first_mm, a.slice_spacing_mm, &a.wavelengths_nm, step)
    }

    pub fn center_slice(&self) -> Result<usize> {
        let a = &self.acquisition;
        let m = if a.center_slice == 0 {
            a.num_slices.div_ceil(2)
        } else {
            a.center_slice
        };
        let half = a.wavelengths_nm.len() / 2;
        if m <= half || m + half > a.num_slices {
            return Err(Error::Window(format!(
                "centre slice {m} has no full window in {} slices",
                a.num_slices
            )));
        }
        Ok(m)
    }

    pub fn training(&self) -> TrainingConfig {
        let t = &self.training;
        TrainingConfig {
            embed_iterations: t.embed_iterations,
            iterations: t.iterations,
            lr_embed: t.lr_embed,
            lr_reconstruct: t.lr_reconstruct,
            beta1: t.beta1,
            beta2: t.beta2,
            eps: t.eps,
            delta: t.delta,
            seed: self.seed,
        }
    }

    pub fn phantom_path(&self) -> Option<PathBuf> {
        (!self.phantom.file.is_empty()).then(|| PathBuf::from(&self.phantom.file))
    }

    pub fn library_path(&self) -> Option<PathBuf> {
        (!self.phantom.library.is_empty()).then(|| PathBuf::from(&self.phantom.library))
    }

    /// Sets a dotted key such as `training.iterations` from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut table: toml::Table = toml::from_str(&self.to_toml()).map_err(|e| Error::Config(e.to_string()))?;
        let (section, name) = match key.split_once('.') {
            Some((s, n)) => (Some(s), n),
            None => (None, key),
        };
        let target = match section {
            Some(s) => table
                .get_mut(s)
                .and_then(|v| v.as_table_mut())
                .ok_or_else(|| Error::Config(format!("unknown section {s:?}")))?,
            None => &mut table,
        };
        let old = target
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown key {key:?}")))?;
        let parsed = parse_like(old, value).ok_or_else(|| Error::Config(format!("bad value {value:?} for {key}")))?;
        target.insert(name.to_string(), parsed);
        let cfg: Config = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        *self = cfg;
        Ok(())
    }
}

fn parse_like(old: &toml::Value, text: &str) -> Option<toml::Value> {
    use toml::Value;
    Some(match old {
        Value::Integer(_) => Value::Integer(text.trim().parse().ok()?),
        Value::Float(_) => Value::Float(text.trim().parse().ok()?),
        Value::String(_) => Value::String(text.to_string()),
        Value::Boolean(_) => Value::Boolean(text.trim().parse().ok()?),
        Value::Array(items) => {
            let first = items.first().cloned().unwrap_or(Value::Float(0.0));
            Value::Array(
                text.split(',')
                    .map(|t| parse_like(&first, t))
                    .collect::<Option<Vec<_>>>()?,
            )
        }
        _ => return None,
    })
}

fn merge(base: &mut toml::Table, overlay: toml::Table) {
    for (k, v) in overlay {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        Config::preset(Preset::Desk).validate().unwrap();
        Config::preset(Preset::Paper).validate().unwrap();
        let d = Config::default();
        assert_eq!(d.image.side, 96);
        assert_eq!(d.geometry.num_elements_dense, 64);
        assert_eq!(d.geometry.num_elements_sparse, 11);
        assert_eq!(d.acquisition.num_slices, 15);
        assert_eq!(d.training.iterations, 800);
        let p = Config::preset(Preset::Paper);
        assert_eq!(p.image.side, 220);
        assert_eq!(p.network.width, 512);
        assert_eq!(p.training.delta, 0.8);
    }

    #[test]
    fn dump_round_trips() {
        let d = Config::default();
        assert_eq!(Config::from_toml(&d.to_toml()).unwrap(), d);
    }

    #[test]
    fn partial_file_overrides_base() {
        let cfg = Config::from_toml("seed = 7\n[training]\niterations = 5\n").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.training.iterations, 5);
        assert_eq!(cfg.training.embed_iterations, 800);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(
            Config::from_toml("[training]\nsteps = 3\n"),
            Err(Error::Config(_))
        ));
        assert!(matches!(Config::from_toml("[nope]\nx = 1\n"), Err(Error::Config(_))));
    }

    #[test]
    fn set_dotted_keys() {
        let mut cfg = Config::default();
        cfg.set("acquisition.slice_spacing_mm", "2").unwrap();
        cfg.set("geometry.num_elements_sparse", "21").unwrap();
        cfg.set("acquisition.wavelengths_nm", "700,800,850").unwrap();
        cfg.set("seed", "3").unwrap();
        assert_eq!(cfg.acquisition.slice_spacing_mm, 2.0);
        assert_eq!(cfg.geometry.num_elements_sparse, 21);
        assert_eq!(cfg.acquisition.wavelengths_nm, vec![700.0, 800.0, 850.0]);
        assert_eq!(cfg.seed, 3);
        assert!(cfg.set("geometry.bogus", "1").is_err());
        assert!(cfg.set("geometry.num_elements_sparse", "x").is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = Config::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn schedule_step_for_21_elements() {
        let mut cfg = Config::preset(Preset::Paper);
        cfg.geometry.num_elements_sparse = 21;
        let s = cfg.schedule().unwrap();
        assert!((s.rotation_step_deg - 2.571).abs() < 5e-4);
        assert_eq!(cfg.center_slice().unwrap(), 8);
    }

    #[test]
    fn even_wavelength_count_is_rejected() {
        let mut cfg = Config::default();
        cfg.acquisition.wavelengths_nm = vec![700.0, 800.0];
        assert!(cfg.validate().is_err());
    }
}
