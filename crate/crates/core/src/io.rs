//! Little-endian binary helpers and the on-disk formats shared by modules.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::RingGeometry;
use crate::image::{GridSpec, Image};
use crate::physics::{Sinogram, TimeGrid};

pub const SINOGRAM_MAGIC: &[u8; 8] = b"U3SSINO1";
pub const IMAGE_MAGIC: &[u8; 7] = b"U3SIMG1";

pub fn write_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn write_u64<W: Write>(w: &mut W, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn write_f64<W: Write>(w: &mut W, v: f64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

pub fn expect_magic<R: Read>(r: &mut R, magic: &[u8]) -> Result<()> {
    let mut buf = vec![0u8; magic.len()];
    r.read_exact(&mut buf)?;
    if buf != magic {
        return Err(Error::Format(format!(
            "bad magic: expected {:?}, found {:?}",
            String::from_utf8_lossy(magic),
            String::from_utf8_lossy(&buf)
        )));
    }
    Ok(())
}

fn read_f64_vec<R: Read>(r: &mut R, len: usize) -> Result<Vec<f64>> {
    let mut bytes = vec![0u8; len * 8];
    r.read_exact(&mut bytes)?;
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

fn write_f64_slice<W: Write>(w: &mut W, data: &[f64]) -> Result<()> {
    let mut bytes = Vec::with_capacity(data.len() * 8);
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&bytes)?;
    Ok(())
}

/// Lower-case hex SHA-256 digest.
pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes bytes to `path` through a temporary sibling and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::InvalidParameter(format!("not a file path: {}", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", file_name.to_string_lossy()));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// `U3SSINO1` layout: magic, then little-endian `Nd: u32, Nt: u32,
/// t0: f64 [s], dt: f64 [s], c: f64 [m/s], ring_radius: f64 [mm],
/// arc: f64 [deg], theta: f64 [deg], wavelength: f64 [nm], slice: u32`,
/// then `Nd x Nt` f64 samples, row-major by detector.
pub fn write_sinogram<W: Write>(mut w: W, sino: &Sinogram) -> Result<()> {
    sino.check()?;
    w.write_all(SINOGRAM_MAGIC)?;
    write_u32(&mut w, sino.geometry.num_elements as u32)?;
    write_u32(&mut w, sino.time.num_samples as u32)?;
    write_f64(&mut w, sino.time.t0_s)?;
    write_f64(&mut w, sino.time.dt_s)?;
    write_f64(&mut w, sino.time.speed_of_sound_m_s)?;
    write_f64(&mut w, sino.geometry.ring_radius_mm)?;
    write_f64(&mut w, sino.geometry.arc_deg)?;
    write_f64(&mut w, sino.geometry.rotation_deg)?;
    write_f64(&mut w, sino.wavelength_nm)?;
    write_u32(&mut w, sino.slice_index as u32)?;
    write_f64_slice(&mut w, &sino.samples)
}

pub fn read_sinogram<R: Read>(mut r: R) -> Result<Sinogram> {
    expect_magic(&mut r, SINOGRAM_MAGIC)?;
    let nd = read_u32(&mut r)? as usize;
    let nt = read_u32(&mut r)? as usize;
    let time = TimeGrid {
        t0_s: read_f64(&mut r)?,
        dt_s: read_f64(&mut r)?,
        num_samples: nt,
        speed_of_sound_m_s: read_f64(&mut r)?,
    };
    let ring_radius_mm = read_f64(&mut r)?;
    let arc_deg = read_f64(&mut r)?;
    let rotation_deg = read_f64(&mut r)?;
    let wavelength_nm = read_f64(&mut r)?;
    let slice_index = read_u32(&mut r)? as usize;
    let geometry = RingGeometry {
        ring_radius_mm,
        arc_deg,
        num_elements: nd,
        rotation_deg,
    };
    geometry.validate()?;
    time.validate()?;
    let samples = read_f64_vec(&mut r, nd * nt)?;
    Ok(Sinogram {
        geometry,
        time,
        samples,
        wavelength_nm,
        slice_index,
    })
}

/// Named numeric header fields stored alongside an image.
pub type ImageMeta = Vec<(String, f64)>;

/// `U3SIMG1` layout: magic, `rows: u32, cols: u32, fov: f64 [mm]`,
/// `meta_count: u32`, then per entry `key_len: u32, key (utf-8), value: f64`,
/// then `rows x cols` f64 samples, row-major.
pub fn write_image<W: Write>(mut w: W, image: &Image, meta: &[(String, f64)]) -> Result<()> {
    w.write_all(IMAGE_MAGIC)?;
    write_u32(&mut w, image.grid.side as u32)?;
    write_u32(&mut w, image.grid.side as u32)?;
    write_f64(&mut w, image.grid.fov_mm)?;
    write_u32(&mut w, meta.len() as u32)?;
    for (k, v) in meta {
        write_u32(&mut w, k.len() as u32)?;
        w.write_all(k.as_bytes())?;
        write_f64(&mut w, *v)?;
    }
    write_f64_slice(&mut w, &image.data)
}

pub fn read_image<R: Read>(mut r: R) -> Result<(Image, ImageMeta)> {
    expect_magic(&mut r, IMAGE_MAGIC)?;
    let rows = read_u32(&mut r)? as usize;
    let cols = read_u32(&mut r)? as usize;
    if rows != cols {
        return Err(Error::Format(format!("non-square image {rows}x{cols}")));
    }
    let fov = read_f64(&mut r)?;
    let count = read_u32(&mut r)? as usize;
    let mut meta = Vec::with_capacity(count.min(64));
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        if len > 4096 {
            return Err(Error::Format(format!("metadata key length {len}")));
        }
        let mut key = vec![0u8; len];
        r.read_exact(&mut key)?;
        let key = String::from_utf8(key).map_err(|e| Error::Format(e.to_string()))?;
        meta.push((key, read_f64(&mut r)?));
    }
    let grid = GridSpec::new(rows, fov)?;
    let data = read_f64_vec(&mut r, rows * cols)?;
    Ok((Image::from_vec(grid, data)?, meta))
}

/// 8-bit binary PGM of the min-max normalised image.
pub fn to_pgm(image: &Image) -> Vec<u8> {
    let n = image.grid.side;
    let mut out = format!("P5\n{n} {n}\n255\n").into_bytes();
    out.extend(to_gray8(image));
    out
}

/// Min-max scaled 8-bit grey levels, row 0 first.
pub fn to_gray8(image: &Image) -> Vec<u8> {
    image
        .normalized()
        .data
        .iter()
        .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect()
}

pub fn save_sinogram(path: &Path, sino: &Sinogram) -> Result<()> {
    let mut buf = Vec::new();
    write_sinogram(&mut buf, sino)?;
    write_atomic(path, &buf)
}

pub fn load_sinogram(path: &Path) -> Result<Sinogram> {
    read_sinogram(std::io::BufReader::new(fs::File::open(path)?))
}

pub fn save_image(path: &Path, image: &Image, meta: &[(String, f64)]) -> Result<()> {
    let mut buf = Vec::new();
    write_image(&mut buf, image, meta)?;
    write_atomic(path, &buf)
}

pub fn load_image(path: &Path) -> Result<(Image, ImageMeta)> {
    read_image(std::io::BufReader::new(fs::File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn sinogram_round_trip(nd in 1usize..6, nt in 1usize..20, theta in 0.0f64..360.0, seed in 0u64..1000) {
            let geometry = RingGeometry { ring_radius_mm: 40.5, arc_deg: 270.0, num_elements: nd, rotation_deg: theta };
            let time = TimeGrid { t0_s: 1e-5, dt_s: 2.5e-8, num_samples: nt, speed_of_sound_m_s: 1536.0 };
            let mut s = Sinogram::zeros(geometry, time);
            for (i, v) in s.samples.iter_mut().enumerate() {
                *v = ((i as u64 * 2654435761 + seed) % 1000) as f64 / 7.0 - 50.0;
            }
            s.wavelength_nm = 760.0;
            s.slice_index = 9;
            let mut buf = Vec::new();
            write_sinogram(&mut buf, &s).unwrap();
            prop_assert_eq!(buf.len(), 8 + 4 + 4 + 7 * 8 + 4 + nd * nt * 8);
            prop_assert_eq!(read_sinogram(&buf[..]).unwrap(), s);
        }

        #[test]
        fn image_round_trip(side in 1usize..12, fov in 1.0f64..30.0, m in 0.0f64..20.0) {
            let grid = GridSpec::new(side, fov).unwrap();
            let data = (0..side * side).map(|i| (i as f64).sin()).collect();
            let img = Image::from_vec(grid, data).unwrap();
            let meta = vec![("window_center".to_string(), m), ("W".to_string(), 5.0)];
            let mut buf = Vec::new();
            write_image(&mut buf, &img, &meta).unwrap();
            let (back, back_meta) = read_image(&buf[..]).unwrap();
            prop_assert_eq!(back, img);
            prop_assert_eq!(back_meta, meta);
        }
    }

    #[test]
    fn sinogram_header_layout_is_fixed() {
        let geometry = RingGeometry {
            ring_radius_mm: 40.5,
            arc_deg: 270.0,
            num_elements: 2,
            rotation_deg: 2.5,
        };
        let time = TimeGrid {
            t0_s: 1e-5,
            dt_s: 2.5e-8,
            num_samples: 3,
            speed_of_sound_m_s: 1536.0,
        };
        let mut s = Sinogram::zeros(geometry, time);
        s.slice_index = 4;
        let mut buf = Vec::new();
        write_sinogram(&mut buf, &s).unwrap();
        assert_eq!(&buf[0..8], b"U3SSINO1");
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(buf[12..16].try_into().unwrap()), 3);
        assert_eq!(f64::from_le_bytes(buf[32..40].try_into().unwrap()), 1536.0);
        assert_eq!(f64::from_le_bytes(buf[56..64].try_into().unwrap()), 2.5);
        assert_eq!(u32::from_le_bytes(buf[72..76].try_into().unwrap()), 4);
    }

    #[test]
    fn wrong_magic_is_rejected() {
        assert!(matches!(
            read_sinogram(&b"U3SIMG1\0\0\0\0\0"[..]),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn pgm_header() {
        let grid = GridSpec::new(3, 1.0).unwrap();
        let img = Image::from_vec(grid, (0..9).map(|v| v as f64).collect()).unwrap();
        let pgm = to_pgm(&img);
        assert!(pgm.starts_with(b"P5\n3 3\n255\n"));
        assert_eq!(*pgm.last().unwrap(), 255);
    }
}
