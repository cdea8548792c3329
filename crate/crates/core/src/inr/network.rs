//! Sinusoidal multi-layer perceptron mapping normalised 2D coordinates to a
//! scalar intensity, with hand-written reverse-mode gradients.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::real::Real;
use crate::error::{Error, Result};
use crate::io;

pub const DEFAULT_DEPTH: usize = 4;
pub const DEFAULT_WIDTH: usize = 512;
pub const DEFAULT_OMEGA0: f64 = 30.0;

const NET_MAGIC: &[u8; 7] = b"U3SNET1";

/// Shape of one dense layer; parameters live in the network's flat vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerShape {
    pub inputs: usize,
    pub outputs: usize,
    /// Offset of the `outputs x inputs` row-major weight block.
    pub weight_offset: usize,
    /// Offset of the `outputs` bias entries.
    pub bias_offset: usize,
}

/// `depth` dense layers: `2 -> width -> ... -> width -> 1`, with
/// `sin(omega0 * z)` after every layer except the last.
#[derive(Debug, Clone, PartialEq)]
pub struct CoordinateNetwork<T: Real = f32> {
    layers: Vec<LayerShape>,
    params: Vec<T>,
    omega0: f64,
    seed: u64,
}

/// Intermediate values kept by [`CoordinateNetwork::forward_cached`].
pub struct ForwardCache<T> {
    n: usize,
    /// Input of each layer (the coordinates for layer 0).
    inputs: Vec<Vec<T>>,
    /// `omega0 * cos(omega0 * z)` for each sine layer.
    slopes: Vec<Vec<T>>,
}

fn layer_dims(depth: usize, width: usize) -> Vec<(usize, usize)> {
    (0..depth)
        .map(|l| {
            let inputs = if l == 0 { 2 } else { width };
            let outputs = if l + 1 == depth { 1 } else { width };
            (inputs, outputs)
        })
        .collect()
}

fn shapes_from_dims(dims: &[(usize, usize)]) -> (Vec<LayerShape>, usize) {
    let mut offset = 0;
    let shapes = dims
        .iter()
        .map(|&(inputs, outputs)| {
            let weight_offset = offset;
            let bias_offset = offset + inputs * outputs;
            offset = bias_offset + outputs;
            LayerShape {
                inputs,
                outputs,
                weight_offset,
                bias_offset,
            }
        })
        .collect();
    (shapes, offset)
}

impl<T: Real> CoordinateNetwork<T> {
    /// Sinusoidal initialisation: first-layer weights in `±1/n_in`, later
    /// weights in `±sqrt(6/n_in)/omega0`, biases in `±1/sqrt(n_in)`.
    pub fn new(depth: usize, width: usize, omega0: f64, seed: u64) -> Result<Self> {
        if depth < 1 {
            return Err(Error::InvalidParameter("network depth must be at least 1".into()));
        }
        if width < 1 && depth > 1 {
            return Err(Error::InvalidParameter("network width must be at least 1".into()));
        }
        if !(omega0 > 0.0) || !omega0.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "omega0 must be positive, got {omega0}"
            )));
        }
        let (layers, count) = shapes_from_dims(&layer_dims(depth, width));
        let mut params = vec![T::zero(); count];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (l, shape) in layers.iter().enumerate() {
            let fan_in = shape.inputs as f64;
            let limit = if l == 0 {
                1.0 / fan_in
            } else {
                (6.0 / fan_in).sqrt() / omega0
            };
            let weights = shape.weight_offset..shape.bias_offset;
            for p in &mut params[weights] {
                *p = T::from_f64(rng.gen_range(-limit..=limit));
            }
            let bias_limit = 1.0 / fan_in.sqrt();
            for p in &mut params[shape.bias_offset..shape.bias_offset + shape.outputs] {
                *p = T::from_f64(rng.gen_range(-bias_limit..=bias_limit));
            }
        }
        Ok(CoordinateNetwork {
            layers,
            params,
            omega0,
            seed,
        })
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn width(&self) -> usize {
        if self.layers.len() > 1 {
            self.layers[0].outputs
        } else {
            0
        }
    }

    pub fn omega0(&self) -> f64 {
        self.omega0
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn layers(&self) -> &[LayerShape] {
        &self.layers
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// SHA-256 over the little-endian parameter bytes.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for p in &self.params {
            hasher.update(p.as_f64().to_le_bytes());
        }
        format!("{:x}", hasher.finalize())
    }

    /// Same architecture with parameters converted to another precision.
    pub fn cast<U: Real>(&self) -> CoordinateNetwork<U> {
        CoordinateNetwork {
            layers: self.layers.clone(),
            params: self.params.iter().map(|p| U::from_f64(p.as_f64())).collect(),
            omega0: self.omega0,
            seed: self.seed,
        }
    }

    /// Sets every parameter of the output layer to zero except its bias.
    pub fn set_output_layer(&mut self, bias: f64) {
        let last = *self.layers.last().expect("network has layers");
        for p in &mut self.params[last.weight_offset..last.bias_offset] {
            *p = T::zero();
        }
        self.params[last.bias_offset] = T::from_f64(bias);
    }

    fn flatten_coords(coords: &[[f64; 2]]) -> Result<Vec<T>> {
        let mut out = Vec::with_capacity(coords.len() * 2);
        for &[x, y] in coords {
            if !(0.0..1.0).contains(&x) || !(0.0..1.0).contains(&y) {
                return Err(Error::Domain(x, y));
            }
            out.push(T::from_f64(x));
            out.push(T::from_f64(y));
        }
        Ok(out)
    }

    /// Dense layer `out = input * W^T + b` for `n` rows.
    fn affine(&self, shape: &LayerShape, input: &[T], n: usize) -> Vec<T> {
        let (k, m) = (shape.inputs, shape.outputs);
        debug_assert_eq!(input.len(), n * k);
        let bias = &self.params[shape.bias_offset..shape.bias_offset + m];
        let mut out: Vec<T> = Vec::with_capacity(n * m);
        for _ in 0..n {
            out.extend_from_slice(bias);
        }
        let w = &self.params[shape.weight_offset..shape.bias_offset];
        T::gemm(
            n,
            k,
            m,
            T::one(),
            input,
            k as isize,
            1,
            w,
            1,
            k as isize,
            T::one(),
            &mut out,
            m as isize,
            1,
        );
        out
    }

    /// `v_i = M(c_i)` for coordinates in `[0,1)^2`.
    pub fn evaluate(&self, coords: &[[f64; 2]]) -> Result<Vec<f64>> {
        let x = Self::flatten_coords(coords)?;
        Ok(self.forward(x, coords.len()))
    }

    fn forward(&self, mut x: Vec<T>, n: usize) -> Vec<f64> {
        let w0 = T::from_f64(self.omega0);
        let last = self.layers.len() - 1;
        for (l, shape) in self.layers.iter().enumerate() {
            let mut z = self.affine(shape, &x, n);
            if l < last {
                z.iter_mut().for_each(|v| *v = (w0 * *v).sin());
            }
            x = z;
        }
        x.into_iter().map(T::as_f64).collect()
    }

    /// Forward pass that keeps what [`Self::backward`] needs.
    pub fn forward_cached(&self, coords: &[[f64; 2]]) -> Result<(Vec<f64>, ForwardCache<T>)> {
        let n = coords.len();
        let mut x = Self::flatten_coords(coords)?;
        let w0 = T::from_f64(self.omega0);
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut slopes = Vec::with_capacity(last);
        for (l, shape) in self.layers.iter().enumerate() {
            let mut z = self.affine(shape, &x, n);
            if l < last {
                let mut slope = Vec::with_capacity(z.len());
                for v in z.iter_mut() {
                    let (s, c) = (w0 * *v).sin_cos();
                    *v = s;
                    slope.push(w0 * c);
                }
                slopes.push(slope);
            }
            inputs.push(std::mem::replace(&mut x, z));
        }
        let out = x.into_iter().map(T::as_f64).collect();
        Ok((out, ForwardCache { n, inputs, slopes }))
    }

    /// Gradient of `sum_i dv_i * v_i` with respect to the parameters, where
    /// `dv` is the loss gradient with respect to the outputs.
    pub fn backward(&self, cache: &ForwardCache<T>, dv: &[f64]) -> Vec<T> {
        let n = cache.n;
        debug_assert_eq!(dv.len(), n);
        let mut grad = vec![T::zero(); self.params.len()];
        let mut delta: Vec<T> = dv.iter().map(|&v| T::from_f64(v)).collect();
        for l in (0..self.layers.len()).rev() {
            let shape = self.layers[l];
            let (k, m) = (shape.inputs, shape.outputs);
            if l + 1 < self.layers.len() {
                for (d, s) in delta.iter_mut().zip(&cache.slopes[l]) {
                    *d = *d * *s;
                }
            }
            let input = &cache.inputs[l];
            // dW = delta^T * input
            T::gemm(
                m,
                n,
                k,
                T::one(),
                &delta,
                1,
                m as isize,
                input,
                k as isize,
                1,
                T::zero(),
                &mut grad[shape.weight_offset..shape.bias_offset],
                k as isize,
                1,
            );
            let db = &mut grad[shape.bias_offset..shape.bias_offset + m];
            for row in delta.chunks_exact(m) {
                for (b, &d) in db.iter_mut().zip(row) {
                    *b = *b + d;
                }
            }
            if l > 0 {
                let mut next = vec![T::zero(); n * k];
                let w = &self.params[shape.weight_offset..shape.bias_offset];
                T::gemm(
                    n,
                    m,
                    k,
                    T::one(),
                    &delta,
                    m as isize,
                    1,
                    w,
                    k as isize,
                    1,
                    T::zero(),
                    &mut next,
                    k as isize,
                    1,
                );
                delta = next;
            }
        }
        grad
    }

    /// Writes the `U3SNET1` checkpoint: magic, layer count (u32), per-layer
    /// `(inputs, outputs)` as u32 pairs, `omega0` (f64), seed (u64), then all
    /// parameters as little-endian f32 in flat layout (per layer: weights
    /// row-major `outputs x inputs`, then biases).
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(NET_MAGIC)?;
        io::write_u32(&mut w, self.layers.len() as u32)?;
        for shape in &self.layers {
            io::write_u32(&mut w, shape.inputs as u32)?;
            io::write_u32(&mut w, shape.outputs as u32)?;
        }
        io::write_f64(&mut w, self.omega0)?;
        io::write_u64(&mut w, self.seed)?;
        for p in &self.params {
            w.write_all(&(p.as_f64() as f32).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self> {
        io::expect_magic(&mut r, NET_MAGIC)?;
        let count = io::read_u32(&mut r)? as usize;
        if count == 0 || count > 4096 {
            return Err(Error::Format(format!("implausible layer count {count}")));
        }
        let mut dims = Vec::with_capacity(count);
        for _ in 0..count {
            dims.push((io::read_u32(&mut r)? as usize, io::read_u32(&mut r)? as usize));
        }
        for w in dims.windows(2) {
            if w[0].1 != w[1].0 {
                return Err(Error::Format("layer dimensions do not chain".into()));
            }
        }
        if dims[0].0 != 2 || dims[count - 1].1 != 1 {
            return Err(Error::Format("network must map 2 inputs to 1 output".into()));
        }
        let omega0 = io::read_f64(&mut r)?;
        let seed = io::read_u64(&mut r)?;
        let (layers, total) = shapes_from_dims(&dims);
        let mut params = Vec::with_capacity(total);
        let mut buf = [0u8; 4];
        for _ in 0..total {
            r.read_exact(&mut buf)?;
            params.push(T::from_f64(f32::from_le_bytes(buf) as f64));
        }
        Ok(CoordinateNetwork {
            layers,
            params,
            omega0,
            seed,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid_coords(side: usize) -> Vec<[f64; 2]> {
        crate::image::GridSpec::new(side, 1.0).unwrap().normalized_coords()
    }

    #[test]
    fn zero_output_layer_returns_bias() {
        let mut net = CoordinateNetwork::<f64>::new(3, 16, 30.0, 1).unwrap();
        net.set_output_layer(0.37);
        let out = net.evaluate(&grid_coords(7)).unwrap();
        assert!(out.iter().all(|&v| v == 0.37));
    }

    #[test]
    fn evaluation_is_deterministic() {
        let net = CoordinateNetwork::<f32>::new(4, 32, 30.0, 9).unwrap();
        let c = grid_coords(12);
        let a = net.evaluate(&c).unwrap();
        let b = net.evaluate(&c).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 144);
        let (cached, _) = net.forward_cached(&c).unwrap();
        assert_eq!(a, cached);
    }

    #[test]
    fn full_resolution_grid_gives_one_value_per_pixel() {
        let net = CoordinateNetwork::<f32>::new(2, 8, 30.0, 0).unwrap();
        assert_eq!(net.evaluate(&grid_coords(220)).unwrap().len(), 48400);
    }

    #[test]
    fn coordinates_outside_unit_square_are_rejected() {
        let net = CoordinateNetwork::<f64>::new(2, 4, 30.0, 0).unwrap();
        assert!(matches!(net.evaluate(&[[1.0, 0.5]]), Err(Error::Domain(..))));
        assert!(matches!(net.evaluate(&[[0.2, -0.1]]), Err(Error::Domain(..))));
    }

    #[test]
    fn initialisation_follows_sinusoidal_limits() {
        let net = CoordinateNetwork::<f64>::new(3, 64, 30.0, 4).unwrap();
        let l0 = net.layers()[0];
        let first = &net.params()[l0.weight_offset..l0.bias_offset];
        assert!(first.iter().all(|w| w.abs() <= 0.5));
        let l1 = net.layers()[1];
        let hidden = &net.params()[l1.weight_offset..l1.bias_offset];
        let lim = (6.0f64 / 64.0).sqrt() / 30.0;
        assert!(hidden.iter().all(|w| w.abs() <= lim));
        assert!(hidden.iter().any(|w| w.abs() > 0.5 * lim));
    }

    #[test]
    fn parameter_count_matches_layout() {
        let net = CoordinateNetwork::<f32>::new(4, 10, 30.0, 0).unwrap();
        assert_eq!(net.num_params(), (2 * 10 + 10) + 2 * (10 * 10 + 10) + (10 + 1));
        assert_eq!(net.depth(), 4);
        assert_eq!(net.width(), 10);
    }

    #[test]
    fn checkpoint_round_trip() {
        let net = CoordinateNetwork::<f32>::new(3, 12, 30.0, 77).unwrap();
        let mut buf = Vec::new();
        net.write_checkpoint(&mut buf).unwrap();
        assert_eq!(&buf[..7], b"U3SNET1");
        let back = CoordinateNetwork::<f32>::read_checkpoint(&buf[..]).unwrap();
        assert_eq!(back, net);
        assert!(CoordinateNetwork::<f32>::read_checkpoint(&buf[..20]).is_err());
    }
}
