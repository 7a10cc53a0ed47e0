//! Dense `f32` tensors and the `CTNS` interchange format.
//!
//! Layout of a `.ctns` file, all integers little-endian:
//!
//! ```text
//! "CTNS" | version u8 = 1 | dtype u8 = 1 (f32) | ndim u8 | reserved u8 = 0
//! ndim x u32 dims | row-major f32 payload
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CTNS";
pub const VERSION: u8 = 1;
pub const DTYPE_F32: u8 = 1;
pub const MAX_RANK: usize = 8;
const HEADER_LEN: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        validate_shape(&shape)?;
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} holds {numel} values but {} were given",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        validate_shape(&shape)?;
        let numel = shape.iter().product();
        Ok(Self {
            shape,
            data: vec![0.0; numel],
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    /// Serializes into the `CTNS` byte layout.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.shape.len() + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&[VERSION, DTYPE_F32, self.shape.len() as u8, 0]);
        for &d in &self.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Format(format!(
                "file is {} bytes, shorter than the {HEADER_LEN}-byte header",
                bytes.len()
            )));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::Format(format!("bad magic {:?}", &bytes[..4])));
        }
        let (version, dtype, ndim) = (bytes[4], bytes[5], bytes[6] as usize);
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        if dtype != DTYPE_F32 {
            return Err(Error::Format(format!("unsupported dtype code {dtype}")));
        }
        if ndim == 0 || ndim > MAX_RANK {
            return Err(Error::Format(format!("rank {ndim} outside 1..={MAX_RANK}")));
        }
        let dims_end = HEADER_LEN + 4 * ndim;
        if bytes.len() < dims_end {
            return Err(Error::Format("truncated dimension table".into()));
        }
        let shape: Vec<usize> = bytes[HEADER_LEN..dims_end]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
            .collect();
        validate_shape(&shape).map_err(|e| Error::Format(e.to_string()))?;
        let numel: usize = shape.iter().product();
        let payload = &bytes[dims_end..];
        if payload.len() != 4 * numel {
            return Err(Error::Length {
                expected: 4 * numel,
                actual: payload.len(),
            });
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Self { shape, data })
    }
}

fn validate_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.len() > MAX_RANK {
        return Err(Error::Dimension(format!(
            "rank {} outside 1..={MAX_RANK}",
            shape.len()
        )));
    }
    if let Some(d) = shape.iter().find(|&&d| d == 0 || d > u32::MAX as usize) {
        return Err(Error::Dimension(format!(
            "invalid dimension {d} in {shape:?}"
        )));
    }
    Ok(())
}

pub fn write_tensor(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, t.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Tensor::from_bytes(&bytes)
}

/// Sum of elementwise products over the flattened tensors.
///
/// Products of two `f32` values are exact in `f64`; the sum is accumulated in
/// `f64` blocks and the block totals are then summed.
pub fn flat_dot(a: &Tensor, b: &Tensor) -> Result<f64> {
    dot_slices(a.data(), b.data())
}

pub fn dot_slices(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!(
            "dot product of {} and {} elements",
            a.len(),
            b.len()
        )));
    }
    const BLOCK: usize = 512;
    let total = a
        .chunks(BLOCK)
        .zip(b.chunks(BLOCK))
        .map(|(x, y)| {
            x.iter()
                .zip(y)
                .map(|(&p, &q)| f64::from(p) * f64::from(q))
                .sum::<f64>()
        })
        .sum();
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Neumaier-compensated summation of exact f64 products.
    fn compensated_dot(a: &[f32], b: &[f32]) -> f64 {
        let mut sum = 0.0f64;
        let mut comp = 0.0f64;
        for (&x, &y) in a.iter().zip(b) {
            let p = f64::from(x) * f64::from(y);
            let t = sum + p;
            if sum.abs() >= p.abs() {
                comp += (sum - t) + p;
            } else {
                comp += (p - t) + sum;
            }
            sum = t;
        }
        sum + comp
    }

    #[test]
    fn file_sizes_follow_header_layout() {
        let dir = tempfile::tempdir().unwrap();
        let t = Tensor::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let p = dir.path().join("a.ctns");
        write_tensor(&t, &p).unwrap();
        assert_eq!(fs::metadata(&p).unwrap().len(), 40);

        let z = Tensor::new(vec![1], vec![0.0]).unwrap();
        let p = dir.path().join("z.ctns");
        write_tensor(&z, &p).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert_eq!(bytes.len(), 16);
        assert_eq!(&bytes[12..], &[0, 0, 0, 0]);
        assert_eq!(&bytes[..8], b"CTNS\x01\x01\x01\x00");
        assert_eq!(read_tensor(&p).unwrap(), z);
    }

    #[test]
    fn bad_magic_and_short_payload_are_rejected() {
        let mut bytes = Tensor::new(vec![2, 2], vec![1.0; 4]).unwrap().to_bytes();
        let good = bytes.clone();
        bytes[..4].copy_from_slice(b"XXXX");
        assert!(matches!(Tensor::from_bytes(&bytes), Err(Error::Format(_))));

        let truncated = &good[..good.len() - 4];
        assert!(matches!(
            Tensor::from_bytes(truncated),
            Err(Error::Length {
                expected: 16,
                actual: 12
            })
        ));

        let mut wrong_dtype = good.clone();
        wrong_dtype[5] = 2;
        assert!(matches!(
            Tensor::from_bytes(&wrong_dtype),
            Err(Error::Format(_))
        ));
        let mut wrong_version = good;
        wrong_version[4] = 9;
        assert!(matches!(
            Tensor::from_bytes(&wrong_version),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn shape_invariants() {
        assert!(Tensor::new(vec![], vec![]).is_err());
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
        assert!(Tensor::new(vec![1; 9], vec![1.0]).is_err());
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn flat_dot_small_cases() {
        let a = Tensor::new(vec![3], vec![1., 0., 2.]).unwrap();
        let b = Tensor::new(vec![3], vec![3., 1., 1.]).unwrap();
        assert_eq!(flat_dot(&a, &b).unwrap(), 5.0);

        let s = 0.5f32.sqrt();
        let u = Tensor::new(vec![2], vec![s, s]).unwrap();
        assert!((flat_dot(&u, &u).unwrap() - 1.0).abs() < 1e-6);

        let c = Tensor::new(vec![2], vec![1., 1.]).unwrap();
        assert!(matches!(flat_dot(&a, &c), Err(Error::Dimension(_))));
    }

    #[test]
    fn flat_dot_matches_compensated_oracle_on_a_million_elements() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 1_000_000;
        let a: Vec<f32> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f32> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let got = dot_slices(&a, &b).unwrap();
        let want = compensated_dot(&a, &b);
        assert!(((got - want) / want).abs() < 1e-9, "{got} vs {want}");
    }

    proptest! {
        #[test]
        fn byte_round_trip_is_identity(
            shape in prop::collection::vec(1usize..5, 1..=4),
            seed in any::<u64>(),
        ) {
            let n: usize = shape.iter().product();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f32> = (0..n).map(|_| f32::from_bits(rng.gen::<u32>() & 0x7f7f_ffff)).collect();
            let t = Tensor::new(shape, data).unwrap();
            let bytes = t.to_bytes();
            let back = Tensor::from_bytes(&bytes).unwrap();
            prop_assert_eq!(back.to_bytes(), bytes);
        }

        #[test]
        fn dot_is_symmetric_and_bilinear(
            xi in prop::collection::vec(-1024i32..=1024, 1..64),
            shift in 0usize..64,
            alpha_exp in -4i32..4,
        ) {
            // Dyadic inputs keep the f32 sums and scalings exact, so any
            // discrepancy is the kernel's own.
            let to_f = |v: i32| v as f32 / 1024.0;
            let n = xi.len();
            let xs: Vec<f32> = xi.iter().map(|&v| to_f(v)).collect();
            let ys: Vec<f32> = (0..n).map(|i| to_f(xi[(i + shift) % n] / 2 - 7)).collect();
            let zs: Vec<f32> = xi.iter().rev().map(|&v| to_f(v / 4 + 3)).collect();
            let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-300);

            let d_xy = dot_slices(&xs, &ys).unwrap();
            prop_assert!(rel(d_xy, dot_slices(&ys, &xs).unwrap()) <= 1e-9 || d_xy == 0.0);

            let combo: Vec<f32> = (0..n).map(|i| ys[i] + zs[i]).collect();
            let lhs = dot_slices(&xs, &combo).unwrap();
            let rhs = d_xy + dot_slices(&xs, &zs).unwrap();
            prop_assert!(lhs == rhs || rel(lhs, rhs) <= 1e-9);

            let alpha = 2f32.powi(alpha_exp);
            let scaled: Vec<f32> = xs.iter().map(|v| v * alpha).collect();
            let lhs = dot_slices(&scaled, &ys).unwrap();
            let rhs = f64::from(alpha) * d_xy;
            prop_assert!(lhs == rhs || rel(lhs, rhs) <= 1e-9);
        }
    }
}
