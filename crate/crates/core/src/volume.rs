//! Binary volume container.
//!
//! Little-endian layout, 44-byte header followed by raw samples:
//!
//! ```text
//! offset  0  magic      "MMIV" (intensity, f64 samples) or "MMIL" (labels, u16 samples)
//! offset  4  u32        version
//! offset  8  u32 x 3    D, H, W
//! offset 20  f64 x 3    spacing in mm, same axis order
//! offset 44  samples    D*H*W values, W fastest
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGE_MAGIC: &[u8; 4] = b"MMIV";
pub const LABEL_MAGIC: &[u8; 4] = b"MMIL";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 44;

/// Sample types a volume file can hold.
pub trait Sample: Copy + PartialEq + std::fmt::Debug {
    const MAGIC: &'static [u8; 4];
    const WIDTH: usize;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Sample for f64 {
    const MAGIC: &'static [u8; 4] = IMAGE_MAGIC;
    const WIDTH: usize = 8;
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().unwrap())
    }
}

impl Sample for u16 {
    const MAGIC: &'static [u8; 4] = LABEL_MAGIC;
    const WIDTH: usize = 2;
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        u16::from_le_bytes(bytes.try_into().unwrap())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Volume<T: Sample = f64> {
    dims: [usize; 3],
    spacing: [f64; 3],
    data: Vec<T>,
}

/// Integer label map volume.
pub type LabelVolume = Volume<u16>;

impl<T: Sample> Volume<T> {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], data: Vec<T>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0 || d > u32::MAX as usize) {
            return Err(Error::shape(format!("volume dims must be in 1..=u32::MAX, got {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::shape(format!("volume spacing must be positive, got {spacing:?}")));
        }
        let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        if n != Some(data.len()) {
            return Err(Error::shape(format!(
                "volume {dims:?} needs {} samples, got {}",
                dims.iter().product::<usize>(),
                data.len()
            )));
        }
        Ok(Volume { dims, spacing, data })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn slice_len(&self) -> usize {
        self.dims[1] * self.dims[2]
    }

    /// Samples of slice `z`, row-major.
    pub fn slice(&self, z: usize) -> Result<&[T]> {
        if z >= self.dims[0] {
            return Err(Error::Index {
                index: z,
                len: self.dims[0],
            });
        }
        let n = self.slice_len();
        Ok(&self.data[z * n..(z + 1) * n])
    }

    /// Volume of one voxel in mm³.
    pub fn voxel_volume(&self) -> f64 {
        self.spacing.iter().product()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.data.len() * T::WIDTH);
        out.extend_from_slice(T::MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for d in self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for s in self.spacing {
            out.extend_from_slice(&s.to_le_bytes());
        }
        for &v in &self.data {
            v.write_le(&mut out);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::format(
                bytes.len() as u64,
                format!("truncated header: {} of {HEADER_LEN} bytes", bytes.len()),
            ));
        }
        if &bytes[..4] != T::MAGIC {
            return Err(Error::format(
                0,
                format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(&bytes[..4]),
                    String::from_utf8_lossy(T::MAGIC)
                ),
            ));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let version = u32_at(4);
        if version != VERSION {
            return Err(Error::format(4, format!("unsupported version {version}")));
        }
        let mut dims = [0usize; 3];
        for (i, d) in dims.iter_mut().enumerate() {
            *d = u32_at(8 + 4 * i) as usize;
            if *d == 0 {
                return Err(Error::format(8 + 4 * i as u64, "zero dimension"));
            }
        }
        let mut spacing = [0.0; 3];
        for (i, s) in spacing.iter_mut().enumerate() {
            let o = 20 + 8 * i;
            *s = f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
            if !(*s > 0.0 && s.is_finite()) {
                return Err(Error::format(o as u64, format!("invalid spacing {s}")));
            }
        }
        let payload = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(T::WIDTH))
            .ok_or_else(|| Error::format(8, format!("dimensions {dims:?} overflow")))?;
        let have = bytes.len() - HEADER_LEN;
        if have < payload {
            return Err(Error::format(
                bytes.len() as u64,
                format!("truncated data: {have} of {payload} bytes"),
            ));
        }
        if have > payload {
            return Err(Error::format(
                (HEADER_LEN + payload) as u64,
                format!("{} trailing bytes", have - payload),
            ));
        }
        let data = bytes[HEADER_LEN..].chunks_exact(T::WIDTH).map(T::read_le).collect();
        Ok(Volume { dims, spacing, data })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

impl Volume<f64> {
    /// Slice `z` as a `[1, 1, H, W]` tensor.
    pub fn slice_tensor(&self, z: usize) -> Result<Tensor> {
        Tensor::new(vec![1, 1, self.dims[1], self.dims[2]], self.slice(z)?.to_vec())
    }
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    Volume::read(path)
}

pub fn write_volume(vol: &Volume, path: &Path) -> Result<()> {
    vol.write(path)
}

pub fn read_label_volume(path: &Path) -> Result<LabelVolume> {
    Volume::read(path)
}

pub fn write_label_volume(vol: &LabelVolume, path: &Path) -> Result<()> {
    vol.write(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constructor_validates() {
        assert!(Volume::new([1, 2, 2], [1.0; 3], vec![0.0; 4]).is_ok());
        assert!(Volume::new([1, 2, 2], [1.0; 3], vec![0.0; 3]).is_err());
        assert!(Volume::new([0, 2, 2], [1.0; 3], Vec::<f64>::new()).is_err());
        assert!(Volume::new([1, 1, 1], [1.0, 0.0, 1.0], vec![0.0]).is_err());
    }

    #[test]
    fn label_magic_differs() {
        let v = LabelVolume::new([1, 1, 2], [1.0; 3], vec![3, 4]).unwrap();
        let bytes = v.to_bytes();
        assert_eq!(&bytes[..4], b"MMIL");
        assert_eq!(&bytes[44..], &[3, 0, 4, 0]);
        assert!(matches!(Volume::<f64>::from_bytes(&bytes), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn slices_are_row_major() {
        let v = Volume::new([2, 1, 2], [1.0; 3], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(v.slice(1).unwrap(), &[3.0, 4.0]);
        assert!(v.slice(2).is_err());
        assert_eq!(v.slice_tensor(0).unwrap().shape(), &[1, 1, 1, 2]);
    }
}
