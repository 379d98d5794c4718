//! `SACO` (output matrix) and `SACC` (fingerprint) binary files.
//!
//! ```text
//! SACO: "SACO" u16 version=1 | u8 kind | u64 n | u64 d | [u8;32] probe digest | n*d f64
//! SACC: "SACC" u16 version=1 | u8 kernel tag | f64 bandwidth | u64 n | [u8;32] probe digest | n*n f64
//! ```
//! All integers and floats are little-endian; matrices are row-major.

use std::path::Path;

use ndarray::Array2;

use super::{CorrelationMatrix, Kernel, OutputKind, OutputMatrix};
use crate::binfmt::{read_file, write_file, Reader, Writer};
use crate::digest::Digest;
use crate::error::{Error, Result};

pub const OUTPUTS_MAGIC: &[u8; 4] = b"SACO";
pub const FINGERPRINT_MAGIC: &[u8; 4] = b"SACC";
const VERSION: u16 = 1;

const KERNEL_COSINE: u8 = 0;
const KERNEL_RBF: u8 = 1;

impl OutputMatrix {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(OUTPUTS_MAGIC, VERSION);
        w.u8(self.kind.tag())
            .u64(self.rows() as u64)
            .u64(self.dims() as u64)
            .bytes(self.probe_digest.as_bytes())
            .f64s(self.values.iter());
        w.finish()
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self> {
        let (mut r, version) = Reader::open(data, OUTPUTS_MAGIC, "output matrix")?;
        if version != VERSION {
            return Err(Error::Parse(format!("output matrix version {version} unsupported")));
        }
        let kind = OutputKind::from_tag(r.u8()?)?;
        let n = r.usize_from_u64()?;
        let d = r.usize_from_u64()?;
        let digest = r.digest()?;
        let count = n
            .checked_mul(d)
            .ok_or_else(|| Error::Parse("output matrix: size overflow".into()))?;
        let vals = r.f64s(count)?;
        r.expect_end()?;
        let values = Array2::from_shape_vec((n, d), vals).map_err(|e| Error::Parse(e.to_string()))?;
        OutputMatrix::new(values, kind, digest)
    }

    pub fn digest(&self) -> Digest {
        Digest::of(&self.to_bytes())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path.as_ref(), &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&read_file(path.as_ref())?)
    }
}

impl CorrelationMatrix {
    pub fn to_bytes(&self) -> Vec<u8> {
        let (tag, bw) = match self.kernel {
            Kernel::Cosine => (KERNEL_COSINE, 0.0),
            Kernel::Rbf { bandwidth } => (KERNEL_RBF, bandwidth),
        };
        let mut w = Writer::new(FINGERPRINT_MAGIC, VERSION);
        w.u8(tag)
            .f64(bw)
            .u64(self.n() as u64)
            .bytes(self.probe_digest.as_bytes())
            .f64s(self.entries.iter());
        w.finish()
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self> {
        let (mut r, version) = Reader::open(data, FINGERPRINT_MAGIC, "fingerprint")?;
        if version != VERSION {
            return Err(Error::Parse(format!("fingerprint version {version} unsupported")));
        }
        let tag = r.u8()?;
        let bw = r.f64()?;
        let kernel = match tag {
            KERNEL_COSINE => Kernel::Cosine,
            KERNEL_RBF if bw > 0.0 && bw.is_finite() => Kernel::Rbf { bandwidth: bw },
            KERNEL_RBF => return Err(Error::InvalidBandwidth(bw)),
            t => return Err(Error::Parse(format!("unknown kernel tag {t}"))),
        };
        let n = r.usize_from_u64()?;
        let digest = r.digest()?;
        let count = n
            .checked_mul(n)
            .ok_or_else(|| Error::Parse("fingerprint: size overflow".into()))?;
        let vals = r.f64s(count)?;
        r.expect_end()?;
        let entries = Array2::from_shape_vec((n, n), vals).map_err(|e| Error::Parse(e.to_string()))?;
        CorrelationMatrix::from_entries(entries, kernel, digest)
            .map_err(|e| Error::Parse(format!("fingerprint violates invariants: {e}")))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path.as_ref(), &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&read_file(path.as_ref())?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::correlation::{correlation_matrix, KernelSpec};
    use ndarray::array;

    #[test]
    fn outputs_layout_is_fixed() {
        let d = Digest::of(b"probes");
        let o = OutputMatrix::new(array![[0.25, 0.75], [1.0, 0.0]], OutputKind::Probability, d).unwrap();
        let b = o.to_bytes();
        assert_eq!(&b[..4], b"SACO");
        assert_eq!(&b[4..6], &1u16.to_le_bytes());
        assert_eq!(b[6], 0);
        assert_eq!(&b[7..15], &2u64.to_le_bytes());
        assert_eq!(&b[15..23], &2u64.to_le_bytes());
        assert_eq!(&b[23..55], d.as_bytes());
        assert_eq!(&b[55..63], &0.25f64.to_le_bytes());
        assert_eq!(b.len(), 55 + 4 * 8);
        assert_eq!(OutputMatrix::from_bytes(&b).unwrap(), o);
        assert!(OutputMatrix::from_bytes(&b[..b.len() - 1]).is_err());
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(OutputMatrix::from_bytes(&bad).is_err());
    }

    #[test]
    fn fingerprint_layout_is_fixed() {
        let d = Digest::of(b"probes");
        let o = OutputMatrix::new(array![[0.0, 1.0], [3.0, 4.0], [1.0, 1.0]], OutputKind::Logit, d).unwrap();
        let c = correlation_matrix(&o, KernelSpec::Rbf { bandwidth: Some(2.5) }).unwrap();
        let b = c.to_bytes();
        assert_eq!(&b[..4], b"SACC");
        assert_eq!(b[6], 1);
        assert_eq!(&b[7..15], &2.5f64.to_le_bytes());
        assert_eq!(&b[15..23], &3u64.to_le_bytes());
        assert_eq!(&b[23..55], d.as_bytes());
        assert_eq!(b.len(), 55 + 9 * 8);
        assert_eq!(CorrelationMatrix::from_bytes(&b).unwrap(), c);
    }
}
