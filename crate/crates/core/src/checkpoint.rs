//! `BRCK` checkpoint files: named parameter tensors, frozen band bases and
//! a text echo of the producing configuration. All values are little-endian;
//! tensor data is stored as `f64` so reloads are bit-exact.

use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::params::{ModelParams, ModelShape};
use crate::spectral::{BandMode, BandSet};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"BRCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub bands: BandSet,
    pub config_echo: String,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, vs: &[f64]) {
        for v in vs {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("checkpoint truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Format("checkpoint size overflows".into()))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("checkpoint string is not UTF-8".into()))
    }
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        let shape = self.params.shape();
        for v in [
            shape.num_users,
            shape.num_items,
            shape.dim,
            shape.bands,
            shape.visual_dim,
            shape.text_dim,
        ] {
            w.u64(v as u64);
        }
        w.u8(u8::from(shape.with_coeff));

        let tensors = self.params.tensors();
        w.u32(tensors.len() as u32);
        for t in &tensors {
            w.str(t.name);
            w.u32(t.shape.len() as u32);
            for &d in &t.shape {
                w.u64(d as u64);
            }
            w.f64s(t.data);
        }

        w.str(self.bands.mode.name());
        w.u32(self.bands.widths.len() as u32);
        for &width in &self.bands.widths {
            w.u64(width as u64);
        }
        match &self.bands.bases {
            Some(bases) => {
                w.u8(1);
                for b in bases {
                    w.u64(b.nrows() as u64);
                    w.u64(b.ncols() as u64);
                    w.f64s(b.as_standard_layout().as_slice().expect("contiguous"));
                }
            }
            None => w.u8(0),
        }
        w.str(&self.config_echo);
        w.0
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("checkpoint magic is not BRCK".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported BRCK version {version}")));
        }
        let shape = ModelShape {
            num_users: r.usize()?,
            num_items: r.usize()?,
            dim: r.usize()?,
            bands: r.usize()?,
            visual_dim: r.usize()?,
            text_dim: r.usize()?,
            with_coeff: r.u8()? != 0,
        };
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name = r.str()?;
            let ndim = r.u32()? as usize;
            let dims = (0..ndim).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
            let len = dims.iter().product();
            tensors.push((name, dims, r.f64s(len)?));
        }
        let params = ModelParams::from_tensors(&shape, &tensors)?;

        let mode: BandMode = r.str()?.parse().map_err(|_| Error::Format("unknown band mode in checkpoint".into()))?;
        let n_widths = r.u32()? as usize;
        let widths = (0..n_widths).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
        let bases = match r.u8()? {
            0 => None,
            1 => {
                let mut out = Vec::with_capacity(3);
                for _ in 0..3 {
                    let (rows, cols) = (r.usize()?, r.usize()?);
                    let data = r.f64s(rows * cols)?;
                    out.push(
                        Array2::from_shape_vec((rows, cols), data)
                            .map_err(|e| Error::Format(format!("band basis: {e}")))?,
                    );
                }
                let [a, b, c]: [Array2<f64>; 3] = out.try_into().expect("three bases");
                Some([a, b, c])
            }
            other => return Err(Error::Format(format!("invalid basis flag {other}"))),
        };
        let bands = BandSet { mode, widths, bases };
        if bands.num_bands() != shape.bands || bands.dim() != shape.dim {
            return Err(Error::Format("band layout does not match parameter shape".into()));
        }
        let config_echo = r.str()?;
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes in checkpoint", bytes.len() - r.pos)));
        }
        Ok(Checkpoint {
            params,
            bands,
            config_echo,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::ChannelEmbeddings;
    use crate::spectral::fit_bands;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample(with_coeff: bool, mode: BandMode) -> Checkpoint {
        let shape = ModelShape {
            num_users: 3,
            num_items: 4,
            dim: 6,
            bands: 3,
            visual_dim: 2,
            text_dim: 5,
            with_coeff,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut params = ModelParams::init(&shape, &mut rng);
        params.gate_bias[1] = std::f64::consts::PI;
        let z = ChannelEmbeddings {
            num_users: 3,
            nodes: [0, 1, 2].map(|_| Array2::from_shape_fn((7, 6), |_| rng.random_range(-1.0..1.0))),
        };
        Checkpoint {
            params,
            bands: fit_bands(&z, mode, 3, 1).unwrap(),
            config_echo: "seed=2020\nbands=3\n".into(),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for (coeff, mode) in [(false, BandMode::Svd), (true, BandMode::EqualCapacity), (true, BandMode::Dct)] {
            let ck = sample(coeff, mode);
            let bytes = ck.encode();
            assert_eq!(&bytes[..4], b"BRCK");
            let back = Checkpoint::decode(&bytes).unwrap();
            assert_eq!(back, ck);
            assert_eq!(back.encode(), bytes);
        }
    }

    #[test]
    fn rejects_corruption() {
        let bytes = sample(false, BandMode::Svd).encode();
        assert!(Checkpoint::decode(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::decode(&bad).is_err());
        let mut long = bytes;
        long.push(0);
        assert!(Checkpoint::decode(&long).is_err());
    }
}
