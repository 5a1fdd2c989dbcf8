//! Binary model checkpoints.
//!
//! All integers and floats are little-endian.
//!
//! | offset            | size          | content                                   |
//! |-------------------|---------------|-------------------------------------------|
//! | 0                 | 4             | magic `b"TMA1"`                           |
//! | 4                 | 4             | format version, `u32` (= 1)               |
//! | 8                 | 8             | `d`, feature dimension, `u64`             |
//! | 16                | 8             | `r`, rank, `u64`                          |
//! | 24                | `6·r·d·8`     | `K, P, U, V, Λ, Ψ`, each `r×d` row-major `f64` |
//! | 24 + 48·r·d       | 8             | trailer length `L` in bytes, `u64`        |
//! | 32 + 48·r·d       | `L`           | trainer configuration, UTF-8 JSON          |
//!
//! Nothing follows the trailer.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;

use crate::admm::TrainerConfig;
use crate::error::{Error, Result};
use crate::metric::ModelState;

pub const MAGIC: &[u8; 4] = b"TMA1";
pub const VERSION: u32 = 1;

/// Upper bound on `r·d` accepted when reading, to reject garbage headers
/// before allocating.
const MAX_ENTRIES: u64 = 1 << 32;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub state: ModelState,
    pub config: TrainerConfig,
}

impl Checkpoint {
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        self.state.validate()?;
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(VERSION)?;
        w.write_u64::<LittleEndian>(self.state.dim() as u64)?;
        w.write_u64::<LittleEndian>(self.state.rank() as u64)?;
        for m in self.state.matrices() {
            // iter() walks logical row-major order whatever the memory layout
            for &v in m.iter() {
                w.write_f64::<LittleEndian>(v)?;
            }
        }
        let trailer = serde_json::to_vec(&self.config)?;
        w.write_u64::<LittleEndian>(trailer.len() as u64)?;
        w.write_all(&trailer)?;
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(truncated)?;
        if &magic != MAGIC {
            return Err(Error::Schema(format!("bad checkpoint magic {magic:?}")));
        }
        let version = r.read_u32::<LittleEndian>().map_err(truncated)?;
        if version != VERSION {
            return Err(Error::Schema(format!("unsupported checkpoint version {version}")));
        }
        let d = r.read_u64::<LittleEndian>().map_err(truncated)?;
        let rank = r.read_u64::<LittleEndian>().map_err(truncated)?;
        if d.checked_mul(rank).is_none_or(|n| n > MAX_ENTRIES) {
            return Err(Error::Schema(format!("implausible checkpoint shape {rank}x{d}")));
        }
        let (d, rank) = (d as usize, rank as usize);
        let mut read_matrix = || -> Result<Array2<f64>> {
            let mut buf = vec![0.0; rank * d];
            r.read_f64_into::<LittleEndian>(&mut buf).map_err(truncated)?;
            if buf.iter().any(|v| !v.is_finite()) {
                return Err(Error::Schema("non-finite entry in checkpoint".into()));
            }
            Ok(Array2::from_shape_vec((rank, d), buf).expect("buffer sized to shape"))
        };
        let state = ModelState {
            k: read_matrix()?,
            p: read_matrix()?,
            u: read_matrix()?,
            v: read_matrix()?,
            lambda: read_matrix()?,
            psi: read_matrix()?,
        };
        let len = r.read_u64::<LittleEndian>().map_err(truncated)?;
        let mut trailer = Vec::new();
        r.take(len).read_to_end(&mut trailer)?;
        if trailer.len() as u64 != len {
            return Err(Error::Schema("checkpoint trailer truncated".into()));
        }
        let config = serde_json::from_slice(&trailer)?;
        Ok(Self { state, config })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        // write-then-rename so a crash never leaves a half-written checkpoint
        let tmp = path.with_extension("tmp");
        self.write_to(BufWriter::new(File::create(&tmp)?))?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Schema("checkpoint truncated".into())
    } else {
        Error::Io(e)
    }
}
