//! Binary checkpoints of one cocycle trajectory.
//!
//! Layout, all little-endian:
//!
//! ```text
//! "LCL1"                       4 bytes
//! version                      u32 (= 1)
//! kmax                         u32
//! ncoef                        u64   dense coefficient count
//! seed, stream, counter        u64 × 3   noise stream position
//! windows_done                 u64
//! n_acc                        u32
//! n_acc × { name_len u32, name (UTF-8), len u64 }
//! reals (f64):
//!   t, u[0..ncoef], x1, x2, v1, v2, A00, A01, A10, A11,
//!   then each accumulator's `len` values in header order
//! ```

use std::fs;
use std::io::Write as _;
use std::path::Path;

use super::LabError;
use crate::flow::{ParticleState, TangentMatrix};
use crate::solver::{NoiseStream, SnsState};
use crate::spectral::SpectralVelocity;

pub const MAGIC: &[u8; 4] = b"LCL1";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub state: SnsState,
    pub seed: u64,
    pub stream: u64,
    pub counter: u64,
    pub particle: ParticleState,
    pub tangent: TangentMatrix,
    pub windows_done: u64,
    /// `(estimator name, flat accumulator state)`.
    pub accumulators: Vec<(String, Vec<f64>)>,
}

impl Checkpoint {
    pub fn noise(&self) -> NoiseStream {
        NoiseStream::at(self.seed, self.stream, self.counter)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let u = self.state.u.dense();
        let mut b = Vec::with_capacity(64 + 8 * (u.len() + 11));
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&VERSION.to_le_bytes());
        b.extend_from_slice(&(self.state.u.kmax() as u32).to_le_bytes());
        b.extend_from_slice(&(u.len() as u64).to_le_bytes());
        for x in [self.seed, self.stream, self.counter, self.windows_done] {
            b.extend_from_slice(&x.to_le_bytes());
        }
        b.extend_from_slice(&(self.accumulators.len() as u32).to_le_bytes());
        for (name, data) in &self.accumulators {
            b.extend_from_slice(&(name.len() as u32).to_le_bytes());
            b.extend_from_slice(name.as_bytes());
            b.extend_from_slice(&(data.len() as u64).to_le_bytes());
        }
        let p = self.particle;
        let a = self.tangent.a;
        let head = [self.state.t];
        let tail = [p.x[0], p.x[1], p.v[0], p.v[1], a[0][0], a[0][1], a[1][0], a[1][1]];
        let reals = head
            .iter()
            .chain(u)
            .chain(&tail)
            .chain(self.accumulators.iter().flat_map(|(_, d)| d));
        for x in reals {
            b.extend_from_slice(&x.to_le_bytes());
        }
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, LabError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(LabError::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(LabError::Checkpoint(format!("unsupported version {version}")));
        }
        let kmax = r.u32()? as usize;
        let ncoef = r.u64()? as usize;
        let proto = SpectralVelocity::zeros(kmax);
        if proto.dense().len() != ncoef {
            return Err(LabError::Checkpoint(format!("{ncoef} coefficients do not match kmax = {kmax}")));
        }
        let (seed, stream, counter, windows_done) = (r.u64()?, r.u64()?, r.u64()?, r.u64()?);
        let n_acc = r.u32()? as usize;
        let mut heads = Vec::with_capacity(n_acc);
        for _ in 0..n_acc {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| LabError::Checkpoint("estimator name is not UTF-8".into()))?;
            heads.push((name, r.u64()? as usize));
        }
        let t = r.f64()?;
        let u = (0..ncoef).map(|_| r.f64()).collect::<Result<Vec<_>, _>>()?;
        let mut tail = [0.0; 8];
        for x in tail.iter_mut() {
            *x = r.f64()?;
        }
        let mut accumulators = Vec::with_capacity(n_acc);
        for (name, len) in heads {
            let d = (0..len).map(|_| r.f64()).collect::<Result<Vec<_>, _>>()?;
            accumulators.push((name, d));
        }
        if r.pos != bytes.len() {
            return Err(LabError::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self {
            state: SnsState { u: SpectralVelocity::from_dense(kmax, u), t },
            seed,
            stream,
            counter,
            // Stored values are already wrapped and normalised; no renormalisation.
            particle: ParticleState { x: [tail[0], tail[1]], v: [tail[2], tail[3]] },
            tangent: TangentMatrix { a: [[tail[4], tail[5]], [tail[6], tail[7]]] },
            windows_done,
            accumulators,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], LabError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| LabError::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32, LabError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, LabError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64, LabError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Write through a temporary file so an interrupted save never leaves a
/// truncated checkpoint behind.
pub fn checkpoint_save(ck: &Checkpoint, path: &Path) -> Result<(), LabError> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&ck.to_bytes())?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn checkpoint_load(path: &Path) -> Result<Checkpoint, LabError> {
    Checkpoint::from_bytes(&fs::read(path)?)
}
