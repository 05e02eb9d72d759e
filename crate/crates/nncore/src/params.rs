//! Named parameter storage and the binary checkpoint format.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! magic   8 bytes  "SFRCKPT1"
//! count   u32
//! repeated `count` times:
//!   name_len u32, name (utf-8), rows u32, cols u32, rows*cols f64
//! ```

use std::io::{Read, Write};

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{NnError, Result};
use crate::matrix::Matrix;

const MAGIC: &[u8; 8] = b"SFRCKPT1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    /// Glorot-uniform initialised `fan_in × fan_out` weight.
    pub fn add_glorot<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> ParamId {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit).expect("finite glorot bound");
        let data = (0..fan_in * fan_out).map(|_| dist.sample(rng)).collect();
        let m = Matrix::from_vec(fan_in, fan_out, data).expect("consistent shape");
        self.add(name, m)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamId {
        self.add(name, Matrix::zeros(rows, cols))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Matrix::len).sum()
    }

    /// Largest absolute elementwise difference against another store of the same layout.
    pub fn max_abs_diff(&self, other: &ParamStore) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a.max_abs_diff(b))
            .fold(0.0, f64::max)
    }

    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&(self.values.len() as u32).to_le_bytes())?;
        for (name, m) in self.names.iter().zip(&self.values) {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(m.rows() as u32).to_le_bytes())?;
            w.write_all(&(m.cols() as u32).to_le_bytes())?;
            for v in m.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(NnError::Checkpoint("bad magic".into()));
        }
        let count = read_u32(&mut r)? as usize;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| NnError::Checkpoint("tensor name is not utf-8".into()))?;
            let rows = read_u32(&mut r)? as usize;
            let cols = read_u32(&mut r)? as usize;
            let mut data = Vec::with_capacity(rows * cols);
            let mut buf = [0u8; 8];
            for _ in 0..rows * cols {
                r.read_exact(&mut buf)?;
                data.push(f64::from_le_bytes(buf));
            }
            store.add(name, Matrix::from_vec(rows, cols, data)?);
        }
        Ok(store)
    }

    /// Checks that `other` has the same tensor names and shapes, in order.
    pub fn check_layout(&self, other: &ParamStore) -> Result<()> {
        if self.len() != other.len() {
            return Err(NnError::Checkpoint(format!(
                "expected {} tensors, found {}",
                self.len(),
                other.len()
            )));
        }
        for ((na, a), (nb, b)) in self
            .names
            .iter()
            .zip(&self.values)
            .zip(other.names.iter().zip(&other.values))
        {
            if na != nb || a.shape() != b.shape() {
                return Err(NnError::Checkpoint(format!(
                    "tensor `{nb}` {:?} does not match `{na}` {:?}",
                    b.shape(),
                    a.shape()
                )));
            }
        }
        Ok(())
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        store.add_glorot("w", 3, 4, &mut rng);
        store.add_zeros("b", 1, 4);
        store.get_mut(ParamId(1)).set(0, 2, f64::MIN_POSITIVE);
        let mut buf = Vec::new();
        store.write_checkpoint(&mut buf).unwrap();
        assert_eq!(buf.len(), 8 + 4 + (4 + 1 + 8 + 12 * 8) + (4 + 1 + 8 + 4 * 8));
        let back = ParamStore::read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(back, store);
    }

    #[test]
    fn truncated_checkpoint_fails() {
        let mut store = ParamStore::new();
        store.add_zeros("w", 2, 2);
        let mut buf = Vec::new();
        store.write_checkpoint(&mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(ParamStore::read_checkpoint(buf.as_slice()).is_err());
        assert!(ParamStore::read_checkpoint(&b"NOTACKPT"[..]).is_err());
    }
}
