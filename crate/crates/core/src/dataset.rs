//! `(pose, joint angles)` pairs generated by forward kinematics, and the
//! `IKDS` binary file format.
//!
//! ```text
//! "IKDS" | version: u32 | chain_hash: u64 | count: u64 | joints: u32 | seed: u64
//!        | count × (x: 3×f64, y: joints×f64), little-endian
//! ```

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{IkError, Result};
use crate::exec::{derive_seed, Exec};
use crate::kinematics::{JointAngles, KinematicChain, Pose};

pub const MAGIC: &[u8; 4] = b"IKDS";
pub const VERSION: u32 = 1;

/// Samples per independently seeded generation shard.
const SHARD: usize = 4096;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub chain_hash: u64,
    pub joints: usize,
    pub seed: u64,
    pub poses: Vec<Pose>,
    pub angles: Vec<JointAngles>,
}

impl Dataset {
    /// `n` uniform joint samples and their poses. Shard `i` draws from its
    /// own stream seeded by `(seed, i)`, so the result does not depend on
    /// how shards are scheduled.
    pub fn generate(chain: &KinematicChain, n: usize, seed: u64, exec: Exec) -> Result<Self> {
        if n == 0 {
            return Err(IkError::Config("dataset size must be >= 1".into()));
        }
        let shards = n.div_ceil(SHARD);
        let parts = exec.map(shards, |s| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, s as u64));
            let len = SHARD.min(n - s * SHARD);
            (0..len)
                .map(|_| chain.sample_reachable(&mut rng))
                .collect::<Vec<_>>()
        });
        let (angles, poses) = parts.into_iter().flatten().unzip();
        Ok(Dataset {
            chain_hash: chain.hash(),
            joints: chain.dof(),
            seed,
            poses,
            angles,
        })
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            chain_hash: self.chain_hash,
            joints: self.joints,
            seed: self.seed,
            poses: indices.iter().map(|&i| self.poses[i]).collect(),
            angles: indices.iter().map(|&i| self.angles[i].clone()).collect(),
        }
    }

    /// Shuffled split into `(train, validation)`.
    pub fn split(&self, val_fraction: f64, seed: u64) -> (Dataset, Dataset) {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_val = (self.len() as f64 * val_fraction).floor() as usize;
        let (val, train) = idx.split_at(n_val);
        (self.subset(train), self.subset(val))
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&self.chain_hash.to_le_bytes())?;
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        w.write_all(&(self.joints as u32).to_le_bytes())?;
        w.write_all(&self.seed.to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.len() * (3 + self.joints) * 8);
        for (x, y) in self.poses.iter().zip(&self.angles) {
            for v in x.to_array().iter().chain(y) {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(IkError::Format("not an IKDS dataset".into()));
        }
        let mut b4 = [0u8; 4];
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != VERSION {
            return Err(IkError::Format(format!("unsupported dataset version {version}")));
        }
        r.read_exact(&mut b8)?;
        let chain_hash = u64::from_le_bytes(b8);
        r.read_exact(&mut b8)?;
        let count = u64::from_le_bytes(b8) as usize;
        r.read_exact(&mut b4)?;
        let joints = u32::from_le_bytes(b4) as usize;
        r.read_exact(&mut b8)?;
        let seed = u64::from_le_bytes(b8);
        let mut body = Vec::new();
        r.read_to_end(&mut body)?;
        let width = 3 + joints;
        if body.len() != count * width * 8 {
            return Err(IkError::Format(format!(
                "dataset body holds {} bytes, expected {}",
                body.len(),
                count * width * 8
            )));
        }
        let values: Vec<f64> = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(IkError::Format("dataset contains non-finite values".into()));
        }
        let mut poses = Vec::with_capacity(count);
        let mut angles = Vec::with_capacity(count);
        for rec in values.chunks_exact(width) {
            poses.push(Pose::new(rec[0], rec[1], rec[2]));
            angles.push(rec[3..].to_vec());
        }
        Ok(Dataset {
            chain_hash,
            joints,
            seed,
            poses,
            angles,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write(std::io::BufWriter::new(f))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Dataset::read(std::io::BufReader::new(f))
    }
}
