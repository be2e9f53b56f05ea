use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::Trajectory;
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"CRLTRAJ\0";
pub const DATASET_VERSION: u32 = 1;

/// JSON sidecar written next to the binary container.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub env: String,
    pub observation_dim: usize,
    pub action_dim: usize,
    pub goal_dim: usize,
    pub num_trajectories: usize,
    #[serde(default)]
    pub description: String,
}

/// `<path>.json`
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub fn write_dataset(path: &Path, meta: &DatasetMeta, trajectories: &[Trajectory]) -> Result<()> {
    if meta.num_trajectories != trajectories.len() {
        return Err(Error::Dataset(format!(
            "sidecar lists {} trajectories, writing {}",
            meta.num_trajectories,
            trajectories.len()
        )));
    }
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, DATASET_VERSION);
    put_u32(&mut out, meta.observation_dim as u32);
    put_u32(&mut out, meta.action_dim as u32);
    put_u32(&mut out, meta.goal_dim as u32);
    put_u64(&mut out, trajectories.len() as u64);
    for t in trajectories {
        if t.observation_dim() != meta.observation_dim
            || t.action_dim() != meta.action_dim
            || t.commanded_goal().len() != meta.goal_dim
        {
            return Err(Error::Dataset(
                "trajectory dims disagree with sidecar".into(),
            ));
        }
        put_u64(&mut out, t.len() as u64);
    }
    for t in trajectories {
        for v in t
            .states()
            .iter()
            .chain(t.actions().iter())
            .chain(t.commanded_goal())
        {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::File::create(path)
        .and_then(|mut f| f.write_all(&out))
        .map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    fs::write(&side, serde_json::to_vec_pretty(meta)?).map_err(|e| Error::io(side, e))?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Dataset(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::Dataset("length overflow".into()))?,
        )?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

/// Reads and validates a container and its sidecar.
pub fn read_dataset(path: &Path) -> Result<(DatasetMeta, Vec<Trajectory>)> {
    let side = sidecar_path(path);
    let meta_bytes = fs::read(&side).map_err(|e| Error::io(&side, e))?;
    let meta: DatasetMeta = serde_json::from_slice(&meta_bytes)?;
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let mut c = Cursor {
        bytes: &bytes,
        pos: 0,
    };
    if c.take(8)? != MAGIC {
        return Err(Error::Dataset("bad magic".into()));
    }
    let version = c.u32()?;
    if version != DATASET_VERSION {
        return Err(Error::Dataset(format!("unsupported version {version}")));
    }
    let (obs, act, goal) = (c.u32()? as usize, c.u32()? as usize, c.u32()? as usize);
    if (obs, act, goal) != (meta.observation_dim, meta.action_dim, meta.goal_dim) {
        return Err(Error::Dataset("header dims disagree with sidecar".into()));
    }
    if goal > obs {
        return Err(Error::Dataset(format!(
            "goal dim {goal} exceeds observation dim {obs}"
        )));
    }
    let n = c.u64()? as usize;
    if n != meta.num_trajectories {
        return Err(Error::Dataset(format!(
            "header has {n} trajectories, sidecar {}",
            meta.num_trajectories
        )));
    }
    let lengths = (0..n)
        .map(|_| c.u64().map(|l| l as usize))
        .collect::<Result<Vec<_>>>()?;
    let mut trajectories = Vec::with_capacity(n);
    for len in lengths {
        if len < 2 {
            return Err(Error::Dataset(format!("trajectory of length {len}")));
        }
        let states = Array2::from_shape_vec((len, obs), c.f64s(len * obs)?).expect("sized above");
        let actions =
            Array2::from_shape_vec((len - 1, act), c.f64s((len - 1) * act)?).expect("sized above");
        let g = c.f64s(goal)?;
        trajectories
            .push(Trajectory::new(states, actions, g).map_err(|e| Error::Dataset(e.to_string()))?);
    }
    if c.pos != bytes.len() {
        return Err(Error::Dataset(format!(
            "{} trailing bytes",
            bytes.len() - c.pos
        )));
    }
    Ok((meta, trajectories))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> (DatasetMeta, Vec<Trajectory>) {
        let t = |len: usize, k: f64| {
            Trajectory::new(
                Array2::from_shape_fn((len, 2), |(i, j)| k + i as f64 * 0.5 - j as f64),
                Array2::from_shape_fn((len - 1, 1), |(i, _)| (i as f64 * k).sin()),
                vec![k],
            )
            .unwrap()
        };
        let trajs = vec![t(3, 0.1), t(5, -2.0), t(2, 1e300)];
        let meta = DatasetMeta {
            env: "open".into(),
            observation_dim: 2,
            action_dim: 1,
            goal_dim: 1,
            num_trajectories: 3,
            description: String::new(),
        };
        (meta, trajs)
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.bin");
        let (meta, trajs) = sample();
        write_dataset(&p, &meta, &trajs).unwrap();
        let (m2, t2) = read_dataset(&p).unwrap();
        assert_eq!(meta, m2);
        assert_eq!(trajs, t2);
    }

    #[test]
    fn truncation_and_trailing_bytes_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.bin");
        let (meta, trajs) = sample();
        write_dataset(&p, &meta, &trajs).unwrap();
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(read_dataset(&p), Err(Error::Dataset(_))));
        let mut longer = bytes.clone();
        longer.push(0);
        fs::write(&p, &longer).unwrap();
        assert!(matches!(read_dataset(&p), Err(Error::Dataset(_))));
        let mut bad = bytes;
        bad[0] = b'X';
        fs::write(&p, &bad).unwrap();
        assert!(matches!(read_dataset(&p), Err(Error::Dataset(_))));
    }

    #[test]
    fn sidecar_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.bin");
        let (mut meta, trajs) = sample();
        write_dataset(&p, &meta, &trajs).unwrap();
        meta.action_dim = 4;
        fs::write(sidecar_path(&p), serde_json::to_vec(&meta).unwrap()).unwrap();
        assert!(matches!(read_dataset(&p), Err(Error::Dataset(_))));
    }

    #[test]
    fn non_finite_payload_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.bin");
        let (meta, trajs) = sample();
        write_dataset(&p, &meta, &trajs).unwrap();
        let mut bytes = fs::read(&p).unwrap();
        let n = bytes.len();
        bytes[n - 8..].copy_from_slice(&f64::NAN.to_le_bytes());
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(read_dataset(&p), Err(Error::Dataset(_))));
    }
}
