//! Versioned binary checkpoints.
//!
//! Layout (little endian): magic `CRLCKPT\0`, `u32` version, then a body of
//! length-prefixed fields, then the SHA-256 of everything before it. Strings
//! and arrays carry `u64` lengths.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use sha2::{Digest, Sha256};

use crate::envs::EnvSnapshot;
use crate::numcore::{AdamConfig, AdamState, Parameterized, RngState};
use crate::replay::{FilterStats, Trajectory, TrajectoryBuffer};
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"CRLCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Parameters of one network plus its optimizer, if it has one.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub name: String,
    pub params: Vec<ParamArray>,
    pub optimizer: Option<AdamState>,
}

impl ModelState {
    pub fn capture<P: Parameterized + ?Sized>(
        name: &str,
        model: &P,
        optimizer: Option<&AdamState>,
    ) -> Self {
        let params = model
            .params()
            .into_iter()
            .zip(model.param_shapes())
            .map(|((n, p), shape)| ParamArray {
                name: n,
                shape,
                data: p.to_vec(),
            })
            .collect();
        ModelState {
            name: name.to_string(),
            params,
            optimizer: optimizer.cloned(),
        }
    }

    /// Copies the stored arrays into `model`; names and shapes must agree.
    pub fn apply<P: Parameterized + ?Sized>(&self, model: &mut P) -> Result<()> {
        let names: Vec<String> = model.params().into_iter().map(|(n, _)| n).collect();
        let shapes = model.param_shapes();
        if names.len() != self.params.len() {
            return Err(Error::Integrity(format!(
                "model `{}` has {} parameter arrays, checkpoint {}",
                self.name,
                names.len(),
                self.params.len()
            )));
        }
        for ((stored, name), shape) in self.params.iter().zip(&names).zip(&shapes) {
            if &stored.name != name || &stored.shape != shape {
                return Err(Error::Integrity(format!(
                    "model `{}`: expected {name} {shape:?}, checkpoint has {} {:?}",
                    self.name, stored.name, stored.shape
                )));
            }
        }
        for (dst, stored) in model.params_mut().into_iter().zip(&self.params) {
            dst.copy_from_slice(&stored.data);
        }
        Ok(())
    }
}

/// The episode being collected when the checkpoint was taken.
#[derive(Debug, Clone, PartialEq)]
pub struct PartialEpisode {
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub goal: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BufferState {
    pub capacity: usize,
    pub goal_dim: usize,
    pub first_id: u64,
    pub trajectories: Vec<Trajectory>,
}

impl BufferState {
    pub fn capture(buffer: &TrajectoryBuffer) -> Self {
        BufferState {
            capacity: buffer.capacity(),
            goal_dim: buffer.goal_dim(),
            first_id: buffer.first_id(),
            trajectories: buffer.iter().map(|(_, t)| t.clone()).collect(),
        }
    }

    pub fn restore(&self) -> Result<TrajectoryBuffer> {
        TrajectoryBuffer::from_parts(
            self.capacity,
            self.goal_dim,
            self.first_id,
            self.trajectories.clone(),
        )
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Counters {
    pub env_steps: u64,
    pub grad_steps: u64,
    pub episodes: u64,
    /// Fractional gradient steps owed by the replay-ratio schedule.
    pub grad_credit: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_text: String,
    pub config_hash: [u8; 32],
    pub counters: Counters,
    pub models: Vec<ModelState>,
    pub rngs: Vec<(String, RngState)>,
    pub buffer: Option<BufferState>,
    pub env: Option<EnvSnapshot>,
    pub partial_episode: Option<PartialEpisode>,
    pub filter_stats: FilterStats,
}

impl Checkpoint {
    pub fn model(&self, name: &str) -> Result<&ModelState> {
        self.models
            .iter()
            .find(|m| m.name == name)
            .ok_or_else(|| Error::Integrity(format!("checkpoint has no model `{name}`")))
    }

    pub fn rng(&self, name: &str) -> Result<RngState> {
        self.rngs
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, s)| *s)
            .ok_or_else(|| Error::Integrity(format!("checkpoint has no rng stream `{name}`")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(CHECKPOINT_VERSION);
        w.str(&self.config_text);
        w.0.extend_from_slice(&self.config_hash);
        let c = &self.counters;
        w.u64(c.env_steps);
        w.u64(c.grad_steps);
        w.u64(c.episodes);
        w.f64(c.grad_credit);
        w.u64(self.models.len() as u64);
        for m in &self.models {
            w.str(&m.name);
            w.u64(m.params.len() as u64);
            for p in &m.params {
                w.str(&p.name);
                w.usizes(&p.shape);
                w.f64s(&p.data);
            }
            match &m.optimizer {
                None => w.u8(0),
                Some(opt) => {
                    w.u8(1);
                    let AdamConfig {
                        learning_rate,
                        beta1,
                        beta2,
                        epsilon,
                    } = opt.config;
                    for v in [learning_rate, beta1, beta2, epsilon] {
                        w.f64(v);
                    }
                    w.u64(opt.step_count);
                    w.u64(opt.first_moment.len() as u64);
                    for (m1, m2) in opt.first_moment.iter().zip(&opt.second_moment) {
                        w.f64s(m1);
                        w.f64s(m2);
                    }
                }
            }
        }
        w.u64(self.rngs.len() as u64);
        for (name, s) in &self.rngs {
            w.str(name);
            w.0.extend_from_slice(&s.seed);
            w.u64(s.stream);
            w.0.extend_from_slice(&s.word_pos.to_le_bytes());
        }
        match &self.buffer {
            None => w.u8(0),
            Some(b) => {
                w.u8(1);
                w.u64(b.capacity as u64);
                w.u64(b.goal_dim as u64);
                w.u64(b.first_id);
                w.u64(b.trajectories.len() as u64);
                for t in &b.trajectories {
                    w.matrix(t.states());
                    w.matrix(t.actions());
                    w.f64s(t.commanded_goal());
                }
            }
        }
        match &self.env {
            None => w.u8(0),
            Some(e) => {
                w.u8(1);
                w.f64s(&e.values);
                w.f64s(&e.goal);
                w.u64(e.steps as u64);
                w.u8(e.done as u8);
            }
        }
        match &self.partial_episode {
            None => w.u8(0),
            Some(p) => {
                w.u8(1);
                w.rows(&p.states);
                w.rows(&p.actions);
                w.f64s(&p.goal);
            }
        }
        let f = &self.filter_stats;
        w.u64(f.kept);
        w.u64(f.excluded);
        w.u64(f.zero_denominator);
        let digest = Sha256::digest(&w.0);
        w.0.extend_from_slice(&digest);
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 + 32 {
            return Err(Error::Integrity(format!(
                "file too short ({} bytes)",
                bytes.len()
            )));
        }
        if &bytes[..8] != MAGIC {
            return Err(Error::Integrity("bad magic".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::Integrity(format!(
                "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Integrity("checksum mismatch".into()));
        }
        let mut r = Reader {
            bytes: body,
            pos: 12,
        };
        let config_text = r.str()?;
        let config_hash: [u8; 32] = r.take(32)?.try_into().unwrap();
        let counters = Counters {
            env_steps: r.u64()?,
            grad_steps: r.u64()?,
            episodes: r.u64()?,
            grad_credit: r.f64()?,
        };
        let n_models = r.len()?;
        let mut models = Vec::with_capacity(n_models);
        for _ in 0..n_models {
            let name = r.str()?;
            let n_params = r.len()?;
            let mut params = Vec::with_capacity(n_params);
            for _ in 0..n_params {
                let pname = r.str()?;
                let shape = r.usizes()?;
                let data = r.f64s()?;
                if shape.iter().product::<usize>() != data.len() {
                    return Err(Error::Integrity(format!(
                        "array `{pname}` shape {shape:?} holds {} values",
                        data.len()
                    )));
                }
                params.push(ParamArray {
                    name: pname,
                    shape,
                    data,
                });
            }
            let optimizer = if r.flag()? {
                let config = AdamConfig {
                    learning_rate: r.f64()?,
                    beta1: r.f64()?,
                    beta2: r.f64()?,
                    epsilon: r.f64()?,
                };
                let step_count = r.u64()?;
                let blocks = r.len()?;
                let mut first_moment = Vec::with_capacity(blocks);
                let mut second_moment = Vec::with_capacity(blocks);
                for _ in 0..blocks {
                    first_moment.push(r.f64s()?);
                    second_moment.push(r.f64s()?);
                }
                Some(AdamState {
                    config,
                    step_count,
                    first_moment,
                    second_moment,
                })
            } else {
                None
            };
            models.push(ModelState {
                name,
                params,
                optimizer,
            });
        }
        let n_rngs = r.len()?;
        let mut rngs = Vec::with_capacity(n_rngs);
        for _ in 0..n_rngs {
            let name = r.str()?;
            let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
            let stream = r.u64()?;
            let word_pos = u128::from_le_bytes(r.take(16)?.try_into().unwrap());
            rngs.push((
                name,
                RngState {
                    seed,
                    stream,
                    word_pos,
                },
            ));
        }
        let buffer = if r.flag()? {
            let capacity = r.u64()? as usize;
            let goal_dim = r.u64()? as usize;
            let first_id = r.u64()?;
            let n = r.len()?;
            let mut trajectories = Vec::with_capacity(n);
            for _ in 0..n {
                let states = r.matrix()?;
                let actions = r.matrix()?;
                let goal = r.f64s()?;
                trajectories.push(
                    Trajectory::new(states, actions, goal)
                        .map_err(|e| Error::Integrity(e.to_string()))?,
                );
            }
            Some(BufferState {
                capacity,
                goal_dim,
                first_id,
                trajectories,
            })
        } else {
            None
        };
        let env = if r.flag()? {
            Some(EnvSnapshot {
                values: r.f64s()?,
                goal: r.f64s()?,
                steps: r.u64()? as usize,
                done: r.flag()?,
            })
        } else {
            None
        };
        let partial_episode = if r.flag()? {
            Some(PartialEpisode {
                states: r.rows()?,
                actions: r.rows()?,
                goal: r.f64s()?,
            })
        } else {
            None
        };
        let filter_stats = FilterStats {
            kept: r.u64()?,
            excluded: r.u64()?,
            zero_denominator: r.u64()?,
        };
        if r.pos != body.len() {
            return Err(Error::Integrity(format!(
                "{} unread bytes",
                body.len() - r.pos
            )));
        }
        Ok(Checkpoint {
            config_text,
            config_hash,
            counters,
            models,
            rngs,
            buffer,
            env,
            partial_episode,
            filter_stats,
        })
    }

    /// Writes via a temporary file and rename, so a crash never leaves a
    /// half-written checkpoint under the final name.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
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
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u64(s.len() as u64);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn usizes(&mut self, v: &[usize]) {
        self.u64(v.len() as u64);
        for &x in v {
            self.u64(x as u64);
        }
    }
    fn f64s(&mut self, v: &[f64]) {
        self.u64(v.len() as u64);
        for &x in v {
            self.f64(x);
        }
    }
    fn matrix(&mut self, m: &Array2<f64>) {
        self.u64(m.nrows() as u64);
        self.u64(m.ncols() as u64);
        for &x in m.iter() {
            self.f64(x);
        }
    }
    fn rows(&mut self, rows: &[Vec<f64>]) {
        self.u64(rows.len() as u64);
        for r in rows {
            self.f64s(r);
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Integrity(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn flag(&mut self) -> Result<bool> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            b => Err(Error::Integrity(format!(
                "bad flag byte {b} at {}",
                self.pos - 1
            ))),
        }
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    /// A count, bounded by the bytes left so corrupt lengths fail fast.
    fn len(&mut self) -> Result<usize> {
        let n = self.u64()?;
        if n > (self.bytes.len() - self.pos) as u64 {
            return Err(Error::Integrity(format!(
                "implausible length {n} at byte {}",
                self.pos - 8
            )));
        }
        Ok(n as usize)
    }
    fn str(&mut self) -> Result<String> {
        let n = self.len()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Integrity(e.to_string()))
    }
    fn usizes(&mut self) -> Result<Vec<usize>> {
        let n = self.len()?;
        (0..n).map(|_| self.u64().map(|v| v as usize)).collect()
    }
    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.len()?;
        let raw = self.take(n * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
    fn matrix(&mut self) -> Result<Array2<f64>> {
        let rows = self.len()?;
        let cols = self.len()?;
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::Integrity("matrix size overflow".into()))?;
        let raw = self.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::Integrity("matrix size overflow".into()))?,
        )?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Array2::from_shape_vec((rows, cols), data).expect("sized above"))
    }
    fn rows(&mut self) -> Result<Vec<Vec<f64>>> {
        let n = self.len()?;
        (0..n).map(|_| self.f64s()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{rng_stream, Mlp, Streams};
    use ndarray::array;

    fn sample() -> Checkpoint {
        let mut rng = rng_stream(3, Streams::Init);
        let net = Mlp::new(&[3, 4, 2], &mut rng).unwrap();
        let mut opt = AdamState::new(&net, AdamConfig::default());
        opt.step_count = 7;
        opt.first_moment[0][1] = 0.25;
        let traj = Trajectory::new(
            array![[0.0, 1.0], [1.0, 1.0], [2.0, 1.5]],
            array![[0.5], [-0.5]],
            vec![2.0],
        )
        .unwrap();
        Checkpoint {
            config_text: "seed = 3\n".into(),
            config_hash: [7; 32],
            counters: Counters {
                env_steps: 120,
                grad_steps: 33,
                episodes: 4,
                grad_credit: 0.375,
            },
            models: vec![
                ModelState::capture("policy", &net, Some(&opt)),
                ModelState::capture("frozen", &net, None),
            ],
            rngs: vec![("env".into(), RngState::capture(&rng))],
            buffer: Some(BufferState {
                capacity: 100,
                goal_dim: 1,
                first_id: 2,
                trajectories: vec![traj],
            }),
            env: Some(EnvSnapshot {
                values: vec![0.5, 0.25],
                goal: vec![1.0],
                steps: 3,
                done: false,
            }),
            partial_episode: Some(PartialEpisode {
                states: vec![vec![0.0, 0.0], vec![0.5, 0.25]],
                actions: vec![vec![0.1]],
                goal: vec![1.0],
            }),
            filter_stats: FilterStats {
                kept: 5,
                excluded: 2,
                zero_denominator: 1,
            },
        }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
        let m = back.model("policy").unwrap();
        assert_eq!(m.params[0].shape, vec![3, 4]);
    }

    #[test]
    fn every_single_byte_corruption_detected() {
        let bytes = sample().to_bytes();
        for i in (0..bytes.len()).step_by(7) {
            let mut bad = bytes.clone();
            bad[i] ^= 0x20;
            assert!(
                matches!(Checkpoint::from_bytes(&bad), Err(Error::Integrity(_))),
                "byte {i}"
            );
        }
    }

    #[test]
    fn truncation_and_version() {
        let bytes = sample().to_bytes();
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 1]),
            Err(Error::Integrity(_))
        ));
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..10]),
            Err(Error::Integrity(_))
        ));
        let mut v2 = bytes.clone();
        v2[8] = 2;
        let err = Checkpoint::from_bytes(&v2).unwrap_err().to_string();
        assert!(err.contains("version 2"), "{err}");
    }

    #[test]
    fn apply_checks_names_and_shapes() {
        let c = sample();
        let mut rng = rng_stream(4, Streams::Init);
        let mut other = Mlp::new(&[3, 4, 2], &mut rng).unwrap();
        c.model("policy").unwrap().apply(&mut other).unwrap();
        let orig = Mlp::new(&[3, 4, 2], &mut rng_stream(3, Streams::Init)).unwrap();
        assert_eq!(other.params(), orig.params());
        let mut wrong = Mlp::new(&[3, 5, 2], &mut rng).unwrap();
        assert!(c.model("policy").unwrap().apply(&mut wrong).is_err());
    }
}
