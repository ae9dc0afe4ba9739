//! Offline datasets: random-control rollouts, L-step windows and the
//! `KEECDAT1` / `KEECWIN1` binary formats.
//!
//! `KEECDAT1` layout (all integers u64 LE, all floats f64 LE):
//!
//! ```text
//! "KEECDAT1" | name_len | name bytes | J | steps | m | d | seed
//! per trajectory: states (steps+1)·m, actions steps·d, rewards steps
//! CRC32 (u32 LE) of every preceding byte
//! ```
//!
//! `KEECWIN1` is the same trajectory payload followed by
//! `L | shuffle_seed | count | (trajectory, start) pairs`, then CRC32.

use std::fs;
use std::path::Path;

use nalgebra::DVector;
use rand::seq::SliceRandom;

use crate::binio::{ByteReader, ByteWriter};
use crate::envs::{Action, EnvSpec, State};
use crate::error::{KeecError, Result};
use crate::seed;

pub const DATASET_MAGIC: &[u8; 8] = b"KEECDAT1";
pub const WINDOWS_MAGIC: &[u8; 8] = b"KEECWIN1";

const MAX_RETRIES: u64 = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<State>,
    pub actions: Vec<Action>,
    pub rewards: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySet {
    pub env_name: String,
    pub steps: usize,
    pub state_dim: usize,
    pub action_dim: usize,
    pub seed: u64,
    pub trajectories: Vec<Trajectory>,
    /// Rollouts discarded for divergence and redrawn; not serialised.
    pub regenerated: usize,
}

impl TrajectorySet {
    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn transitions(&self) -> usize {
        self.trajectories.iter().map(|t| t.actions.len()).sum()
    }
}

fn rollout(env: &EnvSpec, steps: usize, rng: &mut seed::Rng) -> Result<Trajectory> {
    let mut s = env.sample_collection(rng);
    let mut states = Vec::with_capacity(steps + 1);
    let mut actions = Vec::with_capacity(steps);
    let mut rewards = Vec::with_capacity(steps);
    for _ in 0..steps {
        let a = env.sample_action(rng);
        rewards.push(env.reward(&s, &a));
        let next = env.step_rk4(&s, &a)?;
        states.push(s);
        actions.push(a);
        s = next;
    }
    states.push(s);
    Ok(Trajectory { states, actions, rewards })
}

/// Random-control rollouts from the environment's collection region.
/// Trajectory `j` draws from its own stream `(seed, "trajectory", j)`; a
/// diverged rollout is redrawn from `(seed, "trajectory-retry", ·)`.
pub fn generate_random_trajectories(
    env: &EnvSpec,
    count: usize,
    steps: usize,
    seed: u64,
) -> Result<TrajectorySet> {
    env.validate()?;
    let mut trajectories = Vec::with_capacity(count);
    let mut regenerated = 0;
    for j in 0..count as u64 {
        let mut rng = seed::rng_for(seed, "trajectory", j);
        let mut attempt = 0;
        let traj = loop {
            match rollout(env, steps, &mut rng) {
                Ok(t) => break t,
                Err(KeecError::Divergence(_)) if attempt < MAX_RETRIES => {
                    regenerated += 1;
                    attempt += 1;
                    rng = seed::rng_for(seed, "trajectory-retry", j * MAX_RETRIES + attempt);
                }
                Err(e) => return Err(e),
            }
        };
        trajectories.push(traj);
    }
    Ok(TrajectorySet {
        env_name: env.name().to_string(),
        steps,
        state_dim: env.state_dim(),
        action_dim: env.action_dim(),
        seed,
        trajectories,
        regenerated,
    })
}

/// Borrowed view of L transitions: L+1 states and L actions.
#[derive(Debug, Clone, Copy)]
pub struct Window<'a> {
    pub states: &'a [State],
    pub actions: &'a [Action],
}

impl Window<'_> {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowDataset {
    pub source: TrajectorySet,
    pub window_len: usize,
    pub shuffle_seed: u64,
    /// (trajectory, first step) of every window, in dataset order.
    pub index: Vec<(u32, u32)>,
}

impl WindowDataset {
    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn window(&self, i: usize) -> Window<'_> {
        let (t, start) = self.index[i];
        let traj = &self.source.trajectories[t as usize];
        let (s, l) = (start as usize, self.window_len);
        Window { states: &traj.states[s..s + l + 1], actions: &traj.actions[s..s + l] }
    }

    pub fn windows(&self) -> impl Iterator<Item = Window<'_>> {
        (0..self.len()).map(|i| self.window(i))
    }

    /// Splits off the last `fraction` of windows (after shuffling) as a held-out set.
    pub fn split(&self, fraction: f64) -> (WindowDataset, WindowDataset) {
        let held = ((self.len() as f64) * fraction).round() as usize;
        let cut = self.len() - held.min(self.len());
        let mut train = self.clone();
        let mut test = self.clone();
        train.index.truncate(cut);
        test.index.drain(..cut);
        (train, test)
    }
}

/// Every contiguous run of `l` transitions (stride 1), shuffled by `shuffle_seed`.
/// `None` keeps the natural order.
pub fn slice_windows(ts: &TrajectorySet, l: usize, shuffle_seed: Option<u64>) -> WindowDataset {
    let mut index = Vec::new();
    if l > 0 {
        for (t, traj) in ts.trajectories.iter().enumerate() {
            let steps = traj.actions.len();
            if steps < l {
                continue;
            }
            for start in 0..=(steps - l) {
                index.push((t as u32, start as u32));
            }
        }
    }
    if let Some(s) = shuffle_seed {
        index.shuffle(&mut seed::rng_for(s, "window-shuffle", 0));
    }
    WindowDataset {
        source: ts.clone(),
        window_len: l,
        shuffle_seed: shuffle_seed.unwrap_or(0),
        index,
    }
}

fn write_trajectories(w: &mut ByteWriter, ts: &TrajectorySet) {
    w.str(&ts.env_name);
    w.u64(ts.len() as u64);
    w.u64(ts.steps as u64);
    w.u64(ts.state_dim as u64);
    w.u64(ts.action_dim as u64);
    w.u64(ts.seed);
    for t in &ts.trajectories {
        for s in &t.states {
            w.f64s(s.iter());
        }
        for a in &t.actions {
            w.f64s(a.iter());
        }
        w.f64s(t.rewards.iter());
    }
}

fn read_trajectories(r: &mut ByteReader<'_>) -> Result<TrajectorySet> {
    let env_name = r.str()?;
    let count = r.len(1 << 32)?;
    let steps = r.len(1 << 32)?;
    let m = r.len(1 << 20)?;
    let d = r.len(1 << 20)?;
    let seed = r.u64()?;
    let mut trajectories = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let sv = r.f64_vec((steps + 1) * m)?;
        let av = r.f64_vec(steps * d)?;
        let rewards = r.f64_vec(steps)?;
        let states = sv.chunks(m.max(1)).take(steps + 1).map(DVector::from_row_slice).collect();
        let actions = if d == 0 {
            vec![DVector::zeros(0); steps]
        } else {
            av.chunks(d).map(DVector::from_row_slice).collect()
        };
        trajectories.push(Trajectory { states, actions, rewards });
    }
    Ok(TrajectorySet {
        env_name,
        steps,
        state_dim: m,
        action_dim: d,
        seed,
        trajectories,
        regenerated: 0,
    })
}

fn check_magic(r: &mut ByteReader<'_>, magic: &[u8; 8]) -> Result<()> {
    let got = r.take(8)?;
    if got != magic {
        return Err(KeecError::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(got),
            String::from_utf8_lossy(magic)
        )));
    }
    Ok(())
}

pub fn encode_trajectories(ts: &TrajectorySet) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.bytes(DATASET_MAGIC);
    write_trajectories(&mut w, ts);
    w.finish_with_crc()
}

pub fn decode_trajectories(bytes: &[u8]) -> Result<TrajectorySet> {
    // Check the magic before the checksum so a foreign file gets the clearer error.
    check_magic(&mut ByteReader::new(bytes), DATASET_MAGIC)?;
    let mut r = ByteReader::checked(bytes)?;
    check_magic(&mut r, DATASET_MAGIC)?;
    let ts = read_trajectories(&mut r)?;
    r.expect_end()?;
    Ok(ts)
}

pub fn encode_windows(wd: &WindowDataset) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.bytes(WINDOWS_MAGIC);
    write_trajectories(&mut w, &wd.source);
    w.u64(wd.window_len as u64);
    w.u64(wd.shuffle_seed);
    w.u64(wd.index.len() as u64);
    for &(t, s) in &wd.index {
        w.u32(t);
        w.u32(s);
    }
    w.finish_with_crc()
}

pub fn decode_windows(bytes: &[u8]) -> Result<WindowDataset> {
    check_magic(&mut ByteReader::new(bytes), WINDOWS_MAGIC)?;
    let mut r = ByteReader::checked(bytes)?;
    check_magic(&mut r, WINDOWS_MAGIC)?;
    let source = read_trajectories(&mut r)?;
    let window_len = r.len(1 << 32)?;
    let shuffle_seed = r.u64()?;
    let count = r.len(1 << 40)?;
    let mut index = Vec::with_capacity(count.min(1 << 24));
    for _ in 0..count {
        let t = r.u32()?;
        let s = r.u32()?;
        let ok = source
            .trajectories
            .get(t as usize)
            .is_some_and(|tr| s as usize + window_len <= tr.actions.len());
        if !ok {
            return Err(KeecError::Format(format!("window ({t}, {s}) out of range")));
        }
        index.push((t, s));
    }
    r.expect_end()?;
    Ok(WindowDataset { source, window_len, shuffle_seed, index })
}

pub fn save_trajectories(path: &Path, ts: &TrajectorySet) -> Result<()> {
    fs::write(path, encode_trajectories(ts))?;
    Ok(())
}

pub fn load_trajectories(path: &Path) -> Result<TrajectorySet> {
    decode_trajectories(&fs::read(path)?)
}

pub fn save_windows(path: &Path, wd: &WindowDataset) -> Result<()> {
    fs::write(path, encode_windows(wd))?;
    Ok(())
}

pub fn load_windows(path: &Path) -> Result<WindowDataset> {
    decode_windows(&fs::read(path)?)
}
