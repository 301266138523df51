//! Trajectory ensembles and the deterministic parallel ensemble runner.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::NoiseStream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status")]
pub enum TrajStatus {
    Valid,
    /// Left the simulation support at `step`; excluded from statistics.
    Escaped { step: usize },
    /// Non-finite state or drift at `step`.
    Invalid { step: usize },
}

impl TrajStatus {
    pub fn is_valid(&self) -> bool {
        matches!(self, TrajStatus::Valid)
    }
}

/// Output of one trajectory. Values are laid out `[record][particle]`.
#[derive(Clone, Debug)]
pub struct TrajectoryRecord {
    pub x: Vec<f64>,
    pub v: Option<Vec<f64>>,
    pub noise: Option<Vec<f64>>,
    pub status: TrajStatus,
}

/// Time-indexed states of many trajectories.
///
/// Arrays are laid out `[record][trajectory][particle]`. Trajectories that
/// escaped or went non-finite keep their slot (with whatever was recorded
/// before the failure, NaN afterwards) and are skipped by the accessors that
/// feed statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryEnsemble {
    pub times: Vec<f64>,
    pub n_traj: usize,
    pub n_particles: usize,
    pub x: Vec<f64>,
    pub v: Option<Vec<f64>>,
    pub noise: Option<Vec<f64>>,
    pub status: Vec<TrajStatus>,
    pub seed: u64,
}

impl TrajectoryEnsemble {
    #[inline]
    fn offset(&self, rec: usize, traj: usize, particle: usize) -> usize {
        (rec * self.n_traj + traj) * self.n_particles + particle
    }

    pub fn n_records(&self) -> usize {
        self.times.len()
    }

    #[inline]
    pub fn x_at(&self, rec: usize, traj: usize, particle: usize) -> f64 {
        self.x[self.offset(rec, traj, particle)]
    }

    #[inline]
    pub fn v_at(&self, rec: usize, traj: usize, particle: usize) -> Option<f64> {
        self.v.as_ref().map(|v| v[self.offset(rec, traj, particle)])
    }

    #[inline]
    pub fn noise_at(&self, rec: usize, traj: usize, particle: usize) -> Option<f64> {
        self.noise.as_ref().map(|a| a[self.offset(rec, traj, particle)])
    }

    pub fn is_valid(&self, traj: usize) -> bool {
        self.status[traj].is_valid()
    }

    pub fn valid_indices(&self) -> Vec<usize> {
        (0..self.n_traj).filter(|&i| self.is_valid(i)).collect()
    }

    pub fn n_valid(&self) -> usize {
        self.status.iter().filter(|s| s.is_valid()).count()
    }

    pub fn n_escaped(&self) -> usize {
        self.status
            .iter()
            .filter(|s| matches!(s, TrajStatus::Escaped { .. }))
            .count()
    }

    pub fn n_invalid(&self) -> usize {
        self.status
            .iter()
            .filter(|s| matches!(s, TrajStatus::Invalid { .. }))
            .count()
    }

    /// Index of the record at time `t`, if one exists.
    pub fn record_index(&self, t: f64) -> Option<usize> {
        let scale = self.times.iter().fold(1.0f64, |m, &s| m.max(s.abs()));
        self.times
            .iter()
            .position(|&s| (s - t).abs() <= 1e-9 * scale)
    }

    pub fn require_record(&self, t: f64) -> Result<usize> {
        self.record_index(t)
            .ok_or_else(|| Error::invalid(format!("no record at t = {t}")))
    }

    /// Positions of one particle at one record, valid trajectories only.
    pub fn positions(&self, rec: usize, particle: usize) -> Vec<f64> {
        (0..self.n_traj)
            .filter(|&i| self.is_valid(i))
            .map(|i| self.x_at(rec, i, particle))
            .collect()
    }

    pub fn velocities(&self, rec: usize, particle: usize) -> Option<Vec<f64>> {
        self.v.as_ref()?;
        Some(
            (0..self.n_traj)
                .filter(|&i| self.is_valid(i))
                .map(|i| self.v_at(rec, i, particle).unwrap())
                .collect(),
        )
    }

    pub fn noises(&self, rec: usize, particle: usize) -> Option<Vec<f64>> {
        self.noise.as_ref()?;
        Some(
            (0..self.n_traj)
                .filter(|&i| self.is_valid(i))
                .map(|i| self.noise_at(rec, i, particle).unwrap())
                .collect(),
        )
    }

    /// The single-particle ensemble of particle `p`.
    pub fn particle(&self, p: usize) -> TrajectoryEnsemble {
        let pick = |src: &Vec<f64>| -> Vec<f64> {
            let mut out = Vec::with_capacity(self.n_records() * self.n_traj);
            for rec in 0..self.n_records() {
                for traj in 0..self.n_traj {
                    out.push(src[self.offset(rec, traj, p)]);
                }
            }
            out
        };
        TrajectoryEnsemble {
            times: self.times.clone(),
            n_traj: self.n_traj,
            n_particles: 1,
            x: pick(&self.x),
            v: self.v.as_ref().map(pick),
            noise: self.noise.as_ref().map(pick),
            status: self.status.clone(),
            seed: self.seed,
        }
    }

    /// Fails when more than `limit_fraction` of the trajectories escaped.
    pub fn check_escapes(&self, limit_fraction: f64) -> Result<()> {
        let escaped = self.n_escaped() + self.n_invalid();
        if escaped as f64 > limit_fraction * self.n_traj as f64 {
            return Err(Error::Escapes {
                escaped,
                total: self.n_traj,
                limit_fraction,
            });
        }
        Ok(())
    }
}

/// Runs `n_traj` trajectories; trajectory `i` receives `NoiseStream::new(seed, i)`.
///
/// Results are gathered in trajectory order, so the ensemble is bit-identical
/// regardless of how many threads execute the closure.
pub fn run_ensemble<F>(
    n_traj: usize,
    seed: u64,
    times: Vec<f64>,
    n_particles: usize,
    builder: F,
) -> Result<TrajectoryEnsemble>
where
    F: Fn(usize, NoiseStream) -> Result<TrajectoryRecord> + Sync,
{
    if n_traj == 0 {
        return Err(Error::invalid("n_traj must be at least 1"));
    }
    if n_particles == 0 {
        return Err(Error::invalid("n_particles must be at least 1"));
    }
    let n_rec = times.len();
    let width = n_rec * n_particles;
    let records: Vec<TrajectoryRecord> = (0..n_traj)
        .into_par_iter()
        .map(|i| {
            let rec = builder(i, NoiseStream::new(seed, i as u64)).map_err(|e| match e {
                Error::Trajectory { .. } => e,
                other => Error::Trajectory {
                    index: i,
                    reason: other.to_string(),
                },
            })?;
            if rec.x.len() != width {
                return Err(Error::Trajectory {
                    index: i,
                    reason: format!("expected {width} values, got {}", rec.x.len()),
                });
            }
            Ok(rec)
        })
        .collect::<Result<_>>()?;

    let has_v = records[0].v.is_some();
    let has_a = records[0].noise.is_some();
    let total = n_rec * n_traj * n_particles;
    let mut x = vec![0.0; total];
    let mut v = has_v.then(|| vec![0.0; total]);
    let mut a = has_a.then(|| vec![0.0; total]);
    let mut status = Vec::with_capacity(n_traj);
    for (traj, r) in records.into_iter().enumerate() {
        for rec in 0..n_rec {
            for p in 0..n_particles {
                let dst = (rec * n_traj + traj) * n_particles + p;
                let src = rec * n_particles + p;
                x[dst] = r.x[src];
                if let (Some(v), Some(rv)) = (v.as_mut(), r.v.as_ref()) {
                    v[dst] = rv[src];
                }
                if let (Some(a), Some(ra)) = (a.as_mut(), r.noise.as_ref()) {
                    a[dst] = ra[src];
                }
            }
        }
        status.push(r.status);
    }
    Ok(TrajectoryEnsemble {
        times,
        n_traj,
        n_particles,
        x,
        v,
        noise: a,
        status,
        seed,
    })
}

/// Runs `f` on a dedicated pool of `threads` workers (or the global pool).
pub fn with_threads<R: Send>(threads: Option<usize>, f: impl FnOnce() -> R + Send) -> R {
    match threads {
        Some(n) if n > 0 => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(f),
            Err(_) => f(),
        },
        _ => f(),
    }
}
