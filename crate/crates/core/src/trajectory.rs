//! Step schedules: positive step sizes summing to one, with their cumulative times.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Error, Result};

/// Sums within this distance of one are accepted as-is (after exact renormalization).
pub const SUM_EXACT_TOL: f64 = 1e-6;
/// Sums within this distance of one are renormalized; anything further is rejected.
pub const SUM_RENORM_TOL: f64 = 1e-3;

/// A budget-`M` schedule `Δ_1..Δ_M` and the times `t_0 = 0 < t_1 < ... < t_M = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    steps: Vec<f64>,
    times: Vec<f64>,
}

impl Trajectory {
    /// Checks a raw schedule, renormalizing sums that are off by at most [`SUM_RENORM_TOL`].
    pub fn validate(steps: &[f64]) -> Result<Self> {
        if steps.is_empty() {
            return Err(Error::Trajectory("schedule has no steps".into()));
        }
        if let Some((i, s)) = steps.iter().enumerate().find(|(_, s)| !(s.is_finite() && **s > 0.0)) {
            return Err(Error::Trajectory(format!("step {} is {s}; steps must be positive", i + 1)));
        }
        let sum: f64 = steps.iter().sum();
        let off = (sum - 1.0).abs();
        if off > SUM_RENORM_TOL {
            return Err(Error::Trajectory(format!("steps sum to {sum}, not 1")));
        }
        if off > SUM_EXACT_TOL {
            log::warn!("schedule sums to {sum}; renormalizing");
        }
        let steps: Vec<f64> = steps.iter().map(|s| s / sum).collect();
        let mut times = Vec::with_capacity(steps.len() + 1);
        let mut t = 0.0;
        times.push(t);
        for s in &steps[..steps.len() - 1] {
            t += s;
            times.push(t);
        }
        times.push(1.0);
        Ok(Self { steps, times })
    }

    /// The finest schedule a model with `loops` maximum loops is trained on: `Δ_i = 1/L`.
    pub fn max(loops: usize) -> Result<Self> {
        Self::uniform(loops)
    }

    /// `budget` equal steps of `1/M`.
    pub fn uniform(budget: usize) -> Result<Self> {
        if budget < 1 {
            return Err(Error::Trajectory("budget must be at least 1".into()));
        }
        Self::validate(&vec![1.0 / budget as f64; budget])
    }

    pub fn budget(&self) -> usize {
        self.steps.len()
    }

    pub fn steps(&self) -> &[f64] {
        &self.steps
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    /// `(t_{i-1}, Δ_i)` for each loop `i = 1..M`.
    pub fn loop_inputs(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.times.iter().copied().zip(self.steps.iter().copied())
    }

    pub fn is_uniform(&self) -> bool {
        let u = 1.0 / self.budget() as f64;
        self.steps.iter().all(|s| (s - u).abs() < 1e-12)
    }
}

impl fmt::Display for Trajectory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.steps.iter().map(|s| format!("{s}")).collect();
        f.write_str(&parts.join(" "))
    }
}

/// Parses `uniform:M` or a comma-separated list of step sizes such as `0.5,0.25,0.25`.
impl FromStr for Trajectory {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if let Some(m) = s.strip_prefix("uniform:") {
            let m: usize = m
                .trim()
                .parse()
                .map_err(|_| Error::Trajectory(format!("bad budget in {s:?}")))?;
            return Self::uniform(m);
        }
        let steps = s
            .split(',')
            .map(|p| {
                p.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Trajectory(format!("bad step {p:?} in {s:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::validate(&steps)
    }
}

/// Step sizes restricted to positive multiples of `1/L`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScheduleGrid {
    loops: usize,
}

impl ScheduleGrid {
    pub fn new(loops: usize) -> Result<Self> {
        if loops < 1 {
            return Err(Error::Trajectory("grid needs L >= 1".into()));
        }
        Ok(Self { loops })
    }

    pub fn loops(&self) -> usize {
        self.loops
    }

    pub fn resolution(&self) -> f64 {
        1.0 / self.loops as f64
    }

    /// Schedule whose `i`-th step is `units[i] / L`. Units must sum to `L`.
    pub fn from_units(&self, units: &[usize]) -> Result<Trajectory> {
        if units.iter().sum::<usize>() != self.loops || units.contains(&0) {
            return Err(Error::Trajectory(format!(
                "units {units:?} are not a composition of {}",
                self.loops
            )));
        }
        let l = self.loops as f64;
        Trajectory::validate(&units.iter().map(|&u| u as f64 / l).collect::<Vec<_>>())
    }

    /// Shortcut length `S ~ U{1..L-1}`, then a uniformly random composition of `L` grid
    /// units into `S` positive parts.
    pub fn sample_shortcut<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Trajectory> {
        let l = self.loops;
        if l < 2 {
            return Err(Error::Trajectory("shortcut sampling needs L >= 2".into()));
        }
        let s = rng.random_range(1..l);
        self.from_units(&random_composition(l, s, rng))
    }

    /// Every composition of `L` units into `budget` parts, in lexicographic order.
    pub fn enumerate(&self, budget: usize) -> Result<Vec<Trajectory>> {
        if budget < 1 || budget > self.loops {
            return Err(Error::Trajectory(format!(
                "budget {budget} outside 1..={}",
                self.loops
            )));
        }
        let mut out = Vec::new();
        let mut prefix = Vec::with_capacity(budget);
        compositions(self.loops, budget, &mut prefix, &mut |units| {
            out.push(units.to_vec());
        });
        out.iter().map(|u| self.from_units(u)).collect()
    }
}

/// Sorted sampling of `parts - 1` distinct cut points among the `total - 1` interior ones.
fn random_composition<R: Rng + ?Sized>(total: usize, parts: usize, rng: &mut R) -> Vec<usize> {
    let mut cuts: Vec<usize> = sample(rng, total - 1, parts - 1).into_iter().map(|c| c + 1).collect();
    cuts.sort_unstable();
    let mut units = Vec::with_capacity(parts);
    let mut prev = 0;
    for c in cuts.into_iter().chain(std::iter::once(total)) {
        units.push(c - prev);
        prev = c;
    }
    units
}

fn compositions(remaining: usize, parts: usize, prefix: &mut Vec<usize>, emit: &mut dyn FnMut(&[usize])) {
    if parts == 1 {
        prefix.push(remaining);
        emit(prefix);
        prefix.pop();
        return;
    }
    for first in 1..=remaining - (parts - 1) {
        prefix.push(first);
        compositions(remaining - first, parts - 1, prefix, emit);
        prefix.pop();
    }
}

/// Binomial coefficient, exact for the small arguments schedules use.
pub fn binomial(n: usize, k: usize) -> u64 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    (0..k).fold(1u64, |acc, i| acc * (n - i) as u64 / (i + 1) as u64)
}
