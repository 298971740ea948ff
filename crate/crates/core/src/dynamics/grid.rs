use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::points::PointSet;

/// Maps raw coordinates to system states, replacing one angle coordinate
/// `theta` by the pair `(cos theta, sin theta)` in place.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateEmbedding {
    pub angle_axis: Option<usize>,
}

impl StateEmbedding {
    pub fn identity() -> Self {
        Self { angle_axis: None }
    }

    pub fn angle(axis: usize) -> Self {
        Self {
            angle_axis: Some(axis),
        }
    }

    pub fn state_dim(&self, raw_dim: usize) -> usize {
        raw_dim + usize::from(self.angle_axis.is_some())
    }

    pub fn embed(&self, raw: &[f64]) -> Vec<f64> {
        match self.angle_axis {
            None => raw.to_vec(),
            Some(a) => {
                let mut out = Vec::with_capacity(raw.len() + 1);
                out.extend_from_slice(&raw[..a]);
                out.push(raw[a].cos());
                out.push(raw[a].sin());
                out.extend_from_slice(&raw[a + 1..]);
                out
            }
        }
    }

    /// Inverse of [`embed`](Self::embed), recovering the angle with `atan2`.
    pub fn unembed(&self, state: &[f64]) -> Vec<f64> {
        match self.angle_axis {
            None => state.to_vec(),
            Some(a) => {
                let mut out = Vec::with_capacity(state.len() - 1);
                out.extend_from_slice(&state[..a]);
                out.push(state[a + 1].atan2(state[a]));
                out.extend_from_slice(&state[a + 2..]);
                out
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridAxis {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
}

impl GridAxis {
    pub fn new(lower: f64, upper: f64, count: usize) -> Self {
        Self {
            lower,
            upper,
            count,
        }
    }

    pub fn symmetric(half_width: f64, count: usize) -> Self {
        Self::new(-half_width, half_width, count)
    }

    /// Evenly spaced values including both ends; a single point sits at the centre.
    pub fn values(&self) -> Vec<f64> {
        if self.count == 1 {
            return vec![0.5 * (self.lower + self.upper)];
        }
        let step = (self.upper - self.lower) / (self.count - 1) as f64;
        (0..self.count)
            .map(|i| {
                if i + 1 == self.count {
                    self.upper
                } else {
                    self.lower + step * i as f64
                }
            })
            .collect()
    }
}

/// Tensor-product sampling grid over raw coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateGridSpec {
    pub axes: Vec<GridAxis>,
    pub embedding: StateEmbedding,
    /// When the full grid is larger, keep a stratified random subset of this
    /// size that is closed under reflection through the box centre.
    pub max_points: Option<usize>,
}

impl StateGridSpec {
    pub fn new(axes: Vec<GridAxis>) -> Self {
        Self {
            axes,
            embedding: StateEmbedding::identity(),
            max_points: None,
        }
    }

    pub fn with_angle_axis(mut self, axis: usize) -> Self {
        self.embedding = StateEmbedding::angle(axis);
        self
    }

    pub fn with_max_points(mut self, max_points: usize) -> Self {
        self.max_points = Some(max_points);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.axes.is_empty() {
            return Err(Error::arg("grid needs at least one axis"));
        }
        for (d, ax) in self.axes.iter().enumerate() {
            if ax.count == 0 {
                return Err(Error::arg(format!("grid axis {d} has zero points")));
            }
            if !ax.lower.is_finite() || !ax.upper.is_finite() || ax.lower > ax.upper {
                return Err(Error::arg(format!(
                    "grid axis {d} bounds must be finite with lower <= upper, got [{}, {}]",
                    ax.lower, ax.upper
                )));
            }
        }
        if let Some(a) = self.embedding.angle_axis {
            if a >= self.axes.len() {
                return Err(Error::arg(format!("angle axis {a} out of range")));
            }
        }
        if self.max_points == Some(0) {
            return Err(Error::arg("max_points must be positive"));
        }
        Ok(())
    }

    pub fn raw_dim(&self) -> usize {
        self.axes.len()
    }

    pub fn state_dim(&self) -> usize {
        self.embedding.state_dim(self.raw_dim())
    }

    pub fn full_len(&self) -> usize {
        self.axes.iter().map(|a| a.count).product()
    }

    pub fn len(&self) -> usize {
        let full = self.full_len();
        self.max_points.map_or(full, |m| m.min(full))
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Grid points in state coordinates, last axis varying fastest.
    pub fn points(&self, seed: u64) -> Result<PointSet> {
        self.validate()?;
        let values: Vec<Vec<f64>> = self.axes.iter().map(GridAxis::values).collect();
        let full = self.full_len();
        let indices: Vec<usize> = match self.max_points {
            Some(m) if m < full => mirrored_strata(full, m, seed),
            _ => (0..full).collect(),
        };

        let mut out = PointSet::with_capacity(self.state_dim(), indices.len());
        let mut raw = vec![0.0; self.raw_dim()];
        for flat in indices {
            let mut rem = flat;
            for d in (0..self.raw_dim()).rev() {
                let c = self.axes[d].count;
                raw[d] = values[d][rem % c];
                rem /= c;
            }
            out.push(&self.embedding.embed(&raw));
        }
        Ok(out)
    }

    pub fn lower(&self) -> Vec<f64> {
        self.axes.iter().map(|a| a.lower).collect()
    }

    pub fn upper(&self) -> Vec<f64> {
        self.axes.iter().map(|a| a.upper).collect()
    }
}

/// Picks `m < full` distinct flat indices: one seeded random index from each of
/// `m / 2` consecutive strata of the lower half, plus its mirror `full - 1 - j`.
/// Since flat index reflection is point reflection through the box centre,
/// symmetric problems keep their symmetry after subsampling. An odd `m` adds
/// the centre point (odd `full`) or one further lower-half point.
fn mirrored_strata(full: usize, m: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lower = full / 2;
    let pairs = m / 2;
    let mut picks: Vec<usize> = (0..pairs)
        .map(|s| rng.random_range(s * lower / pairs..(s + 1) * lower / pairs))
        .collect();
    if m % 2 == 1 {
        if full % 2 == 1 {
            picks.push(full / 2);
        } else {
            let taken: std::collections::HashSet<usize> = picks.iter().copied().collect();
            let free = (0..lower).find(|j| !taken.contains(j)).expect("m < full leaves a free index");
            picks.push(free);
        }
    }
    let mirrors: Vec<usize> = picks[..pairs].iter().map(|j| full - 1 - j).collect();
    picks.extend(mirrors);
    picks.sort_unstable();
    picks
}
