//! Discretization of the state domain into the finite set of states at
//! which the learning constraints are enforced.

use std::io::Write;
use std::path::Path;

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::constraints::{ConstraintSpecs, Margins, SafetySpec};
use crate::elm::ElmModel;
use crate::error::{check_dim, Error, Result};

/// Default cap on the number of grid points.
pub const DEFAULT_MAX_POINTS: usize = 1_000_000;

/// Default enlargement of the barrier ellipse's bounding box.
pub const DEFAULT_INFLATION: f64 = 0.2;

#[derive(Debug, Clone, PartialEq)]
pub struct DomainBox {
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
    /// Fraction by which the source box was enlarged (informational).
    pub inflation: f64,
}

impl DomainBox {
    pub fn new(lower: DVector<f64>, upper: DVector<f64>) -> Result<Self> {
        check_dim(lower.len(), upper.len(), "box bounds")?;
        if lower.is_empty() {
            return Err(Error::InvalidInput("box must have at least one dimension".into()));
        }
        for (lo, hi) in lower.iter().zip(upper.iter()) {
            if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::InvalidInput(format!(
                    "box needs lower < upper componentwise, got [{lo}, {hi}]"
                )));
            }
        }
        Ok(DomainBox {
            lower,
            upper,
            inflation: 0.0,
        })
    }

    /// Bounding box of the safe ellipse, with each half-width scaled by
    /// `1 + inflation`.
    pub fn around_ellipse(safety: &SafetySpec, inflation: f64) -> Result<Self> {
        if !(inflation >= 0.0) || !inflation.is_finite() {
            return Err(Error::InvalidInput(format!("inflation must be >= 0, got {inflation}")));
        }
        let half = safety.bounding_half_widths() * (1.0 + inflation);
        let mut domain = DomainBox::new(safety.center() - &half, safety.center() + &half)?;
        domain.inflation = inflation;
        Ok(domain)
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn contains(&self, x: &DVector<f64>) -> bool {
        x.len() == self.dim()
            && x
                .iter()
                .zip(self.lower.iter().zip(self.upper.iter()))
                .all(|(v, (lo, hi))| *lo <= *v && *v <= *hi)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    pub points: Vec<DVector<f64>>,
    /// Requested resolution; grid spacing along every axis is at most this.
    pub tau: f64,
}

impl SampleSet {
    pub fn count(&self) -> usize {
        self.points.len()
    }

    /// Resolution to use in the sampling margins. The grid only guarantees
    /// `tau / 2` per axis, i.e. `tau sqrt(n) / 2` in the Euclidean norm.
    pub fn effective_tau(&self) -> f64 {
        let n = self.points.first().map_or(1, |p| p.len());
        self.tau * (n as f64).sqrt()
    }

    /// One state per row, no header.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = std::io::BufWriter::new(file);
        for p in &self.points {
            let row: Vec<String> = p.iter().map(|v| v.to_string()).collect();
            writeln!(out, "{}", row.join(",")).map_err(|e| Error::io(path, e))?;
        }
        out.flush().map_err(|e| Error::io(path, e))
    }

    /// Reads the format written by [`SampleSet::write_csv`].
    pub fn read_csv(path: &Path, tau: f64) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut points = Vec::new();
        for (row, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let values = line
                .split(',')
                .map(|f| f.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Parse {
                    path: path.to_path_buf(),
                    message: format!("row {}: {e}", row + 1),
                })?;
            if let Some(first) = points.first() {
                let first: &DVector<f64> = first;
                check_dim(first.len(), values.len(), "sample row")?;
            }
            points.push(DVector::from_vec(values));
        }
        Ok(SampleSet { points, tau })
    }
}

/// Uniform axis-aligned grid covering `domain` with spacing at most `tau`.
///
/// Each axis of extent `L` is split into `ceil(L / tau)` equal intervals, so
/// both bounds are grid points and every state in the box has a grid point
/// within `tau / 2` along every axis.
pub fn grid_domain(domain: &DomainBox, tau: f64, max_points: usize) -> Result<SampleSet> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::InvalidInput(format!("tau must be > 0, got {tau}")));
    }
    let n = domain.dim();
    let mut axes = Vec::with_capacity(n);
    let mut count: u128 = 1;
    for i in 0..n {
        let (lo, hi) = (domain.lower[i], domain.upper[i]);
        let intervals = ((hi - lo) / tau).ceil().max(1.0);
        if intervals > 1e12 {
            count = u128::MAX;
            break;
        }
        let intervals = intervals as usize;
        count = count.saturating_mul(intervals as u128 + 1);
        axes.push((lo, hi, intervals));
    }
    if count > max_points as u128 {
        let ratio = count as f64 / max_points as f64;
        return Err(Error::TooManyPoints {
            count,
            cap: max_points,
            suggested_tau: tau * ratio.powf(1.0 / n as f64) * 1.01,
        });
    }

    let mut points = Vec::with_capacity(count as usize);
    let mut index = vec![0usize; n];
    loop {
        let p = DVector::from_fn(n, |i, _| {
            let (lo, hi, k) = axes[i];
            if index[i] == k {
                hi
            } else {
                lo + (hi - lo) * index[i] as f64 / k as f64
            }
        });
        points.push(p);
        // Odometer increment, last axis fastest.
        let mut axis = n;
        loop {
            if axis == 0 {
                return Ok(SampleSet { points, tau });
            }
            axis -= 1;
            index[axis] += 1;
            if index[axis] <= axes[axis].2 {
                break;
            }
            index[axis] = 0;
        }
    }
}

/// Smallest constraint slack `bound - lhs` over both families at `state`,
/// under the model's current output weights and with no sampling margin.
pub fn constraint_slack(model: &ElmModel, specs: &ConstraintSpecs, state: &DVector<f64>) -> Result<f64> {
    let w = model.output_weights();
    let [safety, stability] = specs.constraints_at(model, state, Margins::default())?;
    Ok((safety.bound - safety.lhs(w)).min(stability.bound - stability.lhs(w)))
}

/// Picks `budget` grid points: half are the points with the smallest
/// constraint slack under the model's current weights (the most nearly
/// violated ones), the rest are drawn uniformly from the remaining points.
/// The result keeps grid order and is deterministic given `seed`.
pub fn select_active_points(
    grid: &SampleSet,
    model: &ElmModel,
    specs: &ConstraintSpecs,
    budget: usize,
    seed: u64,
) -> Result<SampleSet> {
    if budget > grid.count() {
        return Err(Error::InvalidInput(format!(
            "budget {budget} exceeds grid size {}",
            grid.count()
        )));
    }
    if budget == grid.count() {
        return Ok(grid.clone());
    }
    let slacks: Vec<f64> = grid
        .points
        .par_iter()
        .map(|p| constraint_slack(model, specs, p))
        .collect::<Result<_>>()?;
    let mut order: Vec<usize> = (0..grid.count()).collect();
    order.sort_by(|&i, &j| slacks[i].total_cmp(&slacks[j]).then(i.cmp(&j)));

    let ranked = budget.div_ceil(2);
    let mut chosen: Vec<usize> = order[..ranked].to_vec();
    let rest = &order[ranked..];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draws = rand::seq::index::sample(&mut rng, rest.len(), budget - ranked);
    chosen.extend(draws.iter().map(|k| rest[k]));
    chosen.sort_unstable();

    Ok(SampleSet {
        points: chosen.into_iter().map(|i| grid.points[i].clone()).collect(),
        tau: grid.tau,
    })
}
