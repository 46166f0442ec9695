//! Demonstration trajectories at a fixed sampling period, their on-disk
//! format, and the conversion into one-step training pairs.
//!
//! A dataset on disk is a JSON manifest
//!
//! ```text
//! { "period": 0.01, "dims": 2, "files": ["demo_00.csv", ...], "target": [..] }
//! ```
//!
//! next to one CSV per demonstration with header `x0,x1,...` and one state
//! per row. `target` is optional; without it the mean endpoint is used.

use std::path::{Path, PathBuf};

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::elm::InputVector;
use crate::error::{check_dim, Error, Result};

/// Endpoints further apart than this fraction of the data extent trigger a
/// warning when the target is inferred.
pub const ENDPOINT_SPREAD_WARN: f64 = 0.05;

/// Trajectories as recorded, plus an optional constant shift applied on
/// access. The recorded values are never modified, so removing the shift
/// restores them exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryDataset {
    demonstrations: Vec<Vec<DVector<f64>>>,
    target: DVector<f64>,
    period: f64,
    shift: Option<DVector<f64>>,
}

impl TrajectoryDataset {
    pub fn new(demonstrations: Vec<Vec<DVector<f64>>>, target: DVector<f64>, period: f64) -> Result<Self> {
        if demonstrations.is_empty() {
            return Err(Error::InvalidInput("dataset has no demonstrations".into()));
        }
        if !(period > 0.0) || !period.is_finite() {
            return Err(Error::InvalidInput(format!("period must be positive, got {period}")));
        }
        let n = target.len();
        if n == 0 || target.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("target must be a finite, non-empty vector".into()));
        }
        for (i, demo) in demonstrations.iter().enumerate() {
            if demo.len() < 2 {
                return Err(Error::InvalidInput(format!(
                    "demonstration {i} has {} sample(s), need at least 2",
                    demo.len()
                )));
            }
            for x in demo {
                check_dim(n, x.len(), "demonstration state")?;
                if x.iter().any(|v| !v.is_finite()) {
                    return Err(Error::InvalidInput(format!("demonstration {i} has a non-finite state")));
                }
            }
        }
        Ok(TrajectoryDataset {
            demonstrations,
            target,
            period,
            shift: None,
        })
    }

    pub fn dim(&self) -> usize {
        self.target.len()
    }

    pub fn len(&self) -> usize {
        self.demonstrations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.demonstrations.is_empty()
    }

    pub fn period(&self) -> f64 {
        self.period
    }

    pub fn shift(&self) -> Option<&DVector<f64>> {
        self.shift.as_ref()
    }

    pub fn is_translated(&self) -> bool {
        self.shift.is_some()
    }

    /// Maps a recorded state into the working frame.
    pub fn to_working(&self, raw: &DVector<f64>) -> DVector<f64> {
        match &self.shift {
            Some(s) => raw + s,
            None => raw.clone(),
        }
    }

    /// Maps a working-frame state back to recorded coordinates.
    pub fn to_recorded(&self, working: &DVector<f64>) -> DVector<f64> {
        match &self.shift {
            Some(s) => working - s,
            None => working.clone(),
        }
    }

    /// Target in the working frame.
    pub fn target(&self) -> DVector<f64> {
        self.to_working(&self.target)
    }

    pub fn recorded_target(&self) -> &DVector<f64> {
        &self.target
    }

    /// Demonstration `i` in the working frame.
    pub fn demonstration(&self, i: usize) -> Vec<DVector<f64>> {
        self.demonstrations[i].iter().map(|x| self.to_working(x)).collect()
    }

    pub fn demonstrations(&self) -> Vec<Vec<DVector<f64>>> {
        (0..self.len()).map(|i| self.demonstration(i)).collect()
    }

    pub fn recorded_demonstrations(&self) -> &[Vec<DVector<f64>>] {
        &self.demonstrations
    }

    /// Errors `e_k = x_k - x*` of demonstration `i`, in the working frame.
    pub fn errors(&self, i: usize) -> Vec<DVector<f64>> {
        let target = self.target();
        self.demonstration(i).iter().map(|x| x - &target).collect()
    }

    /// First state of every demonstration, in the working frame.
    pub fn initial_states(&self) -> Vec<DVector<f64>> {
        self.demonstrations.iter().map(|d| self.to_working(&d[0])).collect()
    }

    /// Number of one-step pairs, `sum (T_m - 1)`.
    pub fn pair_count(&self) -> usize {
        self.demonstrations.iter().map(|d| d.len() - 1).sum()
    }

    /// Shifts the working frame so that the target sits at the origin.
    pub fn translate_to_origin(mut self) -> Self {
        self.shift = Some(-&self.target);
        self
    }

    /// Drops any shift; the working frame becomes the recorded one again.
    pub fn untranslate(mut self) -> Self {
        self.shift = None;
        self
    }

    /// Largest per-axis range of the recorded states.
    pub fn extent(&self) -> f64 {
        (0..self.dim())
            .map(|j| {
                let values = self.demonstrations.iter().flatten().map(|x| x[j]);
                let lo = values.clone().fold(f64::INFINITY, f64::min);
                let hi = values.fold(f64::NEG_INFINITY, f64::max);
                hi - lo
            })
            .fold(0.0, f64::max)
    }

    /// Writes the recorded trajectories and target as a manifest plus one
    /// CSV per demonstration into `dir`, returning the manifest path.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut files = Vec::with_capacity(self.len());
        for (i, demo) in self.demonstrations.iter().enumerate() {
            let name = format!("demo_{i:02}.csv");
            write_states(&dir.join(&name), demo)?;
            files.push(name);
        }
        let manifest = Manifest {
            period: self.period,
            dims: self.dim(),
            files,
            target: Some(self.target.iter().copied().collect()),
        };
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&manifest)? + "\n";
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    period: f64,
    dims: usize,
    files: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    target: Option<Vec<f64>>,
}

/// Writes states one per row under an `x0,x1,...` header. Floats use the
/// shortest round-trip form.
pub fn write_states(path: &Path, states: &[DVector<f64>]) -> Result<()> {
    let n = states.first().map_or(0, |x| x.len());
    let mut out = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    out.write_record((0..n).map(|j| format!("x{j}"))).map_err(|e| csv_error(path, e))?;
    for x in states {
        out.write_record(x.iter().map(|v| v.to_string())).map_err(|e| csv_error(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

fn read_states(path: &Path, dims: usize) -> Result<Vec<DVector<f64>>> {
    let parse_err = |message: String| Error::Parse {
        path: path.to_path_buf(),
        message,
    };
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::Reader::from_reader(file);
    let header = reader.headers().map_err(|e| csv_error(path, e))?.len();
    if header != dims {
        return Err(parse_err(format!("header has {header} column(s), manifest says {dims}")));
    }
    let mut states = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let values = record
            .iter()
            .map(|f| f.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| parse_err(format!("row {}: {e}", row + 1)))?;
        states.push(DVector::from_vec(values));
    }
    if states.is_empty() {
        return Err(parse_err("no samples".into()));
    }
    Ok(states)
}

/// Loads a dataset from its manifest. Without a target in the manifest the
/// mean endpoint is used, with a warning if the endpoints disagree by more
/// than [`ENDPOINT_SPREAD_WARN`] of the data extent. With
/// `translate_to_origin` the working frame puts that target at the origin.
pub fn load_demonstrations(path: &Path, translate_to_origin: bool) -> Result<TrajectoryDataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    if manifest.files.is_empty() {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            message: "manifest lists no files".into(),
        });
    }
    let dir = path.parent().unwrap_or(Path::new("."));
    let demos = manifest
        .files
        .iter()
        .map(|f| read_states(&dir.join(f), manifest.dims))
        .collect::<Result<Vec<_>>>()?;

    let ends: Vec<&DVector<f64>> = demos.iter().map(|d| d.last().expect("non-empty")).collect();
    let mean_end = ends.iter().fold(DVector::zeros(manifest.dims), |acc, x| acc + *x) / ends.len() as f64;
    let spread = ends.iter().map(|x| (*x - &mean_end).norm()).fold(0.0, f64::max);
    let target = match manifest.target {
        Some(t) => {
            check_dim(manifest.dims, t.len(), "manifest target")?;
            DVector::from_vec(t)
        }
        None => mean_end.clone(),
    };
    let dataset = TrajectoryDataset::new(demos, target, manifest.period).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    if spread > ENDPOINT_SPREAD_WARN * dataset.extent() {
        log::warn!(
            "{}: demonstration endpoints differ by up to {spread:.3e}; using the mean endpoint",
            path.display()
        );
    }
    Ok(if translate_to_origin {
        dataset.translate_to_origin()
    } else {
        dataset
    })
}

/// One-step pairs `(s_k, x_{k+1})` with `s_k = [x_k; x_k - x*; 1]`, in the
/// working frame, in demonstration order.
pub fn to_training_pairs(dataset: &TrajectoryDataset) -> (Vec<InputVector>, Vec<DVector<f64>>) {
    let target = dataset.target();
    let mut inputs = Vec::with_capacity(dataset.pair_count());
    let mut targets = Vec::with_capacity(dataset.pair_count());
    for i in 0..dataset.len() {
        let demo = dataset.demonstration(i);
        for pair in demo.windows(2) {
            inputs.push(InputVector::from_state(&pair[0], &target));
            targets.push(pair[1].clone());
        }
    }
    (inputs, targets)
}

/// Settings of the synthetic snake-shaped handwriting set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SnakeShape {
    pub demos: usize,
    pub samples: usize,
    /// Horizontal travel (mm).
    pub length: f64,
    /// Peak lateral excursion (mm).
    pub amplitude: f64,
    /// Recorded endpoint (mm); the curves end exactly here.
    pub endpoint: [f64; 2],
    pub period: f64,
    /// Relative spread of the per-demonstration start, amplitude and speed.
    pub jitter: f64,
}

impl Default for SnakeShape {
    fn default() -> Self {
        SnakeShape {
            demos: 7,
            samples: 1000,
            length: 40.0,
            amplitude: 10.0,
            endpoint: [30.0, -15.0],
            period: 0.01,
            jitter: 0.08,
        }
    }
}

/// Snake-like planar demonstrations: a decaying sine travelling to a common
/// endpoint, approached with exponentially decreasing speed.
pub fn synthetic_snake(shape: &SnakeShape, seed: u64) -> Result<TrajectoryDataset> {
    if shape.demos == 0 || shape.samples < 2 {
        return Err(Error::InvalidInput("snake needs >= 1 demonstration and >= 2 samples".into()));
    }
    if !(shape.jitter >= 0.0 && shape.jitter < 0.5) {
        return Err(Error::InvalidInput(format!("jitter must be in [0, 0.5), got {}", shape.jitter)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let end = DVector::from_column_slice(&shape.endpoint);
    let jitter = |rng: &mut ChaCha8Rng| 1.0 + shape.jitter * rng.random_range(-1.0..1.0);
    let demos = (0..shape.demos)
        .map(|_| {
            let length = shape.length * jitter(&mut rng);
            let amplitude = shape.amplitude * jitter(&mut rng);
            let rate = 5.0 * jitter(&mut rng);
            let lift = shape.amplitude * 0.2 * rng.random_range(-1.0..1.0);
            let last = (shape.samples - 1) as f64;
            (0..shape.samples)
                .map(|k| {
                    let u = k as f64 / last;
                    // Remaining fraction of the path, 1 at the start and 0 at the end.
                    let r = ((-rate * u).exp() - (-rate).exp()) / (1.0 - (-rate).exp());
                    let s = 1.0 - r;
                    let x = -length * r;
                    let y = (amplitude * (3.0 * std::f64::consts::PI * s).sin() + lift * r) * r;
                    DVector::from_vec(vec![end[0] + x, end[1] + y])
                })
                .collect()
        })
        .collect();
    TrajectoryDataset::new(demos, end, shape.period)
}
