//! Multi-resolution observations.
//!
//! An observation process is a list of aggregated targets, each paired with
//! the discretized support region it averages over. Point observations are
//! the special case of singleton regions.

mod csv_io;
pub mod synth;

pub use csv_io::{load_csv, load_csv_files, save_csv, save_process_csv};

use crate::error::{Error, Result};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SupportRegion {
    pub points: Vec<Vec<f64>>,
    pub weight: f64,
}

impl SupportRegion {
    pub fn new(points: Vec<Vec<f64>>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::invalid("support region needs at least one point"));
        }
        let d = points[0].len();
        if let Some(p) = points.iter().find(|p| p.len() != d) {
            return Err(Error::DimensionMismatch { expected: d, found: p.len() });
        }
        let weight = 1.0 / points.len() as f64;
        Ok(SupportRegion { points, weight })
    }

    pub fn point(x: Vec<f64>) -> Self {
        SupportRegion { points: vec![x], weight: 1.0 }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points[0].len()
    }

    /// Weighted average of `f` over the region.
    pub fn aggregate(&self, f: impl Fn(&[f64]) -> f64) -> f64 {
        self.weight * self.points.iter().map(|p| f(p)).sum::<f64>()
    }

    /// Per-dimension midpoint of the bounding box.
    pub fn center(&self) -> Vec<f64> {
        (0..self.dim())
            .map(|d| {
                let lo = self.points.iter().map(|p| p[d]).fold(f64::INFINITY, f64::min);
                let hi = self.points.iter().map(|p| p[d]).fold(f64::NEG_INFINITY, f64::max);
                0.5 * (lo + hi)
            })
            .collect()
    }
}

/// Uniform cartesian grid over `bounds`. A count of one yields the interval
/// midpoint; larger counts include both endpoints.
pub fn discretize_region(bounds: &[(f64, f64)], grid: &[usize]) -> Result<SupportRegion> {
    if bounds.len() != grid.len() {
        return Err(Error::DimensionMismatch { expected: bounds.len(), found: grid.len() });
    }
    if bounds.is_empty() {
        return Err(Error::invalid("region needs at least one dimension"));
    }
    let mut axes = Vec::with_capacity(grid.len());
    for (&(lo, hi), &n) in bounds.iter().zip(grid) {
        if n == 0 {
            return Err(Error::invalid("grid counts must be at least 1"));
        }
        if n >= 2 && !(hi > lo) {
            return Err(Error::invalid(format!("degenerate interval [{lo}, {hi}] with {n} grid points")));
        }
        let axis: Vec<f64> = if n == 1 {
            vec![0.5 * (lo + hi)]
        } else {
            (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
        };
        axes.push(axis);
    }
    let mut points: Vec<Vec<f64>> = vec![vec![]];
    for axis in &axes {
        points = points
            .into_iter()
            .flat_map(|p| {
                axis.iter().map(move |&v| {
                    let mut q = p.clone();
                    q.push(v);
                    q
                })
            })
            .collect();
    }
    SupportRegion::new(points)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservationProcess {
    /// Process id `a`, 1-based.
    pub process: usize,
    /// Task id `p`, 1-based.
    pub task: usize,
    pub targets: Vec<f64>,
    pub supports: Vec<SupportRegion>,
    /// 1 is the finest resolution within the task.
    pub rank: usize,
}

impl ObservationProcess {
    pub fn new(process: usize, task: usize, targets: Vec<f64>, supports: Vec<SupportRegion>) -> Result<Self> {
        let p = ObservationProcess { process, task, targets, supports, rank: process };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.process == 0 || self.task == 0 {
            return Err(Error::invalid("process and task ids are 1-based"));
        }
        if self.targets.len() != self.supports.len() {
            return Err(Error::DimensionMismatch { expected: self.targets.len(), found: self.supports.len() });
        }
        if self.targets.is_empty() {
            return Err(Error::NoObservations);
        }
        if self.targets.iter().any(|y| !y.is_finite()) {
            return Err(Error::invalid(format!("non-finite target in process {}", self.process)));
        }
        let d = self.supports[0].dim();
        for s in &self.supports {
            if s.is_empty() {
                return Err(Error::invalid("empty support region"));
            }
            if s.dim() != d {
                return Err(Error::DimensionMismatch { expected: d, found: s.dim() });
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.supports[0].dim()
    }

    pub fn n_points(&self) -> usize {
        self.supports.iter().map(|s| s.len()).sum()
    }

    /// All support points stacked row-wise, in bag order.
    pub fn stacked_points(&self) -> DMatrix<f64> {
        let d = self.dim();
        let rows: Vec<f64> = self.supports.iter().flat_map(|s| s.points.iter().flatten().copied()).collect();
        DMatrix::from_row_slice(rows.len() / d, d, &rows)
    }

    pub fn max_bag(&self) -> usize {
        self.supports.iter().map(|s| s.len()).max().unwrap_or(0)
    }

    /// Same targets with every region collapsed to its midpoint.
    pub fn to_center_points(&self) -> Self {
        ObservationProcess {
            supports: self.supports.iter().map(|s| SupportRegion::point(s.center())).collect(),
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiResDataset {
    /// Sorted by (task, process).
    pub processes: Vec<ObservationProcess>,
}

impl MultiResDataset {
    pub fn new(mut processes: Vec<ObservationProcess>) -> Result<Self> {
        if processes.is_empty() {
            return Err(Error::NoObservations);
        }
        processes.sort_by_key(|p| (p.task, p.process));
        for w in processes.windows(2) {
            if (w[0].task, w[0].process) == (w[1].task, w[1].process) {
                return Err(Error::invalid(format!(
                    "duplicate process {} in task {}",
                    w[0].process, w[0].task
                )));
            }
        }
        let d = processes[0].dim();
        for p in &processes {
            p.validate()?;
            if p.dim() != d {
                return Err(Error::DimensionMismatch { expected: d, found: p.dim() });
            }
        }
        Ok(MultiResDataset { processes })
    }

    pub fn input_dim(&self) -> usize {
        self.processes[0].dim()
    }

    /// Number of tasks P (largest task id).
    pub fn num_tasks(&self) -> usize {
        self.processes.iter().map(|p| p.task).max().unwrap_or(0)
    }

    /// Number of distinct process ids A.
    pub fn num_processes(&self) -> usize {
        let mut ids: Vec<usize> = self.processes.iter().map(|p| p.process).collect();
        ids.sort_unstable();
        ids.dedup();
        ids.len()
    }

    pub fn find(&self, process: usize, task: usize) -> Option<usize> {
        self.processes.iter().position(|p| p.process == process && p.task == task)
    }

    pub fn n_observations(&self) -> usize {
        self.processes.iter().map(|p| p.len()).sum()
    }

    pub fn to_center_points(&self) -> Self {
        MultiResDataset { processes: self.processes.iter().map(|p| p.to_center_points()).collect() }
    }

    /// All distinct support points of every process, stacked.
    pub fn all_points(&self) -> DMatrix<f64> {
        let d = self.input_dim();
        let rows: Vec<f64> = self
            .processes
            .iter()
            .flat_map(|p| p.supports.iter().flat_map(|s| s.points.iter().flatten().copied()))
            .collect();
        DMatrix::from_row_slice(rows.len() / d, d, &rows)
    }
}

/// Held-out evaluation targets at points, for one (process, task) level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestSet {
    pub process: usize,
    pub task: usize,
    pub x: Vec<Vec<f64>>,
    pub y: Vec<f64>,
}

impl TestSet {
    pub fn points(&self) -> DMatrix<f64> {
        let d = self.x.first().map_or(0, |r| r.len());
        DMatrix::from_row_slice(self.x.len(), d, &self.x.concat())
    }

    pub fn to_process(&self) -> Result<ObservationProcess> {
        ObservationProcess::new(
            self.process,
            self.task,
            self.y.clone(),
            self.x.iter().map(|x| SupportRegion::point(x.clone())).collect(),
        )
    }

    pub fn from_process(p: &ObservationProcess) -> Self {
        TestSet {
            process: p.process,
            task: p.task,
            x: p.supports.iter().map(|s| s.center()).collect(),
            y: p.targets.clone(),
        }
    }
}
