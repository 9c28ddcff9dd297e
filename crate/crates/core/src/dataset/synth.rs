//! Synthetic generators for the desk-scale experiments.

use super::{discretize_region, MultiResDataset, ObservationProcess, SupportRegion, TestSet};
use crate::error::{Error, Result};
use crate::rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// A generated dataset plus held-out targets and a record of the settings.
#[derive(Clone, Debug)]
pub struct Synthetic {
    pub dataset: MultiResDataset,
    pub test: Vec<TestSet>,
    pub metadata: BTreeMap<String, String>,
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![0.5 * (lo + hi)];
    }
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

pub fn five_sin2(x: f64) -> f64 {
    5.0 * x.sin().powi(2)
}

/// Exact mean of `5 sin²` over `[a, b]`.
pub fn five_sin2_mean(a: f64, b: f64) -> f64 {
    2.5 * (1.0 - ((2.0 * b).sin() - (2.0 * a).sin()) / (2.0 * (b - a)))
}

/// What to do with trailing points that do not fill a whole bin.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Remainder {
    Drop,
    Reject,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DependentPairConfig {
    pub n: usize,
    pub range: (f64, f64),
    pub bin: usize,
    /// Noise standard deviations of the point process and of the bag means.
    pub noise: (f64, f64),
    pub remainder: Remainder,
    pub test_points: usize,
}

impl Default for DependentPairConfig {
    fn default() -> Self {
        DependentPairConfig {
            n: 100,
            range: (-2.0, 15.0),
            bin: 3,
            noise: (0.1, 0.1),
            remainder: Remainder::Drop,
            test_points: 200,
        }
    }
}

/// Two processes on one task: noisy point observations of `f`, and noisy
/// means of consecutive bins of those same observations.
pub fn gen_dependent_pair(seed: u64, cfg: &DependentPairConfig) -> Result<Synthetic> {
    gen_dependent_pair_with(seed, cfg, five_sin2)
}

pub fn gen_dependent_pair_with(seed: u64, cfg: &DependentPairConfig, f: impl Fn(f64) -> f64) -> Result<Synthetic> {
    if cfg.bin == 0 || cfg.bin > cfg.n {
        return Err(Error::invalid(format!("bin size {} must be in 1..={}", cfg.bin, cfg.n)));
    }
    if cfg.remainder == Remainder::Reject && cfg.n % cfg.bin != 0 {
        return Err(Error::invalid(format!("bin {} does not divide n = {}", cfg.bin, cfg.n)));
    }
    let key = rng::tag("dependent-pair");
    let x = linspace(cfg.range.0, cfg.range.1, cfg.n);
    let mut r1 = rng::stream(seed, &[key, 1]);
    let y1: Vec<f64> = x.iter().map(|&xi| f(xi) + cfg.noise.0 * rng::normal(&mut r1)).collect();
    let bags = cfg.n / cfg.bin;
    let mut r2 = rng::stream(seed, &[key, 2]);
    let mut y2 = Vec::with_capacity(bags);
    let mut s2 = Vec::with_capacity(bags);
    for b in 0..bags {
        let idx = b * cfg.bin..(b + 1) * cfg.bin;
        let mean = y1[idx.clone()].iter().sum::<f64>() / cfg.bin as f64;
        y2.push(mean + cfg.noise.1 * rng::normal(&mut r2));
        s2.push(SupportRegion::new(x[idx].iter().map(|&v| vec![v]).collect())?);
    }
    let p1 = ObservationProcess::new(1, 1, y1, x.iter().map(|&v| SupportRegion::point(vec![v])).collect())?;
    let p2 = ObservationProcess::new(2, 1, y2, s2)?;
    let tx = linspace(cfg.range.0, cfg.range.1, cfg.test_points);
    let test = TestSet { process: 1, task: 1, y: tx.iter().map(|&v| f(v)).collect(), x: tx.into_iter().map(|v| vec![v]).collect() };
    let mut metadata = BTreeMap::new();
    metadata.insert("generator".into(), "dependent-pair".into());
    metadata.insert("seed".into(), seed.to_string());
    metadata.insert("n".into(), cfg.n.to_string());
    metadata.insert("bin".into(), cfg.bin.to_string());
    metadata.insert("bags".into(), bags.to_string());
    metadata.insert("dropped_points".into(), (cfg.n - bags * cfg.bin).to_string());
    metadata.insert("noise".into(), format!("{:?}", cfg.noise));
    Ok(Synthetic { dataset: MultiResDataset::new(vec![p1, p2])?, test: vec![test], metadata })
}

/// One biased, aggregated process of the bias triplet.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasedProcess {
    pub scale: f64,
    pub width: f64,
    pub range: (f64, f64),
    pub count: usize,
    pub grid: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasTripletConfig {
    pub processes: Vec<BiasedProcess>,
    pub noise: f64,
    pub test_range: (f64, f64),
    pub test_points: usize,
}

impl Default for BiasTripletConfig {
    fn default() -> Self {
        BiasTripletConfig {
            processes: vec![
                BiasedProcess { scale: 1.0, width: 1.0, range: (7.0, 12.0), count: 30, grid: 4 },
                BiasedProcess { scale: 0.5, width: 5.0, range: (-10.0, 10.0), count: 40, grid: 8 },
                BiasedProcess { scale: 0.3, width: 5.0, range: (10.0, 20.0), count: 30, grid: 8 },
            ],
            noise: 0.1,
            test_range: (-10.0, 20.0),
            test_points: 301,
        }
    }
}

/// Windowed averages of `s·5 sin²` at three resolutions and scales. Targets
/// use the exact window mean; supports are discretized on a uniform grid.
pub fn gen_bias_triplet(seed: u64, cfg: &BiasTripletConfig) -> Result<Synthetic> {
    let key = rng::tag("bias-triplet");
    let mut procs = Vec::new();
    let mut metadata = BTreeMap::new();
    for (i, bp) in cfg.processes.iter().enumerate() {
        let (lo, hi) = (bp.range.0 + bp.width / 2.0, bp.range.1 - bp.width / 2.0);
        if hi < lo || bp.count == 0 {
            return Err(Error::invalid(format!("process {} windows do not fit the range", i + 1)));
        }
        let mut r = rng::stream(seed, &[key, i as u64 + 1]);
        let mut y = Vec::with_capacity(bp.count);
        let mut s = Vec::with_capacity(bp.count);
        for c in linspace(lo, hi, bp.count) {
            let (a, b) = (c - bp.width / 2.0, c + bp.width / 2.0);
            y.push(bp.scale * five_sin2_mean(a, b) + cfg.noise * rng::normal(&mut r));
            s.push(discretize_region(&[(a, b)], &[bp.grid])?);
        }
        procs.push(ObservationProcess::new(i + 1, 1, y, s)?);
        metadata.insert(
            format!("process_{}", i + 1),
            format!("scale={} width={} range={:?} count={} grid={}", bp.scale, bp.width, bp.range, bp.count, bp.grid),
        );
    }
    let tx = linspace(cfg.test_range.0, cfg.test_range.1, cfg.test_points);
    let test = TestSet { process: 1, task: 1, y: tx.iter().map(|&v| five_sin2(v)).collect(), x: tx.into_iter().map(|v| vec![v]).collect() };
    metadata.insert("generator".into(), "bias-triplet".into());
    metadata.insert("seed".into(), seed.to_string());
    metadata.insert("noise".into(), cfg.noise.to_string());
    Ok(Synthetic { dataset: MultiResDataset::new(procs)?, test: vec![test], metadata })
}

/// A sinusoidal component `amp·sin(2π t/period + phase)` with `t` in hours.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub amp: f64,
    pub period: f64,
    pub phase: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterTaskConfig {
    pub hours: usize,
    /// Window length, in hours, of the aggregated task-1 observations.
    pub aggregation: usize,
    /// Held-out hours `[start, end)` of the task-2 series.
    pub gap: (usize, usize),
    pub components: Vec<Component>,
    /// Per-task multipliers of the shared signal.
    pub task_scale: (f64, f64),
    pub noise: f64,
}

impl Default for InterTaskConfig {
    fn default() -> Self {
        InterTaskConfig {
            hours: 144,
            aggregation: 5,
            gap: (60, 96),
            components: vec![
                Component { amp: 1.2, period: 37.0, phase: 0.0 },
                Component { amp: 0.8, period: 9.0, phase: 0.4 },
            ],
            task_scale: (1.0, 0.8),
            noise: 0.05,
        }
    }
}

impl InterTaskConfig {
    pub fn signal(&self, hour: f64) -> f64 {
        self.components
            .iter()
            .map(|c| c.amp * (2.0 * std::f64::consts::PI * hour / c.period + c.phase).sin())
            .sum()
    }
}

/// Two correlated hourly series. Task 1 is observed only as non-overlapping
/// window means; task 2 is observed hourly outside the gap. Inputs are in
/// days. The test set is the noiseless task-2 signal inside the gap.
pub fn gen_intertask(seed: u64, cfg: &InterTaskConfig) -> Result<Synthetic> {
    if cfg.aggregation == 0 || cfg.aggregation > cfg.hours {
        return Err(Error::invalid("aggregation window must be in 1..=hours"));
    }
    if cfg.gap.0 >= cfg.gap.1 || cfg.gap.1 > cfg.hours {
        return Err(Error::invalid("gap must be a non-empty sub-range of the series"));
    }
    let key = rng::tag("intertask");
    let day = |h: usize| h as f64 / 24.0;
    let mut r1 = rng::stream(seed, &[key, 1]);
    let bags = cfg.hours / cfg.aggregation;
    let mut y1 = Vec::with_capacity(bags);
    let mut s1 = Vec::with_capacity(bags);
    for b in 0..bags {
        let hrs: Vec<usize> = (b * cfg.aggregation..(b + 1) * cfg.aggregation).collect();
        let mean = hrs.iter().map(|&h| cfg.task_scale.0 * cfg.signal(h as f64)).sum::<f64>() / hrs.len() as f64;
        y1.push(mean + cfg.noise * rng::normal(&mut r1));
        s1.push(SupportRegion::new(hrs.iter().map(|&h| vec![day(h)]).collect())?);
    }
    let mut r2 = rng::stream(seed, &[key, 2]);
    let (mut y2, mut s2) = (Vec::new(), Vec::new());
    let mut test = TestSet { process: 1, task: 2, x: vec![], y: vec![] };
    for h in 0..cfg.hours {
        let v = cfg.task_scale.1 * cfg.signal(h as f64);
        let e = rng::normal(&mut r2);
        if (cfg.gap.0..cfg.gap.1).contains(&h) {
            test.x.push(vec![day(h)]);
            test.y.push(v);
        } else {
            y2.push(v + cfg.noise * e);
            s2.push(SupportRegion::point(vec![day(h)]));
        }
    }
    let mut metadata = BTreeMap::new();
    metadata.insert("generator".into(), "intertask".into());
    metadata.insert("seed".into(), seed.to_string());
    metadata.insert("aggregation".into(), cfg.aggregation.to_string());
    metadata.insert("gap".into(), format!("{:?}", cfg.gap));
    Ok(Synthetic {
        dataset: MultiResDataset::new(vec![ObservationProcess::new(1, 1, y1, s1)?, ObservationProcess::new(1, 2, y2, s2)?])?,
        test: vec![test],
        metadata,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dependent_pair_shape() {
        let s = gen_dependent_pair(1, &DependentPairConfig::default()).unwrap();
        let ds = &s.dataset;
        assert_eq!(ds.processes[0].len(), 100);
        assert_eq!(ds.processes[1].len(), 33);
        assert!(ds.processes[1].supports.iter().all(|r| r.len() == 3 && r.weight == 1.0 / 3.0));
        assert_eq!(s.metadata["dropped_points"], "1");
        let strict = DependentPairConfig { remainder: Remainder::Reject, ..Default::default() };
        assert!(gen_dependent_pair(1, &strict).is_err());
    }

    #[test]
    fn dependent_pair_constant_noiseless() {
        let cfg = DependentPairConfig { noise: (0.0, 0.0), ..Default::default() };
        let s = gen_dependent_pair_with(3, &cfg, |_| 1.75).unwrap();
        assert!(s.dataset.processes[1].targets.iter().all(|&y| (y - 1.75).abs() < 1e-15));
    }

    #[test]
    fn nested_bag_means_match() {
        let cfg = DependentPairConfig { noise: (0.0, 0.0), ..Default::default() };
        let s = gen_dependent_pair(5, &cfg).unwrap();
        let (p1, p2) = (&s.dataset.processes[0], &s.dataset.processes[1]);
        for (b, y) in p2.targets.iter().enumerate() {
            let m = p2.supports[b].aggregate(|p| five_sin2(p[0]));
            assert!((m - y).abs() < 1e-12);
            let from_p1: f64 = p1.targets[3 * b..3 * b + 3].iter().sum::<f64>() / 3.0;
            assert!((from_p1 - y).abs() < 1e-12);
        }
    }

    #[test]
    fn generators_are_deterministic() {
        let a = gen_dependent_pair(9, &DependentPairConfig::default()).unwrap();
        let b = gen_dependent_pair(9, &DependentPairConfig::default()).unwrap();
        assert_eq!(a.dataset, b.dataset);
        let c = gen_dependent_pair(10, &DependentPairConfig::default()).unwrap();
        assert_ne!(a.dataset, c.dataset);
        let a = gen_bias_triplet(2, &BiasTripletConfig::default()).unwrap();
        let b = gen_bias_triplet(2, &BiasTripletConfig::default()).unwrap();
        assert_eq!(a.dataset, b.dataset);
    }

    #[test]
    fn interval_mean_of_five_sin2() {
        assert!((five_sin2_mean(0.0, 1.0) - 1.3633782164678978).abs() < 1e-14);
        // Midpoint rule on a fine grid as an independent check.
        let n = 200_000;
        let quad: f64 = (0..n).map(|i| five_sin2((i as f64 + 0.5) / n as f64 * 3.0 + 2.0)).sum::<f64>() / n as f64;
        assert!((quad - five_sin2_mean(2.0, 5.0)).abs() < 1e-9);
    }

    #[test]
    fn bias_triplet_structure() {
        let cfg = BiasTripletConfig { noise: 0.0, ..Default::default() };
        let s = gen_bias_triplet(1, &cfg).unwrap();
        let widths: Vec<f64> = s
            .dataset
            .processes
            .iter()
            .map(|p| {
                let r = &p.supports[0];
                r.points.last().unwrap()[0] - r.points[0][0]
            })
            .collect();
        assert!((widths[0] - 1.0).abs() < 1e-12 && (widths[1] - 5.0).abs() < 1e-12 && (widths[2] - 5.0).abs() < 1e-12);
        assert_eq!(s.test[0].x.len(), 301);
        // Peak raw amplitudes s·5 of the three generating functions.
        let peaks: Vec<f64> = cfg.processes.iter().map(|p| p.scale * five_sin2(std::f64::consts::FRAC_PI_2)).collect();
        assert_eq!(peaks, vec![5.0, 2.5, 1.5]);
        for (p, bp) in s.dataset.processes.iter().zip(&cfg.processes) {
            let r = &p.supports[0];
            let (a, b) = (r.points[0][0], r.points.last().unwrap()[0]);
            assert!((p.targets[0] - bp.scale * five_sin2_mean(a, b)).abs() < 1e-12);
        }
    }

    #[test]
    fn intertask_structure() {
        let s = gen_intertask(4, &InterTaskConfig { aggregation: 24, ..Default::default() }).unwrap();
        let ds = &s.dataset;
        assert_eq!(ds.num_tasks(), 2);
        assert_eq!(ds.processes[0].len(), 6);
        assert_eq!(ds.processes[0].supports[0].len(), 24);
        assert_eq!(ds.processes[1].len(), 144 - 36);
        assert_eq!(s.test[0].y.len(), 36);
    }
}
