//! CSV schema: `process,task,bag_id,y,dim_0,...,dim_{D-1}`, one row per
//! support point. Rows sharing `(process, task, bag_id)` form one region and
//! repeat the same `y`. Floats are written in shortest round-trip form.

use super::{MultiResDataset, ObservationProcess, SupportRegion};
use crate::error::{Error, Result};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

pub(crate) fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Io(format!("{}: {e}", path.display()))
}

pub fn save_process_csv(p: &ObservationProcess, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
    let mut header = vec!["process".to_string(), "task".into(), "bag_id".into(), "y".into()];
    header.extend((0..p.dim()).map(|d| format!("dim_{d}")));
    w.write_record(&header).map_err(|e| io_err(path, e))?;
    for (b, (y, s)) in p.targets.iter().zip(&p.supports).enumerate() {
        for pt in &s.points {
            let mut row = vec![p.process.to_string(), p.task.to_string(), b.to_string(), fmt_f64(*y)];
            row.extend(pt.iter().map(|v| fmt_f64(*v)));
            w.write_record(&row).map_err(|e| io_err(path, e))?;
        }
    }
    w.flush().map_err(|e| io_err(path, e))?;
    Ok(())
}

/// Writes `process_{a}_task_{p}.csv` for every process into `dir`.
pub fn save_csv(ds: &MultiResDataset, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut out = Vec::new();
    for p in &ds.processes {
        let path = dir.join(format!("process_{}_task_{}.csv", p.process, p.task));
        save_process_csv(p, &path)?;
        out.push(path);
    }
    Ok(out)
}

type Bags = BTreeMap<(usize, usize), (Vec<usize>, BTreeMap<usize, (f64, Vec<Vec<f64>>)>)>;

fn read_into(path: &Path, bags: &mut Bags, dim: &mut Option<usize>) -> Result<()> {
    let name = path.display().to_string();
    let perr = |line: usize, msg: String| Error::Parse { path: name.clone(), line, msg };
    let mut r = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| io_err(path, e))?;
    let header: Vec<String> = r
        .headers()
        .map_err(|e| perr(1, e.to_string()))?
        .iter()
        .map(|s| s.trim().to_string())
        .collect();
    if header.is_empty() || header == [""] {
        return Err(Error::NoObservations);
    }
    if header.len() < 5 || header[..4] != ["process", "task", "bag_id", "y"] {
        return Err(perr(1, "header must be process,task,bag_id,y,dim_0,...".into()));
    }
    for (d, h) in header[4..].iter().enumerate() {
        if *h != format!("dim_{d}") {
            return Err(perr(1, format!("expected column dim_{d}, found {h:?}")));
        }
    }
    let d = header.len() - 4;
    match dim {
        Some(prev) if *prev != d => return Err(Error::DimensionMismatch { expected: *prev, found: d }),
        _ => *dim = Some(d),
    }
    for rec in r.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            perr(line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() != header.len() {
            return Err(perr(line, format!("expected {} fields, found {}", header.len(), rec.len())));
        }
        let int = |i: usize| rec[i].trim().parse::<usize>().map_err(|e| perr(line, format!("{}: {e}", header[i])));
        let float = |i: usize| {
            let v = rec[i].trim().parse::<f64>().map_err(|e| perr(line, format!("{}: {e}", header[i])))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(perr(line, format!("{} is not finite", header[i])))
            }
        };
        let (a, p, b, y) = (int(0)?, int(1)?, int(2)?, float(3)?);
        let x = (4..rec.len()).map(float).collect::<Result<Vec<f64>>>()?;
        let entry = bags.entry((p, a)).or_default();
        match entry.1.get_mut(&b) {
            Some((y0, pts)) => {
                if y0.to_bits() != y.to_bits() {
                    return Err(perr(line, format!("bag {b} has inconsistent y values")));
                }
                pts.push(x);
            }
            None => {
                entry.0.push(b);
                entry.1.insert(b, (y, vec![x]));
            }
        }
    }
    Ok(())
}

fn assemble(mut bags: Bags) -> Result<MultiResDataset> {
    if bags.is_empty() {
        return Err(Error::NoObservations);
    }
    let mut procs = Vec::new();
    for ((task, process), (order, mut map)) in std::mem::take(&mut bags) {
        let mut targets = Vec::with_capacity(order.len());
        let mut supports = Vec::with_capacity(order.len());
        for b in order {
            let (y, pts) = map.remove(&b).expect("bag recorded");
            targets.push(y);
            supports.push(SupportRegion::new(pts)?);
        }
        procs.push(ObservationProcess::new(process, task, targets, supports)?);
    }
    MultiResDataset::new(procs)
}

pub fn load_csv(path: &Path) -> Result<MultiResDataset> {
    load_csv_files(&[path])
}

/// Loads and merges several files; a process may not be split across files.
pub fn load_csv_files<P: AsRef<Path>>(paths: &[P]) -> Result<MultiResDataset> {
    let mut all = Bags::new();
    let mut dim = None;
    for path in paths {
        let mut one = Bags::new();
        read_into(path.as_ref(), &mut one, &mut dim)?;
        for (k, v) in one {
            if all.insert(k, v).is_some() {
                return Err(Error::invalid(format!(
                    "process {} of task {} appears in more than one file",
                    k.1, k.0
                )));
            }
        }
    }
    assemble(all)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::synth::{gen_bias_triplet, BiasTripletConfig};

    fn tmp(name: &str) -> PathBuf {
        let d = std::env::temp_dir().join(format!("mrgp-csv-{}-{name}", std::process::id()));
        std::fs::create_dir_all(&d).unwrap();
        d
    }

    #[test]
    fn round_trip_is_exact() {
        let ds = gen_bias_triplet(3, &BiasTripletConfig::default()).unwrap().dataset;
        let dir = tmp("rt");
        let files = save_csv(&ds, &dir).unwrap();
        let back = load_csv_files(&files).unwrap();
        assert_eq!(back, ds);
        save_csv(&back, &dir.join("again")).unwrap();
        for f in &files {
            let a = std::fs::read(f).unwrap();
            let b = std::fs::read(dir.join("again").join(f.file_name().unwrap())).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn empty_file_has_no_observations() {
        let dir = tmp("empty");
        let f = dir.join("e.csv");
        std::fs::write(&f, "").unwrap();
        assert_eq!(load_csv(&f).unwrap_err(), Error::NoObservations);
        std::fs::write(&f, "process,task,bag_id,y,dim_0\n").unwrap();
        assert_eq!(load_csv(&f).unwrap_err(), Error::NoObservations);
    }

    #[test]
    fn one_bag_of_two_points() {
        let dir = tmp("bag");
        let f = dir.join("b.csv");
        std::fs::write(&f, "process,task,bag_id,y,dim_0\n1,1,0,2.5,0.0\n1,1,0,2.5,1.0\n").unwrap();
        let ds = load_csv(&f).unwrap();
        assert_eq!(ds.processes[0].supports[0].len(), 2);
        assert_eq!(ds.processes[0].supports[0].weight, 0.5);
    }

    #[test]
    fn malformed_rows_report_lines() {
        let dir = tmp("bad");
        let f = dir.join("b.csv");
        std::fs::write(&f, "process,task,bag_id,y,dim_0\n1,1,0,2.5,0.0\n1,1,1,abc,1.0\n").unwrap();
        match load_csv(&f).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            e => panic!("unexpected {e:?}"),
        }
        std::fs::write(&f, "process,task,bag_id,y,dim_0\n1,1,0,2.5,0.0\n1,1,0,2.6,1.0\n").unwrap();
        assert!(matches!(load_csv(&f).unwrap_err(), Error::Parse { line: 3, .. }));
        let g = dir.join("c.csv");
        std::fs::write(&g, "process,task,bag_id,y,dim_0,dim_1\n2,1,0,1.0,0.0,0.0\n").unwrap();
        std::fs::write(&f, "process,task,bag_id,y,dim_0\n1,1,0,2.5,0.0\n").unwrap();
        assert!(matches!(load_csv_files(&[&f, &g]).unwrap_err(), Error::DimensionMismatch { .. }));
    }
}
