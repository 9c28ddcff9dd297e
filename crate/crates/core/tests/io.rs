use mrgp::dataset::synth::{gen_dependent_pair, DependentPairConfig};
use mrgp::dataset::{load_csv, load_csv_files, save_csv, save_process_csv, MultiResDataset, ObservationProcess, SupportRegion};
use mrgp::dgp::{moe_weights, Normalization};
use mrgp::gprn::{GprnConfig, GprnModel, WeightMode};
use mrgp::nalgebra::DMatrix;
use mrgp::Error;
use proptest::prelude::*;
use std::path::PathBuf;

fn scratch(name: &str) -> PathBuf {
    let d = std::env::temp_dir().join(format!("mrgp-io-{}-{name}", std::process::id()));
    let _ = std::fs::remove_dir_all(&d);
    std::fs::create_dir_all(&d).unwrap();
    d
}

fn awkward() -> MultiResDataset {
    let y = vec![0.1 + 0.2, -1e-300, 123456789.125];
    let s = vec![
        SupportRegion::new(vec![vec![1.0 / 3.0, 2.0], vec![0.7, -0.0]]).unwrap(),
        SupportRegion::point(vec![5e-324, 1e300]),
        SupportRegion::new(vec![vec![0.5, 0.5], vec![0.25, 0.75], vec![std::f64::consts::PI, 1.0]]).unwrap(),
    ];
    MultiResDataset::new(vec![ObservationProcess::new(2, 3, y, s).unwrap()]).unwrap()
}

#[test]
fn csv_round_trip_is_exact_and_byte_stable() {
    let dir = scratch("rt");
    let ds = awkward();
    let files = save_csv(&ds, &dir).unwrap();
    let back = load_csv_files(&files).unwrap();
    assert_eq!(back, ds);
    let again = scratch("rt2");
    let files2 = save_csv(&back, &again).unwrap();
    for (a, b) in files.iter().zip(&files2) {
        assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
    }
}

#[test]
fn generated_pair_survives_csv() {
    let syn = gen_dependent_pair(4, &DependentPairConfig::default()).unwrap();
    let dir = scratch("pair");
    let files = save_csv(&syn.dataset, &dir).unwrap();
    assert_eq!(files.len(), 2);
    assert_eq!(load_csv_files(&files).unwrap(), syn.dataset);
}

#[test]
fn csv_errors_name_the_line() {
    let dir = scratch("bad");
    let cases = [
        ("header.csv", "process,task,y,dim_0\n1,1,0.5,0.0\n", 1),
        ("fields.csv", "process,task,bag_id,y,dim_0\n1,1,0,0.5,0.0\n1,1,1,0.5\n", 3),
        ("number.csv", "process,task,bag_id,y,dim_0\n1,1,0,0.5,abc\n", 2),
        ("bag.csv", "process,task,bag_id,y,dim_0\n1,1,0,0.5,0.0\n1,1,0,0.6,1.0\n", 3),
        ("nan.csv", "process,task,bag_id,y,dim_0\n1,1,0,NaN,0.0\n", 2),
    ];
    for (name, body, want) in cases {
        let p = dir.join(name);
        std::fs::write(&p, body).unwrap();
        match load_csv(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, want, "{name}"),
            other => panic!("{name}: {other:?}"),
        }
    }
}

#[test]
fn mixed_dimensions_are_rejected() {
    let dir = scratch("dims");
    let a = ObservationProcess::new(1, 1, vec![1.0], vec![SupportRegion::point(vec![0.0])]).unwrap();
    let b = ObservationProcess::new(2, 1, vec![1.0], vec![SupportRegion::point(vec![0.0, 1.0])]).unwrap();
    save_process_csv(&a, &dir.join("a.csv")).unwrap();
    save_process_csv(&b, &dir.join("b.csv")).unwrap();
    let r = load_csv_files(&[dir.join("a.csv"), dir.join("b.csv")]);
    assert!(matches!(r, Err(Error::DimensionMismatch { expected: 1, found: 2 })), "{r:?}");
}

#[test]
fn model_json_round_trip_preserves_predictions() {
    let syn = gen_dependent_pair(0, &DependentPairConfig { n: 30, ..DependentPairConfig::default() }).unwrap();
    for weights in [WeightMode::Gp, WeightMode::ExpGp, WeightMode::Constant { values: vec![0.7, -0.2] }] {
        let cfg = GprnConfig { weights, num_inducing: 7, q: 2, k: 2, ..GprnConfig::default() };
        let mut m = GprnModel::init(&syn.dataset, &cfg).unwrap();
        m.phi = 0.37;
        let s = m.to_json().unwrap();
        let back = GprnModel::from_json(&s).unwrap();
        assert_eq!(back.to_json().unwrap(), s);
        let x = DMatrix::from_column_slice(3, 1, &[0.1, 2.2, 7.9]);
        assert_eq!(m.predict(&x, 1, 1).unwrap(), back.predict(&x, 1, 1).unwrap());
    }
}

#[test]
fn truncated_json_is_an_error() {
    let s = GprnModel::init(&awkward(), &GprnConfig { num_inducing: 2, ..GprnConfig::default() }).unwrap().to_json().unwrap();
    assert!(GprnModel::from_json(&s[..s.len() / 2]).is_err());
}

proptest! {
    #[test]
    fn mixture_weights_form_a_partition(
        vars in prop::collection::vec(prop::collection::vec(1e-6f64..10.0, 6), 1..5),
        tanh in any::<bool>(),
    ) {
        let priors: Vec<f64> = (0..vars.len()).map(|i| 1.0 + i as f64).collect();
        let norm = if tanh { Normalization::Tanh } else { Normalization::MinMax };
        let w = moe_weights(&vars, &priors, norm).unwrap();
        for i in 0..6 {
            let col: Vec<f64> = w.iter().map(|e| e[i]).collect();
            prop_assert!(col.iter().all(|v| (0.0..=1.0).contains(v)), "{col:?}");
            prop_assert_eq!(col.iter().sum::<f64>(), 1.0);
        }
    }
}
