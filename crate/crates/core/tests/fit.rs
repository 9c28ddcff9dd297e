use mrgp::dataset::synth::{gen_bias_triplet, gen_dependent_pair, BiasTripletConfig, DependentPairConfig};
use mrgp::dataset::{MultiResDataset, ObservationProcess, SupportRegion};
use mrgp::dgp::{DgpConfig, DgpTree};
use mrgp::fit::{composite_mle, fit_mr_dgp, fit_mr_gprn, DgpFitConfig, GprnFitConfig, PhiMode};
use mrgp::gprn::{GprnConfig, GprnModel, WeightMode};
use mrgp::kernels::KernelSpec;
use mrgp::nalgebra::{DMatrix, DVector};
use mrgp::svgp::reference::{SvgpObjective, SvgpRegression};
use mrgp::trainer::{run_schedule, AdamConfig, Stage};
use mrgp::rng;

fn rmse(a: &[f64], b: &[f64]) -> f64 {
    (a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64).sqrt()
}

fn unit_weight_model(ds: &MultiResDataset, inducing: usize) -> GprnModel {
    let cfg = GprnConfig {
        weights: WeightMode::Constant { values: vec![1.0] },
        f_kernel: KernelSpec::se(2.0, vec![1.0]),
        num_inducing: inducing,
        noise: 0.05,
        ..GprnConfig::default()
    };
    GprnModel::init(ds, &cfg).unwrap()
}

fn short_fit(phi: PhiMode) -> GprnFitConfig {
    GprnFitConfig { phi, stage1_iters: 150, joint_iters: 150, ..GprnFitConfig::default() }
}

fn sine_points(seed: u64, n: usize) -> (MultiResDataset, Vec<f64>) {
    let mut r = rng::stream(seed, &[]);
    let xs: Vec<f64> = (0..n).map(|i| 6.0 * i as f64 / (n - 1) as f64).collect();
    let y: Vec<f64> = xs.iter().map(|x| (1.3 * x).sin() + 0.1 * rng::normal(&mut r)).collect();
    let p = ObservationProcess::new(1, 1, y, xs.iter().map(|&x| SupportRegion::point(vec![x])).collect()).unwrap();
    (MultiResDataset::new(vec![p]).unwrap(), xs)
}

#[test]
fn dependent_pair_gets_a_weight_below_one() {
    let syn = gen_dependent_pair(1, &DependentPairConfig::default()).unwrap();
    let m = unit_weight_model(&syn.dataset, 30);
    let (_, est, _) = composite_mle(&m, &syn.dataset, &GprnFitConfig::default()).unwrap();
    let phi = mrgp::composite::phi_ribatet(&est).unwrap();
    assert!(phi > 0.0 && phi < 1.0, "φ {phi}");
}

#[test]
fn estimated_weight_widens_the_overlap_band() {
    let syn = gen_dependent_pair(2, &DependentPairConfig::default()).unwrap();
    let m = unit_weight_model(&syn.dataset, 30);
    let tempered = fit_mr_gprn(&m, &syn.dataset, &short_fit(PhiMode::Ribatet)).unwrap();
    let product = fit_mr_gprn(&m, &syn.dataset, &short_fit(PhiMode::One)).unwrap();
    assert!(tempered.phi < 1.0);
    let x = DMatrix::from_fn(20, 1, |i, _| 0.5 * i as f64);
    let (_, vt) = tempered.model.predict_latent(&x, 1).unwrap();
    let (_, vp) = product.model.predict_latent(&x, 1).unwrap();
    for (a, b) in vt.iter().zip(vp.iter()) {
        assert!(a > b, "{a} vs {b}");
    }
}

#[test]
fn single_point_process_matches_sparse_regression() {
    let (ds, _) = sine_points(3, 40);
    let m = unit_weight_model(&ds, 10);
    let cfg = GprnFitConfig { conjugate: false, stage1_iters: 200, joint_iters: 200, ..short_fit(PhiMode::One) };
    let fit = fit_mr_gprn(&m, &ds, &cfg).unwrap();

    let b = &m.f[0];
    let mut svgp = SvgpRegression { kernel: b.kernel.clone(), z: b.z_matrix(), mean: DVector::from_vec(b.means[0].clone()), chol: b.chol_matrix(0), noise: m.noise[0].variance };
    let x = ds.processes[0].stacked_points();
    let y = ds.processes[0].targets.clone();
    let mut params = svgp.params();
    let stages = [
        Stage::new("fixed-noise", cfg.stage1_iters, cfg.lr).freeze(&["noise*", "*.z"]),
        Stage::new("joint", cfg.joint_iters, cfg.lr).freeze(&["*.z"]),
    ];
    {
        let obj = SvgpObjective { model: &svgp, x: &x, y: &y };
        run_schedule(&obj, &mut params, &stages, &AdamConfig { lr: cfg.lr, ..AdamConfig::default() }).unwrap();
    }
    svgp.set_params(&params).unwrap();

    let xt = DMatrix::from_fn(50, 1, |i, _| -0.5 + 0.14 * i as f64);
    let (gm, _) = fit.model.predict_latent(&xt, 1).unwrap();
    let (sm, _) = svgp.predict(&xt).unwrap();
    let d = rmse(gm.as_slice(), sm.as_slice());
    assert!(d < 1e-4, "mean RMSE {d}");
}

#[test]
fn one_process_tree_tracks_sparse_regression() {
    let (ds, _) = sine_points(4, 40);
    let tree = DgpTree::build(&ds, &DgpConfig { num_inducing: 10, base_kernel: KernelSpec::se(2.0, vec![1.0]), noise: 0.05, ..DgpConfig::default() }).unwrap();
    let cfg = DgpFitConfig { base_iters: 200, mapping_iters: 0, joint_iters: 100, eval_samples: 20, ..DgpFitConfig::default() };
    let fit = fit_mr_dgp(&tree, &ds, &cfg).unwrap();
    assert_eq!(fit.history.len(), cfg.base_iters + cfg.mapping_iters + cfg.joint_iters);

    let xt = DMatrix::from_fn(50, 1, |i, _| 0.12 * i as f64);
    let truth: Vec<f64> = xt.iter().map(|x| (1.3 * x).sin()).collect();
    let p = fit.tree.predict(&xt, (1, 1)).unwrap();
    let m = unit_weight_model(&ds, 10);
    let g = fit_mr_gprn(&m, &ds, &short_fit(PhiMode::One)).unwrap();
    let (gm, _) = g.model.predict_latent(&xt, 1).unwrap();
    let (a, b) = (rmse(p.mean.as_slice(), &truth), rmse(gm.as_slice(), &truth));
    assert!(a < 0.15 && (a - b).abs() < 0.05, "tree {a}, sparse {b}");
}

#[test]
fn tree_history_covers_every_stage() {
    let syn = gen_bias_triplet(0, &BiasTripletConfig::default()).unwrap();
    let tree = DgpTree::build(&syn.dataset, &DgpConfig { num_inducing: 8, mapping_inducing: 8, ..DgpConfig::default() }).unwrap();
    let cfg = DgpFitConfig { base_iters: 7, mapping_iters: 11, joint_iters: 13, eval_samples: 5, ..DgpFitConfig::default() };
    let fit = fit_mr_dgp(&tree, &syn.dataset, &cfg).unwrap();
    assert_eq!(fit.history.len(), 31);
    let stages: Vec<&str> = fit.stage_elbo.iter().map(|(s, _)| s.as_str()).collect();
    assert_eq!(stages, ["base", "mapping", "joint"]);
}

#[test]
fn joint_stage_usually_improves_on_the_mappings() {
    let mut better = 0;
    for seed in 0..5 {
        let syn = gen_bias_triplet(seed, &BiasTripletConfig::default()).unwrap();
        let tree = DgpTree::build(&syn.dataset, &DgpConfig { num_inducing: 15, mapping_inducing: 15, seed, ..DgpConfig::default() }).unwrap();
        let cfg = DgpFitConfig { base_iters: 100, mapping_iters: 100, joint_iters: 100, eval_samples: 50, ..DgpFitConfig::default() };
        let fit = fit_mr_dgp(&tree, &syn.dataset, &cfg).unwrap();
        let elbo = |s: &str| fit.stage_elbo.iter().find(|(n, _)| n == s).unwrap().1;
        if elbo("joint") >= elbo("mapping") {
            better += 1;
        }
    }
    assert!(better >= 3, "{better}/5");
}
