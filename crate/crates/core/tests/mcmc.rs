use mrgp::dataset::{MultiResDataset, ObservationProcess, SupportRegion};
use mrgp::kernels::{Kernel, KernelSpec};
use mrgp::mcmc::{accept, batch_means_se, run_chain, summarize_series, FUpdate, McmcConfig};
use mrgp::nalgebra::{DMatrix, DVector};
use mrgp::rng;

/// Six points observed directly plus two bag means over them.
fn pair() -> MultiResDataset {
    let x = [0.0, 0.5, 1.1, 1.8, 2.4, 3.0];
    let y = [0.2, 0.7, 1.0, 0.6, -0.1, -0.6];
    let p1 = ObservationProcess::new(1, 1, y.to_vec(), x.iter().map(|&v| SupportRegion::point(vec![v])).collect()).unwrap();
    let bags = vec![
        SupportRegion::new(vec![vec![0.0], vec![0.5], vec![1.1]]).unwrap(),
        SupportRegion::new(vec![vec![1.8], vec![2.4], vec![3.0]]).unwrap(),
    ];
    let p2 = ObservationProcess::new(2, 1, vec![0.6, -0.1], bags).unwrap();
    MultiResDataset::new(vec![p1, p2]).unwrap()
}

fn fixed_hypers(iters: usize, f_update: FUpdate) -> McmcConfig {
    McmcConfig {
        iters,
        burn_in: iters / 10,
        thin: 1,
        f_update,
        init_variance: 1.0,
        init_lengthscale: 1.5,
        init_noise: 0.05,
        update_theta: false,
        update_noise: false,
        seed: 11,
        ..McmcConfig::default()
    }
}

/// Exact Gaussian posterior of `f` at `points` under the weighted product
/// likelihood.
fn exact_posterior(ds: &MultiResDataset, points: &DMatrix<f64>, cfg: &McmcConfig, phi: f64) -> (DVector<f64>, DMatrix<f64>) {
    let k = Kernel::Stationary(KernelSpec::se(cfg.init_variance, vec![cfg.init_lengthscale])).gram_sym(points).unwrap();
    let n = points.nrows();
    let mut prec = k.clone().try_inverse().unwrap();
    let mut b = DVector::zeros(n);
    for pr in &ds.processes {
        for (s, y) in pr.supports.iter().zip(&pr.targets) {
            let mut a = DVector::<f64>::zeros(n);
            for p in &s.points {
                let i = (0..n).find(|&i| points[(i, 0)] == p[0]).unwrap();
                a[i] += s.weight;
            }
            prec += &a * a.transpose() * (phi / cfg.init_noise);
            b += &a * (phi * y / cfg.init_noise);
        }
    }
    let cov = prec.try_inverse().unwrap();
    (&cov * b, cov)
}

fn check_against_exact(f_update: FUpdate, iters: usize) {
    let ds = pair();
    let cfg = McmcConfig { step_f: 0.15, ..fixed_hypers(iters, f_update) };
    let chain = run_chain(&ds, &cfg).unwrap();
    let (mean, _) = exact_posterior(&ds, &chain.points, &cfg, 1.0);
    for i in 0..mean.len() {
        let s: Vec<f64> = chain.f_samples.iter().map(|(_, f)| f[i]).collect();
        let m = s.iter().sum::<f64>() / s.len() as f64;
        let se = batch_means_se(&s);
        assert!((m - mean[i]).abs() < 3.0 * se, "{f_update:?} f[{i}]: {m} vs {} (se {se})", mean[i]);
    }
}

#[test]
fn gibbs_f_block_matches_conjugate_posterior() {
    check_against_exact(FUpdate::Gibbs, 20_000);
}

#[test]
fn random_walk_f_block_matches_conjugate_posterior() {
    check_against_exact(FUpdate::RandomWalk, 100_000);
}

#[test]
fn zero_weights_recover_the_prior() {
    let ds = pair();
    let cfg = McmcConfig { phi: vec![0.0, 0.0], init_variance: 1.7, ..fixed_hypers(20_000, FUpdate::Gibbs) };
    let chain = run_chain(&ds, &cfg).unwrap();
    for i in 0..chain.points.nrows() {
        let s: Vec<f64> = chain.f_samples.iter().map(|(_, f)| f[i]).collect();
        let sq: Vec<f64> = s.iter().map(|v| v * v).collect();
        let m = s.iter().sum::<f64>() / s.len() as f64;
        let v = sq.iter().sum::<f64>() / sq.len() as f64;
        assert!(m.abs() < 3.0 * batch_means_se(&s), "mean {m}");
        assert!((v - 1.7).abs() < 3.0 * batch_means_se(&sq), "variance {v}");
    }
}

#[test]
fn accepted_states_have_finite_log_posterior() {
    let cfg = McmcConfig { iters: 3000, burn_in: 500, seed: 2, ..McmcConfig::default() };
    let chain = run_chain(&pair(), &cfg).unwrap();
    assert!(chain.records.iter().filter(|r| r.accepted).all(|r| r.logpost.is_finite()));
    assert!(chain.acceptance.values().all(|a| *a > 0.0));
}

#[test]
fn iid_normal_summary() {
    let mut r = rng::stream(99, &[]);
    let x: Vec<f64> = (0..100_000).map(|_| rng::normal(&mut r)).collect();
    let s = summarize_series("z", &x);
    assert!(s.mean.abs() < 0.02, "{}", s.mean);
    assert!((0.98..=1.02).contains(&s.std), "{}", s.std);
    assert!(s.q05 < s.q25 && s.q25 < s.q50 && s.q50 < s.q75 && s.q75 < s.q95);
}

#[test]
fn two_state_chain_has_the_right_stationary_law() {
    // Target (0.3, 0.7) with the symmetric flip proposal.
    let logp = [0.3f64.ln(), 0.7f64.ln()];
    let mut r = rng::stream(5, &[]);
    let mut state = 0;
    let mut counts = [0usize; 2];
    for it in 0..100_000 {
        let prop = 1 - state;
        if accept(logp[state], logp[prop], &mut r) {
            state = prop;
        }
        // The flip chain decorrelates within a few steps; thinning makes the
        // counts close to independent.
        if it % 10 == 0 {
            counts[state] += 1;
        }
    }
    let n = (counts[0] + counts[1]) as f64;
    let chi2: f64 = [0.3, 0.7].iter().zip(&counts).map(|(p, &c)| (c as f64 - p * n).powi(2) / (p * n)).sum();
    // 99.9% point of χ² with one degree of freedom.
    assert!(chi2 < 10.83, "χ² {chi2}, counts {counts:?}");
}
