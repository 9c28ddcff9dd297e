//! Browser demo. Every export takes plain numbers and returns a JSON string of
//! curves for the page to draw.

use mrgp::dataset::synth::{five_sin2, gen_dependent_pair, DependentPairConfig};
use mrgp::dataset::{discretize_region, MultiResDataset, ObservationProcess, SupportRegion};
use mrgp::dgp::{moe_weights, Normalization};
use mrgp::gprn::{GprnConfig, GprnModel, WeightMode};
use mrgp::kernels::KernelSpec;
use mrgp::nalgebra::DMatrix;
use mrgp::{rng, Result};
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

fn grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

fn column(x: &[f64]) -> DMatrix<f64> {
    DMatrix::from_column_slice(x.len(), 1, x)
}

fn respond(r: Result<Value>) -> String {
    match r {
        Ok(v) => v.to_string(),
        Err(e) => json!({ "error": e.to_string() }).to_string(),
    }
}

/// Unit-weight aggregated GP with fixed hyperparameters and the closed-form
/// `q(u)`, likelihood tempered by `phi`.
fn tempered_gp(ds: &MultiResDataset, lengthscale: f64, noise: f64, phi: f64, inducing: usize) -> Result<GprnModel> {
    let cfg = GprnConfig {
        weights: WeightMode::Constant { values: vec![1.0; ds.num_tasks()] },
        f_kernel: KernelSpec::se(4.0, vec![lengthscale]),
        num_inducing: inducing,
        noise,
        ..GprnConfig::default()
    };
    let mut m = GprnModel::init(ds, &cfg)?;
    m.phi = phi;
    m.set_optimal_q(ds)?;
    Ok(m)
}

fn band(m: &GprnModel, x: &[f64]) -> Result<Value> {
    let (mean, var) = m.predict_latent(&column(x), 1)?;
    let sd: Vec<f64> = var.iter().map(|v| v.sqrt()).collect();
    Ok(json!({
        "mean": mean.as_slice(),
        "lower": mean.iter().zip(&sd).map(|(m, s)| m - 2.0 * s).collect::<Vec<_>>(),
        "upper": mean.iter().zip(&sd).map(|(m, s)| m + 2.0 * s).collect::<Vec<_>>(),
    }))
}

/// Dependent pair: posterior band under likelihood weight `phi`, next to the
/// untempered band.
#[wasm_bindgen]
pub fn tempered_posterior(phi: f64, lengthscale: f64, noise: f64, seed: u32) -> String {
    respond((|| {
        let syn = gen_dependent_pair(seed as u64, &DependentPairConfig::default())?;
        let ds = &syn.dataset;
        let x = grid(-2.0, 15.0, 200);
        let tempered = tempered_gp(ds, lengthscale, noise, phi, 40)?;
        let product = tempered_gp(ds, lengthscale, noise, 1.0, 40)?;
        let p1 = &ds.processes[0];
        Ok(json!({
            "x": x,
            "truth": x.iter().map(|&v| five_sin2(v)).collect::<Vec<_>>(),
            "obs_x": p1.supports.iter().map(|s| s.points[0][0]).collect::<Vec<_>>(),
            "obs_y": p1.targets,
            "tempered": band(&tempered, &x)?,
            "product": band(&product, &x)?,
        }))
    })())
}

/// Mixture weights of two experts whose predictive variance is low near
/// their own centre and grows with distance.
#[wasm_bindgen]
pub fn mixture_weights(center_a: f64, center_b: f64, width: f64, tanh: bool) -> String {
    respond((|| {
        let x = grid(-10.0, 10.0, 201);
        let expert = |c: f64| -> Vec<f64> { x.iter().map(|v| 1.0 - 0.99 * (-(v - c).powi(2) / (width * width)).exp()).collect() };
        let (va, vb) = (expert(center_a), expert(center_b));
        let norm = if tanh { Normalization::Tanh } else { Normalization::MinMax };
        let w = moe_weights(&[va.clone(), vb.clone()], &[1.0, 1.0], norm)?;
        Ok(json!({ "x": x, "var_a": va, "var_b": vb, "w_a": w[0], "w_b": w[1] }))
    })())
}

/// Window means of `5 sin²` fitted by the aggregated GP and by a GP on the
/// window centres.
#[wasm_bindgen]
pub fn aggregate_vs_center(window: f64, lengthscale: f64, seed: u32) -> String {
    respond((|| {
        let (lo, hi) = (0.0, 15.0);
        let n = ((hi - lo) / window).floor() as usize;
        if n < 2 {
            return Err(mrgp::Error::invalid("window too wide for the range"));
        }
        let mut r = rng::stream(seed as u64, &[rng::tag("web-windows")]);
        let (mut y, mut s) = (Vec::new(), Vec::new());
        for i in 0..n {
            let (a, b) = (lo + i as f64 * window, lo + (i + 1) as f64 * window);
            let region = discretize_region(&[(a, b)], &[10])?;
            y.push(region.aggregate(|p| five_sin2(p[0])) + 0.05 * rng::normal(&mut r));
            s.push(region);
        }
        let centers: Vec<SupportRegion> = s.iter().map(|r| SupportRegion::point(r.center())).collect();
        let agg = MultiResDataset::new(vec![ObservationProcess::new(1, 1, y.clone(), s)?])?;
        let cp = MultiResDataset::new(vec![ObservationProcess::new(1, 1, y.clone(), centers)?])?;
        let x = grid(lo, hi, 200);
        let ma = tempered_gp(&agg, lengthscale, 0.0025, 1.0, 40.min(10 * n))?;
        let mc = tempered_gp(&cp, lengthscale, 0.0025, 1.0, n)?;
        Ok(json!({
            "x": x,
            "truth": x.iter().map(|&v| five_sin2(v)).collect::<Vec<_>>(),
            "window_lo": (0..n).map(|i| lo + i as f64 * window).collect::<Vec<_>>(),
            "window_y": y,
            "aggregated": band(&ma, &x)?,
            "center": band(&mc, &x)?,
        }))
    })())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> Value {
        let v: Value = serde_json::from_str(s).unwrap();
        assert!(v.get("error").is_none(), "{v}");
        v
    }

    #[test]
    fn tempering_widens_the_band() {
        let v = parse(&tempered_posterior(0.2, 1.0, 0.01, 1));
        let width = |k: &str| -> f64 {
            let lo = v[k]["lower"].as_array().unwrap();
            let hi = v[k]["upper"].as_array().unwrap();
            lo.iter().zip(hi).map(|(a, b)| b.as_f64().unwrap() - a.as_f64().unwrap()).sum()
        };
        assert!(width("tempered") > width("product"));
    }

    #[test]
    fn weights_sum_to_one() {
        for tanh in [false, true] {
            let v = parse(&mixture_weights(-3.0, 4.0, 2.0, tanh));
            let (a, b) = (v["w_a"].as_array().unwrap(), v["w_b"].as_array().unwrap());
            assert_eq!(a.len(), 201);
            for (x, y) in a.iter().zip(b) {
                assert_eq!(x.as_f64().unwrap() + y.as_f64().unwrap(), 1.0);
            }
        }
    }

    #[test]
    fn aggregate_beats_center_on_wide_windows() {
        let v = parse(&aggregate_vs_center(2.0, 1.0, 3));
        let truth: Vec<f64> = v["truth"].as_array().unwrap().iter().map(|t| t.as_f64().unwrap()).collect();
        let err = |k: &str| -> f64 {
            v[k]["mean"].as_array().unwrap().iter().zip(&truth).map(|(m, t)| (m.as_f64().unwrap() - t).powi(2)).sum()
        };
        assert!(err("aggregated") < err("center"));
    }

    #[test]
    fn errors_come_back_as_json() {
        let v: Value = serde_json::from_str(&aggregate_vs_center(100.0, 1.0, 0)).unwrap();
        assert!(v["error"].as_str().unwrap().contains("window"));
    }
}
