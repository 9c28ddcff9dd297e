use clap::{Args, Parser, Subcommand};
use mrgp::composite;
use mrgp::dataset::{load_csv_files, save_process_csv};
use mrgp::dataset::synth::{gen_bias_triplet, gen_dependent_pair, gen_intertask, Synthetic};
use mrgp::dataset::{MultiResDataset, TestSet};
use mrgp::experiments::{default_settings, run_experiment, ExperimentName, ExperimentSettings};
use mrgp::fit::{composite_mle, PhiMode};
use mrgp::gprn::GprnModel;
use mrgp::mcmc::{self, McmcLikelihood};
use mrgp::metrics::evaluate;
use mrgp::model::{fit_model, predictions_csv, FittedModel, ModelKind};
use mrgp::Error;
use serde::de::DeserializeOwned;
use serde::Serialize;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

const GENERATORS: [&str; 3] = ["dependent-pair", "bias-triplet", "intertask"];

#[derive(Parser, Debug)]
#[command(name = "mrgp", version, about = "Multi-resolution Gaussian process models on aggregated data")]
struct Cli {
    /// Root seed for every random stream.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// TOML file whose sections override the built-in settings.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate a synthetic dataset as CSV.
    Synth {
        /// dependent-pair, bias-triplet or intertask.
        generator: String,
        /// Generator overrides, `key=value` in TOML syntax.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Fit a model and write its artifact, history and diagnostics.
    Fit {
        #[arg(long)]
        model: String,
        #[command(flatten)]
        data: DataArgs,
        /// Also write the sandwich diagnostics of the composite weight.
        #[arg(long)]
        diagnostics: bool,
    },
    /// Predict at the points of a CSV file.
    Predict {
        #[command(flatten)]
        target: TargetArgs,
        /// CSV with `dim_*` columns (other columns are ignored).
        #[arg(long)]
        points: PathBuf,
    },
    /// Predict at held-out targets and compute RMSE, MSE, MAPE and NLPD.
    Eval {
        #[command(flatten)]
        target: TargetArgs,
        /// Held-out CSV in the dataset schema with singleton bags.
        #[arg(long)]
        test: PathBuf,
    },
    /// Run a named experiment and write its report.
    Experiment {
        /// contraction, bias or intertask-synthetic.
        name: String,
    },
    /// Run the block Metropolis-within-Gibbs sampler.
    Mcmc {
        #[command(flatten)]
        data: DataArgs,
        /// Likelihood weight per process, comma separated.
        #[arg(long, value_delimiter = ',')]
        phi: Vec<f64>,
        /// Correctly specified dependent-pair likelihood instead of the composite one.
        #[arg(long)]
        oracle: bool,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        burn_in: Option<usize>,
    },
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Dataset CSV files.
    #[arg(long, num_args = 1.., required = true)]
    data: Vec<PathBuf>,
}

#[derive(Args, Debug)]
struct TargetArgs {
    /// Model artifact written by `fit`.
    #[arg(long = "model-file")]
    model_file: PathBuf,
    #[arg(long, default_value_t = 1)]
    process: usize,
    #[arg(long, default_value_t = 1)]
    task: usize,
}

/// Failure classes mapped to exit codes.
enum Failure {
    Usage(String),
    Numerical(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::NonFinite { .. } | Error::NotPositiveDefinite { .. } | Error::Singular(_) => Failure::Numerical(e.to_string()),
            other => Failure::Usage(other.to_string()),
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Numerical(m)) => {
            eprintln!("numerical failure: {m}");
            ExitCode::from(2)
        }
    }
}

const SECTIONS: [&str; 6] = ["models", "mcmc", "aggregations", "dependent_pair", "bias_triplet", "intertask"];

fn run(cli: &Cli) -> CliResult<()> {
    let user = match &cli.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| usage(format!("{}: {e}", p.display())))?;
            text.parse::<toml::Table>().map_err(|e| usage(format!("{}: {e}", p.display())))?
        }
        None => toml::Table::new(),
    };
    if let Some(k) = user.keys().find(|k| !SECTIONS.contains(&k.as_str())) {
        return Err(usage(format!("unknown config section '{k}' (valid: {})", SECTIONS.join(", "))));
    }
    match &cli.cmd {
        Cmd::Synth { generator, set } => cmd_synth(cli, &user, generator, set),
        Cmd::Fit { model, data, diagnostics } => cmd_fit(cli, &user, model, &data.data, *diagnostics),
        Cmd::Predict { target, points } => cmd_predict(cli, target, points),
        Cmd::Eval { target, test } => cmd_eval(cli, target, test),
        Cmd::Experiment { name } => cmd_experiment(cli, &user, name),
        Cmd::Mcmc { data, phi, oracle, iters, burn_in } => cmd_mcmc(cli, &user, &data.data, phi, *oracle, *iters, *burn_in),
    }
}

/// Deep-merges `over` into `base`.
fn merge(base: &mut toml::Table, over: &toml::Table) {
    for (k, v) in over {
        match (base.get_mut(k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            _ => {
                base.insert(k.clone(), v.clone());
            }
        }
    }
}

/// `base` with the user table laid over it.
fn overlay<T: Serialize + DeserializeOwned>(base: &T, over: &toml::Table, what: &str) -> CliResult<T> {
    let mut t = toml::Table::try_from(base).map_err(|e| usage(format!("{what}: {e}")))?;
    unknown_keys(&t, over, what)?;
    merge(&mut t, over);
    t.try_into().map_err(|e| usage(format!("bad {what} settings: {e}")))
}

/// Rejects keys of `over` that `base` does not have. A table with a `kind`
/// key selects an enum variant and is taken whole.
fn unknown_keys(base: &toml::Table, over: &toml::Table, path: &str) -> CliResult<()> {
    for (k, v) in over {
        match (base.get(k), v) {
            (None, _) => return Err(usage(format!("unknown setting '{path}.{k}'"))),
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) if !o.contains_key("kind") => unknown_keys(b, o, &format!("{path}.{k}"))?,
            _ => {}
        }
    }
    Ok(())
}

fn section<'a>(user: &'a toml::Table, key: &str) -> CliResult<Option<&'a toml::Table>> {
    match user.get(key) {
        None => Ok(None),
        Some(toml::Value::Table(t)) => Ok(Some(t)),
        Some(_) => Err(usage(format!("config key '{key}' must be a table"))),
    }
}

/// The experiment-shaped settings built from the `[models.*]`, `[mcmc]` and
/// generator sections of the config.
fn settings(base: ExperimentSettings, user: &toml::Table) -> CliResult<ExperimentSettings> {
    let mut picked = toml::Table::new();
    for key in SECTIONS {
        if let Some(v) = user.get(key) {
            picked.insert(key.to_string(), v.clone());
        }
    }
    overlay(&base, &picked, "config")
}

fn write(path: &Path, body: &str) -> CliResult<()> {
    if let Some(d) = path.parent() {
        std::fs::create_dir_all(d).map_err(|e| usage(format!("{}: {e}", d.display())))?;
    }
    std::fs::write(path, body).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializable") + "\n"
}

fn parse_sets(set: &[String]) -> CliResult<toml::Table> {
    let mut t = toml::Table::new();
    for kv in set {
        let parsed: toml::Table = kv.parse().map_err(|e| usage(format!("--set {kv}: {e}")))?;
        merge(&mut t, &parsed);
    }
    Ok(t)
}

fn cmd_synth(cli: &Cli, user: &toml::Table, generator: &str, set: &[String]) -> CliResult<()> {
    let base = ExperimentSettings::default();
    let mut over = parse_sets(set)?;
    let syn: Synthetic = match generator {
        "dependent-pair" => {
            let mut cfg = base.dependent_pair;
            if let Some(t) = section(user, "dependent_pair")? {
                cfg = overlay(&cfg, t, "dependent_pair")?;
            }
            cfg = overlay(&cfg, &std::mem::take(&mut over), "dependent-pair")?;
            gen_dependent_pair(cli.seed, &cfg)?
        }
        "bias-triplet" => {
            let mut cfg = base.bias_triplet;
            if let Some(t) = section(user, "bias_triplet")? {
                cfg = overlay(&cfg, t, "bias_triplet")?;
            }
            cfg = overlay(&cfg, &std::mem::take(&mut over), "bias-triplet")?;
            gen_bias_triplet(cli.seed, &cfg)?
        }
        "intertask" => {
            let mut cfg = base.intertask;
            if let Some(t) = section(user, "intertask")? {
                cfg = overlay(&cfg, t, "intertask")?;
            }
            cfg = overlay(&cfg, &std::mem::take(&mut over), "intertask")?;
            gen_intertask(cli.seed, &cfg)?
        }
        other => return Err(usage(format!("unknown generator '{other}' (valid: {})", GENERATORS.join(", ")))),
    };
    for p in &syn.dataset.processes {
        let path = cli.out.join(format!("process_{}_task_{}.csv", p.process, p.task));
        std::fs::create_dir_all(&cli.out).map_err(|e| usage(e.to_string()))?;
        save_process_csv(p, &path)?;
        println!("wrote {} ({} bags)", path.display(), p.len());
    }
    for t in &syn.test {
        let path = cli.out.join(format!("test_process_{}_task_{}.csv", t.process, t.task));
        save_process_csv(&t.to_process()?, &path)?;
        println!("wrote {} ({} points)", path.display(), t.y.len());
    }
    write(&cli.out.join("metadata.json"), &to_json(&syn.metadata))
}

fn load(paths: &[PathBuf]) -> CliResult<MultiResDataset> {
    for p in paths {
        if !p.exists() {
            return Err(usage(format!("{}: no such file", p.display())));
        }
    }
    Ok(load_csv_files(paths)?)
}

fn cmd_fit(cli: &Cli, user: &toml::Table, model: &str, data: &[PathBuf], diagnostics: bool) -> CliResult<()> {
    let kind: ModelKind = model.parse()?;
    if kind == ModelKind::Mcmc {
        return Err(usage("the sampler has no fitted artifact; use the mcmc command"));
    }
    let ds = load(data)?;
    let s = settings(ExperimentSettings::default(), user)?.models;
    let out = match fit_model(kind, &ds, &s, cli.seed) {
        Ok(o) => o,
        Err(e @ Error::NonFinite { .. }) => {
            let Error::NonFinite { iter, snapshot } = &e else { unreachable!() };
            let path = cli.out.join("last_good_params.json");
            write(&path, &to_json(&serde_json::json!({ "iteration": iter, "params": snapshot })))?;
            return Err(Failure::Numerical(format!("{e}; last good parameters in {}", path.display())));
        }
        Err(e) => return Err(e.into()),
    };
    write(&cli.out.join("model.json"), &(out.model.to_json()? + "\n"))?;
    let mut hist = String::from("stage,iter,objective,grad_norm\n");
    for r in &out.history.rows {
        let _ = writeln!(hist, "{},{},{:?},{:?}", r.stage, r.iter, r.objective, r.grad_norm);
    }
    write(&cli.out.join("history.csv"), &hist)?;
    let mut diag: BTreeMap<String, serde_json::Value> = out.diagnostics.iter().map(|(k, v)| (k.clone(), serde_json::json!(v))).collect();
    diag.insert("model".into(), serde_json::json!(kind.name()));
    diag.insert("seed".into(), serde_json::json!(cli.seed));
    if diagnostics && matches!(kind, ModelKind::MrGprn | ModelKind::MrGprnExp) {
        let mut gcfg = mrgp::gprn::GprnConfig { seed: cli.seed, ..s.gprn.clone() };
        if kind == ModelKind::MrGprnExp {
            gcfg.weights = mrgp::gprn::WeightMode::ExpGp;
        }
        let init = GprnModel::init(&ds, &gcfg)?;
        let (_, est, _) = composite_mle(&init, &ds, &mrgp::fit::GprnFitConfig { phi: PhiMode::Ribatet, ..s.gprn_fit.clone() })?;
        diag.insert("phi_ribatet".into(), serde_json::json!(composite::phi_ribatet(&est)?));
        diag.insert("phi_lyddon".into(), serde_json::json!(composite::phi_lyddon(&est)?));
        if let Some(w) = &est.warning {
            diag.insert("sandwich_warning".into(), serde_json::json!(w));
        }
        write(&cli.out.join("sandwich.csv"), &composite::diagnostics_csv(&est))?;
    }
    write(&cli.out.join("diagnostics.json"), &to_json(&diag))
}

fn load_model(path: &Path) -> CliResult<FittedModel> {
    let text = std::fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    Ok(FittedModel::from_json(&text)?)
}

/// Rows of the `dim_*` columns of a CSV file.
fn read_points(path: &Path) -> CliResult<mrgp::nalgebra::DMatrix<f64>> {
    let text = std::fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<&str> = lines.next().ok_or_else(|| usage(format!("{}: empty file", path.display())))?.split(',').map(str::trim).collect();
    let mut cols: Vec<(usize, usize)> = header
        .iter()
        .enumerate()
        .filter_map(|(i, h)| h.strip_prefix("dim_").and_then(|d| d.parse().ok()).map(|d| (d, i)))
        .collect();
    cols.sort();
    if cols.is_empty() || cols.iter().enumerate().any(|(j, (d, _))| *d != j) {
        return Err(usage(format!("{}: need columns dim_0..dim_{{D-1}}", path.display())));
    }
    let mut vals = Vec::new();
    let mut n = 0;
    for (ln, line) in lines.enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        for (_, i) in &cols {
            let v = f.get(*i).and_then(|s| s.trim().parse::<f64>().ok());
            vals.push(v.ok_or_else(|| usage(format!("{}:{}: bad number in column {}", path.display(), ln + 2, header[*i])))?);
        }
        n += 1;
    }
    Ok(mrgp::nalgebra::DMatrix::from_row_slice(n, cols.len(), &vals))
}

fn cmd_predict(cli: &Cli, t: &TargetArgs, points: &Path) -> CliResult<()> {
    let model = load_model(&t.model_file)?;
    let x = read_points(points)?;
    let p = model.predict(&x, t.process, t.task)?;
    write(&cli.out.join("predictions.csv"), &predictions_csv(&x, (t.process, t.task), &p))
}

fn cmd_eval(cli: &Cli, t: &TargetArgs, test: &Path) -> CliResult<()> {
    let model = load_model(&t.model_file)?;
    let ds = load(&[test.to_path_buf()])?;
    let proc = ds.processes.iter().find(|p| p.process == t.process && p.task == t.task).or(ds.processes.first()).unwrap();
    let ts = TestSet::from_process(proc);
    let x = ts.points();
    let p = model.predict(&x, t.process, t.task)?;
    let m = evaluate(&ts.y, &p.mean, &p.total_var())?;
    write(&cli.out.join("predictions.csv"), &predictions_csv(&x, (t.process, t.task), &p))?;
    let body = to_json(&m);
    print!("{body}");
    write(&cli.out.join("metrics.json"), &body)
}

fn cmd_experiment(cli: &Cli, user: &toml::Table, name: &str) -> CliResult<()> {
    let name: ExperimentName = name.parse()?;
    let s = settings(default_settings(name), user)?;
    let report = run_experiment(name, cli.seed, &s)?;
    print!("{}", report.table.to_csv());
    for p in report.write(&cli.out)? {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn cmd_mcmc(
    cli: &Cli,
    user: &toml::Table,
    data: &[PathBuf],
    phi: &[f64],
    oracle: bool,
    iters: Option<usize>,
    burn_in: Option<usize>,
) -> CliResult<()> {
    let ds = load(data)?;
    let mut cfg = settings(ExperimentSettings::default(), user)?.mcmc;
    cfg.seed = cli.seed;
    if !phi.is_empty() {
        cfg.phi = phi.to_vec();
    }
    if oracle {
        cfg.likelihood = McmcLikelihood::Oracle;
    }
    if let Some(n) = iters {
        cfg.iters = n;
    }
    if let Some(b) = burn_in {
        cfg.burn_in = b;
    }
    if cfg.burn_in >= cfg.iters {
        return Err(usage(format!("burn-in {} must be below the {} iterations", cfg.burn_in, cfg.iters)));
    }
    let chain = mcmc::run_chain(&ds, &cfg)?;
    for w in &chain.warnings {
        eprintln!("warning: {w}");
    }
    write(&cli.out.join("chain.csv"), &mcmc::chain_csv(&chain))?;
    let mut s = String::from("param,mean,std,mcse,q05,q25,q50,q75,q95\n");
    for p in mcmc::summarize(&chain, cfg.burn_in)? {
        let _ = writeln!(s, "{},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?}", p.name, p.mean, p.std, p.mcse, p.q05, p.q25, p.q50, p.q75, p.q95);
    }
    write(&cli.out.join("summary.csv"), &s)?;
    let meta = serde_json::json!({
        "acceptance": chain.acceptance,
        "warnings": chain.warnings,
        "metadata": chain.metadata,
        "config": cfg,
    });
    write(&cli.out.join("mcmc.json"), &to_json(&meta))
}
