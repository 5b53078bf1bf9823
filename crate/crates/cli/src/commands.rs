//! `generate`, `run` and `sweep`.

use std::fs;
use std::path::Path;

use fedlrgd_core::complexity::{proposition1_sweep, Regime, SweepRow, SWEEP_CSV_HEADER};
use fedlrgd_core::fedave::{run_fedave, FedAveConfig, StepSchedule};
use fedlrgd_core::fedlrgd::{bias_term, choose_iterations, estimate_gradient_bound, run_fedlrgd, FedLRGDConfig};
use fedlrgd_core::problem::{empirical_risk, reference_minimum, Dataset, DatasetHeader, LossModel, Quadratic, SeparableModel, SoftLabelLogistic};
use fedlrgd_core::record::RunRecord;

use crate::config::Config;
use crate::error::CliError;

/// Samples used for the gradient-bound estimate.
const BOUND_SAMPLES: usize = 100_000;

pub fn write_echo(cfg: &Config, out: &Path) -> Result<(), CliError> {
    fs::create_dir_all(out)?;
    fs::write(out.join("config_echo.toml"), cfg.echo()?)?;
    Ok(())
}

pub fn dataset_from_config(cfg: &Config) -> Result<Dataset, CliError> {
    let d = Config::require(cfg.d, "d")?;
    let m = cfg.m.unwrap_or(0);
    let s = cfg.s.unwrap_or(0);
    let r = Config::require(cfg.r, "r")?;
    Ok(Dataset::uniform(d, m, s, r, cfg.seed())?)
}

pub fn cmd_generate(cfg: &Config, out: &Path) -> Result<DatasetHeader, CliError> {
    let data = dataset_from_config(cfg)?;
    fs::create_dir_all(out)?;
    fs::write(out.join("dataset.csv"), data.to_csv())?;
    fs::write(out.join("dataset.json"), serde_json::to_string_pretty(&data.header()).map_err(fedlrgd_core::FedError::from)?)?;
    write_echo(cfg, out)?;
    Ok(data.header())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset, CliError> {
    let header_text = fs::read_to_string(dir.join("dataset.json"))
        .map_err(|e| CliError::Config(format!("cannot read dataset header in {}: {e}", dir.display())))?;
    let header: DatasetHeader = serde_json::from_str(&header_text).map_err(fedlrgd_core::FedError::from)?;
    let csv = fs::read_to_string(dir.join("dataset.csv"))
        .map_err(|e| CliError::Config(format!("cannot read dataset rows in {}: {e}", dir.display())))?;
    Ok(Dataset::from_csv(&header, &csv)?)
}

fn dataset_for_run(cfg: &Config) -> Result<Dataset, CliError> {
    let data = match &cfg.dataset {
        Some(dir) => load_dataset(Path::new(dir))?,
        None => dataset_from_config(cfg)?,
    };
    if let Some(d) = cfg.d.filter(|&d| d != data.d()) {
        return Err(CliError::Config(format!("config d={d} but dataset has d={}", data.d())));
    }
    Ok(data)
}

pub fn build_model(cfg: &Config, d: usize) -> Result<Box<dyn LossModel>, CliError> {
    let kind = cfg.model.as_deref().unwrap_or("logistic");
    Ok(match kind {
        "logistic" => Box::new(SoftLabelLogistic::new(d, Config::require(cfg.mu, "mu")?)?),
        "separable" => Box::new(SeparableModel::random(
            d,
            Config::require(cfg.p, "p")?,
            Config::require(cfg.model_rank, "model_rank")?,
            Config::require(cfg.mu, "mu")?,
            cfg.seed(),
        )?),
        "quadratic" => Box::new(Quadratic {
            p: Config::require(cfg.p, "p")?,
            d,
        }),
        other => return Err(CliError::Config(format!("unknown model `{other}`"))),
    })
}

fn json<T: serde::Serialize>(v: &T) -> Result<serde_json::Value, CliError> {
    Ok(serde_json::to_value(v).map_err(fedlrgd_core::FedError::from)?)
}

fn fedlrgd_record(cfg: &Config, model: &dyn LossModel, data: &Dataset) -> Result<RunRecord, CliError> {
    if let Some(r) = cfg.r.filter(|&r| r != data.r()) {
        return Err(CliError::Config(format!("config r={r} but the server holds {} samples", data.r())));
    }
    let constants = model.constants();
    let l1 = cfg
        .l1
        .or(constants.l1)
        .ok_or_else(|| CliError::Config("model declares no L1; set `l1`".into()))?;
    let mut metadata = serde_json::Map::new();
    let s_iters = match cfg.s_iters {
        Some(s) => {
            metadata.insert("S_source".into(), "config".into());
            s
        }
        None => {
            let epsilon = Config::require(cfg.epsilon, "epsilon")?;
            let mu = constants
                .mu
                .ok_or_else(|| CliError::Config("model declares no mu; set `S`".into()))?;
            let reference = reference_minimum(model, data, l1)?;
            let f0 = empirical_risk(model, data, &vec![0.0; model.param_dim()])?;
            let b_est = match constants.b {
                Some(b) => b,
                None => estimate_gradient_bound(model, BOUND_SAMPLES, cfg.seed()),
            };
            let numerator = (f0 - reference.f_star).max(0.0) + bias_term(b_est, model.param_dim(), mu);
            metadata.insert("S_source".into(), "iteration formula".into());
            metadata.insert("B_estimate".into(), b_est.into());
            metadata.insert("F_star_reference".into(), reference.f_star.into());
            choose_iterations(l1 / mu, numerator, epsilon)?
        }
    };
    let mut run_cfg = FedLRGDConfig::new(data.r(), s_iters, l1, cfg.seed());
    if let Some(tol) = cfg.singular_tol {
        run_cfg.singular_tol = tol;
    }
    let run = run_fedlrgd(model, data, &run_cfg)?;
    let mut rec = RunRecord::from_fedlrgd(&run, model.name(), data.header(), json(&run_cfg)?, &cfg.phis())?;
    rec.metadata.extend(metadata);
    Ok(rec)
}

fn fedave_record(cfg: &Config, model: &dyn LossModel, data: &Dataset) -> Result<RunRecord, CliError> {
    let step = match cfg.step.as_deref().unwrap_or("decaying") {
        "constant" => StepSchedule::Constant {
            step: Config::require(cfg.step_size, "step_size")?,
        },
        "decaying" => match (cfg.step_c, model.constants().mu) {
            (Some(c), _) => StepSchedule::Decaying { c },
            (None, Some(mu)) => StepSchedule::default_for(mu),
            (None, None) => return Err(CliError::Config("model declares no mu; set `step_c`".into())),
        },
        other => return Err(CliError::Config(format!("unknown step schedule `{other}`"))),
    };
    let run_cfg = FedAveConfig {
        b: Config::require(cfg.b, "b")?,
        t_epochs: Config::require(cfg.t_epochs, "T")?,
        tau: cfg.tau.unwrap_or(1.0),
        step,
        seed: cfg.seed(),
        theta0: None,
    };
    let run = run_fedave(model, data, &run_cfg)?;
    let mut rec = RunRecord::from_fedave(&run, model.name(), data.header(), json(&run_cfg)?, &cfg.phis())?;
    rec.metadata.insert("step_schedule".into(), json(&step)?);
    rec.metadata.insert("client_sampling".into(), "uniform without replacement".into());
    Ok(rec)
}

pub fn cmd_run(algorithm: &str, cfg: &Config, out: &Path) -> Result<RunRecord, CliError> {
    let data = dataset_for_run(cfg)?;
    let model = build_model(cfg, data.d())?;
    let rec = match algorithm {
        "fedlrgd" => fedlrgd_record(cfg, model.as_ref(), &data)?,
        "fedave" => fedave_record(cfg, model.as_ref(), &data)?,
        other => return Err(CliError::Config(format!("unknown algorithm `{other}`"))),
    };
    fs::create_dir_all(out)?;
    fs::write(out.join(format!("run_{algorithm}.json")), rec.to_json()?)?;
    write_echo(cfg, out)?;
    Ok(rec)
}

pub fn regime_from_config(cfg: &Config) -> Result<Regime, CliError> {
    let def = Regime::default();
    let phi = match cfg.phi.as_deref() {
        None => def.phi,
        Some([single]) => *single,
        Some(_) => return Err(CliError::Config("sweep takes a single phi".into())),
    };
    Ok(Regime {
        m0: cfg.m0.unwrap_or(def.m0),
        points: cfg.points.unwrap_or(def.points),
        s: cfg.s.unwrap_or(def.s),
        p: cfg.p.unwrap_or(def.p),
        phi,
        beta: cfg.beta.unwrap_or(def.beta),
        r0: cfg.r0.unwrap_or(def.r0),
        c1: cfg.c1.unwrap_or(def.c1),
        kappa: cfg.kappa.unwrap_or(def.kappa),
        tau: cfg.tau.unwrap_or(def.tau),
        c: cfg.c.unwrap_or(def.c),
    })
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = format!("{SWEEP_CSV_HEADER}\n");
    for row in rows {
        out.push_str(&row.to_csv_line());
        out.push('\n');
    }
    out
}

pub fn cmd_sweep(cfg: &Config, out: &Path) -> Result<String, CliError> {
    let rows = proposition1_sweep(&regime_from_config(cfg)?.grid()?)?;
    let csv = sweep_csv(&rows);
    fs::create_dir_all(out)?;
    fs::write(out.join("sweep.csv"), &csv)?;
    write_echo(cfg, out)?;
    Ok(csv)
}
