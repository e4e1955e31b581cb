//! Batch front end: data ingestion, config parsing, subcommands for
//! generate/fit/cv/hessian/bootstrap/spectrum, structured result emission.
//!
//! Exit codes: 0 success, 2 config error, 3 data error, 4 numerical failure
//! (the library error name goes to stderr). Stdout carries machine-readable
//! summaries only; progress goes to stderr.

mod config;
mod io;

use clap::{Parser, Subcommand};
use serde_json::json;

use config::{Config, GenerateKind, SpectrumKind};
use fhmm::em::fit;
use fhmm::hessian::{compute_hessian, standard_errors};
use fhmm::model::{enumerate_realizations, params_from_json, params_to_json, validate_model};
use fhmm::noise::{
    generate_fhmm_dt, generate_powerlaw, thermal_tlf_params, ThermalTlfConfig,
};
use fhmm::select::{bootstrap_fit, cross_validate, cv_splits, evidence_ratio};
use fhmm::spectral::{chi2_gaussianity, second_spectrum, welch_psd};

/// Exit-code-bearing error.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn config(message: String) -> Self {
        Self { code: 2, message }
    }
    pub fn data(message: String) -> Self {
        Self { code: 3, message }
    }
    pub fn numerical(err: fhmm::Error) -> Self {
        Self { code: 4, message: err.to_string() }
    }
}

impl From<fhmm::Error> for CliError {
    fn from(err: fhmm::Error) -> Self {
        match err {
            fhmm::Error::InvalidOptions(_) | fhmm::Error::InfeasiblePlan(_) => {
                Self { code: 2, message: err.to_string() }
            }
            fhmm::Error::ShapeMismatch(_) => Self { code: 3, message: err.to_string() },
            _ => Self::numerical(err),
        }
    }
}

#[derive(Parser)]
#[command(name = "fhmm", version, about = "Factorial HMM batch toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate data from a TLF bank, an explicit model, or a powerlaw spectrum
    Generate {
        #[arg(long)]
        config: String,
        #[arg(long)]
        out: String,
        /// Output format: json container or one csv per sample
        #[arg(long, default_value = "json")]
        format: String,
    },
    /// Fit a model by EM
    Fit {
        #[arg(long)]
        config: String,
        #[arg(long, num_args = 1..)]
        data: Vec<String>,
        #[arg(long)]
        out: String,
        /// Trace/summary JSON (default `<out>.trace.json`)
        #[arg(long)]
        trace: Option<String>,
    },
    /// Cross-validate a model grid
    Cv {
        #[arg(long)]
        config: String,
        #[arg(long, num_args = 1..)]
        data: Vec<String>,
        #[arg(long)]
        out: String,
    },
    /// Hessian and standard errors at given parameters
    Hessian {
        #[arg(long, num_args = 1..)]
        data: Vec<String>,
        #[arg(long)]
        params: String,
        #[arg(long)]
        out: String,
        #[arg(long, default_value_t = 1)]
        jobs: i64,
    },
    /// Bootstrap parameter quantiles over random subsequences
    Bootstrap {
        #[arg(long)]
        config: String,
        #[arg(long, num_args = 1..)]
        data: Vec<String>,
        #[arg(long)]
        out: String,
    },
    /// PSD or second-spectrum analysis of one series
    Spectrum {
        #[arg(long)]
        config: String,
        #[arg(long, num_args = 1..)]
        data: Vec<String>,
        /// Output prefix; writes `<out>.csv` and `<out>.json`
        #[arg(long)]
        out: String,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {}", e.message);
        std::process::exit(e.code);
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Generate { config, out, format } => cmd_generate(&config, &out, &format),
        Command::Fit { config, data, out, trace } => cmd_fit(&config, &data, &out, trace),
        Command::Cv { config, data, out } => cmd_cv(&config, &data, &out),
        Command::Hessian { data, params, out, jobs } => cmd_hessian(&data, &params, &out, jobs),
        Command::Bootstrap { config, data, out } => cmd_bootstrap(&config, &data, &out),
        Command::Spectrum { config, data, out } => cmd_spectrum(&config, &data, &out),
    }
}

fn manifest_for(
    command: &str,
    config_path: Option<&str>,
    seed: Option<u64>,
    inputs: &[String],
) -> Result<io::RunManifest, CliError> {
    let mut manifest = io::RunManifest::new(command);
    if let Some(path) = config_path {
        manifest.config_sha256 = Some(io::sha256_file(path)?);
    }
    manifest.seed = seed;
    for input in inputs {
        manifest.add_input(input)?;
    }
    Ok(manifest)
}

fn cmd_generate(config_path: &str, out: &str, format: &str) -> Result<(), CliError> {
    let cfg = Config::from_file(config_path)?;
    let seed = cfg.require_seed()?;
    let kind = cfg
        .kind
        .ok_or_else(|| CliError::config("generate requires `kind`".into()))?;
    let time_steps = cfg
        .time_steps
        .ok_or_else(|| CliError::config("generate requires `time_steps`".into()))?;
    let n_samples = cfg.n_samples.unwrap_or(1);
    let dt = cfg.dt.unwrap_or(1.0);

    let dataset = match kind {
        GenerateKind::Powerlaw => {
            let beta = cfg
                .beta
                .ok_or_else(|| CliError::config("powerlaw requires `beta`".into()))?;
            let series = generate_powerlaw(beta, time_steps, seed)?;
            let x = ndarray::Array3::from_shape_fn((1, time_steps, 1), |(_, t, _)| series[t]);
            fhmm::model::Dataset::new(x, dt).map_err(CliError::from)?
        }
        GenerateKind::Fhmm => {
            let params_file = cfg
                .params_file
                .as_ref()
                .ok_or_else(|| CliError::config("fhmm generation requires `params_file`".into()))?;
            let text = std::fs::read_to_string(params_file)
                .map_err(|e| CliError::data(format!("cannot read {params_file}: {e}")))?;
            let (params, _spec) = params_from_json(&text)?;
            let (_t, ds, _) = generate_fhmm_dt(&params, time_steps, n_samples, seed, false, dt)?;
            ds
        }
        GenerateKind::Tlf => {
            let weights = cfg
                .weights
                .as_ref()
                .ok_or_else(|| CliError::config("tlf generation requires `weights`".into()))?;
            let d = weights.len();
            let o = weights.first().map_or(0, |m| m.len());
            let mut w = ndarray::Array3::<f64>::zeros((d, o, 2));
            for (i, m) in weights.iter().enumerate() {
                for (j, r) in m.iter().enumerate() {
                    if r.len() != 2 {
                        return Err(CliError::config("tlf weights need k=2 entries".into()));
                    }
                    for (l, &v) in r.iter().enumerate() {
                        w[[i, j, l]] = v;
                    }
                }
            }
            let tlf = ThermalTlfConfig {
                d,
                barrier_energies: cfg
                    .barrier_energies
                    .clone()
                    .ok_or_else(|| CliError::config("tlf requires `barrier_energies`".into()))?,
                detuning_energies: cfg
                    .detuning_energies
                    .clone()
                    .ok_or_else(|| CliError::config("tlf requires `detuning_energies`".into()))?,
                temperature: cfg
                    .temperature
                    .ok_or_else(|| CliError::config("tlf requires `temperature`".into()))?,
                sigma_white_noise: cfg
                    .sigma_white_noise
                    .ok_or_else(|| CliError::config("tlf requires `sigma_white_noise`".into()))?,
                dt,
            };
            let params = thermal_tlf_params(&tlf, w)?;
            let (_t, ds, _) = generate_fhmm_dt(&params, time_steps, n_samples, seed, false, dt)?;
            ds
        }
    };

    let mut manifest = manifest_for("generate", Some(config_path), Some(seed), &[])?;
    match format {
        "json" => {
            io::write_atomic(out, &io::dataset_to_json(&dataset))?;
            manifest.outputs.push(out.to_string());
        }
        "csv" => {
            if dataset.n_samples() == 1 {
                io::write_atomic(out, &io::sample_to_csv(&dataset, 0))?;
                manifest.outputs.push(out.to_string());
            } else {
                for s in 0..dataset.n_samples() {
                    let path = numbered_path(out, s);
                    io::write_atomic(&path, &io::sample_to_csv(&dataset, s))?;
                    manifest.outputs.push(path);
                }
            }
        }
        other => {
            return Err(CliError::config(format!("unknown format `{other}`")));
        }
    }
    manifest.write()?;
    println!(
        "{}",
        json!({"command": "generate", "samples": dataset.n_samples(),
               "time_steps": dataset.t_len(), "o": dataset.o()})
    );
    Ok(())
}

fn numbered_path(base: &str, index: usize) -> String {
    match base.rsplit_once('.') {
        Some((stem, ext)) => format!("{stem}_s{index}.{ext}"),
        None => format!("{base}_s{index}"),
    }
}

fn cmd_fit(
    config_path: &str,
    data: &[String],
    out: &str,
    trace: Option<String>,
) -> Result<(), CliError> {
    let cfg = Config::from_file(config_path)?;
    let dataset = io::read_dataset(data)?;
    let spec = cfg.model_spec(dataset.t_len(), dataset.o())?;
    let options = cfg.fit_options()?;
    options
        .validate(&spec)
        .map_err(|e| CliError::config(e.to_string()))?;

    let result = fit(&dataset, &spec, &options)?;
    io::write_atomic(out, &params_to_json(&result.params, &spec))?;
    let trace_path = trace.unwrap_or_else(|| format!("{out}.trace.json"));
    let trace_doc = json!({
        "log_likelihood_trace": result.log_likelihood_trace,
        "best_restart_index": result.best_restart_index,
        "converged": result.converged,
        "restarts": result.restarts,
    });
    io::write_atomic(&trace_path, &serde_json::to_string_pretty(&trace_doc).unwrap())?;

    let mut manifest = manifest_for("fit", Some(config_path), cfg.seed, data)?;
    manifest.outputs.push(out.to_string());
    manifest.outputs.push(trace_path);
    manifest.write()?;
    println!(
        "{}",
        json!({"command": "fit", "converged": result.converged,
               "best_restart_index": result.best_restart_index,
               "final_log_likelihood":
                   result.restarts[result.best_restart_index].final_exact_log_likelihood})
    );
    Ok(())
}

fn cmd_cv(config_path: &str, data: &[String], out: &str) -> Result<(), CliError> {
    let cfg = Config::from_file(config_path)?;
    let dataset = io::read_dataset(data)?;
    let d_grid = cfg
        .d_grid
        .clone()
        .ok_or_else(|| CliError::config("cv requires `d_grid`".into()))?;
    let k_default = cfg.k.ok_or_else(|| CliError::config("cv requires `k`".into()))?;
    let k_grid = cfg.k_grid.clone().unwrap_or_else(|| vec![k_default]);
    let models: Vec<(usize, usize)> = d_grid
        .iter()
        .flat_map(|&d| k_grid.iter().map(move |&k| (d, k)))
        .collect();
    let subsequence_size = cfg
        .subsequence_size
        .ok_or_else(|| CliError::config("cv requires `subsequence_size`".into()))?;
    let test_size = cfg
        .test_size
        .ok_or_else(|| CliError::config("cv requires `test_size`".into()))?;
    let n_splits = cfg
        .n_splits
        .ok_or_else(|| CliError::config("cv requires `n_splits`".into()))?;
    let plan = cv_splits(dataset.t_len(), subsequence_size, test_size, n_splits)?;

    let mut options = cfg.fit_options()?;
    options.verbose = cfg.verbose;
    let results = cross_validate(&dataset, &models, &options, &plan)?;

    // evidence table over consecutive grid entries (mean validation scores)
    let mut evidence = Vec::new();
    for pair in results.windows(2) {
        let (small, large) = (&pair[0], &pair[1]);
        if large.n_params <= small.n_params {
            continue;
        }
        let v = evidence_ratio(large.mean, large.n_params, small.mean, small.n_params)?;
        evidence.push(json!({
            "larger": {"d": large.d, "k": large.k, "n_params": large.n_params},
            "smaller": {"d": small.d, "k": small.k, "n_params": small.n_params},
            "e": v.e,
            "classification": v.classification,
        }));
    }
    let doc = json!({
        "folds": plan.folds,
        "models": results.iter().map(|r| json!({
            "d": r.d, "k": r.k, "n_params": r.n_params,
            "fold_scores": r.fold_scores, "mean": r.mean, "stderr": r.stderr,
        })).collect::<Vec<_>>(),
        "evidence": evidence,
    });
    io::write_atomic(out, &serde_json::to_string_pretty(&doc).unwrap())?;

    let mut manifest = manifest_for("cv", Some(config_path), cfg.seed, data)?;
    manifest.outputs.push(out.to_string());
    manifest.write()?;
    println!(
        "{}",
        json!({"command": "cv", "models": models.len(), "folds": plan.folds.len(),
               "records": models.len() * plan.folds.len()})
    );
    Ok(())
}

fn cmd_hessian(data: &[String], params_path: &str, out: &str, jobs: i64) -> Result<(), CliError> {
    let dataset = io::read_dataset(data)?;
    let text = std::fs::read_to_string(params_path)
        .map_err(|e| CliError::data(format!("cannot read {params_path}: {e}")))?;
    let (mut params, spec) = params_from_json(&text)?;
    if spec.t_len != dataset.t_len() || spec.o != dataset.o() {
        return Err(CliError::data(format!(
            "params spec (T={}, o={}) disagrees with data (T={}, o={})",
            spec.t_len,
            spec.o,
            dataset.t_len(),
            dataset.o()
        )));
    }
    params.w = fhmm::model::canonicalize_weights(&params.w);
    validate_model(&params, &spec)?;
    let table = enumerate_realizations(&spec)?;
    let hr = compute_hessian(&params, &dataset, &table, jobs)?;

    let se_doc = match standard_errors(&hr, &spec) {
        Ok(se) => {
            let opt3 = |a: &ndarray::Array3<Option<f64>>| -> Vec<Vec<Vec<Option<f64>>>> {
                a.outer_iter()
                    .map(|m| m.outer_iter().map(|r| r.to_vec()).collect())
                    .collect()
            };
            let opt2 = |a: &ndarray::Array2<Option<f64>>| -> Vec<Vec<Option<f64>>> {
                a.outer_iter().map(|r| r.to_vec()).collect()
            };
            json!({"dW": opt3(&se.dw), "dA": opt3(&se.da),
                   "dC": opt2(&se.dc), "dpi": opt2(&se.dpi)})
        }
        Err(fhmm::Error::SingularInformation { eigenvalue }) => {
            eprintln!(
                "observed information is not positive definite (eigenvalue {eigenvalue:e}); \
                 standard errors omitted"
            );
            json!(null)
        }
        Err(e) => return Err(CliError::numerical(e)),
    };

    let hessian_json: serde_json::Value =
        serde_json::from_str(&hr.to_json()).expect("hessian json");
    let doc = json!({
        "hessian": hessian_json,
        "standard_errors": se_doc,
    });
    io::write_atomic(out, &serde_json::to_string_pretty(&doc).unwrap())?;

    let mut inputs: Vec<String> = data.to_vec();
    inputs.push(params_path.to_string());
    let mut manifest = manifest_for("hessian", None, None, &inputs)?;
    manifest.outputs.push(out.to_string());
    manifest.write()?;
    println!("{}", json!({"command": "hessian", "dim": hr.dim()}));
    Ok(())
}

fn cmd_bootstrap(config_path: &str, data: &[String], out: &str) -> Result<(), CliError> {
    let cfg = Config::from_file(config_path)?;
    let dataset = io::read_dataset(data)?;
    let spec = cfg.model_spec(dataset.t_len(), dataset.o())?;
    let options = cfg.fit_options()?;
    let n_bootstrap = cfg
        .n_bootstrap
        .ok_or_else(|| CliError::config("bootstrap requires `n_bootstrap`".into()))?;
    let subseq_len = cfg
        .subsequence_length
        .ok_or_else(|| CliError::config("bootstrap requires `subsequence_length`".into()))?;
    let seed = cfg.require_seed()?;

    let result = bootstrap_fit(&dataset, &spec, &options, n_bootstrap, subseq_len, seed)?;
    let tens3 = |a: &ndarray::Array3<f64>| -> Vec<Vec<Vec<f64>>> {
        a.outer_iter()
            .map(|m| m.outer_iter().map(|r| r.to_vec()).collect())
            .collect()
    };
    let tens2 = |a: &ndarray::Array2<f64>| -> Vec<Vec<f64>> {
        a.outer_iter().map(|r| r.to_vec()).collect()
    };
    let q = &result.quantiles;
    let doc = json!({
        "n_bootstrap": n_bootstrap,
        "subsequence_length": subseq_len,
        "starts": result.starts,
        "quantiles": {
            "W":  {"lo": tens3(&q.lo.w), "median": tens3(&q.median.w), "hi": tens3(&q.hi.w)},
            "A_log": {"lo": tens3(&q.lo.a_log), "median": tens3(&q.median.a_log), "hi": tens3(&q.hi.a_log)},
            "C":  {"lo": tens2(&q.lo.c), "median": tens2(&q.median.c), "hi": tens2(&q.hi.c)},
            "pi": {"lo": tens2(&q.lo.pi), "median": tens2(&q.median.pi), "hi": tens2(&q.hi.pi)},
        },
    });
    io::write_atomic(out, &serde_json::to_string_pretty(&doc).unwrap())?;

    let mut manifest = manifest_for("bootstrap", Some(config_path), Some(seed), data)?;
    manifest.outputs.push(out.to_string());
    manifest.write()?;
    println!(
        "{}",
        json!({"command": "bootstrap", "fits": result.ensemble.len()})
    );
    Ok(())
}

fn cmd_spectrum(config_path: &str, data: &[String], out: &str) -> Result<(), CliError> {
    let cfg = Config::from_file(config_path)?;
    let dataset = io::read_dataset(data)?;
    if cfg.sample_index >= dataset.n_samples() || cfg.component >= dataset.o() {
        return Err(CliError::config(format!(
            "sample_index/component out of range for data ({} samples, o={})",
            dataset.n_samples(),
            dataset.o()
        )));
    }
    let series: Vec<f64> = (0..dataset.t_len())
        .map(|t| dataset.x[[cfg.sample_index, t, cfg.component]])
        .collect();
    let dt = cfg.dt.unwrap_or(dataset.dt);
    let segment_length = cfg
        .segment_length
        .ok_or_else(|| CliError::config("spectrum requires `segment_length`".into()))?;
    let kind = cfg
        .spectrum
        .ok_or_else(|| CliError::config("spectrum requires `spectrum` kind".into()))?;

    let csv_path = format!("{out}.csv");
    let json_path = format!("{out}.json");
    match kind {
        SpectrumKind::Welch => {
            let (freqs, psd) = welch_psd(&series, dt, segment_length, cfg.overlap)?;
            let mut csv = String::from("freq,psd\n");
            for (f, p) in freqs.iter().zip(psd.iter()) {
                csv.push_str(&format!("{f},{p}\n"));
            }
            io::write_atomic(&csv_path, &csv)?;
            let doc = json!({"spectrum": "welch", "segment_length": segment_length,
                             "overlap": cfg.overlap, "n_bins": freqs.len()});
            io::write_atomic(&json_path, &serde_json::to_string_pretty(&doc).unwrap())?;
        }
        SpectrumKind::Second => {
            let fh = cfg
                .fh
                .ok_or_else(|| CliError::config("second spectrum requires `fh`".into()))?;
            let fl = cfg
                .fl
                .ok_or_else(|| CliError::config("second spectrum requires `fl`".into()))?;
            let result =
                second_spectrum(&series, dt, segment_length, fh, fl, cfg.spectrum_method)?;
            let (chi_sum, dof, reject) = chi2_gaussianity(&result, cfg.level)?;
            let mut csv = String::from("freq,s2,s2_std,s2_gauss\n");
            for i in 0..result.freqs.len() {
                csv.push_str(&format!(
                    "{},{},{},{}\n",
                    result.freqs[i], result.s2[i], result.s2_std[i], result.s2_gauss[i]
                ));
            }
            io::write_atomic(&csv_path, &csv)?;
            let doc = json!({
                "spectrum": "second",
                "method": result.method,
                "segment_length": segment_length,
                "n_segments": result.n_segments,
                "band": {"fl": fl, "fh": fh},
                "chi2": {"chi_sum": chi_sum, "dof": dof, "level": cfg.level,
                          "reject_gaussian": reject},
            });
            io::write_atomic(&json_path, &serde_json::to_string_pretty(&doc).unwrap())?;
        }
    }

    let mut manifest = manifest_for("spectrum", Some(config_path), cfg.seed, data)?;
    manifest.outputs.push(csv_path);
    manifest.outputs.push(json_path);
    manifest.write()?;
    println!("{}", json!({"command": "spectrum"}));
    Ok(())
}
