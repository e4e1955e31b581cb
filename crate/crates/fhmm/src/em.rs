//! EM orchestration: E/M iteration with convergence detection, random
//! restarts, optional stochastic parameter jostling, and fixed/initial
//! parameter handling.

use ndarray::{Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::exact::{exact_estep, log_likelihood, Expectations};
use crate::gibbs::gibbs_estep;
use crate::mean_field::{mean_field_estep, MeanFieldState};
use crate::model::{
    clamp_probabilities, enumerate_realizations, random_init, validate_model, Dataset,
    ModelParams, ModelSpec, DEFAULT_ZERO_PROBABILITY,
};
use crate::mstep::{m_step, expected_complete_log_likelihood_dataset, FixedMask};
use crate::runner::{collect_results, derive_seed, execute_parallel};
use crate::sva::sva_estep;

/// E-step family used inside the EM loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Exact,
    MeanField,
    Sva,
    Gibbs,
}

/// Fit configuration. Field names mirror the batch-interface parameter
/// vocabulary; `*_init` seeds a block's starting value and `*_fixed` pins it
/// for the whole fit.
#[derive(Debug, Clone)]
pub struct FitOptions {
    pub method: Method,
    pub em_max_iter: usize,
    pub em_log_likelihood_tol: f64,
    pub em_log_likelihood_count: usize,
    pub n_restarts: usize,
    pub e_step_retries: usize,
    pub stochastic_training: bool,
    pub stochastic_lr: f64,
    pub gibbs_max_iter: usize,
    pub gibbs_burn_in: f64,
    pub mean_field_max_iter: usize,
    pub mean_field_kld_tol: f64,
    pub sva_max_iter: usize,
    pub sva_kld_tol: f64,
    pub zero_probability: f64,
    pub seed: u64,
    pub n_jobs: i64,
    pub verbose: bool,
    pub w_init: Option<Array3<f64>>,
    pub a_init: Option<Array3<f64>>,
    pub c_init: Option<Array2<f64>>,
    pub pi_init: Option<Array2<f64>>,
    pub w_fixed: Option<Array3<f64>>,
    pub a_fixed: Option<Array3<f64>>,
    pub c_fixed: Option<Array2<f64>>,
    pub pi_fixed: Option<Array2<f64>>,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            method: Method::Exact,
            em_max_iter: 100,
            em_log_likelihood_tol: 1e-8,
            em_log_likelihood_count: 3,
            n_restarts: 1,
            e_step_retries: 0,
            stochastic_training: false,
            stochastic_lr: 0.0,
            gibbs_max_iter: 100,
            gibbs_burn_in: 0.0,
            mean_field_max_iter: 50,
            mean_field_kld_tol: 1e-6,
            sva_max_iter: 50,
            sva_kld_tol: 1e-6,
            zero_probability: DEFAULT_ZERO_PROBABILITY,
            seed: 0,
            n_jobs: 1,
            verbose: false,
            w_init: None,
            a_init: None,
            c_init: None,
            pi_init: None,
            w_fixed: None,
            a_fixed: None,
            c_fixed: None,
            pi_fixed: None,
        }
    }
}

impl FitOptions {
    pub fn validate(&self, spec: &ModelSpec) -> Result<()> {
        if self.em_max_iter < 1 || self.n_restarts < 1 || self.em_log_likelihood_count < 1 {
            return Err(Error::InvalidOptions(
                "em_max_iter, n_restarts, em_log_likelihood_count must be >= 1".into(),
            ));
        }
        if !(self.em_log_likelihood_tol > 0.0) {
            return Err(Error::InvalidOptions("em_log_likelihood_tol must be > 0".into()));
        }
        if !(self.zero_probability > 0.0 && self.zero_probability < 0.5) {
            return Err(Error::InvalidOptions("zero_probability must be in (0, 0.5)".into()));
        }
        match self.method {
            Method::Gibbs if self.gibbs_max_iter < 1 => {
                return Err(Error::InvalidOptions("gibbs_max_iter must be >= 1".into()));
            }
            Method::MeanField
                if self.mean_field_max_iter < 1 || !(self.mean_field_kld_tol > 0.0) =>
            {
                return Err(Error::InvalidOptions(
                    "mean_field_max_iter >= 1 and mean_field_kld_tol > 0 required".into(),
                ));
            }
            Method::Sva if self.sva_max_iter < 1 || !(self.sva_kld_tol > 0.0) => {
                return Err(Error::InvalidOptions(
                    "sva_max_iter >= 1 and sva_kld_tol > 0 required".into(),
                ));
            }
            _ => {}
        }
        if self.stochastic_training && !(self.stochastic_lr > 0.0) {
            return Err(Error::InvalidOptions(
                "stochastic_training requires stochastic_lr > 0".into(),
            ));
        }
        let (d, o, k) = (spec.d, spec.o, spec.k);
        for (name, shape, want) in [
            ("W_init", self.w_init.as_ref().map(|a| a.dim()), (d, o, k)),
            ("A_init", self.a_init.as_ref().map(|a| a.dim()), (d, k, k)),
            ("W_fixed", self.w_fixed.as_ref().map(|a| a.dim()), (d, o, k)),
            ("A_fixed", self.a_fixed.as_ref().map(|a| a.dim()), (d, k, k)),
        ] {
            if let Some(got) = shape {
                if got != want {
                    return Err(Error::InvalidOptions(format!(
                        "{name} has shape {got:?}, expected {want:?}"
                    )));
                }
            }
        }
        for (name, shape, want) in [
            ("C_init", self.c_init.as_ref().map(|a| a.dim()), (o, o)),
            ("pi_init", self.pi_init.as_ref().map(|a| a.dim()), (d, k)),
            ("C_fixed", self.c_fixed.as_ref().map(|a| a.dim()), (o, o)),
            ("pi_fixed", self.pi_fixed.as_ref().map(|a| a.dim()), (d, k)),
        ] {
            if let Some(got) = shape {
                if got != want {
                    return Err(Error::InvalidOptions(format!(
                        "{name} has shape {got:?}, expected {want:?}"
                    )));
                }
            }
        }
        Ok(())
    }

    fn fixed_mask(&self) -> FixedMask {
        FixedMask {
            w: self.w_fixed.is_some(),
            a: self.a_fixed.is_some(),
            c: self.c_fixed.is_some(),
            pi: self.pi_fixed.is_some(),
        }
    }
}

/// Outcome of one restart.
#[derive(Debug, Clone, serde::Serialize)]
pub struct RestartSummary {
    pub restart_index: usize,
    pub final_score: f64,
    pub final_exact_log_likelihood: f64,
    pub converged: bool,
    pub n_iterations: usize,
}

/// Fit output: best-restart parameters, its per-iteration score trace, and
/// per-restart summaries.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub params: ModelParams,
    pub log_likelihood_trace: Vec<f64>,
    pub best_restart_index: usize,
    pub converged: bool,
    pub restarts: Vec<RestartSummary>,
}

/// Fits the model by EM. Restarts are independent seeded tasks; the restart
/// with the highest final exact log likelihood wins, ties broken toward the
/// lowest restart index. Identical inputs (including the seed) produce an
/// identical result for any `n_jobs`.
pub fn fit(dataset: &Dataset, spec: &ModelSpec, options: &FitOptions) -> Result<FitResult> {
    options.validate(spec)?;
    if dataset.t_len() != spec.t_len || dataset.o() != spec.o {
        return Err(Error::ShapeMismatch(format!(
            "dataset is ({}, {}, {}), spec wants T={}, o={}",
            dataset.n_samples(),
            dataset.t_len(),
            dataset.o(),
            spec.t_len,
            spec.o
        )));
    }
    if let Some(w) = &options.w_fixed {
        if let Some(wi) = &options.w_init {
            if w != wi {
                return Err(Error::InvalidOptions("W_init conflicts with W_fixed".into()));
            }
        }
    }

    let tasks: Vec<_> = (0..options.n_restarts)
        .map(|restart| {
            let options = options.clone();
            let spec = *spec;
            move || run_restart(dataset, &spec, &options, restart)
        })
        .collect();
    let outcomes = collect_results(execute_parallel(tasks, options.n_jobs))?;

    let mut best = 0;
    for (i, outcome) in outcomes.iter().enumerate() {
        if outcome.summary.final_exact_log_likelihood
            > outcomes[best].summary.final_exact_log_likelihood
        {
            best = i;
        }
    }
    let restarts: Vec<RestartSummary> = outcomes.iter().map(|o| o.summary.clone()).collect();
    let chosen = outcomes.into_iter().nth(best).expect("nonempty restarts");
    Ok(FitResult {
        params: chosen.params,
        log_likelihood_trace: chosen.trace,
        best_restart_index: best,
        converged: chosen.summary.converged,
        restarts,
    })
}

struct RestartOutcome {
    params: ModelParams,
    trace: Vec<f64>,
    summary: RestartSummary,
}

fn initial_params(
    dataset: &Dataset,
    spec: &ModelSpec,
    options: &FitOptions,
    init_seed: u64,
) -> Result<ModelParams> {
    let span = {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &v in dataset.x.iter() {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        ((hi - lo) / 2.0).max(1e-3)
    };
    let variance = dataset.component_variance();
    let mut params = random_init(spec, init_seed, span, Some(&variance));
    if let Some(w) = options.w_fixed.as_ref().or(options.w_init.as_ref()) {
        params.w = w.clone();
    }
    if let Some(a) = options.a_fixed.as_ref().or(options.a_init.as_ref()) {
        params.a_log = a.clone();
    }
    if let Some(c) = options.c_fixed.as_ref().or(options.c_init.as_ref()) {
        params.c = c.clone();
    }
    if let Some(pi) = options.pi_fixed.as_ref().or(options.pi_init.as_ref()) {
        params.pi = pi.clone();
    }
    validate_model(&params, spec)?;
    Ok(params)
}

fn run_restart(
    dataset: &Dataset,
    spec: &ModelSpec,
    options: &FitOptions,
    restart: usize,
) -> Result<RestartOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(options.seed, restart as u64));
    let init_seed = rng.gen::<u64>();
    let mut params = initial_params(dataset, spec, options, init_seed)?;
    let table = enumerate_realizations(spec)?;
    let fixed = options.fixed_mask();
    let floor = options.zero_probability;
    let n_samples = dataset.n_samples();

    let mut mf_states: Vec<Option<MeanFieldState>> = vec![None; n_samples];
    let mut trace: Vec<f64> = Vec::new();
    let mut streak = 0usize;
    let mut converged = false;

    for iter in 0..options.em_max_iter {
        let mut expectations: Vec<Expectations> = Vec::with_capacity(n_samples);
        let mut score = 0.0;
        for s in 0..n_samples {
            let sample = dataset.x.index_axis(Axis(0), s);
            match options.method {
                Method::Exact => {
                    let (exp, ll) = exact_estep(&params, sample, &table, floor)?;
                    score += ll;
                    expectations.push(exp);
                }
                Method::MeanField => {
                    let mut best: Option<(Expectations, MeanFieldState)> = None;
                    for retry in 0..=options.e_step_retries {
                        let warm = if retry == 0 { mf_states[s].as_ref() } else { None };
                        let state_seed = rng.gen::<u64>();
                        let init_state;
                        let init = if retry == 0 {
                            warm
                        } else {
                            init_state = random_mf_state(sample.dim().0, spec, state_seed);
                            Some(&init_state)
                        };
                        let (exp, state) = mean_field_estep(
                            &params,
                            sample,
                            init,
                            options.mean_field_max_iter,
                            options.mean_field_kld_tol,
                            floor,
                            rng.gen::<u64>(),
                        )?;
                        let better = match &best {
                            None => true,
                            Some((_, prev)) => final_kld(&state) < final_kld(prev),
                        };
                        if better {
                            best = Some((exp, state));
                        }
                    }
                    let (exp, state) = best.expect("at least one e-step");
                    score -= final_kld(&state);
                    mf_states[s] = Some(state);
                    expectations.push(exp);
                }
                Method::Sva => {
                    let mut best: Option<(Expectations, crate::sva::SvaState)> = None;
                    for _retry in 0..=options.e_step_retries {
                        let (exp, state) = sva_estep(
                            &params,
                            sample,
                            options.sva_max_iter,
                            options.sva_kld_tol,
                            floor,
                            rng.gen::<u64>(),
                        )?;
                        let better = match &best {
                            None => true,
                            Some((_, prev)) => {
                                state.kld_trace.last() < prev.kld_trace.last()
                            }
                        };
                        if better {
                            best = Some((exp, state));
                        }
                    }
                    let (exp, state) = best.expect("at least one e-step");
                    score -= state.kld_trace.last().copied().unwrap_or(f64::INFINITY);
                    expectations.push(exp);
                }
                Method::Gibbs => {
                    let (exp, _) = gibbs_estep(
                        &params,
                        sample,
                        options.gibbs_max_iter,
                        rng.gen::<u64>(),
                        options.gibbs_burn_in,
                        floor,
                    )?;
                    expectations.push(exp);
                }
            }
        }
        if options.method == Method::Gibbs {
            score = expected_complete_log_likelihood_dataset(&params, &expectations, dataset)?;
        }

        if options.verbose {
            eprintln!("restart {restart} iter {iter}: score {score:.10e}");
        }
        let delta_small = trace
            .last()
            .is_some_and(|prev| (score - prev).abs() < options.em_log_likelihood_tol);
        trace.push(score);
        if delta_small {
            streak += 1;
            if streak >= options.em_log_likelihood_count {
                converged = true;
                break;
            }
        } else {
            streak = 0;
        }

        params = m_step(&expectations, dataset, &params, &fixed, floor)?;

        if options.stochastic_training {
            let magnitude =
                options.stochastic_lr * 0.5_f64.powf(iter as f64 / 10.0);
            jostle(&mut params, &fixed, magnitude, floor, &mut rng);
        }
    }

    let final_exact = log_likelihood(&params, dataset, &table, floor)?;
    let n_iterations = trace.len();
    Ok(RestartOutcome {
        params,
        summary: RestartSummary {
            restart_index: restart,
            final_score: trace.last().copied().unwrap_or(f64::NEG_INFINITY),
            final_exact_log_likelihood: final_exact,
            converged,
            n_iterations,
        },
        trace,
    })
}

fn final_kld(state: &MeanFieldState) -> f64 {
    state.kld_trace.last().copied().unwrap_or(f64::INFINITY)
}

fn random_mf_state(t_len: usize, spec: &ModelSpec, seed: u64) -> MeanFieldState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = Array3::<f64>::zeros((t_len, spec.d, spec.k));
    for t in 0..t_len {
        for i in 0..spec.d {
            let mut row: Vec<f64> = (0..spec.k).map(|_| rng.gen_range(0.05..1.0)).collect();
            let sum: f64 = row.iter().sum();
            for v in &mut row {
                *v /= sum;
            }
            for (j, v) in row.iter().enumerate() {
                m[[t, i, j]] = *v;
            }
        }
    }
    MeanFieldState { m, kld_trace: Vec::new() }
}

/// Zero-mean random perturbation of the non-fixed blocks, with A and pi
/// re-projected onto the probability simplex. The magnitude halves every 10
/// EM iterations.
fn jostle(
    params: &mut ModelParams,
    fixed: &FixedMask,
    magnitude: f64,
    floor: f64,
    rng: &mut ChaCha8Rng,
) {
    let (d, o, k) = params.w.dim();
    if !fixed.w {
        for v in params.w.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *v += magnitude * z;
        }
    }
    if !fixed.a {
        let a_exp = params.a_exp();
        for i in 0..d {
            for l in 0..k {
                let mut col: Vec<f64> = (0..k)
                    .map(|j| {
                        let z: f64 = rng.sample(StandardNormal);
                        (a_exp[[i, j, l]] + magnitude * z).max(floor)
                    })
                    .collect();
                clamp_probabilities(&mut col, floor);
                for (j, v) in col.iter().enumerate() {
                    params.a_log[[i, j, l]] = v.ln();
                }
            }
        }
    }
    if !fixed.c {
        let mut c = params.c.clone();
        for i in 0..o {
            for j in 0..=i {
                let z: f64 = rng.sample(StandardNormal);
                let bump = magnitude * z;
                c[[i, j]] += bump;
                if i != j {
                    c[[j, i]] += bump;
                }
            }
        }
        params.c = crate::mstep::regularize_covariance(c);
    }
    if !fixed.pi {
        for i in 0..d {
            let mut row: Vec<f64> = (0..k)
                .map(|j| {
                    let z: f64 = rng.sample(StandardNormal);
                    (params.pi[[i, j]] + magnitude * z).max(floor)
                })
                .collect();
            clamp_probabilities(&mut row, floor);
            for (j, v) in row.iter().enumerate() {
                params.pi[[i, j]] = *v;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::generate_fhmm;
    use approx::assert_abs_diff_eq;

    fn gen_spec() -> (ModelSpec, ModelParams) {
        let spec = ModelSpec { t_len: 150, d: 1, o: 1, k: 2 };
        let mut params = random_init(&spec, 77, 1.0, None);
        params.w = Array3::from_shape_vec((1, 1, 2), vec![0.0, 1.0]).unwrap();
        params.a_log = Array3::from_shape_vec(
            (1, 2, 2),
            vec![0.95f64.ln(), 0.10f64.ln(), 0.05f64.ln(), 0.90f64.ln()],
        )
        .unwrap();
        params.c = ndarray::arr2(&[[0.01]]);
        params.pi = ndarray::arr2(&[[0.5, 0.5]]);
        (spec, params)
    }

    #[test]
    fn all_fixed_blocks_return_identical_params() {
        let (spec, params) = gen_spec();
        let (_, ds, _) = generate_fhmm(&params, 150, 1, 5, false).unwrap();
        let options = FitOptions {
            em_max_iter: 10,
            w_fixed: Some(params.w.clone()),
            a_fixed: Some(params.a_log.clone()),
            c_fixed: Some(params.c.clone()),
            pi_fixed: Some(params.pi.clone()),
            ..Default::default()
        };
        let result = fit(&ds, &spec, &options).unwrap();
        assert_eq!(result.params, params);
        assert!(result.converged);
        for w in result.log_likelihood_trace.windows(2) {
            assert_abs_diff_eq!(w[0], w[1], epsilon = 1e-12);
        }
    }

    #[test]
    fn exact_fit_trace_monotone_and_beats_truth() {
        let (spec, truth) = gen_spec();
        let (_, ds, _) = generate_fhmm(&truth, 150, 1, 21, false).unwrap();
        let options = FitOptions { em_max_iter: 200, n_restarts: 2, seed: 3, ..Default::default() };
        let result = fit(&ds, &spec, &options).unwrap();
        for w in result.log_likelihood_trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-6, "trace decreased: {} -> {}", w[0], w[1]);
        }
        let table = enumerate_realizations(&spec).unwrap();
        let ll_truth =
            log_likelihood(&truth, &ds, &table, DEFAULT_ZERO_PROBABILITY).unwrap();
        let ll_fit = result.restarts[result.best_restart_index].final_exact_log_likelihood;
        assert!(
            ll_fit >= ll_truth - 1e-3,
            "fitted LL {ll_fit} below generating-model LL {ll_truth}"
        );
    }

    #[test]
    fn deterministic_across_n_jobs() {
        let (spec, truth) = gen_spec();
        let (_, ds, _) = generate_fhmm(&truth, 150, 1, 33, false).unwrap();
        let base = FitOptions { em_max_iter: 30, n_restarts: 4, seed: 9, ..Default::default() };
        let serial = fit(&ds, &spec, &base).unwrap();
        let parallel =
            fit(&ds, &spec, &FitOptions { n_jobs: 8, ..base.clone() }).unwrap();
        assert_eq!(serial.params, parallel.params);
        assert_eq!(serial.best_restart_index, parallel.best_restart_index);
        assert_eq!(serial.log_likelihood_trace, parallel.log_likelihood_trace);
    }

    #[test]
    fn fixed_blocks_survive_stochastic_training() {
        let (spec, truth) = gen_spec();
        let (_, ds, _) = generate_fhmm(&truth, 150, 1, 8, false).unwrap();
        let options = FitOptions {
            em_max_iter: 15,
            stochastic_training: true,
            stochastic_lr: 0.05,
            a_fixed: Some(truth.a_log.clone()),
            seed: 2,
            ..Default::default()
        };
        let result = fit(&ds, &spec, &options).unwrap();
        assert_eq!(result.params.a_log, truth.a_log);
        validate_model(&result.params, &spec).unwrap();
    }

    #[test]
    fn invalid_options_are_rejected() {
        let (spec, _) = gen_spec();
        let bad = FitOptions { n_restarts: 0, ..Default::default() };
        assert!(matches!(bad.validate(&spec), Err(Error::InvalidOptions(_))));
        let bad = FitOptions { em_log_likelihood_tol: 0.0, ..Default::default() };
        assert!(matches!(bad.validate(&spec), Err(Error::InvalidOptions(_))));
        let bad = FitOptions {
            w_init: Some(Array3::zeros((3, 1, 2))),
            ..Default::default()
        };
        assert!(matches!(bad.validate(&spec), Err(Error::InvalidOptions(_))));
    }

    #[test]
    fn approximate_methods_run_to_completion() {
        let (spec, truth) = gen_spec();
        let (_, ds, _) = generate_fhmm(&truth, 150, 1, 14, false).unwrap();
        for method in [Method::MeanField, Method::Sva, Method::Gibbs] {
            let options = FitOptions {
                method,
                em_max_iter: 8,
                gibbs_max_iter: 40,
                mean_field_max_iter: 15,
                sva_max_iter: 15,
                seed: 4,
                ..Default::default()
            };
            let result = fit(&ds, &spec, &options).unwrap();
            validate_model(&result.params, &spec).unwrap();
            assert!(!result.log_likelihood_trace.is_empty());
        }
    }
}
