//! Time-ordered cross-validation over sliding train/test windows, evidence
//! ratio scoring, and bootstrap confidence intervals.

use ndarray::{Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::em::{fit, FitOptions, FitResult};
use crate::error::{Error, Result};
use crate::exact::log_likelihood;
use crate::model::{
    canonicalize_weights, count_dim, enumerate_realizations, Dataset, ModelParams, ModelSpec,
};
use crate::runner::{collect_results, execute_parallel};
use crate::viterbi::viterbi_decode;

/// One train/test window; all ranges are half-open time indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Fold {
    pub train_start: usize,
    pub train_end: usize,
    pub test_start: usize,
    pub test_end: usize,
}

/// Sliding-window layout: window length `floor(subsequence_size * T)`, test
/// portion `floor(test_size * window)` at its tail, fold offsets evenly
/// spaced so the last test window ends at the final usable index.
#[derive(Debug, Clone)]
pub struct CvPlan {
    pub subsequence_size: f64,
    pub test_size: f64,
    pub n_splits: usize,
    pub folds: Vec<Fold>,
}

pub fn cv_splits(
    t_total: usize,
    subsequence_size: f64,
    test_size: f64,
    n_splits: usize,
) -> Result<CvPlan> {
    if n_splits < 1 {
        return Err(Error::InfeasiblePlan("n_splits must be >= 1".into()));
    }
    if !(subsequence_size > 0.0 && subsequence_size <= 1.0)
        || !(test_size > 0.0 && test_size < 1.0)
    {
        return Err(Error::InfeasiblePlan(
            "subsequence_size in (0,1] and test_size in (0,1) required".into(),
        ));
    }
    let window = (subsequence_size * t_total as f64).floor() as usize;
    if window < 4 {
        return Err(Error::InfeasiblePlan(format!(
            "window of {window} steps is too short (need >= 4)"
        )));
    }
    let test_len = (test_size * window as f64).floor() as usize;
    let train_len = window - test_len;
    if test_len < 1 || train_len < 2 {
        return Err(Error::InfeasiblePlan(format!(
            "window {window} splits into train {train_len} / test {test_len}"
        )));
    }
    let slack = t_total - window;
    let folds = (0..n_splits)
        .map(|i| {
            let offset = if n_splits == 1 {
                0
            } else {
                ((i as f64) * (slack as f64) / ((n_splits - 1) as f64)).floor() as usize
            };
            let offset = offset.min(slack);
            Fold {
                train_start: offset,
                train_end: offset + train_len,
                test_start: offset + train_len,
                test_end: offset + window,
            }
        })
        .collect();
    Ok(CvPlan { subsequence_size, test_size, n_splits, folds })
}

/// Strength of evidence that the larger model is better.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EvidenceClass {
    Strong,
    Weak,
    None,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct EvidenceVerdict {
    pub e: f64,
    pub classification: EvidenceClass,
}

/// Evidence ratio `e = 2 (lnL_i - lnL_j) / (N_i - N_j)` for the larger
/// model `i` against the nested model `j`; strong if `e > 2`, weak if
/// `1 < e <= 2`, none otherwise.
pub fn evidence_ratio(lnl_i: f64, n_i: usize, lnl_j: f64, n_j: usize) -> Result<EvidenceVerdict> {
    if n_i == n_j {
        return Err(Error::DegenerateComparison);
    }
    if n_i < n_j {
        return Err(Error::InvalidOptions(
            "the larger model (more parameters) must come first".into(),
        ));
    }
    let e = 2.0 * (lnl_i - lnl_j) / (n_i as f64 - n_j as f64);
    let classification = if e > 2.0 {
        EvidenceClass::Strong
    } else if e > 1.0 {
        EvidenceClass::Weak
    } else {
        EvidenceClass::None
    };
    Ok(EvidenceVerdict { e, classification })
}

/// Per-model cross-validation outcome.
#[derive(Debug, Clone)]
pub struct CvModelResult {
    pub d: usize,
    pub k: usize,
    /// Independent parameter count of this model.
    pub n_params: usize,
    /// Validation log likelihood per fold.
    pub fold_scores: Vec<f64>,
    pub mean: f64,
    pub stderr: f64,
    /// Fitted parameters per fold.
    pub fold_params: Vec<ModelParams>,
}

fn slice_time(dataset: &Dataset, start: usize, end: usize) -> Dataset {
    let x = dataset.x.slice(ndarray::s![.., start..end, ..]).to_owned();
    Dataset { x, dt: dataset.dt }
}

/// Fits every `(d, k)` model on every fold's training window and scores the
/// exact log likelihood of the test window, with the test window's initial
/// state distribution taken from the Viterbi-decoded terminal state of the
/// training window (floor-smoothed).
pub fn cross_validate(
    dataset: &Dataset,
    models: &[(usize, usize)],
    options: &FitOptions,
    plan: &CvPlan,
) -> Result<Vec<CvModelResult>> {
    for fold in &plan.folds {
        assert!(fold.train_end == fold.test_start, "train and test must be adjacent");
        assert!(fold.test_end <= dataset.t_len(), "fold exceeds data");
    }
    let tasks: Vec<_> = models
        .iter()
        .flat_map(|&(d, k)| plan.folds.iter().map(move |fold| (d, k, *fold)))
        .map(|(d, k, fold)| {
            let options = options.clone();
            move || -> Result<(f64, ModelParams)> {
                let train = slice_time(dataset, fold.train_start, fold.train_end);
                let spec =
                    ModelSpec { t_len: fold.train_end - fold.train_start, d, o: dataset.o(), k };
                let inner = FitOptions { n_jobs: 1, ..options };
                let result = fit(&train, &spec, &inner)?;
                let score =
                    score_fold(dataset, &result.params, &fold, inner.zero_probability)?;
                Ok((score, result.params))
            }
        })
        .collect();
    let outcomes = collect_results(execute_parallel(tasks, options.n_jobs))?;

    let mut out = Vec::with_capacity(models.len());
    for (mi, &(d, k)) in models.iter().enumerate() {
        let rows = &outcomes[mi * plan.folds.len()..(mi + 1) * plan.folds.len()];
        let fold_scores: Vec<f64> = rows.iter().map(|(s, _)| *s).collect();
        let fold_params: Vec<ModelParams> = rows.iter().map(|(_, p)| p.clone()).collect();
        let n = fold_scores.len() as f64;
        let mean = fold_scores.iter().sum::<f64>() / n;
        let stderr = if fold_scores.len() > 1 {
            let var = fold_scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>()
                / (n - 1.0);
            (var / n).sqrt()
        } else {
            0.0
        };
        out.push(CvModelResult {
            d,
            k,
            n_params: count_dim(&ModelSpec { t_len: 1, d, o: dataset.o(), k }),
            fold_scores,
            mean,
            stderr,
            fold_params,
        });
    }
    Ok(out)
}

/// Exact validation log likelihood of a fold's test window under `params`,
/// with pi replaced by the smoothed terminal Viterbi state of the training
/// window (averaged over samples).
pub fn score_fold(
    dataset: &Dataset,
    params: &ModelParams,
    fold: &Fold,
    floor: f64,
) -> Result<f64> {
    let (d, _o, k) = params.w.dim();
    let spec_train = ModelSpec {
        t_len: fold.train_end - fold.train_start,
        d,
        o: dataset.o(),
        k,
    };
    let table = enumerate_realizations(&spec_train)?;
    let mut pi_test = Array2::<f64>::zeros((d, k));
    for s in 0..dataset.n_samples() {
        let train = dataset
            .x
            .slice(ndarray::s![s, fold.train_start..fold.train_end, ..]);
        let (states, _) = viterbi_decode(params, train, &table, floor)?;
        let last = states.index_axis(Axis(0), spec_train.t_len - 1);
        for i in 0..d {
            for j in 0..k {
                let p = if last[[i, j]] > 0.5 {
                    1.0 - (k as f64 - 1.0) * floor
                } else {
                    floor
                };
                pi_test[[i, j]] += p;
            }
        }
    }
    pi_test /= dataset.n_samples() as f64;
    let scoring = ModelParams { pi: pi_test, ..params.clone() };
    let test = slice_time(dataset, fold.test_start, fold.test_end);
    log_likelihood(&scoring, &test, &table, floor)
}

/// Consistently permutes chain labels across W, A, and pi.
pub fn permute_chains(params: &ModelParams, perm: &[usize]) -> ModelParams {
    let (d, o, k) = params.w.dim();
    assert_eq!(perm.len(), d);
    let mut out = params.clone();
    for (dst, &src) in perm.iter().enumerate() {
        for j in 0..o {
            for l in 0..k {
                out.w[[dst, j, l]] = params.w[[src, j, l]];
            }
        }
        for a in 0..k {
            for b in 0..k {
                out.a_log[[dst, a, b]] = params.a_log[[src, a, b]];
            }
            out.pi[[dst, a]] = params.pi[[src, a]];
        }
    }
    out
}

/// Consistently permutes the state labels of one chain across W, A, and pi.
pub fn permute_states(params: &ModelParams, chain: usize, perm: &[usize]) -> ModelParams {
    let (_, o, k) = params.w.dim();
    assert_eq!(perm.len(), k);
    let mut out = params.clone();
    for j in 0..o {
        for l in 0..k {
            out.w[[chain, j, l]] = params.w[[chain, j, perm[l]]];
        }
    }
    for a in 0..k {
        for b in 0..k {
            out.a_log[[chain, a, b]] = params.a_log[[chain, perm[a], perm[b]]];
        }
        out.pi[[chain, a]] = params.pi[[chain, perm[a]]];
    }
    out
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 1 {
        return vec![vec![0]];
    }
    let mut out = Vec::new();
    for rest in permutations(n - 1) {
        for pos in 0..n {
            let mut p = rest.clone();
            p.insert(pos, n - 1);
            out.push(p);
        }
    }
    out
}

/// Aligns chain and state labels to a reference fit: chains are matched by
/// minimizing the total squared distance between canonical W blocks, with
/// the best state relabeling chosen independently per matched chain (both
/// are likelihood invariances). Solved exactly by enumeration.
pub fn align_to_reference(params: &ModelParams, reference: &ModelParams) -> ModelParams {
    let (d, o, k) = params.w.dim();
    // compare per-chain zero-meaned blocks: the chain means are not
    // identifiable individually (only their total), so they must not drive
    // the assignment
    let zero_mean = |w: &Array3<f64>| -> Array3<f64> {
        let mut out = w.clone();
        for i in 0..d {
            for j in 0..o {
                let mu: f64 = (0..k).map(|l| w[[i, j, l]]).sum::<f64>() / k as f64;
                for l in 0..k {
                    out[[i, j, l]] -= mu;
                }
            }
        }
        out
    };
    let w_ref = zero_mean(&reference.w);
    let state_perms = permutations(k);

    // distance of chain `src` (under its best state perm) to reference chain
    // `dst`, along with that perm
    let w_can = zero_mean(&params.w);
    let mut best_perm_for = vec![vec![(0usize, f64::INFINITY); d]; d];
    for src in 0..d {
        for dst in 0..d {
            let mut best = (0usize, f64::INFINITY);
            for (pi, perm) in state_perms.iter().enumerate() {
                let mut dist = 0.0;
                for j in 0..o {
                    for l in 0..k {
                        let delta = w_can[[src, j, perm[l]]] - w_ref[[dst, j, l]];
                        dist += delta * delta;
                    }
                }
                if dist < best.1 {
                    best = (pi, dist);
                }
            }
            best_perm_for[src][dst] = best;
        }
    }

    let mut best_assignment: Option<(Vec<usize>, f64)> = None;
    for chain_perm in permutations(d) {
        // chain_perm[dst] = src
        let total: f64 = (0..d).map(|dst| best_perm_for[chain_perm[dst]][dst].1).sum();
        if best_assignment.as_ref().is_none_or(|(_, t)| total < *t) {
            best_assignment = Some((chain_perm, total));
        }
    }
    let (chain_perm, _) = best_assignment.expect("nonempty permutation set");

    let mut aligned = permute_chains(params, &chain_perm);
    for dst in 0..d {
        let (pi, _) = best_perm_for[chain_perm[dst]][dst];
        aligned = permute_states(&aligned, dst, &state_perms[pi]);
    }
    aligned.w = canonicalize_weights(&aligned.w);
    aligned
}

/// Coordinate-wise quantiles of the fitted-parameter ensemble. The three
/// containers are not valid models; they hold per-coordinate percentiles.
#[derive(Debug, Clone)]
pub struct ParamQuantiles {
    pub lo: ModelParams,
    pub median: ModelParams,
    pub hi: ModelParams,
}

/// Bootstrap output: the aligned fitted ensemble and 2.5/50/97.5% quantiles.
#[derive(Debug, Clone)]
pub struct BootstrapResult {
    pub ensemble: Vec<ModelParams>,
    pub quantiles: ParamQuantiles,
    /// Subsequence start offset per draw.
    pub starts: Vec<usize>,
}

fn percentile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = p * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

/// Fits the full restart schedule to `n_bootstrap` uniformly random
/// contiguous subsequences of length `subseq_len`, canonicalizes and aligns
/// each fit to the first draw, and summarizes per-coordinate quantiles.
/// Draw `i` fits with seed `options.seed + i`, so a single full-length draw
/// reproduces `fit` on the whole dataset.
pub fn bootstrap_fit(
    dataset: &Dataset,
    spec: &ModelSpec,
    options: &FitOptions,
    n_bootstrap: usize,
    subseq_len: usize,
    seed: u64,
) -> Result<BootstrapResult> {
    if subseq_len < 2 || subseq_len > dataset.t_len() {
        return Err(Error::InvalidOptions(format!(
            "subsequence length {subseq_len} not in [2, {}]",
            dataset.t_len()
        )));
    }
    if n_bootstrap < 1 {
        return Err(Error::InvalidOptions("n_bootstrap must be >= 1".into()));
    }
    let slack = dataset.t_len() - subseq_len;
    let starts: Vec<usize> = (0..n_bootstrap)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(crate::runner::derive_seed(
                seed ^ 0xb005_7a29_u64,
                i as u64,
            ));
            if slack == 0 {
                0
            } else {
                rng.gen_range(0..=slack)
            }
        })
        .collect();

    let tasks: Vec<_> = starts
        .iter()
        .enumerate()
        .map(|(i, &start)| {
            let options = options.clone();
            let spec = ModelSpec { t_len: subseq_len, ..*spec };
            move || -> Result<ModelParams> {
                let slice = slice_time(dataset, start, start + subseq_len);
                let inner = FitOptions {
                    n_jobs: 1,
                    seed: options.seed.wrapping_add(i as u64),
                    ..options
                };
                let fitted: FitResult = fit(&slice, &spec, &inner)?;
                let mut params = fitted.params;
                params.w = canonicalize_weights(&params.w);
                Ok(params)
            }
        })
        .collect();
    let mut ensemble = collect_results(execute_parallel(tasks, options.n_jobs))?;

    let reference = ensemble[0].clone();
    for p in ensemble.iter_mut().skip(1) {
        *p = align_to_reference(p, &reference);
    }

    let collect_q = |get: &dyn Fn(&ModelParams) -> Vec<f64>, len: usize| -> [Vec<f64>; 3] {
        let mut lo = vec![0.0; len];
        let mut med = vec![0.0; len];
        let mut hi = vec![0.0; len];
        let mut column = vec![0.0; ensemble.len()];
        for idx in 0..len {
            for (e, p) in ensemble.iter().enumerate() {
                column[e] = get(p)[idx];
            }
            column.sort_by(|a, b| a.partial_cmp(b).unwrap());
            lo[idx] = percentile(&column, 0.025);
            med[idx] = percentile(&column, 0.5);
            hi[idx] = percentile(&column, 0.975);
        }
        [lo, med, hi]
    };

    let (d, o, k) = reference.w.dim();
    let w_len = d * o * k;
    let a_len = d * k * k;
    let c_len = o * o;
    let pi_len = d * k;
    let [w_lo, w_med, w_hi] =
        collect_q(&|p: &ModelParams| p.w.iter().cloned().collect(), w_len);
    let [a_lo, a_med, a_hi] =
        collect_q(&|p: &ModelParams| p.a_log.iter().cloned().collect(), a_len);
    let [c_lo, c_med, c_hi] =
        collect_q(&|p: &ModelParams| p.c.iter().cloned().collect(), c_len);
    let [pi_lo, pi_med, pi_hi] =
        collect_q(&|p: &ModelParams| p.pi.iter().cloned().collect(), pi_len);

    let rebuild = |wv: Vec<f64>, av: Vec<f64>, cv: Vec<f64>, piv: Vec<f64>| ModelParams {
        w: Array3::from_shape_vec((d, o, k), wv).expect("shape"),
        a_log: Array3::from_shape_vec((d, k, k), av).expect("shape"),
        c: Array2::from_shape_vec((o, o), cv).expect("shape"),
        pi: Array2::from_shape_vec((d, k), piv).expect("shape"),
    };
    let quantiles = ParamQuantiles {
        lo: rebuild(w_lo, a_lo, c_lo, pi_lo),
        median: rebuild(w_med, a_med, c_med, pi_med),
        hi: rebuild(w_hi, a_hi, c_hi, pi_hi),
    };
    Ok(BootstrapResult { ensemble, quantiles, starts })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::random_init;
    use crate::noise::generate_fhmm;
    use approx::assert_abs_diff_eq;

    #[test]
    fn cv_splits_matches_layout_example() {
        let plan = cv_splits(100, 0.5, 0.5, 2).unwrap();
        assert_eq!(
            plan.folds,
            vec![
                Fold { train_start: 0, train_end: 25, test_start: 25, test_end: 50 },
                Fold { train_start: 50, train_end: 75, test_start: 75, test_end: 100 },
            ]
        );
    }

    #[test]
    fn cv_splits_single_and_full_window() {
        let plan = cv_splits(60, 0.5, 0.4, 1).unwrap();
        assert_eq!(plan.folds.len(), 1);
        assert_eq!(plan.folds[0].train_start, 0);

        let plan = cv_splits(40, 1.0, 0.25, 3).unwrap();
        for fold in &plan.folds {
            assert_eq!(fold.train_start, 0);
            assert_eq!(fold.test_end, 40);
        }
    }

    #[test]
    fn cv_splits_rejects_too_short() {
        assert!(matches!(cv_splits(6, 0.5, 0.5, 2), Err(Error::InfeasiblePlan(_))));
        assert!(matches!(cv_splits(100, 0.5, 0.5, 0), Err(Error::InfeasiblePlan(_))));
    }

    #[test]
    fn folds_are_disjoint_and_adjacent() {
        let plan = cv_splits(333, 0.31, 0.4, 7).unwrap();
        for f in &plan.folds {
            assert!(f.train_start < f.train_end);
            assert_eq!(f.train_end, f.test_start);
            assert!(f.test_start < f.test_end);
            assert!(f.test_end <= 333);
        }
        assert_eq!(plan.folds.last().unwrap().test_end, 333);
    }

    #[test]
    fn evidence_ratio_thresholds() {
        let v = evidence_ratio(10.0, 10, 0.0, 5).unwrap();
        assert_abs_diff_eq!(v.e, 4.0);
        assert_eq!(v.classification, EvidenceClass::Strong);

        let v = evidence_ratio(5.0, 10, 5.0, 5).unwrap();
        assert_abs_diff_eq!(v.e, 0.0);
        assert_eq!(v.classification, EvidenceClass::None);

        let v = evidence_ratio(3.0, 9, 0.0, 5).unwrap();
        assert_abs_diff_eq!(v.e, 1.5);
        assert_eq!(v.classification, EvidenceClass::Weak);

        assert!(matches!(evidence_ratio(1.0, 5, 0.0, 5), Err(Error::DegenerateComparison)));
    }

    #[test]
    fn evidence_classification_matches_thresholds_for_random_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let lnl_i: f64 = rng.gen_range(-50.0..50.0);
            let lnl_j: f64 = rng.gen_range(-50.0..50.0);
            let n_j = rng.gen_range(2usize..20);
            let n_i = n_j + rng.gen_range(1usize..10);
            let v = evidence_ratio(lnl_i, n_i, lnl_j, n_j).unwrap();
            let expect = if v.e > 2.0 {
                EvidenceClass::Strong
            } else if v.e > 1.0 {
                EvidenceClass::Weak
            } else {
                EvidenceClass::None
            };
            assert_eq!(v.classification, expect);
        }
    }

    #[test]
    fn alignment_undoes_chain_and_state_relabeling() {
        let spec = ModelSpec { t_len: 4, d: 3, o: 2, k: 2 };
        let mut reference = random_init(&spec, 5, 1.0, None);
        reference.w = canonicalize_weights(&reference.w);
        let shuffled = permute_states(&permute_chains(&reference, &[2, 0, 1]), 1, &[1, 0]);
        let aligned = align_to_reference(&shuffled, &reference);
        for (a, b) in aligned.w.iter().zip(reference.w.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
        for (a, b) in aligned.a_log.iter().zip(reference.a_log.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
        for (a, b) in aligned.pi.iter().zip(reference.pi.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn fold_scores_invariant_under_chain_permutation() {
        let spec = ModelSpec { t_len: 60, d: 2, o: 1, k: 2 };
        let mut params = random_init(&spec, 3, 1.0, None);
        params.w = Array3::from_shape_vec((2, 1, 2), vec![0.0, 1.0, 0.0, 0.5]).unwrap();
        params.c = ndarray::arr2(&[[0.01]]);
        let (_, ds, _) = generate_fhmm(&params, 60, 1, 4, false).unwrap();
        let fold = Fold { train_start: 0, train_end: 40, test_start: 40, test_end: 60 };
        let s1 = score_fold(&ds, &params, &fold, 1e-12).unwrap();
        let swapped = permute_chains(&params, &[1, 0]);
        let s2 = score_fold(&ds, &swapped, &fold, 1e-12).unwrap();
        assert_abs_diff_eq!(s1, s2, epsilon = 1e-9);
    }

    #[test]
    fn generating_model_beats_misspecified_small_model() {
        // d=2 truth scored against a d=1 fit on the same fold
        let spec = ModelSpec { t_len: 240, d: 2, o: 1, k: 2 };
        let mut truth = random_init(&spec, 11, 1.0, None);
        truth.w = Array3::from_shape_vec((2, 1, 2), vec![0.0, 1.0, 0.0, 0.45]).unwrap();
        truth.a_log = Array3::from_shape_vec(
            (2, 2, 2),
            vec![
                0.95f64.ln(),
                0.08f64.ln(),
                0.05f64.ln(),
                0.92f64.ln(),
                0.90f64.ln(),
                0.12f64.ln(),
                0.10f64.ln(),
                0.88f64.ln(),
            ],
        )
        .unwrap();
        truth.c = ndarray::arr2(&[[0.005]]);
        truth.pi = ndarray::arr2(&[[0.5, 0.5], [0.5, 0.5]]);
        let (_, ds, _) = generate_fhmm(&truth, 240, 1, 7, false).unwrap();
        let fold = Fold { train_start: 0, train_end: 160, test_start: 160, test_end: 240 };

        let truth_score = score_fold(&ds, &truth, &fold, 1e-12).unwrap();

        let train = slice_time(&ds, 0, 160);
        let d1_spec = ModelSpec { t_len: 160, d: 1, o: 1, k: 2 };
        let options = FitOptions { em_max_iter: 60, n_restarts: 2, seed: 5, ..Default::default() };
        let d1_fit = fit(&train, &d1_spec, &options).unwrap();
        let d1_score = score_fold(&ds, &d1_fit.params, &fold, 1e-12).unwrap();
        assert!(
            truth_score > d1_score,
            "truth {truth_score} should beat d=1 fit {d1_score}"
        );
    }

    #[test]
    fn cross_validate_shape_contract() {
        let spec = ModelSpec { t_len: 90, d: 1, o: 1, k: 2 };
        let mut truth = random_init(&spec, 2, 1.0, None);
        truth.w = Array3::from_shape_vec((1, 1, 2), vec![0.0, 1.0]).unwrap();
        truth.c = ndarray::arr2(&[[0.02]]);
        let (_, ds, _) = generate_fhmm(&truth, 90, 1, 3, false).unwrap();
        let plan = cv_splits(90, 0.5, 0.4, 2).unwrap();
        let options = FitOptions { em_max_iter: 25, seed: 1, ..Default::default() };
        let results = cross_validate(&ds, &[(1, 2), (2, 2)], &options, &plan).unwrap();
        assert_eq!(results.len(), 2);
        let total: usize = results.iter().map(|r| r.fold_scores.len()).sum();
        assert_eq!(total, 4); // n_splits x grid size
        assert_eq!(results[0].n_params, 6);
        assert_eq!(results[1].n_params, 10);
    }

    #[test]
    fn bootstrap_single_full_draw_equals_plain_fit() {
        let spec = ModelSpec { t_len: 80, d: 1, o: 1, k: 2 };
        let mut truth = random_init(&spec, 6, 1.0, None);
        truth.w = Array3::from_shape_vec((1, 1, 2), vec![0.0, 0.8]).unwrap();
        truth.c = ndarray::arr2(&[[0.02]]);
        let (_, ds, _) = generate_fhmm(&truth, 80, 1, 9, false).unwrap();
        let options = FitOptions { em_max_iter: 40, seed: 13, ..Default::default() };
        let plain = fit(&ds, &spec, &options).unwrap();
        let boot = bootstrap_fit(&ds, &spec, &options, 1, 80, 99).unwrap();
        let mut expect = plain.params;
        expect.w = canonicalize_weights(&expect.w);
        assert_eq!(boot.ensemble[0], expect);
        assert_eq!(boot.starts, vec![0]);
        // deterministic reproduction
        let boot2 = bootstrap_fit(&ds, &spec, &options, 1, 80, 99).unwrap();
        assert_eq!(boot.ensemble, boot2.ensemble);
    }

    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use ndarray::Array3;
}
