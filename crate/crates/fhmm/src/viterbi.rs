//! Most-probable joint hidden trajectory for a fitted model.
//!
//! The recursion mirrors the standard single-chain algorithm with the
//! transition probability replaced by the product over chains. Delta rows are
//! normalized per step, so the returned score is meaningful for ranking
//! trajectories, not as an absolute probability. Argmax ties break toward the
//! lowest configuration index.

use ndarray::{Array2, Array3, ArrayView2};

use crate::error::Result;
use crate::exact::{emission_probs, transition_product, joint_pi, MESSAGE_EPS};
use crate::model::{ModelParams, RealizationTable};

/// Decodes the most probable joint trajectory. Returns the one-hot state
/// tensor `[T][d][k]` and the normalized terminal maximum.
pub fn viterbi_decode(
    params: &ModelParams,
    sample: ArrayView2<'_, f64>,
    table: &RealizationTable,
    floor: f64,
) -> Result<(Array3<f64>, f64)> {
    let py = emission_probs(params, sample, table, floor)?;
    let (t_len, n) = py.dim();
    let trans = transition_product(params, table);

    let mut delta = Array2::<f64>::zeros((t_len, n));
    let mut psi = Array2::<usize>::zeros((t_len, n));

    for r in 0..n {
        delta[[0, r]] = joint_pi(params, table, r) * py[[0, r]] + MESSAGE_EPS;
    }
    let sum0: f64 = delta.row(0).sum();
    delta.row_mut(0).mapv_inplace(|v| v / sum0);

    for t in 1..t_len {
        for j in 0..n {
            let mut best = f64::NEG_INFINITY;
            let mut best_r = 0;
            for r in 0..n {
                let v = delta[[t - 1, r]] * trans[[j, r]];
                if v > best {
                    best = v;
                    best_r = r;
                }
            }
            delta[[t, j]] = best * py[[t, j]] + MESSAGE_EPS;
            psi[[t, j]] = best_r;
        }
        let sum: f64 = delta.row(t).sum();
        delta.row_mut(t).mapv_inplace(|v| v / sum);
    }

    let mut p_star = f64::NEG_INFINITY;
    let mut q = vec![0usize; t_len];
    for r in 0..n {
        if delta[[t_len - 1, r]] > p_star {
            p_star = delta[[t_len - 1, r]];
            q[t_len - 1] = r;
        }
    }
    for t in (0..t_len - 1).rev() {
        q[t] = psi[[t + 1, q[t + 1]]];
    }

    let mut states = Array3::<f64>::zeros((t_len, table.d, table.k));
    for t in 0..t_len {
        for i in 0..table.d {
            states[[t, i, table.state_of(i, q[t])]] = 1.0;
        }
    }
    Ok((states, p_star))
}

/// Configuration index trajectory from a one-hot state tensor.
pub fn states_to_configs(states: &Array3<f64>, _table: &RealizationTable) -> Vec<usize> {
    let (t_len, d, k) = states.dim();
    (0..t_len)
        .map(|t| {
            let mut r = 0;
            for i in 0..d {
                let s = (0..k).find(|&j| states[[t, i, j]] > 0.5).expect("one-hot");
                r = r * k + s;
            }
            r
        })
        .collect()
}

/// Log probability of an explicit configuration path (initialization,
/// transitions, emissions). Used for ranking decoded trajectories.
pub fn path_log_probability(
    params: &ModelParams,
    sample: ArrayView2<'_, f64>,
    table: &RealizationTable,
    path: &[usize],
) -> Result<f64> {
    let py = emission_probs(params, sample, table, 0.0)?;
    let trans = transition_product(params, table);
    let mut lp = joint_pi(params, table, path[0]).max(f64::MIN_POSITIVE).ln()
        + py[[0, path[0]]].max(f64::MIN_POSITIVE).ln();
    for t in 1..path.len() {
        lp += trans[[path[t], path[t - 1]]].max(f64::MIN_POSITIVE).ln()
            + py[[t, path[t]]].max(f64::MIN_POSITIVE).ln();
    }
    Ok(lp)
}
