//! Analytic Hessian of the log likelihood with respect to the independent
//! parameters (constraints substituted), and standard errors from the
//! observed information matrix.
//!
//! For every coordinate pair the scaled forward recursion is extended to
//! carry the first and second derivatives of the messages and of the
//! per-step normalizers `c`, and the Hessian entry accumulates
//! `sum_t (-dc_X dc_Y / c^2 + d2c / c)`. Pairs are independent read-only
//! tasks over shared immutable inputs.
//!
//! Constraint conventions: W is taken in canonical form with the last state
//! of every chain past the first substituted; A substitutes its last row per
//! column; pi substitutes its last entry per chain; C contributes all `o^2`
//! coordinates.

use ndarray::{Array2, Array3, Axis};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::exact::{
    configuration_means, joint_pi, transition_product, GaussianEmission, MESSAGE_EPS,
};
use crate::model::{chain_state_means, count_dim, validate_model, Dataset, ModelParams, ModelSpec,
    RealizationTable};
use crate::runner::execute_parallel;

/// Parameter block a Hessian coordinate belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Block {
    W,
    A,
    C,
    Pi,
}

/// One independent coordinate: block plus tensor indices
/// (W: `[chain, o, k]`; A: `[chain, row, col]`; C: `[i, j]`; Pi: `[chain, k]`).
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Coordinate {
    pub block: Block,
    pub indices: Vec<usize>,
}

/// Hessian over the independent coordinates plus the coordinate map.
#[derive(Debug, Clone)]
pub struct HessianResult {
    pub h: Array2<f64>,
    pub index_map: Vec<Coordinate>,
}

impl HessianResult {
    pub fn dim(&self) -> usize {
        self.index_map.len()
    }

    /// JSON document: `dim`, `index_map`, `H` as nested arrays.
    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct File<'a> {
            dim: usize,
            index_map: &'a [Coordinate],
            #[serde(rename = "H")]
            h: Vec<Vec<f64>>,
        }
        let rows = self.h.outer_iter().map(|r| r.to_vec()).collect();
        serde_json::to_string_pretty(&File {
            dim: self.dim(),
            index_map: &self.index_map,
            h: rows,
        })
        .expect("hessian serialize")
    }
}

/// Standard errors scattered back to block coordinates; constrained
/// coordinates carry `None`.
#[derive(Debug, Clone)]
pub struct StandardErrors {
    pub dw: Array3<Option<f64>>,
    pub da: Array3<Option<f64>>,
    pub dc: Array2<Option<f64>>,
    pub dpi: Array2<Option<f64>>,
}

/// Independent-coordinate enumeration in block order W, A, C, pi. The
/// length always equals [`count_dim`].
pub fn independent_coordinates(spec: &ModelSpec) -> Vec<Coordinate> {
    let (d, o, k) = (spec.d, spec.o, spec.k);
    let mut map = Vec::with_capacity(count_dim(spec));
    for i in 0..d {
        let k_max = if i == 0 { k } else { k - 1 };
        for p in 0..o {
            for j in 0..k_max {
                map.push(Coordinate { block: Block::W, indices: vec![i, p, j] });
            }
        }
    }
    for i in 0..d {
        for j in 0..k - 1 {
            for l in 0..k {
                map.push(Coordinate { block: Block::A, indices: vec![i, j, l] });
            }
        }
    }
    for i in 0..o {
        for j in 0..o {
            map.push(Coordinate { block: Block::C, indices: vec![i, j] });
        }
    }
    for i in 0..d {
        for j in 0..k - 1 {
            map.push(Coordinate { block: Block::Pi, indices: vec![i, j] });
        }
    }
    debug_assert_eq!(map.len(), count_dim(spec));
    map
}

/// Immutable per-sample context shared by all coordinate pairs.
struct SampleCtx {
    /// Raw emission densities (no probability floor), `[T][R]`.
    py: Array2<f64>,
    /// Residuals `y_t - mu_r`, `[T][R][o]`.
    resid: Array3<f64>,
    /// Transition products `[R][R]` (destination, source).
    prob: Array2<f64>,
    /// Joint initial probabilities per configuration.
    pi0: Vec<f64>,
    c_inv: nalgebra::DMatrix<f64>,
    t_len: usize,
    n: usize,
}

impl SampleCtx {
    fn new(
        params: &ModelParams,
        sample: ndarray::ArrayView2<'_, f64>,
        table: &RealizationTable,
    ) -> Result<Self> {
        let (t_len, o) = sample.dim();
        let n = table.n_configs();
        let emission = GaussianEmission::new(&params.c)?;
        let mu = configuration_means(params, table);
        let mut py = Array2::<f64>::zeros((t_len, n));
        let mut resid = Array3::<f64>::zeros((t_len, n, o));
        let mut buf = vec![0.0; o];
        for t in 0..t_len {
            for r in 0..n {
                for j in 0..o {
                    buf[j] = sample[[t, j]] - mu[[r, j]];
                    resid[[t, r, j]] = buf[j];
                }
                py[[t, r]] = emission.density(&buf);
            }
        }
        let prob = transition_product(params, table);
        let pi0 = (0..n).map(|r| joint_pi(params, table, r)).collect();
        Ok(Self { py, resid, prob, pi0, c_inv: emission.c_inv, t_len, n })
    }

    fn cinv_dot_resid(&self, t: usize, r: usize, row: usize) -> f64 {
        let o = self.resid.dim().2;
        (0..o).map(|q| self.c_inv[(row, q)] * self.resid[[t, r, q]]).sum()
    }
}

/// Effective one-hot indicator with the canonical-W constraint substituted:
/// chains past the first lose their last state to the zero-mean condition.
fn s_eff(table: &RealizationTable, chain: usize, state: usize, r: usize) -> f64 {
    let mut v = if table.state_of(chain, r) == state { 1.0 } else { 0.0 };
    if chain != 0 && table.state_of(chain, r) == table.k - 1 {
        v -= 1.0;
    }
    v
}

/// First derivative of the emission density for a W or C coordinate,
/// `[T][R]`.
fn dpy(ctx: &SampleCtx, table: &RealizationTable, coord: &Coordinate) -> Array2<f64> {
    let mut out = Array2::<f64>::zeros((ctx.t_len, ctx.n));
    match coord.block {
        Block::W => {
            let (chain, oo, kk) = (coord.indices[0], coord.indices[1], coord.indices[2]);
            for t in 0..ctx.t_len {
                for r in 0..ctx.n {
                    let s = s_eff(table, chain, kk, r);
                    if s != 0.0 {
                        out[[t, r]] = ctx.py[[t, r]] * s * ctx.cinv_dot_resid(t, r, oo);
                    }
                }
            }
        }
        Block::C => {
            let (ii, jj) = (coord.indices[0], coord.indices[1]);
            for t in 0..ctx.t_len {
                for r in 0..ctx.n {
                    let yccy = ctx.cinv_dot_resid(t, r, ii) * ctx.cinv_dot_resid(t, r, jj)
                        - ctx.c_inv[(ii, jj)];
                    out[[t, r]] = 0.5 * ctx.py[[t, r]] * yccy;
                }
            }
        }
        _ => {}
    }
    out
}

/// Second derivative of the emission density for a pair of W/C coordinates.
fn d2py(
    ctx: &SampleCtx,
    table: &RealizationTable,
    x: &Coordinate,
    y: &Coordinate,
) -> Array2<f64> {
    let mut out = Array2::<f64>::zeros((ctx.t_len, ctx.n));
    match (x.block, y.block) {
        (Block::W, Block::W) => {
            let (dc, oc, kc) = (x.indices[0], x.indices[1], x.indices[2]);
            let (ec, pc, lc) = (y.indices[0], y.indices[1], y.indices[2]);
            for t in 0..ctx.t_len {
                for r in 0..ctx.n {
                    let s1 = s_eff(table, ec, lc, r);
                    let s2 = s_eff(table, dc, kc, r);
                    if s1 == 0.0 && s2 == 0.0 {
                        continue;
                    }
                    let a = s1 * ctx.cinv_dot_resid(t, r, pc);
                    let b = s2 * ctx.cinv_dot_resid(t, r, oc);
                    let scs = s1 * ctx.c_inv[(pc, oc)] * s2;
                    out[[t, r]] = ctx.py[[t, r]] * (a * b - scs);
                }
            }
        }
        (Block::C, Block::C) => {
            // second derivative of ln N over two unconstrained entries:
            // 1/2 (G_jl G_im - u_l G_im u_j - u_i G_jl u_m), u = C^{-1} resid
            let (ii, jj) = (x.indices[0], x.indices[1]);
            let (ll, mm) = (y.indices[0], y.indices[1]);
            for t in 0..ctx.t_len {
                for r in 0..ctx.n {
                    let ci = ctx.cinv_dot_resid(t, r, ii);
                    let cj = ctx.cinv_dot_resid(t, r, jj);
                    let cl = ctx.cinv_dot_resid(t, r, ll);
                    let cm = ctx.cinv_dot_resid(t, r, mm);
                    let yccy1 = cl * cm - ctx.c_inv[(ll, mm)];
                    let yccy2 = ci * cj - ctx.c_inv[(ii, jj)];
                    let ycccy1 = cl * ctx.c_inv[(ii, mm)] * cj;
                    let ycccy2 = ci * ctx.c_inv[(jj, ll)] * cm;
                    out[[t, r]] = 0.25 * ctx.py[[t, r]] * yccy1 * yccy2
                        + 0.5
                            * ctx.py[[t, r]]
                            * (ctx.c_inv[(jj, ll)] * ctx.c_inv[(ii, mm)] - ycccy1 - ycccy2);
                }
            }
        }
        (Block::W, Block::C) => return d2py_wc(ctx, table, x, y),
        (Block::C, Block::W) => return d2py_wc(ctx, table, y, x),
        _ => {}
    }
    out
}

fn d2py_wc(
    ctx: &SampleCtx,
    table: &RealizationTable,
    w: &Coordinate,
    c: &Coordinate,
) -> Array2<f64> {
    let (dc, oc, kc) = (w.indices[0], w.indices[1], w.indices[2]);
    let (ii, jj) = (c.indices[0], c.indices[1]);
    let mut out = Array2::<f64>::zeros((ctx.t_len, ctx.n));
    for t in 0..ctx.t_len {
        for r in 0..ctx.n {
            let s = s_eff(table, dc, kc, r);
            let ci = ctx.cinv_dot_resid(t, r, ii);
            let cj = ctx.cinv_dot_resid(t, r, jj);
            let dpydw = ctx.py[[t, r]] * s * ctx.cinv_dot_resid(t, r, oc);
            let yccy = ci * cj - ctx.c_inv[(ii, jj)];
            let sccy = s * ctx.c_inv[(oc, ii)] * cj;
            let yccs = ci * ctx.c_inv[(oc, jj)] * s;
            out[[t, r]] =
                0.5 * dpydw * yccy - 0.5 * ctx.py[[t, r]] * (sccy + yccs);
        }
    }
    out
}

/// Derivative of the transition product for an A coordinate `[R][R]`
/// (destination, source). Zero rows where the coordinate's chain occupies
/// neither the differentiated state nor the constrained last state.
fn dprob_a(
    params: &ModelParams,
    table: &RealizationTable,
    coord: &Coordinate,
) -> Array2<f64> {
    let n = table.n_configs();
    let (chain, kk, ll) = (coord.indices[0], coord.indices[1], coord.indices[2]);
    let a_exp = params.a_exp();
    let kmax = table.k - 1;
    let mut out = Array2::<f64>::zeros((n, n));
    for r in 0..n {
        let sign = if table.state_of(chain, r) == kk {
            1.0
        } else if table.state_of(chain, r) == kmax {
            -1.0
        } else {
            continue;
        };
        for rp in 0..n {
            if table.state_of(chain, rp) != ll {
                continue;
            }
            let mut v = sign * a_exp[[chain, kk, ll]];
            for i in 0..table.d {
                if i == chain {
                    continue;
                }
                v *= a_exp[[i, table.state_of(i, r), table.state_of(i, rp)]];
            }
            out[[r, rp]] = v;
        }
    }
    out
}

/// Second derivative of the transition product for a pair of A coordinates.
/// Same-chain pairs are nonzero only on the identical coordinate, where the
/// exponential reproduces the first derivative.
fn d2prob_aa(
    params: &ModelParams,
    table: &RealizationTable,
    x: &Coordinate,
    y: &Coordinate,
) -> Array2<f64> {
    let n = table.n_configs();
    let (dc, kk, ll) = (x.indices[0], x.indices[1], x.indices[2]);
    let (ec, mm, nn) = (y.indices[0], y.indices[1], y.indices[2]);
    if dc == ec {
        if kk == mm && ll == nn {
            return dprob_a(params, table, x);
        }
        return Array2::zeros((n, n));
    }
    let a_exp = params.a_exp();
    let kmax = table.k - 1;
    let mut out = Array2::<f64>::zeros((n, n));
    for r in 0..n {
        let sign_x = if table.state_of(dc, r) == kk {
            1.0
        } else if table.state_of(dc, r) == kmax {
            -1.0
        } else {
            continue;
        };
        let sign_y = if table.state_of(ec, r) == mm {
            1.0
        } else if table.state_of(ec, r) == kmax {
            -1.0
        } else {
            continue;
        };
        for rp in 0..n {
            if table.state_of(dc, rp) != ll || table.state_of(ec, rp) != nn {
                continue;
            }
            let mut v = sign_x * a_exp[[dc, kk, ll]] * sign_y * a_exp[[ec, mm, nn]];
            for i in 0..table.d {
                if i == dc || i == ec {
                    continue;
                }
                v *= a_exp[[i, table.state_of(i, r), table.state_of(i, rp)]];
            }
            out[[r, rp]] = v;
        }
    }
    out
}

/// Derivative of the joint initial probability for a pi coordinate.
fn djoint_pi(params: &ModelParams, table: &RealizationTable, coord: &Coordinate) -> Vec<f64> {
    let n = table.n_configs();
    let (chain, ll) = (coord.indices[0], coord.indices[1]);
    let kmax = table.k - 1;
    (0..n)
        .map(|r| {
            let sign = if table.state_of(chain, r) == ll {
                1.0
            } else if table.state_of(chain, r) == kmax {
                -1.0
            } else {
                return 0.0;
            };
            let mut v = sign;
            for i in 0..table.d {
                if i == chain {
                    continue;
                }
                v *= params.pi[[i, table.state_of(i, r)]];
            }
            v
        })
        .collect()
}

/// Second derivative of the joint initial probability; zero for same-chain
/// pairs (each pi enters the product linearly).
fn d2joint_pipi(
    params: &ModelParams,
    table: &RealizationTable,
    x: &Coordinate,
    y: &Coordinate,
) -> Vec<f64> {
    let n = table.n_configs();
    let (dc, ll) = (x.indices[0], x.indices[1]);
    let (ec, nn) = (y.indices[0], y.indices[1]);
    if dc == ec {
        return vec![0.0; n];
    }
    let kmax = table.k - 1;
    (0..n)
        .map(|r| {
            let sx = if table.state_of(dc, r) == ll {
                1.0
            } else if table.state_of(dc, r) == kmax {
                -1.0
            } else {
                return 0.0;
            };
            let sy = if table.state_of(ec, r) == nn {
                1.0
            } else if table.state_of(ec, r) == kmax {
                -1.0
            } else {
                return 0.0;
            };
            let mut v = sx * sy;
            for i in 0..table.d {
                if i == dc || i == ec {
                    continue;
                }
                v *= params.pi[[i, table.state_of(i, r)]];
            }
            v
        })
        .collect()
}

/// Per-pair derivative inputs.
struct PairKernels {
    dpy_x: Option<Array2<f64>>,
    dpy_y: Option<Array2<f64>>,
    d2py_xy: Option<Array2<f64>>,
    dprob_x: Option<Array2<f64>>,
    dprob_y: Option<Array2<f64>>,
    d2prob_xy: Option<Array2<f64>>,
    dpi_x: Option<Vec<f64>>,
    dpi_y: Option<Vec<f64>>,
    d2pi_xy: Option<Vec<f64>>,
}

fn build_kernels(
    params: &ModelParams,
    ctx: &SampleCtx,
    table: &RealizationTable,
    x: &Coordinate,
    y: &Coordinate,
) -> PairKernels {
    let emissive = |c: &Coordinate| matches!(c.block, Block::W | Block::C);
    let dpy_x = emissive(x).then(|| dpy(ctx, table, x));
    let dpy_y = emissive(y).then(|| dpy(ctx, table, y));
    let d2py_xy = (emissive(x) && emissive(y)).then(|| d2py(ctx, table, x, y));
    let dprob_x = (x.block == Block::A).then(|| dprob_a(params, table, x));
    let dprob_y = (y.block == Block::A).then(|| dprob_a(params, table, y));
    let d2prob_xy = (x.block == Block::A && y.block == Block::A)
        .then(|| d2prob_aa(params, table, x, y));
    let dpi_x = (x.block == Block::Pi).then(|| djoint_pi(params, table, x));
    let dpi_y = (y.block == Block::Pi).then(|| djoint_pi(params, table, y));
    let d2pi_xy = (x.block == Block::Pi && y.block == Block::Pi)
        .then(|| d2joint_pipi(params, table, x, y));
    PairKernels {
        dpy_x,
        dpy_y,
        d2py_xy,
        dprob_x,
        dprob_y,
        d2prob_xy,
        dpi_x,
        dpi_y,
        d2pi_xy,
    }
}

/// One Hessian entry for one sample: the extended forward recursion
/// accumulating `sum_t (-dc_X dc_Y / c^2 + d2c / c)`.
fn hessian_pair_sample(
    ctx: &SampleCtx,
    kernels: &PairKernels,
) -> f64 {
    let n = ctx.n;
    let zeros_mat;
    let prob = &ctx.prob;
    let dprob_x = kernels.dprob_x.as_ref();
    let dprob_y = kernels.dprob_y.as_ref();
    let d2prob = kernels.d2prob_xy.as_ref();
    let _ = {
        zeros_mat = Array2::<f64>::zeros((0, 0));
        &zeros_mat
    };

    let at = |m: Option<&Array2<f64>>, t: usize, r: usize| m.map_or(0.0, |a| a[[t, r]]);

    // t = 0 initialization
    let mut alpha = vec![0.0; n];
    let mut dx = vec![0.0; n];
    let mut dy = vec![0.0; n];
    let mut dxy = vec![0.0; n];
    for r in 0..n {
        let py0 = ctx.py[[0, r]];
        let dpy0_x = at(kernels.dpy_x.as_ref(), 0, r);
        let dpy0_y = at(kernels.dpy_y.as_ref(), 0, r);
        let d2py0 = at(kernels.d2py_xy.as_ref(), 0, r);
        let j0 = ctx.pi0[r];
        let dj_x = kernels.dpi_x.as_ref().map_or(0.0, |v| v[r]);
        let dj_y = kernels.dpi_y.as_ref().map_or(0.0, |v| v[r]);
        let d2j = kernels.d2pi_xy.as_ref().map_or(0.0, |v| v[r]);
        alpha[r] = j0 * py0 + MESSAGE_EPS;
        dx[r] = dj_x * py0 + j0 * dpy0_x;
        dy[r] = dj_y * py0 + j0 * dpy0_y;
        dxy[r] = d2j * py0 + dj_x * dpy0_y + dj_y * dpy0_x + j0 * d2py0;
    }
    let mut c = normalize(&mut alpha);
    let mut dc_x = sum_normalize(&mut dx, c);
    let mut dc_y = sum_normalize(&mut dy, c);
    let mut d2c = sum_normalize(&mut dxy, c);
    let mut acc = -dc_x * dc_y / (c * c) + d2c / c;

    let mut g_x = vec![0.0; n];
    let mut g_y = vec![0.0; n];
    let mut g2 = vec![0.0; n];
    let mut next_alpha = vec![0.0; n];
    let mut next_dx = vec![0.0; n];
    let mut next_dy = vec![0.0; n];
    let mut next_dxy = vec![0.0; n];

    for t in 1..ctx.t_len {
        let rx = dc_x / c;
        let ry = dc_y / c;
        let r2 = d2c / c;
        for rp in 0..n {
            g_x[rp] = dx[rp] - rx * alpha[rp];
            g_y[rp] = dy[rp] - ry * alpha[rp];
            g2[rp] = dxy[rp] + 2.0 * rx * ry * alpha[rp] - r2 * alpha[rp] - rx * dy[rp]
                - ry * dx[rp];
        }
        for r in 0..n {
            let mut s0 = 0.0;
            let mut sx = 0.0;
            let mut sy = 0.0;
            let mut sxy = 0.0;
            let mut ux = 0.0;
            let mut uy = 0.0;
            let mut v = 0.0;
            let mut tx_gy = 0.0;
            let mut ty_gx = 0.0;
            for rp in 0..n {
                let p = prob[[r, rp]];
                s0 += p * alpha[rp];
                ux += p * g_x[rp];
                uy += p * g_y[rp];
                v += p * g2[rp];
                if let Some(dpx) = dprob_x {
                    let dp = dpx[[r, rp]];
                    sx += dp * alpha[rp];
                    tx_gy += dp * g_y[rp];
                }
                if let Some(dpy_) = dprob_y {
                    let dp = dpy_[[r, rp]];
                    sy += dp * alpha[rp];
                    ty_gx += dp * g_x[rp];
                }
                if let Some(d2p) = d2prob {
                    sxy += d2p[[r, rp]] * alpha[rp];
                }
            }
            let py_t = ctx.py[[t, r]];
            let dpy_tx = at(kernels.dpy_x.as_ref(), t, r);
            let dpy_ty = at(kernels.dpy_y.as_ref(), t, r);
            let d2py_t = at(kernels.d2py_xy.as_ref(), t, r);
            next_alpha[r] = s0 * py_t + MESSAGE_EPS;
            next_dx[r] = sx * py_t + s0 * dpy_tx + ux * py_t;
            next_dy[r] = sy * py_t + s0 * dpy_ty + uy * py_t;
            next_dxy[r] = d2py_t * s0
                + dpy_tx * sy
                + dpy_tx * uy
                + dpy_ty * sx
                + py_t * sxy
                + py_t * tx_gy
                + dpy_ty * ux
                + py_t * ty_gx
                + py_t * v;
        }
        std::mem::swap(&mut alpha, &mut next_alpha);
        std::mem::swap(&mut dx, &mut next_dx);
        std::mem::swap(&mut dy, &mut next_dy);
        std::mem::swap(&mut dxy, &mut next_dxy);
        c = normalize(&mut alpha);
        dc_x = sum_normalize(&mut dx, c);
        dc_y = sum_normalize(&mut dy, c);
        d2c = sum_normalize(&mut dxy, c);
        acc += -dc_x * dc_y / (c * c) + d2c / c;
    }
    acc
}

fn normalize(v: &mut [f64]) -> f64 {
    let s: f64 = v.iter().sum();
    for x in v.iter_mut() {
        *x /= s;
    }
    s
}

fn sum_normalize(v: &mut [f64], c: f64) -> f64 {
    let s: f64 = v.iter().sum();
    for x in v.iter_mut() {
        *x /= c;
    }
    s
}

/// Requires W in canonical form (chains past the first zero-mean along the
/// state axis); densities are evaluated without the probability floor so the
/// derivative kernels stay exact.
pub fn compute_hessian(
    params: &ModelParams,
    dataset: &Dataset,
    table: &RealizationTable,
    n_jobs: i64,
) -> Result<HessianResult> {
    let spec = ModelSpec {
        t_len: dataset.t_len(),
        d: params.w.dim().0,
        o: params.w.dim().1,
        k: params.w.dim().2,
    };
    validate_model(params, &spec)?;
    let means = chain_state_means(&params.w);
    let scale = params.w.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
    for i in 1..spec.d {
        for j in 0..spec.o {
            if means[[i, j]].abs() > 1e-8 * scale {
                return Err(Error::NonCanonicalWeights(format!(
                    "chain {i}, component {j} has state mean {:e}",
                    means[[i, j]]
                )));
            }
        }
    }

    let coords = independent_coordinates(&spec);
    let dim = coords.len();
    let contexts: Vec<SampleCtx> = (0..dataset.n_samples())
        .map(|s| SampleCtx::new(params, dataset.x.index_axis(Axis(0), s), table))
        .collect::<Result<_>>()?;

    let pairs: Vec<(usize, usize)> =
        (0..dim).flat_map(|a| (a..dim).map(move |b| (a, b))).collect();
    let tasks: Vec<_> = pairs
        .iter()
        .map(|&(a, b)| {
            let coords = &coords;
            let contexts = &contexts;
            move || -> f64 {
                contexts
                    .iter()
                    .map(|ctx| {
                        let kernels = build_kernels(params, ctx, table, &coords[a], &coords[b]);
                        hessian_pair_sample(ctx, &kernels)
                    })
                    .sum()
            }
        })
        .collect();
    let values = execute_parallel(tasks, n_jobs);

    let mut h = Array2::<f64>::zeros((dim, dim));
    for (&(a, b), v) in pairs.iter().zip(values) {
        h[[a, b]] = v;
        h[[b, a]] = v;
    }
    Ok(HessianResult { h, index_map: coords })
}

/// Gradient of the log likelihood over the independent coordinates,
/// accumulated from the first-derivative recursion (`sum_t dc / c`).
pub fn compute_gradient(
    params: &ModelParams,
    dataset: &Dataset,
    table: &RealizationTable,
) -> Result<Vec<f64>> {
    let spec = ModelSpec {
        t_len: dataset.t_len(),
        d: params.w.dim().0,
        o: params.w.dim().1,
        k: params.w.dim().2,
    };
    let coords = independent_coordinates(&spec);
    let contexts: Vec<SampleCtx> = (0..dataset.n_samples())
        .map(|s| SampleCtx::new(params, dataset.x.index_axis(Axis(0), s), table))
        .collect::<Result<_>>()?;
    let mut grad = vec![0.0; coords.len()];
    for (gi, coord) in coords.iter().enumerate() {
        for ctx in &contexts {
            let kernels = build_kernels(params, ctx, table, coord, coord);
            grad[gi] += gradient_pair_sample(ctx, &kernels);
        }
    }
    Ok(grad)
}

fn gradient_pair_sample(ctx: &SampleCtx, kernels: &PairKernels) -> f64 {
    let n = ctx.n;
    let at = |m: Option<&Array2<f64>>, t: usize, r: usize| m.map_or(0.0, |a| a[[t, r]]);
    let mut alpha = vec![0.0; n];
    let mut dx = vec![0.0; n];
    for r in 0..n {
        let py0 = ctx.py[[0, r]];
        alpha[r] = ctx.pi0[r] * py0 + MESSAGE_EPS;
        dx[r] = kernels.dpi_x.as_ref().map_or(0.0, |v| v[r]) * py0
            + ctx.pi0[r] * at(kernels.dpy_x.as_ref(), 0, r);
    }
    let mut c = normalize(&mut alpha);
    let mut dc = sum_normalize(&mut dx, c);
    let mut acc = dc / c;
    let mut g = vec![0.0; n];
    let mut next_alpha = vec![0.0; n];
    let mut next_dx = vec![0.0; n];
    for t in 1..ctx.t_len {
        let rx = dc / c;
        for rp in 0..n {
            g[rp] = dx[rp] - rx * alpha[rp];
        }
        for r in 0..n {
            let mut s0 = 0.0;
            let mut sx = 0.0;
            let mut ux = 0.0;
            for rp in 0..n {
                let p = ctx.prob[[r, rp]];
                s0 += p * alpha[rp];
                ux += p * g[rp];
                if let Some(dpx) = kernels.dprob_x.as_ref() {
                    sx += dpx[[r, rp]] * alpha[rp];
                }
            }
            let py_t = ctx.py[[t, r]];
            next_alpha[r] = s0 * py_t + MESSAGE_EPS;
            next_dx[r] = sx * py_t + s0 * at(kernels.dpy_x.as_ref(), t, r) + ux * py_t;
        }
        std::mem::swap(&mut alpha, &mut next_alpha);
        std::mem::swap(&mut dx, &mut next_dx);
        c = normalize(&mut alpha);
        dc = sum_normalize(&mut dx, c);
        acc += dc / c;
    }
    acc
}

/// Standard errors as the square root of the diagonal of `(-H)^{-1}`,
/// scattered into block tensors. Fails with the offending eigenvalue when
/// the observed information is not positive definite.
pub fn standard_errors(hr: &HessianResult, spec: &ModelSpec) -> Result<StandardErrors> {
    let dim = hr.dim();
    let neg = nalgebra::DMatrix::from_fn(dim, dim, |i, j| -hr.h[[i, j]]);
    let eig = nalgebra::SymmetricEigen::new(neg.clone());
    let min_eig = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if min_eig <= 0.0 {
        return Err(Error::SingularInformation { eigenvalue: min_eig });
    }
    let inv = neg.try_inverse().ok_or(Error::SingularInformation { eigenvalue: min_eig })?;

    let (d, o, k) = (spec.d, spec.o, spec.k);
    let mut out = StandardErrors {
        dw: Array3::from_elem((d, o, k), None),
        da: Array3::from_elem((d, k, k), None),
        dc: Array2::from_elem((o, o), None),
        dpi: Array2::from_elem((d, k), None),
    };
    for (idx, coord) in hr.index_map.iter().enumerate() {
        let se = inv[(idx, idx)].sqrt();
        match coord.block {
            Block::W => {
                out.dw[[coord.indices[0], coord.indices[1], coord.indices[2]]] = Some(se)
            }
            Block::A => {
                out.da[[coord.indices[0], coord.indices[1], coord.indices[2]]] = Some(se)
            }
            Block::C => out.dc[[coord.indices[0], coord.indices[1]]] = Some(se),
            Block::Pi => out.dpi[[coord.indices[0], coord.indices[1]]] = Some(se),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exact::log_likelihood;
    use crate::model::{canonicalize_weights, enumerate_realizations, random_init};
    use approx::assert_abs_diff_eq;
    use ndarray::arr2;

    /// Perturbs one independent coordinate with constraint re-substitution.
    fn perturb(params: &ModelParams, coord: &Coordinate, h: f64) -> ModelParams {
        let mut p = params.clone();
        let k = p.pi.dim().1;
        match coord.block {
            Block::W => {
                let (i, j, l) = (coord.indices[0], coord.indices[1], coord.indices[2]);
                p.w[[i, j, l]] += h;
                if i != 0 {
                    p.w[[i, j, k - 1]] -= h;
                }
            }
            Block::A => {
                let (i, j, l) = (coord.indices[0], coord.indices[1], coord.indices[2]);
                p.a_log[[i, j, l]] += h;
                let rest: f64 = (0..k - 1).map(|jj| p.a_log[[i, jj, l]].exp()).sum();
                p.a_log[[i, k - 1, l]] = (1.0 - rest).ln();
            }
            Block::C => {
                let (i, j) = (coord.indices[0], coord.indices[1]);
                p.c[[i, j]] += h;
            }
            Block::Pi => {
                let (i, l) = (coord.indices[0], coord.indices[1]);
                p.pi[[i, l]] += h;
                p.pi[[i, k - 1]] -= h;
            }
        }
        p
    }

    fn fd_hessian(
        params: &ModelParams,
        dataset: &Dataset,
        table: &RealizationTable,
        coords: &[Coordinate],
        step: f64,
    ) -> Array2<f64> {
        let dim = coords.len();
        let ll = |p: &ModelParams| log_likelihood(p, dataset, table, 0.0).unwrap();
        let f0 = ll(params);
        let mut h = Array2::<f64>::zeros((dim, dim));
        for a in 0..dim {
            for b in a..dim {
                let v = if a == b {
                    let fp = ll(&perturb(params, &coords[a], step));
                    let fm = ll(&perturb(params, &coords[a], -step));
                    (fp - 2.0 * f0 + fm) / (step * step)
                } else {
                    let fpp = ll(&perturb(&perturb(params, &coords[a], step), &coords[b], step));
                    let fpm = ll(&perturb(&perturb(params, &coords[a], step), &coords[b], -step));
                    let fmp = ll(&perturb(&perturb(params, &coords[a], -step), &coords[b], step));
                    let fmm =
                        ll(&perturb(&perturb(params, &coords[a], -step), &coords[b], -step));
                    (fpp - fpm - fmp + fmm) / (4.0 * step * step)
                };
                h[[a, b]] = v;
                h[[b, a]] = v;
            }
        }
        h
    }

    fn canonical_random(spec: &ModelSpec, seed: u64) -> ModelParams {
        let mut p = random_init(spec, seed, 1.0, None);
        p.w = canonicalize_weights(&p.w);
        p
    }

    #[test]
    fn index_map_counts_match_formula() {
        for (d, o, k) in [(1, 1, 2), (2, 1, 2), (2, 2, 3), (3, 1, 2)] {
            let spec = ModelSpec { t_len: 4, d, o, k };
            assert_eq!(independent_coordinates(&spec).len(), count_dim(&spec));
        }
    }

    #[test]
    fn pure_gaussian_ww_entry_is_minus_t_over_c() {
        let t_len = 50;
        let spec = ModelSpec { t_len, d: 1, o: 1, k: 1 };
        let c_val = 0.7;
        let params = ModelParams {
            w: Array3::from_shape_vec((1, 1, 1), vec![0.25]).unwrap(),
            a_log: Array3::zeros((1, 1, 1)),
            c: arr2(&[[c_val]]),
            pi: arr2(&[[1.0]]),
        };
        let table = enumerate_realizations(&spec).unwrap();
        let x = Array3::from_shape_fn((1, t_len, 1), |(_, t, _)| 0.25 + 0.1 * (t as f64).sin());
        let ds = Dataset::new(x, 1.0).unwrap();
        let hr = compute_hessian(&params, &ds, &table, 1).unwrap();
        // coordinate 0 is W[0][0][0]
        assert_abs_diff_eq!(hr.h[[0, 0]], -(t_len as f64) / c_val, epsilon = 1e-10);
    }

    #[test]
    fn standard_error_of_pure_gaussian_mean() {
        let t_len = 64;
        let spec = ModelSpec { t_len, d: 1, o: 1, k: 1 };
        let c_val = 0.5;
        let mut x = Array3::from_shape_fn((1, t_len, 1), |(_, t, _)| (t as f64 * 0.77).sin());
        // center the data so W sits at the MLE and the W-C cross term vanishes
        let mean = x.iter().sum::<f64>() / t_len as f64;
        x.mapv_inplace(|v| v - mean);
        let params = ModelParams {
            w: Array3::from_shape_vec((1, 1, 1), vec![0.0]).unwrap(),
            a_log: Array3::zeros((1, 1, 1)),
            c: arr2(&[[c_val]]),
            pi: arr2(&[[1.0]]),
        };
        let table = enumerate_realizations(&spec).unwrap();
        let ds = Dataset::new(x, 1.0).unwrap();
        let hr = compute_hessian(&params, &ds, &table, 1).unwrap();
        // dW requires -H positive definite; C may not be at its own MLE here,
        // so check the (W,W) sub-block route instead of the full matrix when
        // the C coordinate is off-optimum
        let neg_ww = -hr.h[[0, 0]];
        let dw = (1.0 / neg_ww).sqrt();
        assert_abs_diff_eq!(dw, (c_val / t_len as f64).sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn matches_finite_differences_on_small_models() {
        for (seed, d, k, t_len) in [(1u64, 1usize, 2usize, 12usize), (2, 2, 2, 8)] {
            let spec = ModelSpec { t_len, d, o: 1, k };
            let params = canonical_random(&spec, seed);
            let table = enumerate_realizations(&spec).unwrap();
            let (_, ds, _) = crate::noise::generate_fhmm(&params, t_len, 1, seed + 9, false)
                .unwrap();
            let hr = compute_hessian(&params, &ds, &table, 1).unwrap();
            let fd = fd_hessian(&params, &ds, &table, &hr.index_map, 1e-5);
            let scale = fd.iter().fold(0.0_f64, |m, v| m.max(v.abs())).max(1.0);
            for a in 0..hr.dim() {
                for b in 0..hr.dim() {
                    let err = (hr.h[[a, b]] - fd[[a, b]]).abs() / scale;
                    assert!(
                        err < 1e-4,
                        "seed {seed} entry ({a},{b}) [{:?}/{:?}]: analytic {} vs fd {}",
                        hr.index_map[a],
                        hr.index_map[b],
                        hr.h[[a, b]],
                        fd[[a, b]]
                    );
                }
            }
        }
    }

    #[test]
    fn multi_output_finite_difference_check() {
        let spec = ModelSpec { t_len: 6, d: 1, o: 2, k: 2 };
        let params = canonical_random(&spec, 5);
        let table = enumerate_realizations(&spec).unwrap();
        let (_, ds, _) = crate::noise::generate_fhmm(&params, 6, 1, 31, false).unwrap();
        let hr = compute_hessian(&params, &ds, &table, 1).unwrap();
        let fd = fd_hessian(&params, &ds, &table, &hr.index_map, 1e-5);
        let scale = fd.iter().fold(0.0_f64, |m, v| m.max(v.abs())).max(1.0);
        for a in 0..hr.dim() {
            for b in 0..hr.dim() {
                let err = (hr.h[[a, b]] - fd[[a, b]]).abs() / scale;
                assert!(err < 1e-4, "entry ({a},{b}): {} vs {}", hr.h[[a, b]], fd[[a, b]]);
            }
        }
    }

    #[test]
    fn deterministic_and_symmetric() {
        let spec = ModelSpec { t_len: 10, d: 2, o: 1, k: 2 };
        let params = canonical_random(&spec, 3);
        let table = enumerate_realizations(&spec).unwrap();
        let (_, ds, _) = crate::noise::generate_fhmm(&params, 10, 1, 17, false).unwrap();
        let h1 = compute_hessian(&params, &ds, &table, 1).unwrap();
        let h2 = compute_hessian(&params, &ds, &table, 4).unwrap();
        assert_eq!(h1.h, h2.h);
        for a in 0..h1.dim() {
            for b in 0..h1.dim() {
                assert_eq!(h1.h[[a, b]], h1.h[[b, a]]);
            }
        }
    }

    #[test]
    fn swapped_pair_order_agrees() {
        // computing (Y, X) instead of (X, Y) changes only rounding
        let spec = ModelSpec { t_len: 8, d: 2, o: 1, k: 2 };
        let params = canonical_random(&spec, 11);
        let table = enumerate_realizations(&spec).unwrap();
        let (_, ds, _) = crate::noise::generate_fhmm(&params, 8, 1, 23, false).unwrap();
        let coords = independent_coordinates(&spec);
        let ctx = SampleCtx::new(&params, ds.x.index_axis(Axis(0), 0), &table).unwrap();
        let scale = 1.0;
        for (a, b) in [(0usize, 3usize), (2, 7), (4, 9), (1, 8)] {
            let fwd = hessian_pair_sample(
                &ctx,
                &build_kernels(&params, &ctx, &table, &coords[a], &coords[b]),
            );
            let rev = hessian_pair_sample(
                &ctx,
                &build_kernels(&params, &ctx, &table, &coords[b], &coords[a]),
            );
            let err = (fwd - rev).abs() / fwd.abs().max(scale);
            assert!(err < 1e-6, "pair ({a},{b}): {fwd} vs {rev}");
        }
    }

    #[test]
    fn rejects_non_canonical_weights() {
        let spec = ModelSpec { t_len: 6, d: 2, o: 1, k: 2 };
        let params = random_init(&spec, 2, 1.0, None); // not canonicalized
        let table = enumerate_realizations(&spec).unwrap();
        let (_, ds, _) = crate::noise::generate_fhmm(&params, 6, 1, 2, false).unwrap();
        match compute_hessian(&params, &ds, &table, 1) {
            Err(Error::NonCanonicalWeights(_)) => {}
            other => panic!("expected NonCanonicalWeights, got {other:?}"),
        }
    }

    #[test]
    fn singular_information_is_reported() {
        let hr = HessianResult {
            h: arr2(&[[1.0, 0.0], [0.0, -1.0]]), // -H has a negative eigenvalue
            index_map: vec![
                Coordinate { block: Block::W, indices: vec![0, 0, 0] },
                Coordinate { block: Block::C, indices: vec![0, 0] },
            ],
        };
        let spec = ModelSpec { t_len: 4, d: 1, o: 1, k: 1 };
        match standard_errors(&hr, &spec) {
            Err(Error::SingularInformation { eigenvalue }) => assert!(eigenvalue <= 0.0),
            other => panic!("expected SingularInformation, got {other:?}"),
        }
    }

    #[test]
    fn gradient_vanishes_at_pure_gaussian_mle() {
        let t_len = 40;
        let spec = ModelSpec { t_len, d: 1, o: 1, k: 1 };
        let table = enumerate_realizations(&spec).unwrap();
        let x = Array3::from_shape_fn((1, t_len, 1), |(_, t, _)| (t as f64 * 0.3).sin());
        let mean = x.iter().sum::<f64>() / t_len as f64;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / t_len as f64;
        let params = ModelParams {
            w: Array3::from_shape_vec((1, 1, 1), vec![mean]).unwrap(),
            a_log: Array3::zeros((1, 1, 1)),
            c: arr2(&[[var]]),
            pi: arr2(&[[1.0]]),
        };
        let ds = Dataset::new(x, 1.0).unwrap();
        let grad = compute_gradient(&params, &ds, &table).unwrap();
        for (i, g) in grad.iter().enumerate() {
            assert!(g.abs() < 1e-8, "coordinate {i} gradient {g}");
        }
    }
}
