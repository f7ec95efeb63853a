use log::{debug, warn};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::engine::{evaluate, score_residuals, Design, RiskIndex, TermLevels};
use super::{FrailtyFit, Level, RandomEffectEstimate, RandomEffectSpec};
use crate::data::Dataset;
use crate::error::{Error, Result};

/// Standardized coefficients above this size indicate a monotone likelihood.
pub const MONOTONE_LIMIT: f64 = 15.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThetaSearch {
    /// Maximize the Laplace-approximated profile likelihood.
    Profile,
    /// Hold variances fixed, one per term.
    Fixed(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FrailtyOptions {
    pub theta: ThetaSearch,
    pub theta_lower: f64,
    pub theta_upper: f64,
    /// Golden-section tolerance on log variance.
    pub theta_tol: f64,
    /// Coordinate sweeps when there are two terms.
    pub sweeps: usize,
    pub max_iter: usize,
    pub rel_tol: f64,
    /// Terms with more levels than this use the diagonal approximation.
    pub dense_limit: usize,
}

impl Default for FrailtyOptions {
    fn default() -> Self {
        FrailtyOptions {
            theta: ThetaSearch::Profile,
            theta_lower: 1e-8,
            theta_upper: 10.0,
            theta_tol: 1e-4,
            sweeps: 3,
            max_iter: 50,
            rel_tol: 1e-9,
            dense_limit: 300,
        }
    }
}

struct Scaling {
    sd: Vec<f64>,
}

/// Centers and scales covariates; errors on missing or constant columns.
fn standardized(data: &Dataset) -> Result<(Vec<f64>, Scaling)> {
    data.require_complete()?;
    let (n, p) = (data.len(), data.p());
    let mut mean = vec![0.0; p];
    for r in data.rows() {
        for (m, x) in mean.iter_mut().zip(&r.covariates) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; p];
    for r in data.rows() {
        for j in 0..p {
            var[j] += (r.covariates[j] - mean[j]).powi(2);
        }
    }
    let sd: Vec<f64> = var.iter().map(|v| (v / n as f64).sqrt()).collect();
    for j in 0..p {
        if !(sd[j] > 1e-12 * mean[j].abs().max(1.0)) {
            return Err(Error::ConstantCovariate(data.covariate_names()[j].clone()));
        }
    }
    let mut z = Vec::with_capacity(n * p);
    for r in data.rows() {
        for j in 0..p {
            z.push((r.covariates[j] - mean[j]) / sd[j]);
        }
    }
    Ok((z, Scaling { sd }))
}

pub(crate) fn raw_design(data: &Dataset, offsets: Vec<f64>) -> Result<Design> {
    data.require_complete()?;
    let z = data
        .rows()
        .iter()
        .flat_map(|r| r.covariates.iter().copied())
        .collect();
    Ok(Design::new(z, data.p(), RiskIndex::new(data)?, offsets, vec![], vec![]))
}

fn term_levels(data: &Dataset, level: Level) -> TermLevels {
    match level {
        Level::Level1 => TermLevels {
            ids: data.level1_ids().to_vec(),
            index: data.level1_index(),
        },
        Level::Level2 => TermLevels {
            ids: data.level2_ids().to_vec(),
            index: data.level2_index(),
        },
    }
}

/// Penalty variance per dense and sparse term.
struct Penalty {
    dense: Vec<f64>,
    sparse: Vec<f64>,
}

struct State {
    a: Vec<f64>,
    c: Vec<f64>,
}

struct Point {
    ppl: f64,
    loglik: f64,
    grad_a: DVector<f64>,
    grad_c: Vec<f64>,
    h_aa: DMatrix<f64>,
    h_ac: DMatrix<f64>,
    d: Vec<f64>,
}

fn penalized_point(design: &Design, pen: &Penalty, st: &State) -> Result<Point> {
    let ev = evaluate(design, &st.a, &st.c, true)?;
    let info = ev.info.expect("requested");
    let mut ppl = ev.loglik;
    let mut grad_a = ev.grad_a;
    let mut grad_c = ev.grad_c;
    let mut h_aa = info.aa;
    let mut d = info.cc_diag;
    for (t, term) in design.dense.iter().enumerate() {
        let s = design.dense_start[t];
        let th = pen.dense[t];
        for g in s..s + term.n_levels() {
            ppl -= st.a[g] * st.a[g] / (2.0 * th);
            grad_a[g] -= st.a[g] / th;
            h_aa[(g, g)] += 1.0 / th;
        }
    }
    for (t, term) in design.sparse.iter().enumerate() {
        let s = design.sparse_start[t];
        let th = pen.sparse[t];
        for g in s..s + term.n_levels() {
            ppl -= st.c[g] * st.c[g] / (2.0 * th);
            grad_c[g] -= st.c[g] / th;
            d[g] += 1.0 / th;
        }
    }
    Ok(Point {
        ppl,
        loglik: ev.loglik,
        grad_a,
        grad_c,
        h_aa,
        h_ac: info.ac,
        d,
    })
}

/// Schur complement of the sparse diagonal block.
fn schur(pt: &Point) -> Result<DMatrix<f64>> {
    if pt.d.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::Singular);
    }
    let mut s = pt.h_aa.clone();
    if !pt.d.is_empty() {
        let mut scaled = pt.h_ac.clone();
        for (k, dk) in pt.d.iter().enumerate() {
            scaled.column_mut(k).scale_mut(1.0 / dk);
        }
        s -= &scaled * pt.h_ac.transpose();
    }
    Ok(s)
}

fn newton_step(pt: &Point) -> Result<(DVector<f64>, Vec<f64>)> {
    let s = schur(pt)?;
    let mut rhs = pt.grad_a.clone();
    for (k, dk) in pt.d.iter().enumerate() {
        rhs.axpy(-pt.grad_c[k] / dk, &pt.h_ac.column(k), 1.0);
    }
    let chol = s.cholesky().ok_or(Error::Singular)?;
    let da = chol.solve(&rhs);
    let dc = (0..pt.d.len())
        .map(|k| (pt.grad_c[k] - pt.h_ac.column(k).dot(&da)) / pt.d[k])
        .collect();
    Ok((da, dc))
}

struct Inner {
    point: Point,
    iterations: usize,
}

fn maximize(design: &Design, pen: &Penalty, st: &mut State, max_iter: usize, rel_tol: f64) -> Result<Inner> {
    let mut cur = penalized_point(design, pen, st)?;
    let mut iterations = 0;
    loop {
        if iterations >= max_iter {
            let mut last = st.a.clone();
            last.extend(&st.c);
            return Err(Error::NonConvergence {
                iterations,
                last,
            });
        }
        iterations += 1;
        let (da, dc) = newton_step(&cur)?;
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let cand = State {
                a: st.a.iter().zip(da.iter()).map(|(x, d)| x + t * d).collect(),
                c: st.c.iter().zip(&dc).map(|(x, d)| x + t * d).collect(),
            };
            match penalized_point(design, pen, &cand) {
                Ok(pt) if pt.ppl >= cur.ppl - 1e-12 * cur.ppl.abs() => {
                    accepted = Some((cand, pt));
                    break;
                }
                Ok(_) | Err(Error::NonFiniteLinearPredictor) => t *= 0.5,
                Err(e) => return Err(e),
            }
        }
        let Some((cand, pt)) = accepted else {
            // no ascent possible along the Newton direction
            return Ok(Inner {
                point: cur,
                iterations,
            });
        };
        let change = (pt.ppl - cur.ppl).abs() / cur.ppl.abs().max(1e-300);
        *st = cand;
        cur = pt;
        if change < rel_tol {
            return Ok(Inner {
                point: cur,
                iterations,
            });
        }
    }
}

/// Covariance of the fixed effects on the standardized scale.
fn fixed_effect_cov(pt: &Point, p: usize) -> Result<DMatrix<f64>> {
    let s = schur(pt)?;
    let inv = s.cholesky().ok_or(Error::Singular)?.inverse();
    Ok(inv.view((0, 0), (p, p)).into_owned())
}

fn unscale_cov(cov: &DMatrix<f64>, sd: &[f64]) -> Vec<Vec<f64>> {
    let p = sd.len();
    (0..p)
        .map(|i| (0..p).map(|j| cov[(i, j)] / (sd[i] * sd[j])).collect())
        .collect()
}

/// Flags a coefficient beyond the limit, or a large one whose model-based
/// standard error exceeds it (information collapsing toward zero).
fn monotone(beta_std: &[f64], cov_std: &DMatrix<f64>) -> bool {
    let flag = beta_std.iter().enumerate().any(|(j, b)| {
        b.abs() > MONOTONE_LIMIT || (b.abs() > 5.0 && cov_std[(j, j)].max(0.0).sqrt() > b.abs())
    });
    if flag {
        warn!("monotone likelihood suspected: a standardized coefficient exceeds {MONOTONE_LIMIT}");
    }
    flag
}

fn init_state(init: Option<&[f64]>, scaling: &Scaling, q: usize, nc: usize) -> Result<State> {
    let p = scaling.sd.len();
    let mut a = vec![0.0; q];
    if let Some(b) = init {
        if b.len() != p {
            return Err(Error::Validation(format!(
                "initial coefficients have length {}, expected {p}",
                b.len()
            )));
        }
        for j in 0..p {
            a[j] = b[j] * scaling.sd[j];
        }
    }
    Ok(State { a, c: vec![0.0; nc] })
}

/// Fixed-effects Cox model fitted by Newton iterations. With `robust`, the
/// covariance is the sandwich estimator with score residuals summed within
/// groups at that level.
pub fn fit_cox(data: &Dataset, robust: Option<Level>) -> Result<FrailtyFit> {
    fit_cox_with(data, robust, None, &FrailtyOptions::default())
}

pub fn fit_cox_with(
    data: &Dataset,
    robust: Option<Level>,
    init: Option<&[f64]>,
    opts: &FrailtyOptions,
) -> Result<FrailtyFit> {
    let (z, scaling) = standardized(data)?;
    let p = data.p();
    let design = Design::new(z, p, RiskIndex::new(data)?, vec![0.0; data.len()], vec![], vec![]);
    let mut st = init_state(init, &scaling, p, 0)?;
    let pen = Penalty {
        dense: vec![],
        sparse: vec![],
    };
    let inner = maximize(&design, &pen, &mut st, opts.max_iter, opts.rel_tol)?;
    let mut cov = fixed_effect_cov(&inner.point, p)?;
    let monotone_likelihood = monotone(&st.a, &cov);
    if let Some(level) = robust {
        let resid = score_residuals(&design, &st.a, &st.c)?;
        let groups = term_levels(data, level);
        let mut sums = vec![DVector::<f64>::zeros(p); groups.n_levels()];
        for (r, u) in resid.iter().enumerate() {
            sums[groups.index[r]] += u;
        }
        let mut meat = DMatrix::<f64>::zeros(p, p);
        for u in &sums {
            meat += u * u.transpose();
        }
        cov = &cov * meat * &cov;
    }
    let beta_hat: Vec<f64> = (0..p).map(|j| st.a[j] / scaling.sd[j]).collect();
    let beta_cov = unscale_cov(&cov, &scaling.sd);
    Ok(FrailtyFit {
        covariate_names: data.covariate_names().to_vec(),
        std_err: (0..p).map(|j| beta_cov[j][j].max(0.0).sqrt()).collect(),
        beta_hat,
        beta_cov,
        random_effects: vec![],
        theta_hat: vec![],
        loglik: inner.point.ppl,
        partial_loglik: inner.point.loglik,
        profile_loglik: None,
        converged: true,
        iterations: inner.iterations,
        degenerate_random_effect: false,
        monotone_likelihood,
        robust,
        training_level1: data.level1_ids().iter().map(|s| s.to_string()).collect(),
    })
}

struct FrailtyProblem<'d> {
    design: Design,
    /// Term order of `spec` mapped to (is_dense, position).
    layout: Vec<(bool, usize)>,
    levels: Vec<usize>,
    data: &'d Dataset,
}

impl FrailtyProblem<'_> {
    fn penalty(&self, thetas: &[f64]) -> Penalty {
        let mut pen = Penalty {
            dense: vec![0.0; self.design.dense.len()],
            sparse: vec![0.0; self.design.sparse.len()],
        };
        for (&(dense, pos), &th) in self.layout.iter().zip(thetas) {
            if dense {
                pen.dense[pos] = th;
            } else {
                pen.sparse[pos] = th;
            }
        }
        pen
    }

    /// Laplace-approximated log marginal likelihood at the inner optimum.
    fn laplace(&self, pt: &Point, thetas: &[f64]) -> Result<f64> {
        let p = self.design.p;
        let q = self.design.q;
        let mut logdet: f64 = pt.d.iter().map(|v| v.ln()).sum();
        if q > p {
            let mut hdd = pt.h_aa.view((p, p), (q - p, q - p)).into_owned();
            if !pt.d.is_empty() {
                let hdc = pt.h_ac.rows(p, q - p).into_owned();
                let mut scaled = hdc.clone();
                for (k, dk) in pt.d.iter().enumerate() {
                    scaled.column_mut(k).scale_mut(1.0 / dk);
                }
                hdd -= scaled * hdc.transpose();
            }
            let chol = hdd.cholesky().ok_or(Error::Singular)?;
            logdet += 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        }
        let prior: f64 = thetas
            .iter()
            .zip(&self.levels)
            .map(|(th, &n)| 0.5 * n as f64 * th.ln())
            .sum();
        Ok(pt.ppl - prior - 0.5 * logdet)
    }
}

/// Golden-section maximization of `f` on `[lo, hi]`, with the end points
/// checked last.
fn golden_max<F: FnMut(f64) -> Result<f64>>(lo: f64, hi: f64, tol: f64, mut f: F) -> Result<(f64, f64)> {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (lo, hi);
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = f(c)?;
    let mut fd = f(d)?;
    while b - a > tol {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d)?;
        }
    }
    let (mut x, mut fx) = if fc >= fd { (c, fc) } else { (d, fd) };
    for end in [lo, hi] {
        let fe = f(end)?;
        if fe > fx {
            x = end;
            fx = fe;
        }
    }
    Ok((x, fx))
}

/// Mixed-effects Andersen-Gill model by penalized partial likelihood.
/// `init` gives starting fixed effects on the original covariate scale.
pub fn fit_frailty(
    data: &Dataset,
    spec: &RandomEffectSpec,
    init: Option<&[f64]>,
    opts: &FrailtyOptions,
) -> Result<FrailtyFit> {
    spec.validate()?;
    let (z, scaling) = standardized(data)?;
    let p = data.p();
    let mut dense = Vec::new();
    let mut sparse = Vec::new();
    let mut layout = Vec::new();
    let mut levels = Vec::new();
    for term in &spec.terms {
        let tl = term_levels(data, term.level);
        levels.push(tl.n_levels());
        if tl.n_levels() <= opts.dense_limit {
            layout.push((true, dense.len()));
            dense.push(tl);
        } else {
            layout.push((false, sparse.len()));
            sparse.push(tl);
        }
    }
    let design = Design::new(z, p, RiskIndex::new(data)?, vec![0.0; data.len()], dense, sparse);
    let problem = FrailtyProblem {
        design,
        layout,
        levels,
        data,
    };
    let mut st = init_state(init, &scaling, problem.design.q, problem.design.nc)?;
    let clamp = |t: f64| t.clamp(opts.theta_lower, opts.theta_upper);

    let mut total_iterations = 0;
    let (thetas, profile) = match &opts.theta {
        ThetaSearch::Fixed(values) => {
            if values.len() != spec.terms.len() || values.iter().any(|v| !(*v > 0.0)) {
                return Err(Error::Config(
                    "fixed variances must be positive, one per random-effect term".into(),
                ));
            }
            (values.clone(), None)
        }
        ThetaSearch::Profile => {
            let mut thetas: Vec<f64> = spec.terms.iter().map(|t| clamp(t.variance_init)).collect();
            let (lo, hi) = (opts.theta_lower.ln(), opts.theta_upper.ln());
            let mut best = f64::NEG_INFINITY;
            for _sweep in 0..opts.sweeps.max(1) {
                let mut moved = false;
                for t in 0..thetas.len() {
                    let (x, fx) = golden_max(lo, hi, opts.theta_tol, |x| {
                        let mut th = thetas.clone();
                        th[t] = x.exp();
                        let saved = (st.a.clone(), st.c.clone());
                        match maximize(&problem.design, &problem.penalty(&th), &mut st, opts.max_iter, opts.rel_tol) {
                            Ok(inner) => {
                                total_iterations += inner.iterations;
                                problem.laplace(&inner.point, &th)
                            }
                            Err(Error::NonConvergence { .. } | Error::Singular) => {
                                debug!("inner fit failed at variance {th:?}; point skipped");
                                (st.a, st.c) = saved;
                                Ok(f64::NEG_INFINITY)
                            }
                            Err(e) => Err(e),
                        }
                    })?;
                    if (x - thetas[t].ln()).abs() > opts.theta_tol {
                        moved = true;
                    }
                    thetas[t] = x.exp();
                    best = fx;
                }
                if thetas.len() == 1 || !moved {
                    break;
                }
            }
            debug!("variance search finished at {thetas:?} (profile {best})");
            (thetas, Some(best))
        }
    };
    let pen = problem.penalty(&thetas);
    let inner = maximize(&problem.design, &pen, &mut st, opts.max_iter, opts.rel_tol)?;
    total_iterations += inner.iterations;
    let cov = fixed_effect_cov(&inner.point, p)?;
    let degenerate = matches!(opts.theta, ThetaSearch::Profile)
        && thetas
            .iter()
            .any(|t| t.ln() <= opts.theta_lower.ln() + opts.theta_tol);
    if degenerate {
        warn!("random-effect variance at the lower search bound (degenerate random effect)");
    }
    let beta_hat: Vec<f64> = (0..p).map(|j| st.a[j] / scaling.sd[j]).collect();
    let beta_cov = unscale_cov(&cov, &scaling.sd);
    let random_effects = spec
        .terms
        .iter()
        .zip(&problem.layout)
        .zip(&thetas)
        .map(|((term, &(is_dense, pos)), &th)| {
            let (tl, values) = if is_dense {
                let tl = &problem.design.dense[pos];
                let s = problem.design.dense_start[pos];
                (tl, st.a[s..s + tl.n_levels()].to_vec())
            } else {
                let tl = &problem.design.sparse[pos];
                let s = problem.design.sparse_start[pos];
                (tl, st.c[s..s + tl.n_levels()].to_vec())
            };
            RandomEffectEstimate {
                level: term.level,
                variance: th,
                ids: tl.ids.iter().map(|s| s.to_string()).collect(),
                values,
            }
        })
        .collect();
    let profile_loglik = match profile {
        Some(_) => Some(problem.laplace(&inner.point, &thetas)?),
        None => None,
    };
    Ok(FrailtyFit {
        covariate_names: problem.data.covariate_names().to_vec(),
        std_err: (0..p).map(|j| beta_cov[j][j].max(0.0).sqrt()).collect(),
        beta_hat,
        beta_cov,
        random_effects,
        theta_hat: thetas,
        loglik: inner.point.ppl,
        partial_loglik: inner.point.loglik,
        profile_loglik,
        converged: true,
        iterations: total_iterations,
        degenerate_random_effect: degenerate,
        monotone_likelihood: monotone(&st.a[..p], &cov),
        robust: None,
        training_level1: data.level1_ids().iter().map(|s| s.to_string()).collect(),
    })
}

/// Penalized partial likelihood at the given fixed effects, random effects
/// and variances (used to compare candidate solutions).
pub fn penalized_loglik(
    data: &Dataset,
    beta: &[f64],
    effects: &[RandomEffectEstimate],
) -> Result<f64> {
    let eta_off = super::random_effect_offsets(effects, data, true);
    let design = raw_design(data, eta_off)?;
    let ev = evaluate(&design, beta, &[], false)?;
    let penalty: f64 = effects
        .iter()
        .map(|e| e.values.iter().map(|b| b * b).sum::<f64>() / (2.0 * e.variance))
        .sum();
    Ok(ev.loglik - penalty)
}
