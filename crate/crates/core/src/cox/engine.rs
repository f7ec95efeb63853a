//! Risk-set sums for the counting-process partial likelihood with Breslow
//! ties.
//!
//! Parameters are split into a dense block `a` (fixed effects followed by the
//! levels of dense random-effect terms, entering through indicator columns)
//! and a sparse block `c` (levels of high-cardinality terms). The information
//! of the sparse block is replaced by the diagonal `sum_r w_r A_r`, which
//! bounds the exact block from above and keeps the Newton system positive
//! definite.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::data::Dataset;
use crate::error::{Error, Result};

/// Distinct event times and, per row, the index range `[lo, hi)` of event
/// times inside `(start, stop]`.
#[derive(Clone, Debug)]
pub(crate) struct RiskIndex {
    pub times: Vec<f64>,
    pub deaths: Vec<f64>,
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub event: Vec<bool>,
    /// Rows entering (by `lo`) and leaving (by `hi`) the risk set, bucketed
    /// by event-time index in CSR form.
    enter_ptr: Vec<usize>,
    enter: Vec<usize>,
    leave_ptr: Vec<usize>,
    leave: Vec<usize>,
}

fn buckets(keys: &[usize], n_keys: usize) -> (Vec<usize>, Vec<usize>) {
    let mut ptr = vec![0usize; n_keys + 2];
    for &k in keys {
        ptr[k + 1] += 1;
    }
    for k in 1..ptr.len() {
        ptr[k] += ptr[k - 1];
    }
    let mut fill = ptr.clone();
    let mut items = vec![0usize; keys.len()];
    for (r, &k) in keys.iter().enumerate() {
        items[fill[k]] = r;
        fill[k] += 1;
    }
    (ptr, items)
}

/// Neumaier compensated accumulator.
#[derive(Clone, Copy, Default)]
struct Acc {
    sum: f64,
    comp: f64,
}

impl Acc {
    #[inline]
    fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    #[inline]
    fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Compensated prefix sums stored as (sum, compensation) pairs so that range
/// differences keep full precision.
struct Prefix {
    sum: Vec<f64>,
    comp: Vec<f64>,
    width: usize,
}

impl Prefix {
    fn new(len: usize, width: usize) -> Self {
        Prefix {
            sum: vec![0.0; (len + 1) * width],
            comp: vec![0.0; (len + 1) * width],
            width,
        }
    }

    /// Sets entry `k + 1` to entry `k` plus `x`, coordinate `j`.
    #[inline]
    fn push(&mut self, k: usize, j: usize, x: f64) {
        let w = self.width;
        let mut a = Acc {
            sum: self.sum[k * w + j],
            comp: self.comp[k * w + j],
        };
        a.add(x);
        self.sum[(k + 1) * w + j] = a.sum;
        self.comp[(k + 1) * w + j] = a.comp;
    }

    /// Sum over indices `[lo, hi)`, coordinate `j`.
    #[inline]
    fn range(&self, lo: usize, hi: usize, j: usize) -> f64 {
        let w = self.width;
        (self.sum[hi * w + j] - self.sum[lo * w + j]) + (self.comp[hi * w + j] - self.comp[lo * w + j])
    }
}

impl RiskIndex {
    pub fn new(data: &Dataset) -> Result<Self> {
        let mut times: Vec<f64> = data
            .rows()
            .iter()
            .filter(|r| r.event)
            .map(|r| r.stop)
            .collect();
        if times.is_empty() {
            return Err(Error::NoEvents);
        }
        times.sort_by(f64::total_cmp);
        times.dedup();
        let mut deaths = vec![0.0; times.len()];
        let mut lo = Vec::with_capacity(data.len());
        let mut hi = Vec::with_capacity(data.len());
        let mut event = Vec::with_capacity(data.len());
        for r in data.rows() {
            let l = times.partition_point(|&t| t <= r.start);
            let h = times.partition_point(|&t| t <= r.stop);
            if r.event {
                deaths[h - 1] += 1.0;
            }
            lo.push(l);
            hi.push(h);
            event.push(r.event);
        }
        let nk = times.len();
        let (enter_ptr, enter) = buckets(&lo, nk);
        let (leave_ptr, leave) = buckets(&hi, nk);
        Ok(RiskIndex {
            times,
            deaths,
            lo,
            hi,
            event,
            enter_ptr,
            enter,
            leave_ptr,
            leave,
        })
    }

    pub fn n_times(&self) -> usize {
        self.times.len()
    }
}

/// Level assignment of every row for one random-effect term.
#[derive(Clone, Debug)]
pub(crate) struct TermLevels {
    pub ids: Vec<Arc<str>>,
    pub index: Vec<usize>,
}

impl TermLevels {
    pub fn n_levels(&self) -> usize {
        self.ids.len()
    }
}

/// Model matrix in row-major order plus random-effect structure.
pub(crate) struct Design {
    pub n: usize,
    pub p: usize,
    pub z: Vec<f64>,
    pub risk: RiskIndex,
    pub offsets: Vec<f64>,
    pub dense: Vec<TermLevels>,
    pub sparse: Vec<TermLevels>,
    /// Start of each dense term inside `a`.
    pub dense_start: Vec<usize>,
    /// Start of each sparse term inside `c`.
    pub sparse_start: Vec<usize>,
    pub q: usize,
    pub nc: usize,
}

impl Design {
    pub fn new(
        z: Vec<f64>,
        p: usize,
        risk: RiskIndex,
        offsets: Vec<f64>,
        dense: Vec<TermLevels>,
        sparse: Vec<TermLevels>,
    ) -> Self {
        let n = risk.lo.len();
        let mut dense_start = Vec::new();
        let mut q = p;
        for t in &dense {
            dense_start.push(q);
            q += t.n_levels();
        }
        let mut sparse_start = Vec::new();
        let mut nc = 0;
        for t in &sparse {
            sparse_start.push(nc);
            nc += t.n_levels();
        }
        Design {
            n,
            p,
            z,
            risk,
            offsets,
            dense,
            sparse,
            dense_start,
            sparse_start,
            q,
            nc,
        }
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.z[r * self.p..(r + 1) * self.p]
    }

    /// Positions in `a` of the indicator columns that are 1 for row `r`.
    #[inline]
    fn indicators(&self, r: usize) -> impl Iterator<Item = usize> + '_ {
        self.dense
            .iter()
            .zip(&self.dense_start)
            .map(move |(t, s)| s + t.index[r])
    }

    #[inline]
    fn sparse_positions(&self, r: usize) -> impl Iterator<Item = usize> + '_ {
        self.sparse
            .iter()
            .zip(&self.sparse_start)
            .map(move |(t, s)| s + t.index[r])
    }

    pub fn linear_predictor(&self, a: &[f64], c: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|r| {
                let mut eta = self.offsets[r];
                for (zj, bj) in self.row(r).iter().zip(&a[..self.p]) {
                    eta += zj * bj;
                }
                for k in self.indicators(r) {
                    eta += a[k];
                }
                for k in self.sparse_positions(r) {
                    eta += c[k];
                }
                eta
            })
            .collect()
    }
}

/// Log partial likelihood with first and second order information.
pub(crate) struct Evaluation {
    pub loglik: f64,
    pub grad_a: DVector<f64>,
    pub grad_c: Vec<f64>,
    /// Negative Hessian blocks; present when requested.
    pub info: Option<Information>,
}

pub(crate) struct Information {
    pub aa: DMatrix<f64>,
    /// `q × nc`
    pub ac: DMatrix<f64>,
    pub cc_diag: Vec<f64>,
}

pub(crate) struct RowWeights {
    pub w: Vec<f64>,
    pub shift: f64,
}

pub(crate) fn weights(eta: &[f64]) -> Result<RowWeights> {
    if eta.iter().any(|e| !e.is_finite()) {
        return Err(Error::NonFiniteLinearPredictor);
    }
    let shift = eta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(RowWeights {
        w: eta.iter().map(|e| (e - shift).exp()).collect(),
        shift,
    })
}

/// `S0` and `S1` (width `q`) at every event time, accumulated with
/// compensation as rows enter and leave the risk set.
fn risk_sums(design: &Design, w: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let risk = &design.risk;
    let nk = risk.n_times();
    let (p, q) = (design.p, design.q);
    let mut s0 = Acc::default();
    let mut s1 = vec![Acc::default(); q];
    let mut out0 = vec![0.0; nk];
    let mut out1 = vec![0.0; nk * q];
    let apply = |r: usize, sign: f64, s0: &mut Acc, s1: &mut [Acc]| {
        let wr = sign * w[r];
        s0.add(wr);
        for (acc, z) in s1[..p].iter_mut().zip(design.row(r)) {
            acc.add(wr * z);
        }
        for k in design.indicators(r) {
            s1[k].add(wr);
        }
    };
    for k in 0..nk {
        for &r in &risk.leave[risk.leave_ptr[k]..risk.leave_ptr[k + 1]] {
            if risk.lo[r] < k {
                apply(r, -1.0, &mut s0, &mut s1);
            }
        }
        for &r in &risk.enter[risk.enter_ptr[k]..risk.enter_ptr[k + 1]] {
            if risk.hi[r] > k {
                apply(r, 1.0, &mut s0, &mut s1);
            }
        }
        out0[k] = s0.value();
        for j in 0..q {
            out1[k * q + j] = s1[j].value();
        }
    }
    (out0, out1)
}

pub(crate) fn evaluate(design: &Design, a: &[f64], c: &[f64], with_info: bool) -> Result<Evaluation> {
    let eta = design.linear_predictor(a, c);
    let RowWeights { w, shift } = weights(&eta)?;
    let risk = &design.risk;
    let nk = risk.n_times();
    let (p, q, nc) = (design.p, design.q, design.nc);

    let (s0, s1) = risk_sums(design, &w);

    let mut loglik = 0.0;
    let mut grad_a = DVector::zeros(q);
    let mut grad_c = vec![0.0; nc];
    for r in 0..design.n {
        if risk.event[r] {
            loglik += eta[r];
            let zr = design.row(r);
            for j in 0..p {
                grad_a[j] += zr[j];
            }
            for k in design.indicators(r) {
                grad_a[k] += 1.0;
            }
            for k in design.sparse_positions(r) {
                grad_c[k] += 1.0;
            }
        }
    }
    // prefix sums of d/S0 and d*S1/S0^2
    let mut pa = Prefix::new(nk, 1);
    let mut pb = Prefix::new(nk, q);
    let mut s1s1 = DMatrix::<f64>::zeros(q, q);
    for k in 0..nk {
        let d = risk.deaths[k];
        let s0k = s0[k];
        if d > 0.0 && !(s0k > 0.0) {
            return Err(Error::EmptyRiskSet(risk.times[k]));
        }
        let s1k = &s1[k * q..(k + 1) * q];
        let ratio = if d > 0.0 { d / s0k } else { 0.0 };
        if d > 0.0 {
            loglik -= d * (s0k.ln() + shift);
        }
        for j in 0..q {
            grad_a[j] -= ratio * s1k[j];
        }
        pa.push(k, 0, ratio);
        let r2 = if d > 0.0 { ratio / s0k } else { 0.0 };
        for j in 0..q {
            pb.push(k, j, r2 * s1k[j]);
        }
        if with_info && d > 0.0 {
            for j in 0..q {
                let f = r2 * s1k[j];
                if f == 0.0 {
                    continue;
                }
                for l in 0..=j {
                    s1s1[(j, l)] += f * s1k[l];
                }
            }
        }
    }
    for r in 0..design.n {
        let wa = w[r] * pa.range(risk.lo[r], risk.hi[r], 0);
        for k in design.sparse_positions(r) {
            grad_c[k] -= wa;
        }
    }
    if !with_info {
        return Ok(Evaluation {
            loglik,
            grad_a,
            grad_c,
            info: None,
        });
    }

    let mut aa = DMatrix::<f64>::zeros(q, q);
    let mut ac = DMatrix::<f64>::zeros(q, nc);
    let mut cc_diag = vec![0.0; nc];
    let mut brow = vec![0.0; q];
    let ind: Vec<usize> = Vec::with_capacity(design.dense.len());
    let mut ind = ind;
    for r in 0..design.n {
        let (lo, hi) = (risk.lo[r], risk.hi[r]);
        if lo == hi {
            continue;
        }
        let ar = pa.range(lo, hi, 0);
        let wa = w[r] * ar;
        let zr = design.row(r);
        // lower triangle of the z block
        for j in 0..p {
            let f = wa * zr[j];
            for l in 0..=j {
                aa[(j, l)] += f * zr[l];
            }
        }
        ind.clear();
        ind.extend(design.indicators(r));
        for &g in &ind {
            for j in 0..p {
                aa[(g, j)] += wa * zr[j];
            }
            for &h in &ind {
                if h <= g {
                    aa[(g, h)] += wa;
                }
            }
        }
        if nc > 0 {
            for j in 0..q {
                brow[j] = pb.range(lo, hi, j);
            }
            for k in design.sparse_positions(r) {
                cc_diag[k] += wa;
                let mut col = ac.column_mut(k);
                for j in 0..p {
                    col[j] += w[r] * (zr[j] * ar - brow[j]);
                }
                for j in p..q {
                    col[j] -= w[r] * brow[j];
                }
                for &g in &ind {
                    col[g] += wa;
                }
            }
        }
    }
    for j in 0..q {
        for l in 0..=j {
            let v = aa[(j, l)] - s1s1[(j, l)];
            aa[(j, l)] = v;
            aa[(l, j)] = v;
        }
    }
    Ok(Evaluation {
        loglik,
        grad_a,
        grad_c,
        info: Some(Information { aa, ac, cc_diag }),
    })
}

/// Per-row score residuals for the dense block `a`.
pub(crate) fn score_residuals(design: &Design, a: &[f64], c: &[f64]) -> Result<Vec<DVector<f64>>> {
    let eta = design.linear_predictor(a, c);
    let RowWeights { w, .. } = weights(&eta)?;
    let risk = &design.risk;
    let nk = risk.n_times();
    let p = design.p;
    if design.q != p {
        return Err(Error::Config("score residuals need a fixed-effects-only design".into()));
    }
    let (s0, s1) = risk_sums(design, &w);
    let mut pa = Prefix::new(nk, 1);
    let mut pb = Prefix::new(nk, p);
    for k in 0..nk {
        let d = risk.deaths[k];
        let (ra, rb) = if d > 0.0 { (d / s0[k], d / (s0[k] * s0[k])) } else { (0.0, 0.0) };
        pa.push(k, 0, ra);
        for j in 0..p {
            pb.push(k, j, rb * s1[k * p + j]);
        }
    }
    Ok((0..design.n)
        .map(|r| {
            let (lo, hi) = (risk.lo[r], risk.hi[r]);
            let zr = design.row(r);
            let ar = pa.range(lo, hi, 0);
            let mut u = DVector::zeros(p);
            for j in 0..p {
                u[j] = -w[r] * (zr[j] * ar - pb.range(lo, hi, j));
            }
            if risk.event[r] {
                let k = hi - 1;
                for j in 0..p {
                    u[j] += zr[j] - s1[k * p + j] / s0[k];
                }
            }
            u
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{AtRiskRow, GroupId};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fixture(seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = Vec::new();
        for i in 0..40 {
            let prog = format!("P{}", i % 4);
            let subj = format!("S{i:02}");
            let mut t = 0.0;
            for k in 0..3 {
                let len: f64 = rng.random_range(1.0..10.0);
                let stop = (t + len).round().max(t + 1.0);
                rows.push(AtRiskRow {
                    group: GroupId::new(&prog, &subj),
                    encounter: k + 1,
                    start: t,
                    stop,
                    event: rng.random_bool(0.3),
                    covariates: vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
                });
                t = stop;
            }
        }
        Dataset::new(rows, vec!["x".into(), "y".into()]).unwrap()
    }

    fn design(data: &Dataset) -> Design {
        let z = data.rows().iter().flat_map(|r| r.covariates.clone()).collect();
        let dense = vec![TermLevels {
            ids: data.level1_ids().to_vec(),
            index: data.level1_index(),
        }];
        let sparse = vec![TermLevels {
            ids: data.level2_ids().to_vec(),
            index: data.level2_index(),
        }];
        Design::new(z, 2, RiskIndex::new(data).unwrap(), vec![0.0; data.len()], dense, sparse)
    }

    #[test]
    fn gradient_and_dense_information_match_differences() {
        let data = fixture(5);
        let d = design(&data);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a: Vec<f64> = (0..d.q).map(|_| rng.random_range(-0.5..0.5)).collect();
        let c: Vec<f64> = (0..d.nc).map(|_| rng.random_range(-0.5..0.5)).collect();
        let ev = evaluate(&d, &a, &c, true).unwrap();
        let info = ev.info.unwrap();
        let h = 1e-6;
        for j in 0..d.q {
            let mut ap = a.clone();
            ap[j] += h;
            let mut am = a.clone();
            am[j] -= h;
            let fp = evaluate(&d, &ap, &c, false).unwrap();
            let fm = evaluate(&d, &am, &c, false).unwrap();
            let g = (fp.loglik - fm.loglik) / (2.0 * h);
            assert!((g - ev.grad_a[j]).abs() < 1e-6 * g.abs().max(1.0), "grad a {j}");
            for l in 0..d.q {
                let hd = -(fp.grad_a[l] - fm.grad_a[l]) / (2.0 * h);
                assert!((hd - info.aa[(j, l)]).abs() < 1e-5 * hd.abs().max(1.0), "info aa {j} {l}: {hd} vs {}", info.aa[(j, l)]);
            }
            for k in 0..d.nc {
                let hd = -(fp.grad_c[k] - fm.grad_c[k]) / (2.0 * h);
                assert!((hd - info.ac[(j, k)]).abs() < 1e-5 * hd.abs().max(1.0), "info ac {j} {k}: {hd} vs {}", info.ac[(j, k)]);
            }
        }
        for k in 0..d.nc {
            let mut cp = c.clone();
            cp[k] += h;
            let mut cm = c.clone();
            cm[k] -= h;
            let fp = evaluate(&d, &a, &cp, false).unwrap();
            let fm = evaluate(&d, &a, &cm, false).unwrap();
            let g = (fp.loglik - fm.loglik) / (2.0 * h);
            assert!((g - ev.grad_c[k]).abs() < 1e-6 * g.abs().max(1.0), "grad c {k}");
            // the stored diagonal bounds the exact one from above
            let hd = -(fp.grad_c[k] - fm.grad_c[k]) / (2.0 * h);
            assert!(info.cc_diag[k] >= hd - 1e-6);
        }
        let mut scaled = info.ac.clone();
        for k in 0..d.nc {
            scaled.column_mut(k).scale_mut(1.0 / info.cc_diag[k]);
        }
        let schur = &info.aa - scaled * info.ac.transpose();
        let eig = schur.symmetric_eigenvalues();
        assert!(eig.min() > -1e-8, "{eig}");
    }
}
