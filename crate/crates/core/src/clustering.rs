//! k-means seeding and Gaussian-mixture EM with cluster deletion.
//!
//! All reductions run over fixed row chunks and are combined in chunk order,
//! so results do not depend on the thread count.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Rows per reduction chunk.
const CHUNK: usize = 2048;

/// Componentwise centroid distance below which two clusters are merged.
pub const OVERLAP_TOLERANCE: f64 = 2e-5;

/// Clusters with less total responsibility than this are dropped.
const EMPTY_WEIGHT: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    cols: usize,
    data: Vec<f64>,
}

impl FeatureMatrix {
    /// Row-major matrix with `cols` columns. Entries must be finite.
    pub fn new(cols: usize, data: Vec<f64>) -> Result<Self> {
        if cols == 0 || data.len() % cols != 0 {
            return Err(Error::Layout(format!(
                "{} values do not form rows of {} features",
                data.len(),
                cols
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Clustering(format!(
                "non-finite feature at row {}, column {}",
                pos / cols,
                pos % cols
            )));
        }
        Ok(FeatureMatrix { cols, data })
    }

    /// Min-max normalizes every column to `[0, 1]` over all rows. Columns whose
    /// range is below `1e-12` become zero.
    pub fn normalized(cols: usize, mut data: Vec<f64>) -> Result<Self> {
        if cols == 0 || data.len() % cols != 0 {
            return Err(Error::Layout(format!(
                "{} values do not form rows of {} features",
                data.len(),
                cols
            )));
        }
        let mut lo = vec![f64::INFINITY; cols];
        let mut hi = vec![f64::NEG_INFINITY; cols];
        for row in data.chunks(cols) {
            for c in 0..cols {
                lo[c] = lo[c].min(row[c]);
                hi[c] = hi[c].max(row[c]);
            }
        }
        // Zero scale marks a degenerate column.
        let scale: Vec<f64> = lo
            .iter()
            .zip(&hi)
            .map(|(l, h)| {
                let range = h - l;
                if range < 1e-12 || !range.is_finite() {
                    0.0
                } else {
                    1.0 / range
                }
            })
            .collect();
        for row in data.chunks_mut(cols) {
            for c in 0..cols {
                row[c] = if scale[c] == 0.0 { 0.0 } else { ((row[c] - lo[c]) * scale[c]).clamp(0.0, 1.0) };
            }
        }
        Self::new(cols, data)
    }

    pub fn rows(&self) -> usize {
        self.data.len() / self.cols
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Whether every column is degenerate (all zeros after normalization).
    pub fn is_degenerate(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }

    fn column_variance_mean(&self) -> f64 {
        let n = self.rows() as f64;
        let v = self.cols;
        let mut total = 0.0;
        for c in 0..v {
            let mean = self.data.iter().skip(c).step_by(v).sum::<f64>() / n;
            total += self.data.iter().skip(c).step_by(v).map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        }
        total / v as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian {
    pub weight: f64,
    pub mean: Vec<f64>,
    /// Row-major `v x v` covariance.
    pub cov: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    dim: usize,
    pub components: Vec<Gaussian>,
    pub epsilon: f64,
    pub log_likelihood_history: Vec<f64>,
}

impl GaussianMixture {
    pub fn new(dim: usize, components: Vec<Gaussian>, epsilon: f64) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::Clustering("mixture needs at least one component".into()));
        }
        for g in &components {
            if g.mean.len() != dim || g.cov.len() != dim * dim {
                return Err(Error::Layout(format!(
                    "component of dimension {} in a {dim}-dimensional mixture",
                    g.mean.len()
                )));
            }
        }
        Ok(GaussianMixture {
            dim,
            components,
            epsilon,
            log_likelihood_history: Vec::new(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.components.iter().map(|g| g.weight).collect()
    }

    fn renormalize(&mut self) {
        let total: f64 = self.components.iter().map(|g| g.weight).sum();
        if total > 0.0 {
            for g in &mut self.components {
                g.weight /= total;
            }
        }
    }

    /// Component order by centroid distance to the origin, ties broken by the
    /// first coordinate. Returns old indices in rank order.
    pub fn rank_by_origin_distance(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        let key = |j: usize| {
            let m = &self.components[j].mean;
            (m.iter().map(|x| x * x).sum::<f64>(), m[0])
        };
        order.sort_by(|&a, &b| {
            let (da, fa) = key(a);
            let (db, fb) = key(b);
            da.total_cmp(&db).then(fa.total_cmp(&fb))
        });
        order
    }

    /// Reorders components by [`Self::rank_by_origin_distance`].
    pub fn sorted_by_origin_distance(mut self) -> Self {
        let order = self.rank_by_origin_distance();
        let comps = std::mem::take(&mut self.components);
        self.components = order.into_iter().map(|j| comps[j].clone()).collect();
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DeletionEvent {
    pub iteration: usize,
    /// Index of the removed component in the mixture as it was before removal.
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FitDiagnostics {
    pub iterations: usize,
    pub deletions: Vec<DeletionEvent>,
    pub log_likelihood: f64,
    pub converged: bool,
    /// Log-likelihood of the mixture entering each E step.
    pub history: Vec<f64>,
    /// Iterations (1-based) after which a deletion happened.
    pub deletion_iterations: Vec<usize>,
}

/// Packed Cholesky data for evaluating every component's log density.
struct Densities {
    k: usize,
    v: usize,
    mean: Vec<f64>,
    /// Lower-triangular factors, row-major, `v * v` per component.
    chol: Vec<f64>,
    inv_diag: Vec<f64>,
    /// `log w_j - (v log 2 pi + log det S_j) / 2`
    offset: Vec<f64>,
}

impl Densities {
    fn new(mix: &GaussianMixture) -> Result<Self> {
        let v = mix.dim;
        let k = mix.len();
        let ln2pi = (2.0 * std::f64::consts::PI).ln();
        let mut out = Densities {
            k,
            v,
            mean: Vec::with_capacity(k * v),
            chol: vec![0.0; k * v * v],
            inv_diag: vec![0.0; k * v],
            offset: Vec::with_capacity(k),
        };
        for (j, g) in mix.components.iter().enumerate() {
            let m = DMatrix::from_row_slice(v, v, &g.cov);
            let ch = m
                .cholesky()
                .ok_or_else(|| Error::Clustering(format!("covariance of component {j} is not positive definite")))?;
            let l = ch.l();
            let mut log_det = 0.0;
            for r in 0..v {
                for c in 0..r {
                    out.chol[j * v * v + r * v + c] = l[(r, c)];
                }
                out.inv_diag[j * v + r] = 1.0 / l[(r, r)];
                log_det += 2.0 * l[(r, r)].ln();
            }
            out.mean.extend_from_slice(&g.mean);
            out.offset.push(g.weight.ln() - 0.5 * (v as f64 * ln2pi + log_det));
        }
        Ok(out)
    }

    /// Log of `w_j N(x | mu_j, S_j)` for every component.
    #[inline]
    fn eval(&self, x: &[f64], out: &mut [f64]) {
        let v = self.v;
        let mut stack = [0.0f64; 8];
        let mut heap;
        let y: &mut [f64] = if v <= 8 {
            &mut stack[..v]
        } else {
            heap = vec![0.0; v];
            &mut heap
        };
        for (j, o) in out.iter_mut().enumerate().take(self.k) {
            let mean = &self.mean[j * v..(j + 1) * v];
            let l = &self.chol[j * v * v..(j + 1) * v * v];
            let inv = &self.inv_diag[j * v..(j + 1) * v];
            // Forward substitution for L y = x - mean.
            let mut quad = 0.0;
            for r in 0..v {
                let mut s = x[r] - mean[r];
                for c in 0..r {
                    s -= l[r * v + c] * y[c];
                }
                y[r] = s * inv[r];
                quad += y[r] * y[r];
            }
            *o = self.offset[j] - 0.5 * quad;
        }
    }
}

/// `exp(d)` for `d <= 0`, flushed to zero once it is negligible next to the
/// leading term of 1. Avoids subnormal arithmetic, which is very slow.
#[inline]
fn tail_exp(d: f64) -> f64 {
    if d < -60.0 {
        0.0
    } else {
        d.exp()
    }
}

/// Responsibilities `R[i * K + j]` and the total log-likelihood.
pub fn gmm_estep(points: &FeatureMatrix, mix: &GaussianMixture) -> Result<(f64, Vec<f64>)> {
    if points.cols() != mix.dim {
        return Err(Error::Layout(format!(
            "{}-column features for a {}-dimensional mixture",
            points.cols(),
            mix.dim
        )));
    }
    let dens = Densities::new(mix)?;
    let k = mix.len();
    let n = points.rows();
    let mut resp = vec![0.0; n * k];
    let partial: Vec<f64> = resp
        .par_chunks_mut(CHUNK * k)
        .enumerate()
        .map(|(chunk, out)| {
            let start = chunk * CHUNK;
            let mut sum = 0.0;
            for (r, row) in out.chunks_mut(k).enumerate() {
                let x = points.row(start + r);
                dens.eval(x, row);
                let hi = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                let mut total = 0.0;
                for slot in row.iter_mut() {
                    *slot = tail_exp(*slot - hi);
                    total += *slot;
                }
                for slot in row.iter_mut() {
                    *slot /= total;
                }
                sum += hi + total.ln();
            }
            sum
        })
        .collect();
    Ok((partial.iter().sum(), resp))
}

/// Result of one M step.
#[derive(Debug, Clone, PartialEq)]
pub struct MStep {
    pub mixture: GaussianMixture,
    /// Components whose total responsibility vanished; they were removed from `mixture`.
    pub emptied: Vec<usize>,
}

/// Maximization step with covariance regularization `epsilon I`.
pub fn gmm_mstep(points: &FeatureMatrix, resp: &[f64], k: usize, epsilon: f64) -> Result<MStep> {
    let n = points.rows();
    let v = points.cols();
    if resp.len() != n * k || k == 0 {
        return Err(Error::Layout(format!(
            "responsibilities of length {} for {n} rows and {k} components",
            resp.len()
        )));
    }
    let chunks: Vec<usize> = (0..n.div_ceil(CHUNK)).collect();

    // Pass 1: N_j and sum_i R_ij x_i.
    let first: Vec<(Vec<f64>, Vec<f64>)> = chunks
        .par_iter()
        .map(|&c| {
            let mut nj = vec![0.0; k];
            let mut sx = vec![0.0; k * v];
            for i in c * CHUNK..((c + 1) * CHUNK).min(n) {
                let x = points.row(i);
                for j in 0..k {
                    let r = resp[i * k + j];
                    nj[j] += r;
                    for d in 0..v {
                        sx[j * v + d] += r * x[d];
                    }
                }
            }
            (nj, sx)
        })
        .collect();
    let mut nj = vec![0.0; k];
    let mut means = vec![0.0; k * v];
    for (a, b) in &first {
        for j in 0..k {
            nj[j] += a[j];
        }
        for (m, s) in means.iter_mut().zip(b) {
            *m += s;
        }
    }
    for j in 0..k {
        if nj[j] > EMPTY_WEIGHT {
            for d in 0..v {
                means[j * v + d] /= nj[j];
            }
        }
    }

    // Pass 2: scatter about the new means.
    let second: Vec<Vec<f64>> = chunks
        .par_iter()
        .map(|&c| {
            let mut sc = vec![0.0; k * v * v];
            let mut diff = vec![0.0; v];
            for i in c * CHUNK..((c + 1) * CHUNK).min(n) {
                let x = points.row(i);
                for j in 0..k {
                    let r = resp[i * k + j];
                    if r == 0.0 {
                        continue;
                    }
                    for d in 0..v {
                        diff[d] = x[d] - means[j * v + d];
                    }
                    let base = j * v * v;
                    for a in 0..v {
                        let ra = r * diff[a];
                        for b in a..v {
                            sc[base + a * v + b] += ra * diff[b];
                        }
                    }
                }
            }
            sc
        })
        .collect();
    let mut scatter = vec![0.0; k * v * v];
    for part in &second {
        for (s, p) in scatter.iter_mut().zip(part) {
            *s += p;
        }
    }

    build_mstep(v, n, &nj, &means, &scatter, epsilon)
}

/// Components from total responsibilities, means and upper-triangular scatter
/// about those means; empty components are dropped.
fn build_mstep(v: usize, n: usize, nj: &[f64], means: &[f64], scatter: &[f64], epsilon: f64) -> Result<MStep> {
    let k = nj.len();
    let mut components = Vec::with_capacity(k);
    let mut emptied = Vec::new();
    for j in 0..k {
        if !(nj[j] > EMPTY_WEIGHT) {
            emptied.push(j);
            continue;
        }
        let mut cov = vec![0.0; v * v];
        for a in 0..v {
            for b in a..v {
                let s = scatter[j * v * v + a * v + b] / nj[j];
                cov[a * v + b] = s;
                cov[b * v + a] = s;
            }
            cov[a * v + a] += epsilon;
        }
        components.push(Gaussian {
            weight: nj[j] / n as f64,
            mean: means[j * v..(j + 1) * v].to_vec(),
            cov,
        });
    }
    if components.is_empty() {
        return Err(Error::Clustering("every component lost its responsibility".into()));
    }
    let mut mixture = GaussianMixture::new(v, components, epsilon)?;
    mixture.renormalize();
    Ok(MStep { mixture, emptied })
}

/// Responsibility-weighted moments of one E step, taken about the current
/// component means so the scatter correction stays well conditioned.
struct Moments {
    log_l: f64,
    nj: Vec<f64>,
    s1: Vec<f64>,
    s2: Vec<f64>,
}

impl Moments {
    fn zeros(k: usize, v: usize) -> Self {
        Moments { log_l: 0.0, nj: vec![0.0; k], s1: vec![0.0; k * v], s2: vec![0.0; k * v * v] }
    }

    fn add(&mut self, other: &Moments) {
        self.log_l += other.log_l;
        for (a, b) in self.nj.iter_mut().zip(&other.nj) {
            *a += b;
        }
        for (a, b) in self.s1.iter_mut().zip(&other.s1) {
            *a += b;
        }
        for (a, b) in self.s2.iter_mut().zip(&other.s2) {
            *a += b;
        }
    }
}

/// E step fused with the M-step accumulation. Writes each row's most
/// responsible component into `labels`.
fn fused_pass(points: &FeatureMatrix, mix: &GaussianMixture, labels: &mut [usize]) -> Result<Moments> {
    if points.cols() != mix.dim {
        return Err(Error::Layout(format!(
            "{}-column features for a {}-dimensional mixture",
            points.cols(),
            mix.dim
        )));
    }
    let dens = Densities::new(mix)?;
    let k = mix.len();
    let v = mix.dim;
    if v == 2 {
        return Ok(fused_pass_2d(points, &dens, labels));
    }
    let parts: Vec<Moments> = labels
        .par_chunks_mut(CHUNK)
        .enumerate()
        .map(|(chunk, lab)| {
            let mut m = Moments::zeros(k, v);
            let mut r = vec![0.0; k];
            let mut diff = vec![0.0; v];
            for (row, slot) in lab.iter_mut().enumerate() {
                let x = points.row(chunk * CHUNK + row);
                dens.eval(x, &mut r);
                let mut hi = f64::NEG_INFINITY;
                let mut best = 0;
                for (j, &rj) in r.iter().enumerate() {
                    if rj > hi {
                        hi = rj;
                        best = j;
                    }
                }
                *slot = best;
                let mut total = 0.0;
                for rj in r.iter_mut() {
                    *rj = tail_exp(*rj - hi);
                    total += *rj;
                }
                m.log_l += hi + total.ln();
                let inv = 1.0 / total;
                for j in 0..k {
                    let rj = r[j] * inv;
                    if rj == 0.0 {
                        continue;
                    }
                    m.nj[j] += rj;
                    let mean = &mix.components[j].mean;
                    for d in 0..v {
                        diff[d] = x[d] - mean[d];
                        m.s1[j * v + d] += rj * diff[d];
                    }
                    let base = j * v * v;
                    for a in 0..v {
                        let ra = rj * diff[a];
                        for b in a..v {
                            m.s2[base + a * v + b] += ra * diff[b];
                        }
                    }
                }
            }
            m
        })
        .collect();
    let mut total = Moments::zeros(k, v);
    for p in &parts {
        total.add(p);
    }
    Ok(total)
}

/// [`fused_pass`] unrolled for two features, the common case in the sensor.
fn fused_pass_2d(points: &FeatureMatrix, dens: &Densities, labels: &mut [usize]) -> Moments {
    let k = dens.k;
    // Per component: mean, 1 / L00, L10, 1 / L11, offset.
    let par: Vec<[f64; 6]> = (0..k)
        .map(|j| {
            [
                dens.mean[2 * j],
                dens.mean[2 * j + 1],
                dens.inv_diag[2 * j],
                dens.chol[4 * j + 2],
                dens.inv_diag[2 * j + 1],
                dens.offset[j],
            ]
        })
        .collect();
    let parts: Vec<Moments> = labels
        .par_chunks_mut(CHUNK)
        .enumerate()
        .map(|(chunk, lab)| {
            let mut m = Moments::zeros(k, 2);
            let mut r = vec![0.0; k];
            let rows = points.data[chunk * CHUNK * 2..].chunks_exact(2);
            for (slot, x) in lab.iter_mut().zip(rows) {
                let (x0, x1) = (x[0], x[1]);
                let mut hi = f64::NEG_INFINITY;
                let mut best = 0;
                for (j, (rj, c)) in r.iter_mut().zip(&par).enumerate() {
                    let y0 = (x0 - c[0]) * c[2];
                    let y1 = (x1 - c[1] - c[3] * y0) * c[4];
                    *rj = c[5] - 0.5 * (y0 * y0 + y1 * y1);
                    if *rj > hi {
                        hi = *rj;
                        best = j;
                    }
                }
                *slot = best;
                let mut total = 0.0;
                for rj in r.iter_mut() {
                    *rj = tail_exp(*rj - hi);
                    total += *rj;
                }
                m.log_l += hi + total.ln();
                let inv = 1.0 / total;
                for (j, (&rj, c)) in r.iter().zip(&par).enumerate() {
                    if rj == 0.0 {
                        continue;
                    }
                    let rj = rj * inv;
                    let (d0, d1) = (x0 - c[0], x1 - c[1]);
                    m.nj[j] += rj;
                    m.s1[2 * j] += rj * d0;
                    m.s1[2 * j + 1] += rj * d1;
                    m.s2[4 * j] += rj * d0 * d0;
                    m.s2[4 * j + 1] += rj * d0 * d1;
                    m.s2[4 * j + 3] += rj * d1 * d1;
                }
            }
            m
        })
        .collect();
    let mut total = Moments::zeros(k, 2);
    for p in &parts {
        total.add(p);
    }
    total
}

/// M step from fused moments; same result as [`gmm_mstep`] up to rounding.
fn mstep_from_moments(mom: &Moments, mix: &GaussianMixture, n: usize, epsilon: f64) -> Result<MStep> {
    let k = mix.len();
    let v = mix.dim;
    let mut means = vec![0.0; k * v];
    let mut scatter = mom.s2.clone();
    for j in 0..k {
        let nj = mom.nj[j];
        if !(nj > EMPTY_WEIGHT) {
            continue;
        }
        let c = &mix.components[j].mean;
        let shift: Vec<f64> = (0..v).map(|d| mom.s1[j * v + d] / nj).collect();
        for d in 0..v {
            means[j * v + d] = c[d] + shift[d];
        }
        for a in 0..v {
            for b in a..v {
                scatter[j * v * v + a * v + b] -= nj * shift[a] * shift[b];
            }
        }
    }
    build_mstep(v, n, &mom.nj, &means, &scatter, epsilon)
}

/// Removes later components whose centroids are within the overlap tolerance
/// of an earlier one. Returns the removed indices.
pub fn delete_overlapping(mix: &mut GaussianMixture, tol: f64) -> Vec<usize> {
    let mut removed = Vec::new();
    let mut keep = vec![true; mix.len()];
    for a in 0..mix.len() {
        if !keep[a] {
            continue;
        }
        for b in (a + 1)..mix.len() {
            if keep[b]
                && mix.components[a]
                    .mean
                    .iter()
                    .zip(&mix.components[b].mean)
                    .all(|(x, y)| (x - y).abs() < tol)
            {
                keep[b] = false;
                removed.push(b);
            }
        }
    }
    if !removed.is_empty() {
        let mut idx = 0;
        mix.components.retain(|_| {
            let k = keep[idx];
            idx += 1;
            k
        });
        mix.renormalize();
    }
    removed
}

/// Relative change test, robust to either sign of the log-likelihood.
pub fn has_converged(log_l: f64, prev: f64, delta: f64) -> bool {
    (log_l - prev).abs() / log_l.abs().max(1.0) < delta
}

/// Single Gaussian fitted to all rows.
pub fn single_component(points: &FeatureMatrix, epsilon: f64) -> Result<GaussianMixture> {
    let n = points.rows();
    if n == 0 {
        return Err(Error::Clustering("no points to fit".into()));
    }
    let resp = vec![1.0; n];
    Ok(gmm_mstep(points, &resp, 1, epsilon)?.mixture)
}

/// Expectation-maximization from `initial` until the relative log-likelihood
/// change drops below `delta` or `max_iters` E steps have run.
pub fn gmm_fit(
    points: &FeatureMatrix,
    initial: &GaussianMixture,
    max_iters: usize,
    epsilon: f64,
    delta: f64,
) -> Result<(GaussianMixture, FitDiagnostics)> {
    gmm_em(points, initial, max_iters, epsilon, delta).map(|f| (f.mixture, f.diagnostics))
}

/// Fitted mixture with the hard assignment of every fitted point.
#[derive(Debug, Clone, PartialEq)]
pub struct EmFit {
    pub mixture: GaussianMixture,
    pub diagnostics: FitDiagnostics,
    /// Most responsible component of each row under `mixture`, in its order.
    pub labels: Vec<usize>,
}

/// [`gmm_fit`] that also returns the final assignments.
pub fn gmm_em(
    points: &FeatureMatrix,
    initial: &GaussianMixture,
    max_iters: usize,
    epsilon: f64,
    delta: f64,
) -> Result<EmFit> {
    if points.is_empty() {
        return Err(Error::Clustering("no points to fit".into()));
    }
    let mut mix = initial.clone();
    mix.log_likelihood_history.clear();
    let mut diag = FitDiagnostics::default();
    let mut prev: Option<f64> = None;
    let mut labels = vec![0usize; points.rows()];
    for it in 1..=max_iters.max(1) {
        let mom = fused_pass(points, &mix, &mut labels)?;
        let log_l = mom.log_l;
        diag.history.push(log_l);
        diag.iterations = it;
        diag.log_likelihood = log_l;
        if let Some(p) = prev {
            if has_converged(log_l, p, delta) {
                diag.converged = true;
                break;
            }
        }
        prev = Some(log_l);
        let step = match mstep_from_moments(&mom, &mix, points.rows(), epsilon) {
            Ok(step) => step,
            Err(Error::Clustering(_)) => MStep {
                mixture: single_component(points, epsilon)?,
                emptied: (0..mix.len()).collect(),
            },
            Err(e) => return Err(e),
        };
        for &index in &step.emptied {
            diag.deletions.push(DeletionEvent { iteration: it, index });
        }
        let mut next = step.mixture;
        let merged = delete_overlapping(&mut next, OVERLAP_TOLERANCE);
        for index in merged {
            diag.deletions.push(DeletionEvent { iteration: it, index });
        }
        if next.len() != mix.len() {
            diag.deletion_iterations.push(it);
            // The likelihood of a smaller mixture is not comparable.
            prev = None;
        }
        mix = next;
    }
    if !diag.converged {
        diag.log_likelihood = fused_pass(points, &mix, &mut labels)?.log_l;
    }
    mix.log_likelihood_history = diag.history.clone();
    Ok(EmFit { mixture: mix, diagnostics: diag, labels })
}

/// Lloyd k-means result.
#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    /// Row-major `K x v` centroids.
    pub centroids: Vec<f64>,
    pub assignments: Vec<usize>,
    pub iterations: usize,
    pub converged: bool,
}

impl KMeans {
    pub fn k(&self, dim: usize) -> usize {
        self.centroids.len() / dim
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(x: &[f64], centroids: &[f64], v: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.chunks(v).enumerate() {
        let d = sq_dist(x, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// Row indices in lexicographic order of their features, making seeding
/// independent of input row order.
fn lexicographic_order(points: &FeatureMatrix) -> Vec<usize> {
    let mut order: Vec<usize> = (0..points.rows()).collect();
    order.sort_by(|&a, &b| {
        points
            .row(a)
            .iter()
            .zip(points.row(b))
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

fn distinct_rows(points: &FeatureMatrix, order: &[usize]) -> usize {
    if order.is_empty() {
        return 0;
    }
    1 + order.windows(2).filter(|w| points.row(w[0]) != points.row(w[1])).count()
}

/// k-means++ seeding over lexicographically ordered rows.
pub fn kmeans_plus_plus(points: &FeatureMatrix, k: usize, rng: &mut impl Rng) -> Vec<f64> {
    let v = points.cols();
    let order = lexicographic_order(points);
    let n = order.len();
    let mut centroids = Vec::with_capacity(k * v);
    centroids.extend_from_slice(points.row(order[rng.gen_range(0..n)]));
    let mut d2: Vec<f64> = order.iter().map(|&i| sq_dist(points.row(i), &centroids[..v])).collect();
    while centroids.len() < k * v {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.gen::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (pos, &d) in d2.iter().enumerate() {
                acc += d;
                if acc >= target && d > 0.0 {
                    chosen = pos;
                    break;
                }
            }
            chosen
        } else {
            rng.gen_range(0..n)
        };
        let start = centroids.len();
        centroids.extend_from_slice(points.row(order[pick]));
        for (pos, &i) in order.iter().enumerate() {
            d2[pos] = d2[pos].min(sq_dist(points.row(i), &centroids[start..start + v]));
        }
    }
    centroids
}

/// Lloyd iterations. Without `initial` the centroids come from k-means++ using `rng`.
pub fn kmeans_fit(
    points: &FeatureMatrix,
    k: usize,
    max_iters: usize,
    initial: Option<&[f64]>,
    rng: &mut impl Rng,
) -> Result<KMeans> {
    let n = points.rows();
    let v = points.cols();
    if k == 0 || n == 0 {
        return Err(Error::Clustering(format!("k-means needs K >= 1 and points, got K={k}, N={n}")));
    }
    let order = lexicographic_order(points);
    let distinct = distinct_rows(points, &order);
    let k = if k > distinct {
        log::warn!("k-means: K={k} exceeds {distinct} distinct points; using K={distinct}");
        distinct
    } else {
        k
    };
    let mut centroids = match initial {
        Some(c) => {
            if c.len() % v != 0 || c.is_empty() {
                return Err(Error::Layout(format!("{} centroid values for dimension {v}", c.len())));
            }
            c.to_vec()
        }
        None => kmeans_plus_plus(points, k, rng),
    };
    let k = centroids.len() / v;
    let mut assignments: Vec<usize> = (0..n).map(|i| nearest(points.row(i), &centroids, v).0).collect();
    let mut converged = false;
    let mut iterations = 0;
    while iterations < max_iters.max(1) {
        iterations += 1;
        // Update step.
        let mut sums = vec![0.0; k * v];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            let j = assignments[i];
            counts[j] += 1;
            for d in 0..v {
                sums[j * v + d] += points.row(i)[d];
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                for d in 0..v {
                    centroids[j * v + d] = sums[j * v + d] / counts[j] as f64;
                }
            }
        }
        for j in 0..k {
            if counts[j] == 0 {
                // Reseed at the point farthest from its own centroid.
                let far = (0..n)
                    .max_by(|&a, &b| {
                        let da = sq_dist(points.row(a), &centroids[assignments[a] * v..(assignments[a] + 1) * v]);
                        let db = sq_dist(points.row(b), &centroids[assignments[b] * v..(assignments[b] + 1) * v]);
                        da.total_cmp(&db)
                    })
                    .expect("non-empty points");
                centroids[j * v..(j + 1) * v].copy_from_slice(points.row(far));
                assignments[far] = j;
            }
        }
        // Assignment step.
        let next: Vec<usize> = (0..n).map(|i| nearest(points.row(i), &centroids, v).0).collect();
        if next == assignments {
            converged = true;
            break;
        }
        assignments = next;
    }
    Ok(KMeans {
        centroids,
        assignments,
        iterations,
        converged,
    })
}

/// Mixture initialized from hard k-means clusters.
pub fn mixture_from_kmeans(points: &FeatureMatrix, km: &KMeans, epsilon: f64) -> Result<GaussianMixture> {
    let v = points.cols();
    let k = km.k(v);
    let mut resp = vec![0.0; points.rows() * k];
    for (i, &j) in km.assignments.iter().enumerate() {
        resp[i * k + j] = 1.0;
    }
    let mut mix = gmm_mstep(points, &resp, k, epsilon)?.mixture;
    delete_overlapping(&mut mix, OVERLAP_TOLERANCE);
    Ok(mix)
}

/// Random data point as centroid with a spherical covariance matching the
/// mean per-feature variance of the data.
pub fn random_spherical_component(points: &FeatureMatrix, weight: f64, epsilon: f64, rng: &mut impl Rng) -> Gaussian {
    let v = points.cols();
    let var = points.column_variance_mean().max(epsilon) + epsilon;
    let i = rng.gen_range(0..points.rows());
    let mut cov = vec![0.0; v * v];
    for d in 0..v {
        cov[d * v + d] = var;
    }
    Gaussian {
        weight,
        mean: points.row(i).to_vec(),
        cov,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelSelection {
    pub log_likelihood: f64,
    pub free_parameters: usize,
    pub aic: f64,
    pub bic: f64,
}

/// `N_p = K + K v + K v (v + 1) / 2 - 1`.
pub fn free_parameters(k: usize, v: usize) -> usize {
    k + k * v + k * v * (v + 1) / 2 - 1
}

pub fn model_selection_metrics(points: &FeatureMatrix, mix: &GaussianMixture) -> Result<ModelSelection> {
    let (log_l, _) = gmm_estep(points, mix)?;
    let np = free_parameters(mix.len(), mix.dim());
    let n = points.rows() as f64;
    Ok(ModelSelection {
        log_likelihood: log_l,
        free_parameters: np,
        aic: -2.0 * log_l + 2.0 * np as f64,
        bic: -2.0 * log_l + np as f64 * n.ln(),
    })
}

/// Cold-start fit: k-means++ and Lloyd, then EM.
pub fn fit_from_scratch(
    points: &FeatureMatrix,
    k: usize,
    max_iters: usize,
    epsilon: f64,
    delta: f64,
    rng: &mut impl Rng,
) -> Result<(GaussianMixture, FitDiagnostics)> {
    gmm_fit(points, &kmeans_init(points, k, epsilon, rng)?, max_iters, epsilon, delta)
}

/// Initial mixture from a k-means++ seeded Lloyd run.
pub fn kmeans_init(points: &FeatureMatrix, k: usize, epsilon: f64, rng: &mut impl Rng) -> Result<GaussianMixture> {
    let km = kmeans_fit(points, k, 100, None, rng)?;
    mixture_from_kmeans(points, &km, epsilon)
}

/// Eigenvalues of a symmetric covariance, for invariant checks.
pub fn covariance_eigenvalues(g: &Gaussian) -> Vec<f64> {
    let v = g.mean.len();
    let m = DMatrix::from_row_slice(v, v, &g.cov);
    let eig: DVector<f64> = m.symmetric_eigenvalues();
    eig.iter().copied().collect()
}
