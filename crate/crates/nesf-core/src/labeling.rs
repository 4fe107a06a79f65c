//! Self-supervised target engine: aligned 2D/3D prototype banks, entropic
//! optimal-transport assignments via log-domain Sinkhorn scaling, hierarchical
//! fine targets solved per coarse class, and EMA prototype updates.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffcore::kernels::matmul;
use crate::diffcore::Tensor;
use crate::rng::{stream, Domain};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabelingConfig {
    /// Coarse similarity temperature.
    pub tau: f64,
    /// Fine similarity temperature.
    pub tau2: f64,
    /// Entropic regularization; the transport kernel is S^(1/epsilon).
    pub epsilon: f64,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for LabelingConfig {
    fn default() -> Self {
        LabelingConfig {
            tau: 0.1,
            tau2: 0.07,
            epsilon: 0.05,
            max_iters: 200,
            tol: 1e-7,
        }
    }
}

impl LabelingConfig {
    pub fn lambda(&self) -> f64 {
        1.0 / self.epsilon
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Level {
    Coarse,
    Fine,
}

/// Two aligned prototype sets per level. Fine class k is a child of coarse
/// class k / n; rows stay L2-normalized across every update.
#[derive(Clone, Debug)]
pub struct PrototypeBank {
    pub k: usize,
    /// Fine children per coarse class.
    pub n: usize,
    pub d: usize,
    pub p2d_coarse: Tensor<f64>,
    pub p3d_coarse: Tensor<f64>,
    pub p2d_fine: Tensor<f64>,
    pub p3d_fine: Tensor<f64>,
}

fn random_unit_rows(rows: usize, d: usize, seed: u64, bank_index: u64) -> Tensor<f64> {
    let mut rng = stream(seed, Domain::PrototypeInit, bank_index);
    let mut t = Tensor::from_fn(rows, d, |_, _| StandardNormal.sample(&mut rng));
    normalize_rows(&mut t);
    t
}

pub fn normalize_rows(t: &mut Tensor<f64>) {
    for r in 0..t.rows {
        let row = t.row_mut(r);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            for v in row {
                *v /= norm;
            }
        }
    }
}

impl PrototypeBank {
    pub fn new(k: usize, n: usize, d: usize, seed: u64) -> Self {
        PrototypeBank {
            k,
            n,
            d,
            p2d_coarse: random_unit_rows(k, d, seed, 0),
            p3d_coarse: random_unit_rows(k, d, seed, 1),
            p2d_fine: random_unit_rows(k * n, d, seed, 2),
            p3d_fine: random_unit_rows(k * n, d, seed, 3),
        }
    }

    pub fn k_fine(&self) -> usize {
        self.k * self.n
    }

    pub fn parent(&self, fine: usize) -> usize {
        fine / self.n
    }

    pub fn children(&self, coarse: usize) -> std::ops::Range<usize> {
        coarse * self.n..(coarse + 1) * self.n
    }

    /// Largest deviation of any prototype norm from 1.
    pub fn max_norm_err(&self) -> f64 {
        let mut worst = 0.0f64;
        for t in [&self.p2d_coarse, &self.p3d_coarse, &self.p2d_fine, &self.p3d_fine] {
            for r in 0..t.rows {
                let norm = t.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                worst = worst.max((norm - 1.0).abs());
            }
        }
        worst
    }

    fn level_protos(&self, level: Level) -> (&Tensor<f64>, &Tensor<f64>) {
        match level {
            Level::Coarse => (&self.p2d_coarse, &self.p3d_coarse),
            Level::Fine => (&self.p2d_fine, &self.p3d_fine),
        }
    }
}

/// Joint similarity softmax: S_ki = exp((<F2D_i, p2D_k> + <F3D_i, p3D_k>)/tau)
/// normalized over classes, one column per pixel.
pub fn score_matrix(
    f2d: &Tensor<f64>,
    f3d: &Tensor<f64>,
    bank: &PrototypeBank,
    level: Level,
    tau: f64,
) -> Tensor<f64> {
    let (p2d, p3d) = bank.level_protos(level);
    score_from_protos(f2d, f3d, p2d, p3d, tau)
}

fn score_from_protos(
    f2d: &Tensor<f64>,
    f3d: &Tensor<f64>,
    p2d: &Tensor<f64>,
    p3d: &Tensor<f64>,
    tau: f64,
) -> Tensor<f64> {
    assert_eq!(f2d.rows, f3d.rows);
    let s2 = matmul(p2d, f2d, false, true);
    let s3 = matmul(p3d, f3d, false, true);
    let (k, n) = (s2.rows, s2.cols);
    let mut s = Tensor::zeros(k, n);
    for i in 0..n {
        let mut hi = f64::NEG_INFINITY;
        for r in 0..k {
            let v = (s2.at(r, i) + s3.at(r, i)) / tau;
            s.data[r * n + i] = v;
            hi = hi.max(v);
        }
        let mut z = 0.0;
        for r in 0..k {
            let e = (s.data[r * n + i] - hi).exp();
            s.data[r * n + i] = e;
            z += e;
        }
        for r in 0..k {
            s.data[r * n + i] /= z;
        }
    }
    s
}

/// Entropic transport plan over U(1/N, 1/K).
#[derive(Clone, Debug)]
pub struct AssignmentMatrix {
    /// N x K, nonnegative, row sums 1/N and column sums 1/K at convergence.
    pub q: Tensor<f64>,
    pub converged: bool,
    /// Largest marginal deviation at exit.
    pub residual: f64,
    pub iters: usize,
}

impl AssignmentMatrix {
    pub fn assignments(&self) -> Vec<u32> {
        let (n, k) = (self.q.rows, self.q.cols);
        (0..n)
            .map(|i| {
                let row = self.q.row(i);
                let mut best = 0;
                for c in 1..k {
                    if row[c] > row[best] {
                        best = c;
                    }
                }
                best as u32
            })
            .collect()
    }
}

fn lse(acc: &mut f64, terms: impl Iterator<Item = f64>) {
    let mut hi = f64::NEG_INFINITY;
    let vals: Vec<f64> = terms.collect();
    for &v in &vals {
        hi = hi.max(v);
    }
    *acc = hi + vals.iter().map(|v| (v - hi).exp()).sum::<f64>().ln();
}

/// Log-domain Sinkhorn-Knopp on the kernel S^lambda, alternating row and
/// column scalings toward marginals (1/N, 1/K). Returns the current iterate
/// with `converged = false` if the residual never drops below `tol`.
pub fn sinkhorn(s: &Tensor<f64>, lambda: f64, max_iters: usize, tol: f64) -> AssignmentMatrix {
    let (k, n) = (s.rows, s.cols);
    assert!(k > 0 && n > 0);
    // logm is pixel-major: logm[i*k + j] = lambda * log S_ji.
    let mut logm = vec![0.0f64; n * k];
    for j in 0..k {
        for i in 0..n {
            let v = s.at(j, i);
            assert!(v > 0.0, "sinkhorn requires strictly positive scores");
            logm[i * k + j] = lambda * v.ln();
        }
    }
    let (lr, lc) = (-(n as f64).ln(), -(k as f64).ln());
    let mut u = vec![0.0f64; n];
    let mut v = vec![0.0f64; k];
    let mut q = Tensor::zeros(n, k);
    let mut residual = f64::INFINITY;
    let mut iters = 0;
    for it in 0..max_iters {
        iters = it + 1;
        for i in 0..n {
            let mut l = 0.0;
            lse(&mut l, (0..k).map(|j| logm[i * k + j] + v[j]));
            u[i] = lr - l;
        }
        for j in 0..k {
            let mut l = 0.0;
            lse(&mut l, (0..n).map(|i| logm[i * k + j] + u[i]));
            v[j] = lc - l;
        }
        for i in 0..n {
            for j in 0..k {
                q.data[i * k + j] = (logm[i * k + j] + u[i] + v[j]).exp();
            }
        }
        residual = marginal_residual(&q);
        if residual < tol {
            return AssignmentMatrix { q, converged: true, residual, iters };
        }
    }
    AssignmentMatrix { q, converged: false, residual, iters }
}

/// max |row_sum - 1/N| and |col_sum - 1/K| over an N x K plan.
pub fn marginal_residual(q: &Tensor<f64>) -> f64 {
    let (n, k) = (q.rows, q.cols);
    let mut worst = 0.0f64;
    let mut col = vec![0.0f64; k];
    for i in 0..n {
        let row = q.row(i);
        let rs: f64 = row.iter().sum();
        worst = worst.max((rs - 1.0 / n as f64).abs());
        for (c, &v) in col.iter_mut().zip(row) {
            *c += v;
        }
    }
    for &c in &col {
        worst = worst.max((c - 1.0 / k as f64).abs());
    }
    worst
}

/// Targets for one level: the stitched plan, per-pixel argmax assignments,
/// and bookkeeping for the EMA step and logs.
#[derive(Clone, Debug)]
pub struct Targets {
    /// N x K (coarse) or N x K_f (fine, rows scaled to sum 1/N).
    pub q: Tensor<f64>,
    pub assignments: Vec<u32>,
    /// Classes that received no pixel by argmax; skipped by the EMA update.
    pub empty_classes: Vec<u32>,
    /// Fine level only: coarse classes with fewer pixels than children, where
    /// the OT marginals are infeasible and a softmax argmax is used instead.
    pub fallback_classes: Vec<u32>,
    pub converged: bool,
    pub residual: f64,
}

fn empty_classes(assignments: &[u32], k: usize) -> Vec<u32> {
    let mut seen = vec![false; k];
    for &a in assignments {
        seen[a as usize] = true;
    }
    (0..k).filter(|&c| !seen[c]).map(|c| c as u32).collect()
}

/// Coarse targets: joint score softmax, entropic OT, row-argmax assignments.
/// Requires N >= K so the column marginals are feasible.
pub fn derive_coarse_targets(
    f2d: &Tensor<f64>,
    f3d: &Tensor<f64>,
    bank: &PrototypeBank,
    cfg: &LabelingConfig,
) -> Result<Targets> {
    let n = f2d.rows;
    if n < bank.k {
        return Err(Error::invalid(format!(
            "coarse OT needs at least K={} pixels, got {n}",
            bank.k
        )));
    }
    let s = score_matrix(f2d, f3d, bank, Level::Coarse, cfg.tau);
    let plan = sinkhorn(&s, cfg.lambda(), cfg.max_iters, cfg.tol);
    let assignments = plan.assignments();
    let empty = empty_classes(&assignments, bank.k);
    Ok(Targets {
        q: plan.q,
        assignments,
        empty_classes: empty,
        fallback_classes: Vec::new(),
        converged: plan.converged,
        residual: plan.residual,
    })
}

/// Fine targets: one independent OT per coarse class between its pixels and
/// its n children, stitched into an N x K_f plan whose rows sum to 1/N.
/// Classes with fewer than n pixels fall back to per-pixel softmax argmax.
pub fn derive_fine_targets(
    f2d: &Tensor<f64>,
    f3d: &Tensor<f64>,
    bank: &PrototypeBank,
    coarse_assignments: &[u32],
    cfg: &LabelingConfig,
) -> Targets {
    let n_pix = f2d.rows;
    assert_eq!(coarse_assignments.len(), n_pix);
    let d = f2d.cols;
    let kf = bank.k_fine();
    let mut q = Tensor::zeros(n_pix, kf);
    let mut assignments = vec![0u32; n_pix];
    let mut fallback = Vec::new();
    let mut converged = true;
    let mut residual = 0.0f64;

    for k in 0..bank.k {
        let members: Vec<usize> = (0..n_pix)
            .filter(|&i| coarse_assignments[i] as usize == k)
            .collect();
        if members.is_empty() {
            continue;
        }
        let m = members.len();
        let sub2 = Tensor::from_fn(m, d, |r, c| f2d.at(members[r], c));
        let sub3 = Tensor::from_fn(m, d, |r, c| f3d.at(members[r], c));
        let ch = bank.children(k);
        let p2 = Tensor::from_fn(bank.n, d, |r, c| bank.p2d_fine.at(ch.start + r, c));
        let p3 = Tensor::from_fn(bank.n, d, |r, c| bank.p3d_fine.at(ch.start + r, c));
        let sf = score_from_protos(&sub2, &sub3, &p2, &p3, cfg.tau2);
        if m >= bank.n {
            let block = sinkhorn(&sf, cfg.lambda(), cfg.max_iters, cfg.tol);
            converged &= block.converged;
            residual = residual.max(block.residual);
            let scale = m as f64 / n_pix as f64;
            let local = block.assignments();
            for (r, &i) in members.iter().enumerate() {
                for j in 0..bank.n {
                    q.data[i * kf + ch.start + j] = scale * block.q.at(r, j);
                }
                assignments[i] = (ch.start + local[r] as usize) as u32;
            }
        } else {
            fallback.push(k as u32);
            for (r, &i) in members.iter().enumerate() {
                let mut best = 0;
                for j in 0..bank.n {
                    // sf columns are per-pixel softmax over the children.
                    q.data[i * kf + ch.start + j] = sf.at(j, r) / n_pix as f64;
                    if sf.at(j, r) > sf.at(best, r) {
                        best = j;
                    }
                }
                assignments[i] = (ch.start + best) as u32;
            }
        }
    }
    let empty = empty_classes(&assignments, kf);
    Targets {
        q,
        assignments,
        empty_classes: empty,
        fallback_classes: fallback,
        converged,
        residual,
    }
}

/// Linear 0 -> 0.5 EMA mixing schedule over the training run.
pub fn beta_schedule(step: usize, total_steps: usize) -> f64 {
    if total_steps == 0 {
        return 0.5;
    }
    0.5 * (step as f64 / total_steps as f64).min(1.0)
}

/// EMA prototype update from batch assignments. Each bank blends class means
/// of both modalities with weight beta on its own modality; empty classes are
/// untouched and every updated row is re-normalized.
pub fn ema_update(
    bank: &mut PrototypeBank,
    level: Level,
    f2d: &Tensor<f64>,
    f3d: &Tensor<f64>,
    assignments: &[u32],
    mu: f64,
    beta: f64,
) {
    let d = bank.d;
    let classes = match level {
        Level::Coarse => bank.k,
        Level::Fine => bank.k_fine(),
    };
    assert_eq!(f2d.rows, assignments.len());
    let mut sum2 = vec![0.0f64; classes * d];
    let mut sum3 = vec![0.0f64; classes * d];
    let mut count = vec![0usize; classes];
    for (i, &a) in assignments.iter().enumerate() {
        let a = a as usize;
        count[a] += 1;
        for c in 0..d {
            sum2[a * d + c] += f2d.at(i, c);
            sum3[a * d + c] += f3d.at(i, c);
        }
    }
    let (p2d, p3d) = match level {
        Level::Coarse => (&mut bank.p2d_coarse, &mut bank.p3d_coarse),
        Level::Fine => (&mut bank.p2d_fine, &mut bank.p3d_fine),
    };
    for k in 0..classes {
        if count[k] == 0 {
            continue;
        }
        let inv = 1.0 / count[k] as f64;
        let r2 = p2d.row_mut(k);
        for c in 0..d {
            let (m2, m3) = (sum2[k * d + c] * inv, sum3[k * d + c] * inv);
            r2[c] = mu * r2[c] + (1.0 - mu) * (beta * m2 + (1.0 - beta) * m3);
        }
        let r3 = p3d.row_mut(k);
        for c in 0..d {
            let (m2, m3) = (sum2[k * d + c] * inv, sum3[k * d + c] * inv);
            r3[c] = mu * r3[c] + (1.0 - mu) * (beta * m3 + (1.0 - beta) * m2);
        }
    }
    normalize_rows(p2d);
    normalize_rows(p3d);
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn unit_rows(rows: usize, d: usize, seed: u64) -> Tensor<f64> {
        let mut t = random_unit_rows(rows, d, seed, 9);
        normalize_rows(&mut t);
        t
    }

    #[test]
    fn score_matrix_uniform_and_sharp_limits() {
        let bank = PrototypeBank::new(4, 2, 8, 1);
        let n = 6;
        // Zero features: all similarities equal, scores uniform.
        let z = Tensor::zeros(n, 8);
        let s = score_matrix(&z, &z, &bank, Level::Coarse, 0.1);
        for &v in &s.data {
            assert!((v - 0.25).abs() < 1e-12);
        }
        // tau -> 0+ with a unique max turns into one-hot columns.
        let f2 = Tensor::from_fn(n, 8, |r, c| bank.p2d_coarse.at(r % 4, c));
        let f3 = Tensor::from_fn(n, 8, |r, c| bank.p3d_coarse.at(r % 4, c));
        let s = score_matrix(&f2, &f3, &bank, Level::Coarse, 1e-4);
        for i in 0..n {
            for k in 0..4 {
                let want = if k == i % 4 { 1.0 } else { 0.0 };
                assert!((s.at(k, i) - want).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn score_matrix_matches_hand_softmax() {
        // 3 pixels, 2 prototypes in 2D: dot products picked by hand.
        let mut bank = PrototypeBank::new(2, 2, 2, 3);
        bank.p2d_coarse = Tensor::from_fn(2, 2, |r, _c| if r == 0 { 1.0 } else { 0.0 });
        bank.p2d_coarse.data = vec![1.0, 0.0, 0.0, 1.0];
        bank.p3d_coarse = bank.p2d_coarse.clone();
        let f = Tensor {
            rows: 3,
            cols: 2,
            data: vec![1.0, 0.0, 0.0, 1.0, 0.6, 0.8],
        };
        let tau = 0.5;
        let s = score_matrix(&f, &f, &bank, Level::Coarse, tau);
        // Joint similarity doubles each dot product.
        for (i, dots) in [[1.0, 0.0], [0.0, 1.0], [0.6, 0.8]].iter().enumerate() {
            let e0 = (2.0 * dots[0] / tau).exp();
            let e1 = (2.0 * dots[1] / tau).exp();
            assert!((s.at(0, i) - e0 / (e0 + e1)).abs() < 1e-12);
            assert!((s.at(1, i) - e1 / (e0 + e1)).abs() < 1e-12);
        }
    }

    #[test]
    fn sinkhorn_uniform_scores_give_uniform_plan() {
        let s = Tensor::from_fn(5, 15, |_, _| 0.2);
        let out = sinkhorn(&s, 20.0, 100, 1e-10);
        assert!(out.converged);
        for &v in &out.q.data {
            assert!((v - 1.0 / 75.0).abs() < 1e-12);
        }
    }

    /// Plain multiplicative Sinkhorn as an oracle for the log-domain version.
    fn dense_oracle(s: &Tensor<f64>, lambda: f64, iters: usize) -> Tensor<f64> {
        let (k, n) = (s.rows, s.cols);
        let mut m = Tensor::from_fn(n, k, |i, j| s.at(j, i).powf(lambda));
        for _ in 0..iters {
            for i in 0..n {
                let rs: f64 = m.row(i).iter().sum();
                for v in m.row_mut(i) {
                    *v *= 1.0 / (n as f64 * rs);
                }
            }
            for j in 0..k {
                let mut cs = 0.0;
                for i in 0..n {
                    cs += m.at(i, j);
                }
                for i in 0..n {
                    m.data[i * k + j] *= 1.0 / (k as f64 * cs);
                }
            }
        }
        m
    }

    #[test]
    fn sinkhorn_matches_dense_oracle_on_split_instance() {
        // Two classes, four pixels, scores strongly favoring a 2/2 split.
        let mut s = Tensor::zeros(2, 4);
        for i in 0..4 {
            let fav = if i < 2 { 0 } else { 1 };
            s.data[fav * 4 + i] = 0.9;
            s.data[(1 - fav) * 4 + i] = 0.1;
        }
        let out = sinkhorn(&s, 20.0, 200, 1e-12);
        assert!(out.converged);
        assert!(out.residual < 1e-12);
        let oracle = dense_oracle(&s, 20.0, 400);
        for (a, b) in out.q.data.iter().zip(&oracle.data) {
            assert!((a - b).abs() < 1e-10, "log-domain {a} vs oracle {b}");
        }
        let a = out.assignments();
        assert_eq!(a, vec![0, 0, 1, 1]);
        assert!(marginal_residual(&out.q) < 1e-6);
    }

    #[test]
    fn sinkhorn_marginals_on_large_random_input() {
        let mut rng = stream(7, Domain::Probe, 40);
        let n = 4096;
        let mut s = Tensor::from_fn(20, n, |_, _| rng.gen_range(0.01..1.0f64));
        // Column-normalize like score_matrix output.
        for i in 0..n {
            let z: f64 = (0..20).map(|k| s.at(k, i)).sum();
            for k in 0..20 {
                s.data[k * n + i] /= z;
            }
        }
        let out = sinkhorn(&s, 20.0, 100, 1e-7);
        assert!(out.iters <= 100);
        assert!(out.residual < 1e-6, "residual {}", out.residual);
    }

    #[test]
    fn sinkhorn_ignores_per_pixel_scaling() {
        let mut rng = stream(11, Domain::Probe, 41);
        let s = Tensor::from_fn(6, 40, |_, _| rng.gen_range(0.05..1.0f64));
        let mut scaled = s.clone();
        for i in 0..40 {
            let c = rng.gen_range(0.1..10.0);
            for k in 0..6 {
                scaled.data[k * 40 + i] *= c;
            }
        }
        let a = sinkhorn(&s, 20.0, 500, 1e-11);
        let b = sinkhorn(&scaled, 20.0, 500, 1e-11);
        assert!(a.converged && b.converged);
        for (x, y) in a.q.data.iter().zip(&b.q.data) {
            assert!((x - y).abs() < 1e-8);
        }
    }

    #[test]
    fn large_lambda_recovers_argmax_on_balanced_instance() {
        // Two pixels per class already satisfy the column marginals.
        let (k, n) = (4, 8);
        let mut s = Tensor::from_fn(k, n, |_, _| 0.1);
        for i in 0..n {
            s.data[(i / 2) * n + i] = 0.7;
        }
        let out = sinkhorn(&s, 400.0, 2000, 1e-10);
        let a = out.assignments();
        for (i, &c) in a.iter().enumerate() {
            assert_eq!(c as usize, i / 2);
        }
        for i in 0..n {
            // Rows concentrate: nearly all of the 1/N mass on the argmax.
            assert!(out.q.at(i, i / 2) > 0.99 / n as f64);
        }
    }

    #[test]
    fn coarse_targets_respect_feature_clusters() {
        let bank = PrototypeBank::new(3, 2, 16, 5);
        let mut rng = stream(5, Domain::Probe, 42);
        let n = 30;
        let mut f2 = Tensor::zeros(n, 16);
        let mut f3 = Tensor::zeros(n, 16);
        for i in 0..n {
            let k = i / 10;
            for c in 0..16 {
                f2.data[i * 16 + c] = bank.p2d_coarse.at(k, c) + rng.gen_range(-0.02..0.02);
                f3.data[i * 16 + c] = bank.p3d_coarse.at(k, c) + rng.gen_range(-0.02..0.02);
            }
        }
        normalize_rows(&mut f2);
        normalize_rows(&mut f3);
        let t = derive_coarse_targets(&f2, &f3, &bank, &LabelingConfig::default()).unwrap();
        assert!(t.converged);
        for (i, &a) in t.assignments.iter().enumerate() {
            assert_eq!(a as usize, i / 10, "pixel {i} left its cluster");
        }
        assert!(t.empty_classes.is_empty());
    }

    #[test]
    fn identical_pixels_are_equipartitioned_in_mass() {
        let bank = PrototypeBank::new(4, 2, 8, 6);
        let f = Tensor::from_fn(12, 8, |_, c| if c == 0 { 1.0 } else { 0.0 });
        let t = derive_coarse_targets(&f, &f, &bank, &LabelingConfig::default()).unwrap();
        for &v in &t.q.data {
            assert!((v - 1.0 / (12.0 * 4.0)).abs() < 1e-9);
        }
    }

    #[test]
    fn coarse_targets_reject_small_batches() {
        let bank = PrototypeBank::new(8, 2, 4, 7);
        let f = unit_rows(3, 4, 2);
        assert!(derive_coarse_targets(&f, &f, &bank, &LabelingConfig::default()).is_err());
    }

    #[test]
    fn fine_uniform_block_equipartitions_children() {
        let bank = PrototypeBank::new(2, 5, 8, 8);
        // All ten pixels in coarse class 1, orthogonal to every fine child.
        let f = Tensor::from_fn(10, 8, |_, _| 0.0);
        let coarse = vec![1u32; 10];
        let t = derive_fine_targets(&f, &f, &bank, &coarse, &LabelingConfig::default());
        assert!(t.fallback_classes.is_empty());
        for j in bank.children(1) {
            let mass: f64 = (0..10).map(|i| t.q.at(i, j)).sum();
            // Two pixels of mass per child: 2 * (1/10).
            assert!((mass - 0.2).abs() < 1e-9);
        }
        for j in bank.children(0) {
            for i in 0..10 {
                assert_eq!(t.q.at(i, j), 0.0);
            }
        }
    }

    #[test]
    fn fine_block_matches_independent_sinkhorn() {
        let bank = PrototypeBank::new(1, 5, 12, 9);
        let f2 = unit_rows(10, 12, 31);
        let f3 = unit_rows(10, 12, 32);
        let coarse = vec![0u32; 10];
        let cfg = LabelingConfig::default();
        let t = derive_fine_targets(&f2, &f3, &bank, &coarse, &cfg);
        let sf = score_from_protos(&f2, &f3, &bank.p2d_fine, &bank.p3d_fine, cfg.tau2);
        let oracle = sinkhorn(&sf, cfg.lambda(), cfg.max_iters, cfg.tol);
        for i in 0..10 {
            for j in 0..5 {
                assert!((t.q.at(i, j) - oracle.q.at(i, j)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn hierarchy_containment_and_fallback() {
        let bank = PrototypeBank::new(4, 5, 16, 10);
        let f2 = unit_rows(64, 16, 33);
        let f3 = unit_rows(64, 16, 34);
        let cfg = LabelingConfig::default();
        let coarse = derive_coarse_targets(&f2, &f3, &bank, &cfg).unwrap();
        let fine = derive_fine_targets(&f2, &f3, &bank, &coarse.assignments, &cfg);
        for i in 0..64 {
            assert_eq!(
                bank.parent(fine.assignments[i] as usize) as u32,
                coarse.assignments[i],
                "pixel {i} escaped its coarse class"
            );
        }
        // Force a starved coarse class: three pixels only.
        let tiny = unit_rows(3, 16, 35);
        let fine = derive_fine_targets(&tiny, &tiny, &bank, &[2, 2, 2], &cfg);
        assert_eq!(fine.fallback_classes, vec![2]);
        for i in 0..3 {
            assert_eq!(bank.parent(fine.assignments[i] as usize), 2);
            let rs: f64 = fine.q.row(i).iter().sum();
            assert!((rs - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn ema_identity_and_pull_limits() {
        let mut bank = PrototypeBank::new(3, 2, 8, 11);
        let before = bank.clone();
        let f2 = unit_rows(9, 8, 36);
        let f3 = unit_rows(9, 8, 37);
        let assign: Vec<u32> = (0..9).map(|i| (i % 3) as u32).collect();
        ema_update(&mut bank, Level::Coarse, &f2, &f3, &assign, 1.0, 0.3);
        for (a, b) in bank.p2d_coarse.data.iter().zip(&before.p2d_coarse.data) {
            assert!((a - b).abs() < 1e-15);
        }

        // mu = 0, beta = 1: the 2D bank becomes the normalized 2D class mean.
        let mut bank = PrototypeBank::new(1, 2, 8, 12);
        let assign = vec![0u32; 9];
        ema_update(&mut bank, Level::Coarse, &f2, &f3, &assign, 0.0, 1.0);
        let mut mean = vec![0.0f64; 8];
        for i in 0..9 {
            for c in 0..8 {
                mean[c] += f2.at(i, c) / 9.0;
            }
        }
        let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
        for c in 0..8 {
            assert!((bank.p2d_coarse.at(0, c) - mean[c] / norm).abs() < 1e-12);
        }
        // And the 3D bank symmetrically becomes the 3D mean.
        let mut mean3 = vec![0.0f64; 8];
        for i in 0..9 {
            for c in 0..8 {
                mean3[c] += f3.at(i, c) / 9.0;
            }
        }
        let norm3 = mean3.iter().map(|v| v * v).sum::<f64>().sqrt();
        for c in 0..8 {
            assert!((bank.p3d_coarse.at(0, c) - mean3[c] / norm3).abs() < 1e-12);
        }
    }

    #[test]
    fn ema_keeps_norms_and_skips_empty_classes() {
        let mut bank = PrototypeBank::new(4, 3, 8, 13);
        assert!(bank.max_norm_err() < 1e-9);
        let sentinel = bank.p2d_coarse.row(3).to_vec();
        let f2 = unit_rows(20, 8, 38);
        let f3 = unit_rows(20, 8, 39);
        let mut rng = stream(14, Domain::Probe, 43);
        for step in 0..50 {
            // Classes 0..3 only; class 3 stays empty throughout.
            let assign: Vec<u32> = (0..20).map(|_| rng.gen_range(0..3u32)).collect();
            let beta = beta_schedule(step, 50);
            ema_update(&mut bank, Level::Coarse, &f2, &f3, &assign, 0.996, beta);
            let fine_assign: Vec<u32> = (0..20).map(|_| rng.gen_range(0..12u32)).collect();
            ema_update(&mut bank, Level::Fine, &f2, &f3, &fine_assign, 0.996, beta);
            assert!(bank.max_norm_err() < 1e-9);
        }
        assert_eq!(bank.p2d_coarse.row(3), &sentinel[..]);
    }

    #[test]
    fn beta_schedule_endpoints_and_midpoint() {
        assert_eq!(beta_schedule(0, 100), 0.0);
        assert!((beta_schedule(50, 100) - 0.25).abs() < 1e-15);
        assert!((beta_schedule(100, 100) - 0.5).abs() < 1e-15);
        assert_eq!(beta_schedule(150, 100), 0.5);
    }
}
