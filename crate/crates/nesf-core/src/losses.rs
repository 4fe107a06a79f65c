//! Training objectives: symmetric InfoNCE feature alignment, uncertainty-
//! attenuated joint cross-entropy against transport targets, hierarchical
//! prototype loss, masked depth L1, and the weighted total. All terms are
//! tape nodes so one backward sweep covers the whole step.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::rc::Rc;

use crate::diffcore::{NodeId, Scalar, Tape, Tensor, sc};
use crate::labeling::PrototypeBank;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub depth: f64,
    pub dist: f64,
    pub nce: f64,
    pub ce_coarse: f64,
    pub ce_fine: f64,
    pub hierar: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            depth: 2.0,
            dist: 0.5,
            nce: 0.2,
            ce_coarse: 0.2,
            ce_fine: 0.2,
            hierar: 0.05,
        }
    }
}

/// Per-step scalar values of every term plus the weighted total.
#[derive(Clone, Copy, Debug)]
pub struct LossReport {
    pub nce: f64,
    pub ce_coarse: f64,
    pub ce_fine: f64,
    pub hierar: f64,
    pub depth: f64,
    pub dist: f64,
    pub total: f64,
    pub weights: LossWeights,
}

impl LossReport {
    /// The total must always be reconstructible from its parts.
    pub fn recompute_total(&self) -> f64 {
        let w = &self.weights;
        w.depth * self.depth
            + w.dist * self.dist
            + w.nce * self.nce
            + w.ce_coarse * self.ce_coarse
            + w.ce_fine * self.ce_fine
            + w.hierar * self.hierar
    }
}

/// Term nodes feeding the weighted total.
pub struct LossTerms {
    pub nce: NodeId,
    pub ce_coarse: NodeId,
    pub ce_fine: NodeId,
    pub hierar: NodeId,
    pub depth: NodeId,
    pub dist: NodeId,
}

pub fn total_loss<T: Scalar>(
    tape: &mut Tape<T>,
    terms: &LossTerms,
    weights: LossWeights,
) -> (NodeId, LossReport) {
    let val = |tape: &Tape<T>, n: NodeId| tape.value(n).item().to_f64().unwrap();
    let report = LossReport {
        nce: val(tape, terms.nce),
        ce_coarse: val(tape, terms.ce_coarse),
        ce_fine: val(tape, terms.ce_fine),
        hierar: val(tape, terms.hierar),
        depth: val(tape, terms.depth),
        dist: val(tape, terms.dist),
        total: 0.0,
        weights,
    };
    let total = tape.weighted_sum(&[
        (terms.depth, weights.depth),
        (terms.dist, weights.dist),
        (terms.nce, weights.nce),
        (terms.ce_coarse, weights.ce_coarse),
        (terms.ce_fine, weights.ce_fine),
        (terms.hierar, weights.hierar),
    ]);
    let report = LossReport {
        total: val(tape, total),
        ..report
    };
    (total, report)
}

/// Symmetric InfoNCE over paired pixel features (rows of N x D matrices):
/// each pair is its own positive, all other pixels are negatives in both
/// directions, averaged with the 1/(2N) prefactor. Callers align a rendered
/// feature against an image feature and render with detached weights so the
/// alignment cannot steer geometry or segmentation.
pub fn loss_nce<T: Scalar>(tape: &mut Tape<T>, f2d: NodeId, f3d: NodeId, tau: f64) -> NodeId {
    let n = tape.value(f2d).rows;
    assert!(n >= 2, "InfoNCE needs at least two pixels");
    assert_eq!(tape.value(f3d).rows, n);
    let f3t = tape.transpose(f3d);
    let sims = tape.affine(f2d, f3t, None);
    let st = tape.scale(sims, sc(1.0 / tau));
    let d = tape.diag(st);
    let stt = tape.transpose(st);
    let lse_2to3 = tape.lse_cols(stt);
    let lse_3to2 = tape.lse_cols(st);
    let la = tape.sum_all(lse_2to3);
    let lb = tape.sum_all(lse_3to2);
    let ld = tape.sum_all(d);
    let half = 1.0 / (2.0 * n as f64);
    tape.weighted_sum(&[(la, half), (lb, half), (ld, -2.0 * half)])
}

/// Averaged Gaussian perturbation shared by both modalities: the mean of
/// `n_s` standard-normal draws per logit entry.
pub fn ce_noise<T: Scalar>(rows: usize, cols: usize, n_s: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let mut acc = vec![0.0f64; rows * cols];
    for _ in 0..n_s {
        for a in acc.iter_mut() {
            let e: f64 = StandardNormal.sample(rng);
            *a += e;
        }
    }
    Tensor {
        rows,
        cols,
        data: acc.into_iter().map(|v| sc(v / n_s as f64)).collect(),
    }
}

/// Joint uncertainty-attenuated cross-entropy. `q` is the transport plan
/// (N x K, rows summing to 1/N); logits and uncertainty are K x N nodes.
/// Both modalities are perturbed by the SAME averaged noise so they share
/// the uncertainty model, then scored against `q`.
pub fn loss_ce_joint<T: Scalar>(
    tape: &mut Tape<T>,
    q: &Tensor<f64>,
    logits2d: NodeId,
    logits3d: NodeId,
    unc: NodeId,
    n_s: usize,
    rng: &mut ChaCha8Rng,
) -> NodeId {
    let (k, n) = {
        let v = tape.value(logits2d);
        (v.rows, v.cols)
    };
    assert_eq!((q.rows, q.cols), (n, k), "plan transposed against logits");
    let eps = ce_noise::<T>(k, n, n_s, rng);
    let e = tape.constant(eps);
    let qt = tape.constant(Tensor::from_fn(k, n, |r, c| sc(q.at(c, r))));
    let mut log_scores = Vec::new();
    for logits in [logits2d, logits3d] {
        let noise = tape.mul(unc, e);
        let pert = tape.add(logits, noise);
        log_scores.push(tape.log_softmax_cols(pert));
    }
    let lsum = tape.add(log_scores[0], log_scores[1]);
    let prod = tape.mul(lsum, qt);
    let s = tape.sum_all(prod);
    tape.scale(s, sc(-1.0))
}

fn one_hot<T: Scalar>(k: usize, labels: &[u32]) -> Tensor<T> {
    let mut h = Tensor::zeros(k, labels.len());
    for (i, &a) in labels.iter().enumerate() {
        h.data[a as usize * labels.len() + i] = T::one();
    }
    h
}

/// Per-pixel contrastive loss against one prototype level: logsumexp over
/// all classes minus the assigned similarity, both at temperature tau.
/// Returns a 1 x N node.
fn prototype_nll<T: Scalar>(
    tape: &mut Tape<T>,
    f: NodeId,
    protos: &Tensor<f64>,
    labels: &[u32],
    tau: f64,
) -> NodeId {
    let p = tape.constant(Tensor::from_fn(protos.rows, protos.cols, |r, c| {
        sc(protos.at(r, c))
    }));
    let ft = tape.transpose(f);
    let sims = tape.affine(p, ft, None);
    let st = tape.scale(sims, sc(1.0 / tau));
    let lse = tape.lse_cols(st);
    let h = tape.constant(one_hot(protos.rows, labels));
    let own_terms = tape.mul(st, h);
    let own = tape.col_sum(own_terms);
    tape.sub(lse, own)
}

fn class_members(labels: &[u32]) -> Vec<(u32, Vec<u32>)> {
    let mut map: std::collections::BTreeMap<u32, Vec<u32>> = Default::default();
    for (i, &a) in labels.iter().enumerate() {
        map.entry(a).or_default().push(i as u32);
    }
    map.into_iter().collect()
}

/// Hierarchical prototype loss: half the classwise mean of coarse
/// pixel-to-prototype losses, plus the classwise mean of fine losses clamped
/// from below by the worst coarse loss inside the parent class. Applied to
/// the 2D and 3D banks independently and averaged. Prototypes are constants;
/// gradients reach only the features.
pub fn loss_hierar<T: Scalar>(
    tape: &mut Tape<T>,
    f2d: NodeId,
    f3d: NodeId,
    bank: &PrototypeBank,
    coarse: &[u32],
    fine: &[u32],
    tau: f64,
) -> NodeId {
    let n = tape.value(f2d).rows;
    assert_eq!(coarse.len(), n);
    assert_eq!(fine.len(), n);
    let coarse_groups = class_members(coarse);
    let fine_groups = class_members(fine);

    // Pixel weights folding the class means: coarse carries the printed 1/2.
    let mut wc = vec![0.0f64; n];
    for (_, members) in &coarse_groups {
        let w = 0.5 / (coarse_groups.len() as f64 * members.len() as f64);
        for &i in members {
            wc[i as usize] = w;
        }
    }
    let mut wf = vec![0.0f64; n];
    for (_, members) in &fine_groups {
        let w = 1.0 / (fine_groups.len() as f64 * members.len() as f64);
        for &i in members {
            wf[i as usize] = w;
        }
    }
    let wc = tape.constant(Tensor {
        rows: 1,
        cols: n,
        data: wc.into_iter().map(sc).collect(),
    });
    let wf = tape.constant(Tensor {
        rows: 1,
        cols: n,
        data: wf.into_iter().map(sc).collect(),
    });

    let mut per_modality = Vec::new();
    for (f, pc, pf) in [
        (f2d, &bank.p2d_coarse, &bank.p2d_fine),
        (f3d, &bank.p3d_coarse, &bank.p3d_fine),
    ] {
        let lc = prototype_nll(tape, f, pc, coarse, tau);
        let wlc = tape.mul(lc, wc);
        let coarse_term = tape.sum_all(wlc);

        // Worst coarse loss inside each nonempty class, broadcast back to
        // its pixels through a one-hot indicator.
        let mut maxes = Vec::new();
        let mut indicator = Tensor::zeros(coarse_groups.len(), n);
        for (gi, (_, members)) in coarse_groups.iter().enumerate() {
            let gathered = tape.gather_cols(lc, Rc::new(members.clone()));
            maxes.push(tape.reduce_max(gathered));
            for &i in members {
                indicator.data[gi * n + i as usize] = T::one();
            }
        }
        let mut maxvec = maxes[0];
        for &m in &maxes[1..] {
            maxvec = tape.concat_rows(maxvec, m);
        }
        let maxrow = tape.transpose(maxvec);
        let ind = tape.constant(indicator);
        let parent_max = tape.affine(maxrow, ind, None);

        let lf = prototype_nll(tape, f, pf, fine, tau);
        let clamped = tape.max_pair(lf, parent_max);
        let wlf = tape.mul(clamped, wf);
        let fine_term = tape.sum_all(wlf);
        per_modality.push(tape.add(coarse_term, fine_term));
    }
    let s = tape.add(per_modality[0], per_modality[1]);
    tape.scale(s, sc(0.5))
}

/// Masked L1 on metric depth (ground truth is metric here, so no scale-shift
/// alignment). Returns the loss node and whether the mask was empty, in
/// which case the loss is a constant zero. Masked-out pixels never enter the
/// graph, so non-finite depths on missed rays are harmless.
pub fn loss_depth<T: Scalar>(
    tape: &mut Tape<T>,
    rendered: NodeId,
    gt: &Tensor<f64>,
    mask: &[bool],
) -> (NodeId, bool) {
    let n = tape.value(rendered).cols;
    assert_eq!(tape.value(rendered).rows, 1);
    assert_eq!(gt.cols, n);
    assert_eq!(mask.len(), n);
    let valid: Vec<u32> = (0..n).filter(|&c| mask[c]).map(|c| c as u32).collect();
    if valid.is_empty() {
        return (tape.constant(Tensor::scalar(T::zero())), true);
    }
    let gtc = tape.constant(Tensor::from_fn(1, valid.len(), |_, c| {
        sc(gt.at(0, valid[c] as usize))
    }));
    let pred = tape.gather_cols(rendered, Rc::new(valid));
    let diff = tape.sub(pred, gtc);
    let ad = tape.abs(diff);
    (tape.mean_all(ad), false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::gradcheck::{check_direction, check_params};
    use crate::diffcore::params::Group;
    use crate::diffcore::ParamStore;
    use crate::rng::{stream, Domain};
    use rand::Rng;

    fn eye(n: usize) -> Tensor<f64> {
        Tensor::from_fn(n, n, |r, c| if r == c { 1.0 } else { 0.0 })
    }

    fn normalize_rows_node(
        tape: &mut Tape<f64>,
        store: &ParamStore<f64>,
        pid: crate::diffcore::ParamId,
    ) -> NodeId {
        let p = tape.param(store, pid);
        let pt = tape.transpose(p);
        let nt = tape.normalize_cols(pt);
        tape.transpose(nt)
    }

    #[test]
    fn nce_closed_forms() {
        let tau = 0.1;
        // Identical pairs, mutually orthogonal pixels.
        for n in [2usize, 4] {
            let mut tape = Tape::new();
            let f = tape.constant(eye(n));
            let loss = loss_nce(&mut tape, f, f, tau);
            let expected = (1.0 + (n as f64 - 1.0) * (-1.0 / tau).exp()).ln();
            let got = tape.value(loss).item();
            assert!((got - expected).abs() < 1e-10, "n={n}: {got} vs {expected}");
        }
        // Two identical pixels: every similarity equal, loss = log 2.
        let mut tape = Tape::new();
        let f = tape.constant(Tensor::from_fn(2, 3, |_, c| if c == 0 { 1.0 } else { 0.0 }));
        let loss = loss_nce(&mut tape, f, f, tau);
        assert!((tape.value(loss).item() - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn nce_gradients_match_fd() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = stream(3, Domain::Probe, 50);
        let a = Tensor::from_fn(5, 4, |_, _| rng.gen_range(-1.0..1.0));
        let b = Tensor::from_fn(5, 4, |_, _| rng.gen_range(-1.0..1.0));
        let pa = store.add("a", Group::Encoder, a);
        let pb = store.add("b", Group::Decoder, b);
        let report = check_params(&mut store, &[pa, pb], 6, 1e-5, 51, &mut |tape, store| {
            let fa = normalize_rows_node(tape, store, pa);
            let fb = normalize_rows_node(tape, store, pb);
            loss_nce(tape, fa, fb, 0.1)
        });
        assert!(report.max_rel_err < 1e-6, "{report:?}");
    }

    fn random_plan(n: usize, k: usize, seed: u64) -> Tensor<f64> {
        let mut rng = stream(seed, Domain::Probe, 52);
        let mut q = Tensor::from_fn(n, k, |_, _| rng.gen_range(0.1..1.0f64));
        for r in 0..n {
            let s: f64 = q.row(r).iter().sum();
            for v in q.row_mut(r) {
                *v /= s * n as f64;
            }
        }
        q
    }

    #[test]
    fn ce_zero_uncertainty_is_plain_cross_entropy() {
        let (k, n) = (5, 7);
        let mut rng = stream(4, Domain::Probe, 53);
        let l2 = Tensor::from_fn(k, n, |_, _| rng.gen_range(-2.0..2.0));
        let l3 = Tensor::from_fn(k, n, |_, _| rng.gen_range(-2.0..2.0));
        let q = random_plan(n, k, 5);
        let mut tape = Tape::new();
        let n2 = tape.constant(l2.clone());
        let n3 = tape.constant(l3.clone());
        let u = tape.constant(Tensor::zeros(k, n));
        let mut noise_rng = stream(6, Domain::CeNoise, 0);
        let loss = loss_ce_joint(&mut tape, &q, n2, n3, u, 8, &mut noise_rng);

        let mut expected = 0.0;
        for logits in [&l2, &l3] {
            for i in 0..n {
                let hi = (0..k).map(|r| logits.at(r, i)).fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = (0..k).map(|r| (logits.at(r, i) - hi).exp()).sum();
                for r in 0..k {
                    let log_s = logits.at(r, i) - hi - z.ln();
                    expected -= q.at(i, r) * log_s;
                }
            }
        }
        assert!((tape.value(loss).item() - expected).abs() < 1e-9);
    }

    #[test]
    fn ce_confident_one_hot_is_near_zero() {
        let (k, n) = (4, 6);
        let labels: Vec<u32> = (0..n).map(|i| (i % k) as u32).collect();
        let logits = Tensor::from_fn(k, n, |r, c| if r as u32 == labels[c] { 30.0 } else { 0.0 });
        let mut q = Tensor::zeros(n, k);
        for (i, &a) in labels.iter().enumerate() {
            q.data[i * k + a as usize] = 1.0 / n as f64;
        }
        let mut tape = Tape::new();
        let n2 = tape.constant(logits.clone());
        let n3 = tape.constant(logits);
        let u = tape.constant(Tensor::zeros(k, n));
        let mut noise_rng = stream(6, Domain::CeNoise, 1);
        let loss = loss_ce_joint(&mut tape, &q, n2, n3, u, 8, &mut noise_rng);
        assert!(tape.value(loss).item() < 1e-6);
    }

    #[test]
    fn ce_noise_is_seed_deterministic() {
        let (k, n) = (3, 5);
        let mut rng = stream(7, Domain::Probe, 54);
        let l2 = Tensor::from_fn(k, n, |_, _| rng.gen_range(-1.0..1.0));
        let l3 = Tensor::from_fn(k, n, |_, _| rng.gen_range(-1.0..1.0));
        let u = Tensor::from_fn(k, n, |_, _| rng.gen_range(0.1..0.5));
        let q = random_plan(n, k, 8);
        let run = |index: u64| {
            let mut tape = Tape::new();
            let n2 = tape.constant(l2.clone());
            let n3 = tape.constant(l3.clone());
            let un = tape.constant(u.clone());
            let mut noise = stream(9, Domain::CeNoise, index);
            let loss = loss_ce_joint(&mut tape, &q, n2, n3, un, 8, &mut noise);
            tape.value(loss).item()
        };
        assert_eq!(run(0), run(0));
        assert_ne!(run(0), run(1));
    }

    #[test]
    fn ce_gradients_match_fd() {
        let (k, n) = (4, 5);
        let mut store = ParamStore::<f64>::new();
        let mut rng = stream(10, Domain::Probe, 55);
        let l2 = store.add(
            "l2",
            Group::Encoder,
            Tensor::from_fn(k, n, |_, _| rng.gen_range(-1.0..1.0)),
        );
        let l3 = store.add(
            "l3",
            Group::Field,
            Tensor::from_fn(k, n, |_, _| rng.gen_range(-1.0..1.0)),
        );
        let ur = store.add(
            "u",
            Group::Encoder,
            Tensor::from_fn(k, n, |_, _| rng.gen_range(-0.5..0.5)),
        );
        let q = random_plan(n, k, 11);
        let report = check_params(&mut store, &[l2, l3, ur], 6, 1e-5, 56, &mut |tape, store| {
            let n2 = tape.param(store, l2);
            let n3 = tape.param(store, l3);
            let raw = tape.param(store, ur);
            let un = tape.softplus(raw);
            let mut noise = stream(12, Domain::CeNoise, 0);
            loss_ce_joint(tape, &q, n2, n3, un, 8, &mut noise)
        });
        assert!(report.max_rel_err < 1e-6, "{report:?}");
    }

    fn hand_bank() -> PrototypeBank {
        let mut bank = PrototypeBank::new(2, 1, 2, 1);
        bank.p2d_coarse = eye(2);
        bank.p3d_coarse = eye(2);
        bank.p2d_fine = eye(2);
        bank.p3d_fine = eye(2);
        bank
    }

    #[test]
    fn hierar_matches_hand_evaluation() {
        let bank = hand_bank();
        let tau = 0.1;
        let mut tape = Tape::new();
        let f = tape.constant(eye(2));
        let loss = loss_hierar(&mut tape, f, f, &bank, &[0, 1], &[0, 1], tau);
        // Per pixel: log(e^{1/tau} + e^0) - 1/tau = log1p(e^{-1/tau}) at both
        // levels; the fine max clamps against the same value, so the total
        // is 1.5 times that.
        let l = (-(1.0f64 / tau)).exp().ln_1p();
        let expected = 1.5 * l;
        assert!((tape.value(loss).item() - expected).abs() < 1e-12);
    }

    #[test]
    fn hierar_degenerate_single_class_is_zero() {
        let mut bank = PrototypeBank::new(1, 1, 2, 2);
        bank.p2d_coarse = Tensor::from_fn(1, 2, |_, c| if c == 0 { 1.0 } else { 0.0 });
        bank.p3d_coarse = bank.p2d_coarse.clone();
        bank.p2d_fine = bank.p2d_coarse.clone();
        bank.p3d_fine = bank.p2d_coarse.clone();
        let mut tape = Tape::new();
        let f = tape.constant(Tensor::from_fn(1, 2, |_, c| if c == 0 { 1.0 } else { 0.0 }));
        let loss = loss_hierar(&mut tape, f, f, &bank, &[0], &[0], 0.1);
        let got: f64 = tape.value(loss).item();
        assert!(got.abs() < 1e-12);
    }

    #[test]
    fn hierar_is_nonnegative() {
        let bank = PrototypeBank::new(3, 2, 8, 14);
        let mut rng = stream(15, Domain::Probe, 57);
        for trial in 0..10 {
            let n = 12;
            let mut f2 = Tensor::from_fn(n, 8, |_, _| rng.gen_range(-1.0..1.0));
            let mut f3 = Tensor::from_fn(n, 8, |_, _| rng.gen_range(-1.0..1.0));
            crate::labeling::normalize_rows(&mut f2);
            crate::labeling::normalize_rows(&mut f3);
            let coarse: Vec<u32> = (0..n).map(|_| rng.gen_range(0..3u32)).collect();
            let fine: Vec<u32> = coarse
                .iter()
                .map(|&c| c * 2 + rng.gen_range(0..2u32))
                .collect();
            let mut tape = Tape::new();
            let a = tape.constant(f2.clone());
            let b = tape.constant(f3.clone());
            let loss = loss_hierar(&mut tape, a, b, &bank, &coarse, &fine, 0.1);
            assert!(tape.value(loss).item() > -1e-12, "trial {trial}");
        }
    }

    #[test]
    fn hierar_gradients_match_fd() {
        let bank = PrototypeBank::new(2, 2, 4, 16);
        let mut store = ParamStore::<f64>::new();
        let mut rng = stream(17, Domain::Probe, 58);
        let n = 6;
        let f2 = store.add(
            "f2",
            Group::Encoder,
            Tensor::from_fn(n, 4, |_, _| rng.gen_range(-1.0..1.0)),
        );
        let f3 = store.add(
            "f3",
            Group::Decoder,
            Tensor::from_fn(n, 4, |_, _| rng.gen_range(-1.0..1.0)),
        );
        let coarse: Vec<u32> = (0..n).map(|i| (i % 2) as u32).collect();
        let fine: Vec<u32> = (0..n).map(|i| ((i % 2) * 2 + (i / 3) % 2) as u32).collect();
        // Individual entries can have near-cancelling gradients after row
        // normalization, which makes per-entry relative error ill-posed; the
        // directional derivative aggregates the whole gradient instead.
        let report = check_direction(&mut store, &[f2, f3], 1e-5, 59, &mut |tape, store| {
            let a = normalize_rows_node(tape, store, f2);
            let b = normalize_rows_node(tape, store, f3);
            loss_hierar(tape, a, b, &bank, &coarse, &fine, 0.1)
        });
        assert!(report.max_rel_err < 1e-6, "{report:?}");
    }

    #[test]
    fn depth_loss_basics() {
        let gt = Tensor::from_fn(1, 6, |_, c| 0.5 + 0.1 * c as f64);
        let mask = vec![true; 6];
        let mut tape = Tape::new();
        let exact = tape.constant(gt.clone());
        let (l, warned) = loss_depth(&mut tape, exact, &gt, &mask);
        assert!(!warned);
        assert_eq!(tape.value(l).item(), 0.0);

        let off = tape.constant(Tensor::from_fn(1, 6, |_, c| gt.at(0, c) + 0.37));
        let (l, _) = loss_depth(&mut tape, off, &gt, &mask);
        assert!((tape.value(l).item() - 0.37).abs() < 1e-12);

        // Half the mask invalid: compare against the explicit masked mean,
        // with garbage (infinite) values on masked-out pixels.
        let mask: Vec<bool> = (0..6).map(|c| c % 2 == 0).collect();
        let pred_t = Tensor::from_fn(1, 6, |_, c| {
            if mask[c] {
                gt.at(0, c) + 0.1 * (c as f64 + 1.0)
            } else {
                f64::INFINITY
            }
        });
        let pred = tape.constant(pred_t.clone());
        let (l, warned) = loss_depth(&mut tape, pred, &gt, &mask);
        assert!(!warned);
        let expected = (0..6)
            .filter(|&c| mask[c])
            .map(|c| (pred_t.at(0, c) - gt.at(0, c)).abs())
            .sum::<f64>()
            / 3.0;
        assert!((tape.value(l).item() - expected).abs() < 1e-12);

        let (l, warned) = loss_depth(&mut tape, pred, &gt, &[false; 6]);
        assert!(warned);
        assert_eq!(tape.value(l).item(), 0.0);
    }

    #[test]
    fn depth_gradients_match_fd() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = stream(18, Domain::Probe, 60);
        let d = store.add(
            "d",
            Group::Field,
            Tensor::from_fn(1, 8, |_, _| rng.gen_range(0.2..1.0)),
        );
        let gt = Tensor::from_fn(1, 8, |_, _| rng.gen_range(0.2..1.0));
        let mask: Vec<bool> = (0..8).map(|c| c != 3).collect();
        let report = check_params(&mut store, &[d], 8, 1e-6, 61, &mut |tape, store| {
            let dn = tape.param(store, d);
            loss_depth(tape, dn, &gt, &mask).0
        });
        assert!(report.max_rel_err < 1e-6, "{report:?}");
    }

    #[test]
    fn total_recomposes_from_report() {
        let mut tape = Tape::new();
        let mut rng = stream(19, Domain::Probe, 62);
        let mut term = || {
            let v: f64 = rng.gen_range(0.0..2.0);
            tape.constant(Tensor::scalar(v))
        };
        let terms = LossTerms {
            nce: term(),
            ce_coarse: term(),
            ce_fine: term(),
            hierar: term(),
            depth: term(),
            dist: term(),
        };
        let (node, report) = total_loss(&mut tape, &terms, LossWeights::default());
        assert_eq!(report.total, report.recompute_total());
        assert_eq!(tape.value(node).item(), report.total);
    }
}
