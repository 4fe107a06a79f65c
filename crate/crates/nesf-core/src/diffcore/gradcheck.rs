//! Central finite-difference verification of tape gradients.
//!
//! Used by the op tests below and re-run by the CLI's verify command; the
//! analytic backward pass runs once at the base point and every probe then
//! re-evaluates the forward pass only.

use rand::Rng;

use super::params::{ParamId, ParamStore};
use super::tape::{NodeId, Tape};
use super::tensor::Tensor;
use crate::rng::{stream, Domain};

pub type BuildFn<'a> = dyn FnMut(&mut Tape<f64>, &ParamStore<f64>) -> NodeId + 'a;

#[derive(Clone, Copy, Debug)]
pub struct FdReport {
    pub probes: usize,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
}

impl FdReport {
    fn absorb(&mut self, analytic: f64, fd: f64) {
        let abs = (analytic - fd).abs();
        let rel = abs / analytic.abs().max(fd.abs()).max(1e-6);
        self.probes += 1;
        self.max_abs_err = self.max_abs_err.max(abs);
        self.max_rel_err = self.max_rel_err.max(rel);
    }
}

fn eval(store: &ParamStore<f64>, build: &mut BuildFn) -> f64 {
    let mut tape: Tape<f64> = Tape::new();
    let loss = build(&mut tape, store);
    tape.value(loss).item()
}

fn analytic_grads(
    store: &mut ParamStore<f64>,
    pids: &[ParamId],
    build: &mut BuildFn,
) -> Vec<Tensor<f64>> {
    store.zero_grads();
    let mut tape: Tape<f64> = Tape::new();
    let loss = build(&mut tape, store);
    let grads = tape.backward(loss);
    tape.accumulate_grads(&grads, store);
    pids.iter().map(|&p| store.grad(p).clone()).collect()
}

/// Probes random entries of each listed parameter with central differences.
pub fn check_params(
    store: &mut ParamStore<f64>,
    pids: &[ParamId],
    probes_per_param: usize,
    h: f64,
    seed: u64,
    build: &mut BuildFn,
) -> FdReport {
    let analytic = analytic_grads(store, pids, build);
    let mut rng = stream(seed, Domain::Probe, 0);
    let mut report = FdReport {
        probes: 0,
        max_abs_err: 0.0,
        max_rel_err: 0.0,
    };
    for (pi, &pid) in pids.iter().enumerate() {
        let len = store.value(pid).len();
        for _ in 0..probes_per_param.min(len) {
            let idx = rng.gen_range(0..len);
            let orig = store.value(pid).data[idx];
            store.value_mut(pid).data[idx] = orig + h;
            let up = eval(store, build);
            store.value_mut(pid).data[idx] = orig - h;
            let down = eval(store, build);
            store.value_mut(pid).data[idx] = orig;
            report.absorb(analytic[pi].data[idx], (up - down) / (2.0 * h));
        }
    }
    report
}

/// Directional-derivative check: one random direction across all listed
/// parameters, compared to the inner product with the analytic gradient.
/// Cheap enough for large parameter blocks.
pub fn check_direction(
    store: &mut ParamStore<f64>,
    pids: &[ParamId],
    h: f64,
    seed: u64,
    build: &mut BuildFn,
) -> FdReport {
    let analytic = analytic_grads(store, pids, build);
    let mut rng = stream(seed, Domain::Probe, 1);
    let dirs: Vec<Tensor<f64>> = pids
        .iter()
        .map(|&p| {
            let v = store.value(p);
            Tensor::from_fn(v.rows, v.cols, |_, _| rng.gen_range(-1.0..1.0))
        })
        .collect();
    let norm: f64 = dirs.iter().map(|d| d.sq_norm()).sum::<f64>().sqrt();
    let originals: Vec<Tensor<f64>> = pids.iter().map(|&p| store.value(p).clone()).collect();

    let shift = |sign: f64, store: &mut ParamStore<f64>| {
        for ((&pid, dir), orig) in pids.iter().zip(&dirs).zip(&originals) {
            let v = store.value_mut(pid);
            for i in 0..v.data.len() {
                v.data[i] = orig.data[i] + sign * h * dir.data[i] / norm;
            }
        }
    };
    shift(1.0, store);
    let up = eval(store, build);
    shift(-1.0, store);
    let down = eval(store, build);
    shift(0.0, store);

    let mut dot = 0.0;
    for (g, d) in analytic.iter().zip(&dirs) {
        for (a, b) in g.data.iter().zip(&d.data) {
            dot += a * b / norm;
        }
    }
    let mut report = FdReport {
        probes: 0,
        max_abs_err: 0.0,
        max_rel_err: 0.0,
    };
    report.absorb(dot, (up - down) / (2.0 * h));
    report
}
