//! Neural implicit fields: geometric field (density + internal feature),
//! segmentation heads conditioned on it, a training-only feature field, an
//! optional grayscale radiance head for baselines, and the alpha-composition
//! renderer shared by all of them.

use std::rc::Rc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffcore::grid::GridConfig;
use crate::diffcore::{HashGrid, Mlp, NodeId, ParamStore, RayPack, Scalar, Tape, Tensor, sc};
use crate::diffcore::params::Group;
use crate::geometry::{add, ray_box, scale, Camera, Ray};
use crate::rng::{stream, Domain};
use crate::{Error, Result};

/// Which branches a trained field carries. The baseline variants exist for
/// the privacy protocol; the segmentation-only variant is the shipping model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    /// Density + segmentation heads, no radiance branch.
    #[serde(rename = "seg")]
    PpNesf,
    /// Density + radiance + segmentation heads.
    #[serde(rename = "rgb-seg")]
    RgbSeg,
    /// Density + radiance only (classic radiance-field baseline).
    #[serde(rename = "rgb")]
    Rgb,
}

impl Variant {
    pub fn tag(&self) -> &'static str {
        match self {
            Variant::PpNesf => "seg",
            Variant::RgbSeg => "rgb-seg",
            Variant::Rgb => "rgb",
        }
    }

    pub fn id(&self) -> u32 {
        match self {
            Variant::PpNesf => 0,
            Variant::RgbSeg => 1,
            Variant::Rgb => 2,
        }
    }

    pub fn from_id(id: u32) -> Result<Variant> {
        match id {
            0 => Ok(Variant::PpNesf),
            1 => Ok(Variant::RgbSeg),
            2 => Ok(Variant::Rgb),
            other => Err(Error::format(format!("unknown variant id {other}"))),
        }
    }

    pub fn has_seg(&self) -> bool {
        !matches!(self, Variant::Rgb)
    }

    pub fn has_rgb(&self) -> bool {
        !matches!(self, Variant::PpNesf)
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FieldConfig {
    /// Coarse segmentation classes K.
    pub k_coarse: usize,
    /// Fine segmentation classes K_f.
    pub k_fine: usize,
    /// Geometric feature width G.
    pub g_dim: usize,
    /// Training-only feature width D.
    pub gamma_dim: usize,
    pub psi_grid: GridConfig,
    pub gamma_grid: GridConfig,
    pub psi_hidden: usize,
    pub head_hidden: usize,
}

impl Default for FieldConfig {
    fn default() -> Self {
        FieldConfig {
            k_coarse: 20,
            k_fine: 100,
            g_dim: 32,
            gamma_dim: 16,
            psi_grid: GridConfig {
                levels: 6,
                res_min: 16,
                res_max: 256,
                feats: 4,
                table_size: 1 << 14,
            },
            gamma_grid: GridConfig {
                levels: 4,
                res_min: 16,
                res_max: 128,
                feats: 2,
                table_size: 1 << 12,
            },
            psi_hidden: 64,
            head_hidden: 64,
        }
    }
}

/// Parameter handles of one field; the values live in a ParamStore.
pub struct FieldModel {
    pub variant: Variant,
    pub cfg: FieldConfig,
    pub psi_grid: HashGrid,
    pub psi_mlp: Mlp,
    pub omega_coarse: Option<Mlp>,
    pub omega_fine: Option<Mlp>,
    pub gamma_grid: Option<HashGrid>,
    pub gamma_mlp: Option<Mlp>,
    pub rgb_head: Option<Mlp>,
}

impl FieldModel {
    /// Initializes parameters from independent seed streams per branch, so
    /// the presence of one branch never shifts another branch's init.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        variant: Variant,
        cfg: FieldConfig,
        seed: u64,
        with_gamma: bool,
    ) -> FieldModel {
        Self::new_pruned(store, variant, cfg, seed, with_gamma, true)
    }

    /// Constructor for artifacts whose radiance head was stripped after
    /// training: the variant keeps its tag but the head is absent.
    pub fn new_pruned<T: Scalar>(
        store: &mut ParamStore<T>,
        variant: Variant,
        cfg: FieldConfig,
        seed: u64,
        with_gamma: bool,
        with_rgb: bool,
    ) -> FieldModel {
        let mut rng = stream(seed, Domain::FieldInit, 0);
        let psi_grid = HashGrid::new(store, "psi.grid", Group::Field, cfg.psi_grid, &mut rng);
        let psi_in = psi_grid.out_dim();
        let psi_mlp = Mlp::new(
            store,
            "psi.mlp",
            Group::Field,
            &[psi_in, cfg.psi_hidden, cfg.psi_hidden, 1 + cfg.g_dim],
            &mut rng,
        );
        let head_in = cfg.g_dim + psi_in;
        let (omega_coarse, omega_fine) = if variant.has_seg() {
            let mut rng_c = stream(seed, Domain::FieldInit, 1);
            let coarse = Mlp::new(
                store,
                "omega.coarse",
                Group::Field,
                &[head_in, cfg.head_hidden, cfg.k_coarse],
                &mut rng_c,
            );
            let mut rng_f = stream(seed, Domain::FieldInit, 2);
            let fine = Mlp::new(
                store,
                "omega.fine",
                Group::Field,
                &[head_in, cfg.head_hidden, cfg.k_fine],
                &mut rng_f,
            );
            (Some(coarse), Some(fine))
        } else {
            (None, None)
        };
        let (gamma_grid, gamma_mlp) = if with_gamma {
            let mut rng_g = stream(seed, Domain::GammaInit, 0);
            let grid = HashGrid::new(store, "gamma.grid", Group::Field, cfg.gamma_grid, &mut rng_g);
            let gin = grid.out_dim();
            let mlp = Mlp::new(
                store,
                "gamma.mlp",
                Group::Field,
                &[gin, 32, cfg.gamma_dim],
                &mut rng_g,
            );
            (Some(grid), Some(mlp))
        } else {
            (None, None)
        };
        let rgb_head = if variant.has_rgb() && with_rgb {
            let mut rng_r = stream(seed, Domain::RgbInit, 0);
            Some(Mlp::new(
                store,
                "rgb.head",
                Group::Field,
                &[cfg.g_dim, 32, 1],
                &mut rng_r,
            ))
        } else {
            None
        };
        FieldModel {
            variant,
            cfg,
            psi_grid,
            psi_mlp,
            omega_coarse,
            omega_fine,
            gamma_grid,
            gamma_mlp,
            rgb_head,
        }
    }

    /// Density (pre-composition) and geometric feature on the tape.
    pub fn psi_forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        pos: NodeId,
    ) -> PsiNodes {
        let enc = self.psi_grid.encode(tape, store, pos);
        let raw = self.psi_mlp.forward(tape, store, enc);
        let sigma_raw = tape.slice_rows(raw, 0, 1);
        let sigma = tape.softplus(sigma_raw);
        let g = tape.slice_rows(raw, 1, self.cfg.g_dim);
        PsiNodes { enc, sigma, g }
    }

    /// Segmentation logits from the geometric feature and a read-only copy of
    /// the positional encoding (no gradient into the grid via this path).
    pub fn seg_logits<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        psi: &PsiNodes,
        fine: bool,
    ) -> Result<NodeId> {
        self.seg_logits_with(tape, store, psi, fine, true)
    }

    /// Logits with the encoding path left live. Pose refinement needs the
    /// complete position Jacobian; the detached path is a training-time
    /// isolation device, not part of the function being differentiated there.
    pub fn seg_logits_live<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        psi: &PsiNodes,
        fine: bool,
    ) -> Result<NodeId> {
        self.seg_logits_with(tape, store, psi, fine, false)
    }

    fn seg_logits_with<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        psi: &PsiNodes,
        fine: bool,
        detach_enc: bool,
    ) -> Result<NodeId> {
        let head = if fine { &self.omega_fine } else { &self.omega_coarse };
        let Some(head) = head else {
            return Err(Error::BranchAbsent("segmentation head".into()));
        };
        let enc_in = if detach_enc {
            tape.stop_grad(psi.enc)
        } else {
            psi.enc
        };
        let x = tape.concat_rows(psi.g, enc_in);
        Ok(head.forward(tape, store, x))
    }

    pub fn gamma_forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        pos: NodeId,
    ) -> Result<NodeId> {
        let (Some(grid), Some(mlp)) = (&self.gamma_grid, &self.gamma_mlp) else {
            return Err(Error::BranchAbsent("feature field".into()));
        };
        let enc = grid.encode(tape, store, pos);
        Ok(mlp.forward(tape, store, enc))
    }

    /// Grayscale radiance in [0,1].
    pub fn rgb_forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        g: NodeId,
    ) -> Result<NodeId> {
        let Some(head) = &self.rgb_head else {
            return Err(Error::BranchAbsent("radiance head".into()));
        };
        let raw = head.forward(tape, store, g);
        Ok(tape.sigmoid(raw))
    }

    /// Tape-free density + feature evaluation for sampling and rendering.
    pub fn infer_psi<T: Scalar>(&self, store: &ParamStore<T>, pos: &Tensor<T>) -> PsiValues<T> {
        let enc = self.psi_grid.encode_values(store, pos);
        let raw = self.psi_mlp.infer(store, &enc);
        let mut sigma = Vec::with_capacity(pos.cols);
        for j in 0..pos.cols {
            let x = raw.at(0, j).to_f64().unwrap();
            sigma.push(x.max(0.0) + (-x.abs()).exp().ln_1p());
        }
        let mut g = Tensor::zeros(self.cfg.g_dim, pos.cols);
        for r in 0..self.cfg.g_dim {
            g.row_mut(r).copy_from_slice(raw.row(1 + r));
        }
        PsiValues { enc, sigma, g }
    }
}

pub struct PsiNodes {
    pub enc: NodeId,
    pub sigma: NodeId,
    pub g: NodeId,
}

pub struct PsiValues<T> {
    pub enc: Tensor<T>,
    pub sigma: Vec<f64>,
    pub g: Tensor<T>,
}

/// Quadrature nodes along one ray: positions t (strictly increasing) and
/// segment widths delta > 0, with the clipped integration span.
#[derive(Clone, Debug)]
pub struct RaySamples {
    pub t: Vec<f64>,
    pub delta: Vec<f64>,
    pub near: f64,
    pub far: f64,
}

impl RaySamples {
    pub fn uniform(near: f64, far: f64, n: usize) -> RaySamples {
        let dt = (far - near) / n as f64;
        RaySamples {
            t: (0..n).map(|i| near + (i as f64 + 0.5) * dt).collect(),
            delta: vec![dt; n],
            near,
            far,
        }
    }

    fn from_sorted_t(t: Vec<f64>, near: f64, far: f64) -> RaySamples {
        let mut delta = Vec::with_capacity(t.len());
        for i in 0..t.len() {
            let next = if i + 1 < t.len() { t[i + 1] } else { far };
            delta.push((next - t[i]).max(1e-9));
        }
        RaySamples { t, delta, near, far }
    }
}

/// Clips a ray to the unit cube; rays that miss it entirely get a degenerate
/// span and render as empty.
pub fn clip_to_cube(ray: &mut Ray) {
    match ray_box(ray.origin, ray.dir, [0.0; 3], [1.0; 3]) {
        Some((t0, t1)) if t1 > t0.max(0.0) => {
            ray.near = t0.max(1e-3);
            ray.far = t1;
        }
        _ => {
            ray.near = 1e-3;
            ray.far = 1e-3 + 1e-6;
        }
    }
}

/// Stratified samples over [near, far]: one uniform draw per equal-width bin.
pub fn stratified(ray: &Ray, n: usize, seed: u64, index: u64) -> RaySamples {
    use rand::Rng;
    let mut rng = stream(seed, Domain::Stratified, index);
    let span = ray.far - ray.near;
    let t: Vec<f64> = (0..n)
        .map(|i| ray.near + span * ((i as f64 + rng.gen_range(0.0..1.0)) / n as f64))
        .collect();
    RaySamples::from_sorted_t(t, ray.near, ray.far)
}

/// Adds importance samples drawn from the piecewise-constant weight
/// distribution of a coarse pass, then merges and re-sorts.
pub fn with_importance(
    coarse: &RaySamples,
    weights: &[f64],
    n_importance: usize,
    seed: u64,
    index: u64,
) -> RaySamples {
    use rand::Rng;
    if n_importance == 0 {
        return coarse.clone();
    }
    assert_eq!(weights.len(), coarse.t.len());
    // Bin k spans [t_k, t_k + delta_k) with mass proportional to w_k.
    let mut cdf = Vec::with_capacity(weights.len() + 1);
    let mut acc = 0.0;
    cdf.push(0.0);
    for &w in weights {
        acc += w.max(0.0) + 1e-5;
        cdf.push(acc);
    }
    let total = acc;
    let mut rng = stream(seed, Domain::Stratified, index ^ 0x8000_0000_0000_0000);
    let mut t = coarse.t.clone();
    for i in 0..n_importance {
        let u = total * (i as f64 + rng.gen_range(0.0..1.0)) / n_importance as f64;
        let k = match cdf.binary_search_by(|c| c.partial_cmp(&u).unwrap()) {
            Ok(k) => k.min(weights.len() - 1),
            Err(k) => (k - 1).min(weights.len() - 1),
        };
        let frac = (u - cdf[k]) / (cdf[k + 1] - cdf[k]);
        t.push(coarse.t[k] + frac * coarse.delta[k]);
    }
    t.sort_by(|a, b| a.partial_cmp(b).unwrap());
    t.dedup_by(|a, b| {
        if (*a - *b).abs() < 1e-12 {
            *a += 1e-12;
            false
        } else {
            false
        }
    });
    RaySamples::from_sorted_t(t, coarse.near, coarse.far)
}

/// Composition weights w_i = T_i alpha_i without a tape (inference path).
pub fn composite_weights(sigma: &[f64], delta: &[f64]) -> Vec<f64> {
    let mut w = Vec::with_capacity(sigma.len());
    let mut trans = 1.0;
    for (&s, &d) in sigma.iter().zip(delta) {
        let alpha = 1.0 - (-s * d).exp();
        w.push(trans * alpha);
        trans *= 1.0 - alpha;
    }
    w
}

/// Flattens per-ray samples into the pack consumed by the rendering ops,
/// along with world positions (3 x S).
pub fn build_pack<T: Scalar>(rays: &[Ray], samples: &[RaySamples]) -> (Rc<RayPack<T>>, Tensor<T>) {
    assert_eq!(rays.len(), samples.len());
    let total: usize = samples.iter().map(|s| s.t.len()).sum();
    let mut offsets = Vec::with_capacity(rays.len() + 1);
    let mut t = Vec::with_capacity(total);
    let mut delta = Vec::with_capacity(total);
    let mut snorm = Vec::with_capacity(total);
    let mut dnorm = Vec::with_capacity(total);
    let mut pos = Tensor::zeros(3, total);
    offsets.push(0);
    let mut k = 0usize;
    for (ray, s) in rays.iter().zip(samples) {
        let span = (s.far - s.near).max(1e-9);
        for (i, &ti) in s.t.iter().enumerate() {
            let p = add(ray.origin, scale(ray.dir, ti));
            for r in 0..3 {
                *pos.at_mut(r, k) = sc(p[r]);
            }
            t.push(sc(ti));
            delta.push(sc(s.delta[i]));
            snorm.push(sc((ti - s.near) / span));
            dnorm.push(sc(s.delta[i] / span));
            k += 1;
        }
        offsets.push(k);
    }
    (
        Rc::new(RayPack {
            offsets,
            t,
            delta,
            snorm,
            dnorm,
        }),
        pos,
    )
}

/// Rendered quantities for a batch of rays, all tape nodes.
pub struct RenderNodes {
    pub weights: NodeId,
    pub value: Option<NodeId>,
    pub opacity: NodeId,
    pub depth: NodeId,
}

/// Alpha composition on the tape: value = sum_i T_i alpha_i payload_i,
/// opacity = sum_i w_i, depth = sum_i w_i t_i. With `detach_weights` the
/// payload gradient path stays open while density receives none.
pub fn render<T: Scalar>(
    tape: &mut Tape<T>,
    sigma: NodeId,
    payload: Option<NodeId>,
    pack: &Rc<RayPack<T>>,
    detach_weights: bool,
) -> RenderNodes {
    let w_full = tape.render_weights(sigma, pack.clone());
    let weights = if detach_weights {
        tape.stop_grad(w_full)
    } else {
        w_full
    };
    let opacity = tape.ray_sum(weights, pack.clone());
    let tvals = tape.constant(Tensor::from_vec(1, pack.t.len(), pack.t.clone()));
    let wt = tape.mul(weights, tvals);
    let depth = tape.ray_sum(wt, pack.clone());
    let value = payload.map(|p| tape.ray_apply(weights, p, pack.clone()));
    RenderNodes {
        weights,
        value,
        opacity,
        depth,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PayloadKind {
    SegCoarse,
    SegFine,
    Feature,
    GeoFeature,
    Rgb,
    Depth,
}

/// One rendered view: channel-major values (C x pixels), plus per-pixel
/// opacity and opacity-normalized depth (infinite where opacity is below the
/// hit threshold).
pub struct ViewRender {
    pub channels: usize,
    pub values: Tensor<f64>,
    pub opacity: Vec<f64>,
    pub depth: Vec<f64>,
}

#[derive(Clone, Copy, Debug)]
pub struct SampleConfig {
    pub n_coarse: usize,
    pub n_importance: usize,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig {
            n_coarse: 16,
            n_importance: 8,
        }
    }
}

/// Two-stage sampling for a batch of rays: stratified coarse pass, inference
/// densities, then importance draws from the coarse weights. `base_index`
/// must be unique per (step, batch) so sample streams never collide.
pub fn sample_rays<T: Scalar>(
    model: &FieldModel,
    store: &ParamStore<T>,
    rays: &[Ray],
    cfg: SampleConfig,
    seed: u64,
    base_index: u64,
) -> Vec<RaySamples> {
    let coarse: Vec<RaySamples> = rays
        .iter()
        .enumerate()
        .map(|(i, r)| stratified(r, cfg.n_coarse, seed, base_index + i as u64))
        .collect();
    if cfg.n_importance == 0 {
        return coarse;
    }
    let (pack, pos) = build_pack::<T>(rays, &coarse);
    let psi = model.infer_psi(store, &pos);
    coarse
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let (lo, hi) = (pack.offsets[i], pack.offsets[i + 1]);
            let delta: Vec<f64> = pack.delta[lo..hi]
                .iter()
                .map(|d| d.to_f64().unwrap())
                .collect();
            let w = composite_weights(&psi.sigma[lo..hi], &delta);
            with_importance(c, &w, cfg.n_importance, seed, base_index + i as u64)
        })
        .collect()
}

/// Full-view inference rendering, parallel over row bands. Returns maps in
/// pixel row-major order matching `camera` dimensions.
pub fn render_view<T: Scalar>(
    model: &FieldModel,
    store: &ParamStore<T>,
    camera: &Camera,
    kind: PayloadKind,
    samples: SampleConfig,
    seed: u64,
) -> Result<ViewRender> {
    // Branch checks up front so errors fire before any work.
    match kind {
        PayloadKind::SegCoarse | PayloadKind::SegFine => {
            if !model.variant.has_seg() {
                return Err(Error::BranchAbsent("segmentation head".into()));
            }
        }
        PayloadKind::Rgb => {
            if model.rgb_head.is_none() {
                return Err(Error::BranchAbsent("radiance head".into()));
            }
        }
        PayloadKind::Feature => {
            if model.gamma_mlp.is_none() {
                return Err(Error::BranchAbsent("feature field".into()));
            }
        }
        PayloadKind::GeoFeature | PayloadKind::Depth => {}
    }
    let channels = match kind {
        PayloadKind::SegCoarse => model.cfg.k_coarse,
        PayloadKind::SegFine => model.cfg.k_fine,
        PayloadKind::Feature => model.cfg.gamma_dim,
        PayloadKind::GeoFeature => model.cfg.g_dim,
        PayloadKind::Rgb => 1,
        PayloadKind::Depth => 0,
    };
    let (w, h) = (camera.width as usize, camera.height as usize);
    let rows: Vec<(Tensor<f64>, Vec<f64>, Vec<f64>)> = (0..h)
        .into_par_iter()
        .map(|row| render_rows::<T>(model, store, camera, kind, channels, samples, seed, row))
        .collect();
    let mut values = Tensor::zeros(channels.max(1), w * h);
    let mut opacity = Vec::with_capacity(w * h);
    let mut depth = Vec::with_capacity(w * h);
    for (row, (v, o, d)) in rows.into_iter().enumerate() {
        for c in 0..channels.max(1) {
            values.row_mut(c)[row * w..(row + 1) * w].copy_from_slice(v.row(c));
        }
        opacity.extend(o);
        depth.extend(d);
    }
    Ok(ViewRender {
        channels,
        values,
        opacity,
        depth,
    })
}

#[allow(clippy::too_many_arguments)]
fn render_rows<T: Scalar>(
    model: &FieldModel,
    store: &ParamStore<T>,
    camera: &Camera,
    kind: PayloadKind,
    channels: usize,
    samples: SampleConfig,
    seed: u64,
    row: usize,
) -> (Tensor<f64>, Vec<f64>, Vec<f64>) {
    let w = camera.width as usize;
    let pixels: Vec<(u32, u32)> = (0..w as u32).map(|u| (u, row as u32)).collect();
    let mut rays = crate::geometry::generate_rays(camera, &pixels);
    for r in &mut rays {
        clip_to_cube(r);
    }
    // Sample streams keyed by pixel index: independent of banding/threads.
    let base = (row * w) as u64;
    let per_ray: Vec<RaySamples> = rays
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let c = stratified(r, samples.n_coarse, seed, base + i as u64);
            if samples.n_importance == 0 {
                return c;
            }
            let (pack1, pos1) = build_pack::<T>(&rays[i..=i], std::slice::from_ref(&c));
            let psi = model.infer_psi(store, &pos1);
            let delta: Vec<f64> = pack1.delta.iter().map(|d| d.to_f64().unwrap()).collect();
            let wgt = composite_weights(&psi.sigma, &delta);
            with_importance(&c, &wgt, samples.n_importance, seed, base + i as u64)
        })
        .collect();
    let (pack, pos) = build_pack::<T>(&rays, &per_ray);
    let psi = model.infer_psi(store, &pos);
    let payload: Option<Tensor<T>> = match kind {
        PayloadKind::Depth => None,
        PayloadKind::GeoFeature => Some(psi.g.clone()),
        PayloadKind::SegCoarse | PayloadKind::SegFine => {
            let mut x = Tensor::zeros(model.cfg.g_dim + psi.enc.rows, pos.cols);
            for r in 0..model.cfg.g_dim {
                x.row_mut(r).copy_from_slice(psi.g.row(r));
            }
            for r in 0..psi.enc.rows {
                x.row_mut(model.cfg.g_dim + r).copy_from_slice(psi.enc.row(r));
            }
            let head = if kind == PayloadKind::SegFine {
                model.omega_fine.as_ref().unwrap()
            } else {
                model.omega_coarse.as_ref().unwrap()
            };
            Some(head.infer(store, &x))
        }
        PayloadKind::Feature => {
            let grid = model.gamma_grid.as_ref().unwrap();
            let enc = grid.encode_values(store, &pos);
            Some(model.gamma_mlp.as_ref().unwrap().infer(store, &enc))
        }
        PayloadKind::Rgb => {
            let raw = model.rgb_head.as_ref().unwrap().infer(store, &psi.g);
            Some(raw.map(|x| {
                let xf = x.to_f64().unwrap();
                sc(1.0 / (1.0 + (-xf).exp()))
            }))
        }
    };
    let mut values = Tensor::zeros(channels.max(1), w);
    let mut opacity = Vec::with_capacity(w);
    let mut depth = Vec::with_capacity(w);
    for i in 0..w {
        let (lo, hi) = (pack.offsets[i], pack.offsets[i + 1]);
        let delta: Vec<f64> = pack.delta[lo..hi].iter().map(|d| d.to_f64().unwrap()).collect();
        let wgt = composite_weights(&psi.sigma[lo..hi], &delta);
        let op: f64 = wgt.iter().sum();
        let mut dep = 0.0;
        for (k, &wk) in wgt.iter().enumerate() {
            dep += wk * pack.t[lo + k].to_f64().unwrap();
        }
        if let Some(p) = &payload {
            for c in 0..channels {
                let mut acc = 0.0;
                for (k, &wk) in wgt.iter().enumerate() {
                    acc += wk * p.at(c, lo + k).to_f64().unwrap();
                }
                *values.at_mut(c, i) = acc;
            }
        }
        depth.push(if op > crate::scenes::HIT_OPACITY {
            dep / op
        } else {
            f64::INFINITY
        });
        opacity.push(op);
    }
    (values, opacity, depth)
}

/// Parameter prefixes that belong to branches which must be deletable without
/// affecting the rest of the model.
pub const TRAINING_ONLY_PREFIXES: [&str; 2] = ["gamma.", "rgb."];

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{look_at, Pose};

    fn model_with_store(
        variant: Variant,
        with_gamma: bool,
        seed: u64,
    ) -> (FieldModel, ParamStore<f64>) {
        let mut store = ParamStore::new();
        let cfg = FieldConfig {
            psi_grid: GridConfig {
                levels: 3,
                res_min: 4,
                res_max: 16,
                feats: 2,
                table_size: 256,
            },
            gamma_grid: GridConfig {
                levels: 2,
                res_min: 4,
                res_max: 8,
                feats: 2,
                table_size: 256,
            },
            psi_hidden: 16,
            head_hidden: 16,
            k_coarse: 5,
            k_fine: 10,
            g_dim: 8,
            gamma_dim: 4,
        };
        let model = FieldModel::new(&mut store, variant, cfg, seed, with_gamma);
        (model, store)
    }

    fn straight_ray() -> Ray {
        Ray {
            origin: [0.5, 0.5, 0.95],
            dir: [0.0, 0.0, -1.0],
            near: 0.05,
            far: 0.9,
            pixel: (0, 0),
        }
    }

    #[test]
    fn render_matches_hand_evaluated_weights() {
        let mut tape: Tape<f64> = Tape::new();
        let samples = RaySamples {
            t: vec![0.1, 0.2, 0.3],
            delta: vec![0.1, 0.1, 0.1],
            near: 0.05,
            far: 0.4,
        };
        let (pack, _) = build_pack::<f64>(&[straight_ray()], &[samples]);
        // sigma*delta = (0.5, 1.0, 2.0) with payloads (1, 2, 3).
        let sigma = tape.constant(Tensor::from_vec(1, 3, vec![5.0, 10.0, 20.0]));
        let payload = tape.constant(Tensor::from_vec(1, 3, vec![1.0, 2.0, 3.0]));
        let out = render(&mut tape, sigma, Some(payload), &pack, false);
        let a = [1.0 - (-0.5f64).exp(), 1.0 - (-1.0f64).exp(), 1.0 - (-2.0f64).exp()];
        let w = [
            a[0],
            (1.0 - a[0]) * a[1],
            (1.0 - a[0]) * (1.0 - a[1]) * a[2],
        ];
        let want = w[0] + 2.0 * w[1] + 3.0 * w[2];
        let got = tape.value(out.value.unwrap()).item();
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        let op = tape.value(out.opacity).item();
        assert!((op - (w[0] + w[1] + w[2])).abs() < 1e-12);
    }

    #[test]
    fn zero_density_renders_nothing_and_opaque_sample_dominates() {
        let mut tape: Tape<f64> = Tape::new();
        let s1 = RaySamples {
            t: vec![0.2, 0.4],
            delta: vec![0.2, 0.2],
            near: 0.1,
            far: 0.6,
        };
        let (pack, _) = build_pack::<f64>(&[straight_ray()], &[s1]);
        let sigma = tape.constant(Tensor::zeros(1, 2));
        let payload = tape.constant(Tensor::from_vec(1, 2, vec![4.0, 7.0]));
        let out = render(&mut tape, sigma, Some(payload), &pack, false);
        assert_eq!(tape.value(out.value.unwrap()).data[0], 0.0);
        assert_eq!(tape.value(out.opacity).data[0], 0.0);

        let mut tape2: Tape<f64> = Tape::new();
        let s2 = RaySamples {
            t: vec![0.3],
            delta: vec![0.5],
            near: 0.1,
            far: 0.8,
        };
        let (pack2, _) = build_pack::<f64>(&[straight_ray()], &[s2]);
        let sigma = tape2.constant(Tensor::from_vec(1, 1, vec![40.0]));
        let payload = tape2.constant(Tensor::from_vec(1, 1, vec![6.5]));
        let out = render(&mut tape2, sigma, Some(payload), &pack2, false);
        assert!((tape2.value(out.value.unwrap()).data[0] - 6.5).abs() < 1e-6);
        assert!((tape2.value(out.depth).data[0] - 0.3).abs() < 1e-6);
    }

    #[test]
    fn composition_weights_never_exceed_unit_mass() {
        use rand::Rng;
        let mut rng = crate::rng::stream(3, Domain::Probe, 2);
        for _ in 0..200 {
            let n = rng.gen_range(1..40);
            let sigma: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..400.0)).collect();
            let delta: Vec<f64> = (0..n).map(|_| rng.gen_range(1e-4..0.1)).collect();
            let w = composite_weights(&sigma, &delta);
            let total: f64 = w.iter().sum();
            assert!(total <= 1.0 + 1e-6, "opacity {total}");
        }
    }

    #[test]
    fn stratified_places_one_sample_per_bin() {
        let ray = straight_ray();
        let s = stratified(&ray, 10, 42, 0);
        let span = ray.far - ray.near;
        for (i, &t) in s.t.iter().enumerate() {
            let lo = ray.near + span * i as f64 / 10.0;
            let hi = ray.near + span * (i as f64 + 1.0) / 10.0;
            assert!(t >= lo && t < hi, "sample {t} outside bin [{lo},{hi})");
        }
        for d in &s.delta {
            assert!(*d > 0.0);
        }
        // Determinism.
        let s2 = stratified(&ray, 10, 42, 0);
        assert_eq!(s.t, s2.t);
        let s3 = stratified(&ray, 10, 43, 0);
        assert_ne!(s.t, s3.t);
    }

    #[test]
    fn importance_samples_concentrate_in_heavy_bin() {
        let ray = straight_ray();
        let coarse = RaySamples::uniform(ray.near, ray.far, 10);
        let mut weights = vec![0.0; 10];
        weights[6] = 1.0;
        let merged = with_importance(&coarse, &weights, 10_000, 7, 0);
        let (lo, hi) = (coarse.t[6], coarse.t[6] + coarse.delta[6]);
        let inside = merged
            .t
            .iter()
            .filter(|&&t| t >= lo && t < hi)
            .count();
        // 10 coarse samples remain, one of them inside the bin.
        let inside_importance = inside - 1;
        assert!(
            inside_importance as f64 >= 0.9 * 10_000.0,
            "only {inside_importance} importance samples landed in the heavy bin"
        );
        // Monotone t and positive deltas survive the merge.
        for w in merged.t.windows(2) {
            assert!(w[1] > w[0]);
        }
    }

    #[test]
    fn feature_rendering_detaches_density_exactly() {
        let (model, mut store) = model_with_store(Variant::PpNesf, true, 5);
        let ray = straight_ray();
        let samples = vec![stratified(&ray, 6, 1, 0)];
        let (pack, pos) = build_pack::<f64>(&[ray], &samples);
        let psi_ids = store.ids();
        store.zero_grads();
        let mut tape: Tape<f64> = Tape::new();
        let pos_n = tape.constant(pos);
        let psi = model.psi_forward(&mut tape, &store, pos_n);
        let gamma = model.gamma_forward(&mut tape, &store, pos_n).unwrap();
        let out = render(&mut tape, psi.sigma, Some(gamma), &pack, true);
        let loss = tape.mean_all(out.value.unwrap());
        let grads = tape.backward(loss);
        tape.accumulate_grads(&grads, &mut store);
        for pid in psi_ids {
            let name = &store.params[pid.0].name;
            let gnorm = store.grad(pid).sq_norm();
            if name.starts_with("psi.") {
                assert_eq!(gnorm, 0.0, "density leaked gradient into {name}");
            }
        }
        // The feature branch itself does receive gradient.
        let gamma_grad: f64 = store
            .params
            .iter()
            .filter(|p| p.name.starts_with("gamma."))
            .map(|p| p.grad.sq_norm())
            .sum();
        assert!(gamma_grad > 0.0);
    }

    #[test]
    fn absent_branches_are_rejected() {
        let (model, store) = model_with_store(Variant::PpNesf, false, 9);
        let pose = look_at([0.5, 0.6, 0.9], [0.5, 0.2, 0.5], [0.0, 1.0, 0.0]);
        let cam = Camera::with_fov(4, 4, 60.0, pose);
        let err = render_view(&model, &store, &cam, PayloadKind::Rgb, SampleConfig::default(), 0);
        assert!(matches!(err, Err(Error::BranchAbsent(_))));
        let err = render_view(&model, &store, &cam, PayloadKind::Feature, SampleConfig::default(), 0);
        assert!(matches!(err, Err(Error::BranchAbsent(_))));

        let (rgb_model, rgb_store) = model_with_store(Variant::Rgb, false, 9);
        let err = render_view(&rgb_model, &rgb_store, &cam, PayloadKind::SegCoarse, SampleConfig::default(), 0);
        assert!(matches!(err, Err(Error::BranchAbsent(_))));
    }

    #[test]
    fn removing_training_branches_preserves_psi_omega_outputs() {
        let (full, full_store) = model_with_store(Variant::RgbSeg, true, 31);
        let (bare, bare_store) = model_with_store(Variant::PpNesf, false, 31);
        let pos = Tensor::from_fn(3, 11, |r, j| 0.1 + 0.07 * ((r * 11 + j) % 12) as f64);
        let a = full.infer_psi(&full_store, &pos);
        let b = bare.infer_psi(&bare_store, &pos);
        assert_eq!(a.sigma, b.sigma);
        assert_eq!(a.g.data, b.g.data);
        // Segmentation heads agree bit for bit too.
        let mut ta: Tape<f64> = Tape::new();
        let pa = ta.constant(pos.clone());
        let na = full.psi_forward(&mut ta, &full_store, pa);
        let la = full.seg_logits(&mut ta, &full_store, &na, false).unwrap();
        let mut tb: Tape<f64> = Tape::new();
        let pb = tb.constant(pos.clone());
        let nb = bare.psi_forward(&mut tb, &bare_store, pb);
        let lb = bare.seg_logits(&mut tb, &bare_store, &nb, false).unwrap();
        assert_eq!(ta.value(la).data, tb.value(lb).data);
    }

    #[test]
    fn render_matches_dense_quadrature_oracle_on_voxel_scene() {
        use crate::scenes;
        let scene = scenes::generate_scene(13, &scenes::SceneSpec::default()).unwrap();
        let pose = look_at([0.5, 0.62, 0.86], [0.5, 0.15, 0.5], [0.0, 1.0, 0.0]);
        let cam = Camera::with_fov(9, 9, 60.0, pose);
        let oracle = scenes::oracle_render(&scene, &cam);
        let pixels: Vec<(u32, u32)> = (0..9u32).flat_map(|v| (0..9u32).map(move |u| (u, v))).collect();
        let mut rays = crate::geometry::generate_rays(&cam, &pixels);
        let mut max_rel = 0.0f64;
        for (i, ray) in rays.iter_mut().enumerate() {
            clip_to_cube(ray);
            let s = RaySamples::uniform(
                // The oracle integrates from the unclamped box entry.
                ray_box(ray.origin, ray.dir, [0.0; 3], [1.0; 3]).unwrap().0.max(0.0),
                ray.far,
                scenes::ORACLE_SAMPLES,
            );
            let sigma: Vec<f64> = s
                .t
                .iter()
                .map(|&t| scene.sigma_at(add(ray.origin, scale(ray.dir, t))))
                .collect();
            let payload: Vec<f64> = s
                .t
                .iter()
                .map(|&t| {
                    scene
                        .voxel_of(add(ray.origin, scale(ray.dir, t)))
                        .map_or(0.0, |vi| scene.shaded[vi] as f64)
                })
                .collect();
            let w = composite_weights(&sigma, &s.delta);
            let opacity: f64 = w.iter().sum();
            let gray: f64 = w.iter().zip(&payload).map(|(wk, p)| wk * p).sum();
            let got_depth: f64 = w.iter().zip(&s.t).map(|(wk, t)| wk * t).sum::<f64>() / opacity.max(1e-12);
            if oracle.depth[i].is_finite() {
                let rel_d = (got_depth - oracle.depth[i] as f64).abs() / oracle.depth[i] as f64;
                let rel_g = (gray - oracle.gray[i] as f64).abs() / (oracle.gray[i] as f64).max(1e-3);
                max_rel = max_rel.max(rel_d).max(rel_g);
            }
        }
        assert!(max_rel < 1e-3, "max relative error {max_rel}");
    }

    #[test]
    fn seg_coarse_view_has_full_shape_and_finite_logits() {
        let (model, store) = model_with_store(Variant::PpNesf, false, 17);
        let pose = look_at([0.5, 0.6, 0.88], [0.5, 0.2, 0.5], [0.0, 1.0, 0.0]);
        let cam = Camera::with_fov(6, 5, 60.0, pose);
        let out = render_view(&model, &store, &cam, PayloadKind::SegCoarse, SampleConfig::default(), 3).unwrap();
        assert_eq!(out.channels, model.cfg.k_coarse);
        assert_eq!(out.values.rows, model.cfg.k_coarse);
        assert_eq!(out.values.cols, 30);
        assert!(out.values.data.iter().all(|v| v.is_finite()));
        assert_eq!(out.opacity.len(), 30);
        assert_eq!(out.depth.len(), 30);
        // Determinism across calls.
        let out2 = render_view(&model, &store, &cam, PayloadKind::SegCoarse, SampleConfig::default(), 3).unwrap();
        assert_eq!(out.values.data, out2.values.data);
        let _ = Pose::identity();
    }
}
