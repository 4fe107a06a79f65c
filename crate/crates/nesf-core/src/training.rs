//! Per-scene training loop: one view per step, ray batches, OT target
//! derivation, joint losses, prototype EMA, a single optimizer step, and
//! checkpointing with bit-identical resume.

use std::path::Path;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::diffcore::adam::StepOutcome;
use crate::diffcore::params::Group;
use crate::diffcore::{
    sc, Adam, AdamConfig, ImageShape, NodeId, ParamStore, Scalar, Tape, Tensor,
};
use crate::encoder2d::{Encoder2d, EncoderConfig};
use crate::fields::{
    build_pack, clip_to_cube, sample_rays, FieldConfig, FieldModel, SampleConfig, Variant,
};
use crate::geometry::generate_rays;
use crate::io::Checkpoint;
use crate::labeling::{
    beta_schedule, derive_coarse_targets, derive_fine_targets, ema_update, LabelingConfig, Level,
    PrototypeBank,
};
use crate::losses::{
    loss_ce_joint, loss_depth, loss_hierar, loss_nce, total_loss, LossReport, LossTerms,
    LossWeights,
};
use crate::rng::{stream, Domain};
use crate::scenes::ViewSet;
use crate::{Error, Result};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub variant: Variant,
    pub seed: u64,
    pub rays_per_step: usize,
    pub total_steps: usize,
    pub checkpoint_every: usize,
    pub lr_field: f64,
    pub lr_field_end: f64,
    pub lr_encoder: f64,
    pub lr_encoder_end: f64,
    /// EMA momentum for prototype updates.
    pub mu: f64,
    /// Attenuation noise draws per CE evaluation.
    pub n_s: usize,
    /// Photometric L1 weight, active only in radiance variants.
    pub rgb_weight: f64,
    pub clip_norm: f64,
    pub n_coarse_samples: usize,
    pub n_importance: usize,
    pub weights: LossWeights,
    pub labeling: LabelingConfig,
    pub field: FieldConfig,
    pub encoder: EncoderConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: Variant::PpNesf,
            seed: 0,
            rays_per_step: 4096,
            total_steps: 20_000,
            checkpoint_every: 2_000,
            lr_field: 1e-2,
            lr_field_end: 1e-4,
            lr_encoder: 1e-3,
            lr_encoder_end: 1e-4,
            mu: 0.996,
            n_s: 8,
            rgb_weight: 1.0,
            clip_norm: 10.0,
            n_coarse_samples: 16,
            n_importance: 8,
            weights: LossWeights::default(),
            labeling: LabelingConfig::default(),
            field: FieldConfig::default(),
            encoder: EncoderConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Coarse class fan-out n = K_f / K; validate() guarantees divisibility.
    pub fn children_per_class(&self) -> usize {
        self.field.k_fine / self.field.k_coarse
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.field.k_coarse;
        let kf = self.field.k_fine;
        if k == 0 || kf == 0 || kf % k != 0 {
            return Err(Error::invalid(format!(
                "fine classes ({kf}) must be a positive multiple of coarse classes ({k})"
            )));
        }
        for (name, v) in [
            ("lr_field", self.lr_field),
            ("lr_field_end", self.lr_field_end),
            ("lr_encoder", self.lr_encoder),
            ("lr_encoder_end", self.lr_encoder_end),
            ("tau", self.labeling.tau),
            ("tau2", self.labeling.tau2),
            ("epsilon", self.labeling.epsilon),
            ("clip_norm", self.clip_norm),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.mu) {
            return Err(Error::invalid(format!("mu must be in [0,1], got {}", self.mu)));
        }
        if self.rays_per_step < kf.max(k) {
            return Err(Error::invalid(format!(
                "rays_per_step {} cannot cover {kf} fine classes",
                self.rays_per_step
            )));
        }
        if self.n_s == 0 || self.total_steps == 0 || self.checkpoint_every == 0 {
            return Err(Error::invalid("n_s, total_steps, checkpoint_every must be positive"));
        }
        if self.n_coarse_samples == 0 {
            return Err(Error::invalid("need at least one sample per ray"));
        }
        if self.variant.has_seg() {
            if self.encoder.k_coarse != k || self.encoder.k_fine != kf {
                return Err(Error::invalid(
                    "encoder and field class counts must agree".to_string(),
                ));
            }
            if self.encoder.feat_dim != self.field.gamma_dim {
                return Err(Error::invalid(
                    "encoder feature width must match the feature field width".to_string(),
                ));
            }
        }
        Ok(())
    }

    /// Desk-test scale: small grids, tiny encoder, 3 coarse / 6 fine classes.
    pub fn tiny() -> TrainConfig {
        let mut cfg = TrainConfig::default();
        cfg.rays_per_step = 48;
        cfg.total_steps = 40;
        cfg.checkpoint_every = 10;
        cfg.n_coarse_samples = 6;
        cfg.n_importance = 0;
        cfg.n_s = 2;
        cfg.field.k_coarse = 3;
        cfg.field.k_fine = 6;
        cfg.field.g_dim = 8;
        cfg.field.gamma_dim = 6;
        cfg.field.psi_hidden = 16;
        cfg.field.head_hidden = 12;
        cfg.field.psi_grid.levels = 2;
        cfg.field.psi_grid.res_min = 4;
        cfg.field.psi_grid.res_max = 8;
        cfg.field.psi_grid.feats = 2;
        cfg.field.psi_grid.table_size = 1 << 8;
        cfg.field.gamma_grid = cfg.field.psi_grid;
        cfg.encoder = EncoderConfig::tiny();
        cfg.encoder.k_coarse = 3;
        cfg.encoder.k_fine = 6;
        cfg.encoder.feat_dim = 6;
        cfg
    }
}

/// All mutable state of one training run.
pub struct TrainState<T: Scalar> {
    pub cfg: TrainConfig,
    pub store: ParamStore<T>,
    pub model: FieldModel,
    pub encoder: Option<Encoder2d>,
    pub bank: PrototypeBank,
    pub opt: Adam,
    pub step: usize,
    pub skipped: usize,
    pub depth_available: bool,
    pub events: Vec<String>,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(cfg: TrainConfig) -> Result<TrainState<T>> {
        Self::with_branches(cfg, true, true)
    }

    fn with_branches(cfg: TrainConfig, with_gamma: bool, with_rgb: bool) -> Result<TrainState<T>> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let has_seg = cfg.variant.has_seg();
        let model = FieldModel::new_pruned(
            &mut store,
            cfg.variant,
            cfg.field,
            cfg.seed,
            with_gamma && has_seg,
            with_rgb,
        );
        let encoder = has_seg.then(|| Encoder2d::new(&mut store, cfg.encoder, cfg.seed));
        let bank = PrototypeBank::new(
            cfg.field.k_coarse,
            cfg.children_per_class(),
            cfg.field.gamma_dim,
            cfg.seed,
        );
        let mut opt = Adam::new(vec![
            (
                Group::Field,
                AdamConfig::new(cfg.lr_field, cfg.lr_field_end, cfg.total_steps),
            ),
            (
                Group::Encoder,
                AdamConfig::new(cfg.lr_encoder, cfg.lr_encoder_end, cfg.total_steps),
            ),
        ]);
        opt.clip_norm = cfg.clip_norm;
        Ok(TrainState {
            cfg,
            store,
            model,
            encoder,
            bank,
            opt,
            step: 0,
            skipped: 0,
            depth_available: true,
            events: Vec::new(),
        })
    }

    pub fn lr_field(&self) -> f64 {
        self.opt.config_for(Group::Field).lr_at(self.opt.step)
    }

    pub fn lr_encoder(&self) -> f64 {
        self.opt.config_for(Group::Encoder).lr_at(self.opt.step)
    }
}

/// Per-step log row.
#[derive(Clone, Debug)]
pub struct StepRecord {
    pub step: usize,
    pub view: usize,
    pub skipped: bool,
    pub report: LossReport,
    pub rgb: f64,
    pub beta: f64,
    pub lr_field: f64,
    pub lr_encoder: f64,
    pub coarse_residual: f64,
    pub fine_fallbacks: usize,
}

impl StepRecord {
    pub fn csv_header() -> &'static str {
        "step,view,skipped,total,depth,dist,nce,ce_coarse,ce_fine,hierar,rgb,lr_field,lr_encoder,beta"
    }

    pub fn csv_row(&self) -> String {
        let r = &self.report;
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.view,
            self.skipped as u8,
            r.total,
            r.depth,
            r.dist,
            r.nce,
            r.ce_coarse,
            r.ce_fine,
            r.hierar,
            self.rgb,
            self.lr_field,
            self.lr_encoder,
            self.beta
        )
    }
}

/// Index of the view trained at `step`: a fresh seeded permutation of the
/// training split every epoch, so resume replays the same schedule.
pub fn view_order(seed: u64, step: usize, n_views: usize) -> usize {
    use rand::seq::SliceRandom;
    assert!(n_views > 0);
    let epoch = (step / n_views) as u64;
    let mut order: Vec<usize> = (0..n_views).collect();
    order.shuffle(&mut stream(seed, Domain::ViewChoice, epoch));
    order[step % n_views]
}

fn tensor_to_f64<T: Scalar>(t: &Tensor<T>) -> Tensor<f64> {
    Tensor {
        rows: t.rows,
        cols: t.cols,
        data: t.data.iter().map(|v| v.to_f64().unwrap()).collect(),
    }
}

/// One full training step on the view chosen by the schedule. Any non-finite
/// loss or gradient skips the update and rolls the prototype bank back.
pub fn train_step<T: Scalar>(state: &mut TrainState<T>, views: &ViewSet) -> Result<StepRecord> {
    let train_views = views.train_indices();
    if train_views.is_empty() {
        return Err(Error::invalid("view set has no training views"));
    }
    let cfg = state.cfg.clone();
    let step = state.step;
    let seed = cfg.seed;
    let view_idx = train_views[view_order(seed, step, train_views.len())];
    let view = &views.views[view_idx];
    let (h, w) = (views.height as usize, views.width as usize);

    let mut tape: Tape<T> = Tape::new();

    // Pixel batch for this step: distinct ray origins.
    let n_rays = cfg.rays_per_step.min(h * w);
    let mut pix_rng = stream(seed, Domain::PixelChoice, step as u64);
    let chosen = rand::seq::index::sample(&mut pix_rng, h * w, n_rays).into_vec();
    let pixels: Vec<(u32, u32)> = chosen
        .iter()
        .map(|&i| ((i % w) as u32, (i / w) as u32))
        .collect();
    let mut rays = generate_rays(&view.camera, &pixels);
    for r in &mut rays {
        clip_to_cube(r);
    }
    let sample_cfg = SampleConfig {
        n_coarse: cfg.n_coarse_samples,
        n_importance: cfg.n_importance,
    };
    let base_index = (step * cfg.rays_per_step) as u64;
    let samples = sample_rays(&state.model, &state.store, &rays, sample_cfg, seed, base_index);
    let (pack, pos) = build_pack::<T>(&rays, &samples);
    let pos_node = tape.constant(pos);

    // Field queries and shared composition weights.
    let psi = state.model.psi_forward(&mut tape, &state.store, pos_node);
    let w_full = tape.render_weights(psi.sigma, pack.clone());
    let tvals = tape.constant(Tensor::from_vec(1, pack.t.len(), pack.t.clone()));
    let wt = tape.mul(w_full, tvals);
    let rendered_depth = tape.ray_sum(wt, pack.clone());
    let dist = tape.distortion(w_full, pack.clone());

    // Depth supervision on rays with a finite oracle depth.
    let gt_depth = Tensor::from_fn(1, n_rays, |_, j| {
        let d = view.depth[chosen[j]];
        if d.is_finite() {
            d as f64
        } else {
            0.0
        }
    });
    let mask: Vec<bool> = chosen.iter().map(|&i| view.depth[i].is_finite()).collect();
    let (depth_term, _no_depth) = loss_depth(&mut tape, rendered_depth, &gt_depth, &mask);

    // Radiance branch: photometric L1 against the grayscale ground truth.
    let rgb_term = if state.model.variant.has_rgb() {
        let radiance = state.model.rgb_forward(&mut tape, &state.store, psi.g)?;
        let rendered = tape.ray_apply(w_full, radiance, pack.clone());
        let gt = tape.constant(Tensor::from_fn(1, n_rays, |_, j| {
            sc(view.gray[chosen[j]] as f64)
        }));
        let diff = tape.sub(rendered, gt);
        let ad = tape.abs(diff);
        Some(tape.mean_all(ad))
    } else {
        None
    };

    let zero = tape.constant(Tensor::scalar(T::zero()));
    let mut terms = LossTerms {
        nce: zero,
        ce_coarse: zero,
        ce_fine: zero,
        hierar: zero,
        depth: depth_term,
        dist,
    };

    let saved_bank = state.bank.clone();
    let mut beta = beta_schedule(step, cfg.total_steps);
    let mut coarse_residual = 0.0;
    let mut fine_fallbacks = 0;
    if state.model.variant.has_seg() {
        let encoder = state.encoder.as_ref().expect("seg variant carries an encoder");
        let image = tape.constant(Tensor::from_fn(1, h * w, |_, j| sc(view.gray[j] as f64)));
        let enc = encoder.forward(&mut tape, &state.store, image, h, w)?;
        let pts: Rc<Vec<(f64, f64)>> = Rc::new(
            pixels
                .iter()
                .map(|&(u, v)| (u as f64 + 0.5, v as f64 + 0.5))
                .collect(),
        );
        let gather = |tape: &mut Tape<T>, map: NodeId, c: usize| {
            tape.bilinear_gather(map, ImageShape::new(c, h, w), pts.clone())
        };
        let f2d_map = gather(&mut tape, enc.features, cfg.encoder.feat_dim);
        let l2d_c = gather(&mut tape, enc.logits_coarse, cfg.field.k_coarse);
        let l2d_f = gather(&mut tape, enc.logits_fine, cfg.field.k_fine);
        let u_c = gather(&mut tape, enc.unc_coarse, cfg.field.k_coarse);
        let u_f = gather(&mut tape, enc.unc_fine, cfg.field.k_fine);

        // Rendered modality: segmentation through live weights, features
        // through detached weights so alignment cannot steer geometry.
        let logits_c = state.model.seg_logits(&mut tape, &state.store, &psi, false)?;
        let logits_f = state.model.seg_logits(&mut tape, &state.store, &psi, true)?;
        let seg_pay = tape.concat_rows(logits_c, logits_f);
        let seg_rendered = tape.ray_apply(w_full, seg_pay, pack.clone());
        let r3_c = tape.slice_rows(seg_rendered, 0, cfg.field.k_coarse);
        let r3_f = tape.slice_rows(seg_rendered, cfg.field.k_coarse, cfg.field.k_fine);
        let w_sg = tape.stop_grad(w_full);
        let gamma = state.model.gamma_forward(&mut tape, &state.store, pos_node)?;
        let f3d_map = tape.ray_apply(w_sg, gamma, pack.clone());

        // Unit features, pixels as rows, shared by NCE, OT, and prototypes.
        let f2d_n = tape.normalize_cols(f2d_map);
        let f3d_n = tape.normalize_cols(f3d_map);
        let f2d = tape.transpose(f2d_n);
        let f3d = tape.transpose(f3d_n);
        terms.nce = loss_nce(&mut tape, f2d, f3d, cfg.labeling.tau);

        let f2v = tensor_to_f64(tape.value(f2d));
        let f3v = tensor_to_f64(tape.value(f3d));
        let coarse = derive_coarse_targets(&f2v, &f3v, &state.bank, &cfg.labeling)?;
        coarse_residual = coarse.residual;
        let mut ce_rng = stream(seed, Domain::CeNoise, step as u64);
        terms.ce_coarse = loss_ce_joint(&mut tape, &coarse.q, l2d_c, r3_c, u_c, cfg.n_s, &mut ce_rng);
        let fine = derive_fine_targets(&f2v, &f3v, &state.bank, &coarse.assignments, &cfg.labeling);
        fine_fallbacks = fine.fallback_classes.len();
        terms.ce_fine = loss_ce_joint(&mut tape, &fine.q, l2d_f, r3_f, u_f, cfg.n_s, &mut ce_rng);

        beta = beta_schedule(step, cfg.total_steps);
        ema_update(
            &mut state.bank,
            Level::Coarse,
            &f2v,
            &f3v,
            &coarse.assignments,
            cfg.mu,
            beta,
        );
        ema_update(
            &mut state.bank,
            Level::Fine,
            &f2v,
            &f3v,
            &fine.assignments,
            cfg.mu,
            beta,
        );
        terms.hierar = loss_hierar(
            &mut tape,
            f2d,
            f3d,
            &state.bank,
            &coarse.assignments,
            &fine.assignments,
            cfg.labeling.tau,
        );
    }

    let mut weights = cfg.weights;
    if !state.depth_available {
        weights.depth = 0.0;
    }
    let (total, report) = total_loss(&mut tape, &terms, weights);
    let (grand, rgb_val) = match rgb_term {
        Some(node) => {
            let v = tape.value(node).item().to_f64().unwrap();
            (tape.weighted_sum(&[(total, 1.0), (node, cfg.rgb_weight)]), v)
        }
        None => (total, 0.0),
    };
    let grand_val = tape.value(grand).item().to_f64().unwrap();

    let mut record = StepRecord {
        step,
        view: view_idx,
        skipped: false,
        report,
        rgb: rgb_val,
        beta,
        lr_field: state.lr_field(),
        lr_encoder: state.lr_encoder(),
        coarse_residual,
        fine_fallbacks,
    };

    if !grand_val.is_finite() {
        state.bank = saved_bank;
        state.store.zero_grads();
        state.skipped += 1;
        state
            .events
            .push(format!("step {step}: non-finite loss {grand_val}, step skipped"));
        record.skipped = true;
        state.step += 1;
        return Ok(record);
    }

    let grads = tape.backward(grand);
    tape.accumulate_grads(&grads, &mut state.store);
    if state.opt.apply(&mut state.store) == StepOutcome::SkippedNaN {
        state.bank = saved_bank;
        state.skipped += 1;
        state
            .events
            .push(format!("step {step}: non-finite gradient, step skipped"));
        record.skipped = true;
    }
    state.step += 1;
    Ok(record)
}

// ---------------------------------------------------------------------------
// Checkpoint mapping

const META_SECTION: &str = "meta";
const CONFIG_SECTION: &str = "config";
const FLAG_ARTIFACT: u32 = 1;
const FLAG_NO_DEPTH: u32 = 2;

/// Serializes the full state. Artifact checkpoints keep everything needed to
/// resume; final checkpoints drop the feature field and optimizer moments.
pub fn state_to_checkpoint<T: Scalar>(state: &TrainState<T>, artifact: bool) -> Checkpoint {
    let mut ckpt = Checkpoint::new();
    let mut flags = 0u32;
    if artifact {
        flags |= FLAG_ARTIFACT;
    }
    if !state.depth_available {
        flags |= FLAG_NO_DEPTH;
    }
    ckpt.push_words(
        META_SECTION,
        1,
        8,
        vec![
            state.model.variant.id(),
            state.step as u32,
            state.cfg.total_steps as u32,
            state.cfg.seed as u32,
            (state.cfg.seed >> 32) as u32,
            state.opt.step as u32,
            state.opt.skipped as u32,
            flags,
        ],
    );
    let text = serde_json::to_string(&state.cfg).expect("config serializes");
    let bytes = text.as_bytes();
    let words: Vec<u32> = bytes
        .chunks(4)
        .map(|c| {
            let mut b = [0u8; 4];
            b[..c.len()].copy_from_slice(c);
            u32::from_le_bytes(b)
        })
        .collect();
    ckpt.push_words(CONFIG_SECTION, 1, words.len() as u32, words);
    ckpt.push_words("config_len", 1, 1, vec![bytes.len() as u32]);

    for p in &state.store.params {
        if !artifact && p.name.starts_with("gamma.") {
            continue;
        }
        ckpt.push_tensor(&format!("param.{}", p.name), &p.value);
        if artifact {
            ckpt.push_tensor(&format!("adam.m.{}", p.name), &p.m);
            ckpt.push_tensor(&format!("adam.v.{}", p.name), &p.v);
        }
    }
    ckpt.push_tensor("bank.p2d_coarse", &state.bank.p2d_coarse);
    ckpt.push_tensor("bank.p3d_coarse", &state.bank.p3d_coarse);
    ckpt.push_tensor("bank.p2d_fine", &state.bank.p2d_fine);
    ckpt.push_tensor("bank.p3d_fine", &state.bank.p3d_fine);
    ckpt
}

pub fn config_from_checkpoint(ckpt: &Checkpoint) -> Result<TrainConfig> {
    let sec = ckpt
        .find(CONFIG_SECTION)
        .ok_or_else(|| Error::format("missing section `config`"))?;
    let len_sec = ckpt
        .find("config_len")
        .ok_or_else(|| Error::format("missing section `config_len`"))?;
    let len = *len_sec.words.first().unwrap_or(&0) as usize;
    let mut bytes = Vec::with_capacity(sec.words.len() * 4);
    for w in &sec.words {
        bytes.extend_from_slice(&w.to_le_bytes());
    }
    if len > bytes.len() {
        return Err(Error::format("config length exceeds section"));
    }
    bytes.truncate(len);
    let text = String::from_utf8(bytes).map_err(|_| Error::format("config is not utf-8"))?;
    crate::io::parse_json_str("checkpoint config", &text)
}

/// Rebuilds a state from a checkpoint. Artifact checkpoints restore optimizer
/// moments and the feature field for resume; stripped finals load for
/// inference only.
pub fn state_from_checkpoint<T: Scalar>(ckpt: &Checkpoint) -> Result<TrainState<T>> {
    let meta = ckpt
        .find(META_SECTION)
        .ok_or_else(|| Error::format("missing section `meta`"))?;
    if meta.words.len() != 8 {
        return Err(Error::format("meta section has wrong length"));
    }
    let variant = Variant::from_id(meta.words[0])?;
    let flags = meta.words[7];
    let artifact = flags & FLAG_ARTIFACT != 0;
    let cfg = config_from_checkpoint(ckpt)?;
    if cfg.variant != variant {
        return Err(Error::format("checkpoint variant disagrees with its config"));
    }
    let seed = meta.words[3] as u64 | (meta.words[4] as u64) << 32;
    if cfg.seed != seed {
        return Err(Error::format("checkpoint seed disagrees with its config"));
    }
    let with_gamma = ckpt
        .sections
        .iter()
        .any(|s| s.name.starts_with("param.gamma."));
    let with_rgb = ckpt
        .sections
        .iter()
        .any(|s| s.name.starts_with("param.rgb."));
    let mut state = TrainState::<T>::with_branches(cfg, with_gamma, with_rgb)?;
    state.step = meta.words[1] as usize;
    state.opt.step = meta.words[5] as usize;
    state.opt.skipped = meta.words[6] as usize;
    state.skipped = state.opt.skipped;
    state.depth_available = flags & FLAG_NO_DEPTH == 0;
    for p in &mut state.store.params {
        let value: Tensor<T> = ckpt.read_tensor(&format!("param.{}", p.name))?;
        if (value.rows, value.cols) != (p.value.rows, p.value.cols) {
            return Err(Error::format(format!("param `{}` has wrong shape", p.name)));
        }
        p.value = value;
        if artifact {
            p.m = ckpt.read_tensor(&format!("adam.m.{}", p.name))?;
            p.v = ckpt.read_tensor(&format!("adam.v.{}", p.name))?;
        }
    }
    state.bank.p2d_coarse = ckpt.read_tensor("bank.p2d_coarse")?;
    state.bank.p3d_coarse = ckpt.read_tensor("bank.p3d_coarse")?;
    state.bank.p2d_fine = ckpt.read_tensor("bank.p2d_fine")?;
    state.bank.p3d_fine = ckpt.read_tensor("bank.p3d_fine")?;
    Ok(state)
}

pub fn is_artifact(ckpt: &Checkpoint) -> bool {
    ckpt.find(META_SECTION)
        .map(|m| m.words.len() == 8 && m.words[7] & FLAG_ARTIFACT != 0)
        .unwrap_or(false)
}

// ---------------------------------------------------------------------------
// Scene loop

/// Artifacts written by train_scene when given an output directory.
pub struct TrainOutputs<T: Scalar> {
    pub state: TrainState<T>,
    pub records: Vec<StepRecord>,
}

fn validate_views(cfg: &TrainConfig, views: &ViewSet) -> Result<bool> {
    if views.train_indices().is_empty() {
        return Err(Error::invalid("view set has no training views"));
    }
    let (h, w) = (views.height as usize, views.width as usize);
    if cfg.variant.has_seg() && (h % 4 != 0 || w % 4 != 0) {
        return Err(Error::invalid(format!(
            "encoder needs image dimensions divisible by 4, got {h}x{w}"
        )));
    }
    let n_rays = cfg.rays_per_step.min(h * w);
    if cfg.variant.has_seg() && n_rays < cfg.field.k_fine {
        return Err(Error::invalid(format!(
            "{n_rays} rays per step cannot cover {} fine classes",
            cfg.field.k_fine
        )));
    }
    let has_depth = views
        .views
        .iter()
        .any(|v| v.depth.iter().any(|d| d.is_finite()));
    Ok(has_depth)
}

/// Trains from scratch. With an output directory, writes `train_log.csv`,
/// periodic resumable checkpoints, the stripped `final.nesf`, and
/// `events.log` when any step was skipped.
pub fn train_scene<T: Scalar>(
    cfg: TrainConfig,
    views: &ViewSet,
    out_dir: Option<&Path>,
) -> Result<TrainOutputs<T>> {
    let state = TrainState::<T>::new(cfg)?;
    run_from(state, views, out_dir)
}

/// Continues a run from an artifact checkpoint; the result is bit-identical
/// to the uninterrupted run with the same seed and thread count.
pub fn resume_scene<T: Scalar>(
    ckpt: &Checkpoint,
    views: &ViewSet,
    out_dir: Option<&Path>,
) -> Result<TrainOutputs<T>> {
    if !is_artifact(ckpt) {
        return Err(Error::Protocol(
            "cannot resume from a stripped final checkpoint".to_string(),
        ));
    }
    let state = state_from_checkpoint::<T>(ckpt)?;
    run_from(state, views, out_dir)
}

fn run_from<T: Scalar>(
    mut state: TrainState<T>,
    views: &ViewSet,
    out_dir: Option<&Path>,
) -> Result<TrainOutputs<T>> {
    let has_depth = validate_views(&state.cfg, views)?;
    if !has_depth && state.depth_available {
        state.depth_available = false;
        state
            .events
            .push("no finite depth in any view; depth weight forced to 0".to_string());
        eprintln!("warning: no finite depth in any view; depth weight forced to 0");
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)
            .map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    }
    let mut records = Vec::with_capacity(state.cfg.total_steps - state.step);
    while state.step < state.cfg.total_steps {
        let record = train_step(&mut state, views)?;
        records.push(record);
        if let Some(dir) = out_dir {
            if state.step % state.cfg.checkpoint_every == 0 && state.step < state.cfg.total_steps {
                let ckpt = state_to_checkpoint(&state, true);
                crate::io::save_checkpoint(&dir.join(format!("ckpt_{:06}.nesf", state.step)), &ckpt)?;
            }
        }
    }
    if let Some(dir) = out_dir {
        let ckpt = state_to_checkpoint(&state, false);
        crate::io::save_checkpoint(&dir.join("final.nesf"), &ckpt)?;
        let mut csv = String::from(StepRecord::csv_header());
        csv.push('\n');
        for r in &records {
            csv.push_str(&r.csv_row());
            csv.push('\n');
        }
        std::fs::write(dir.join("train_log.csv"), csv)
            .map_err(|e| Error::io("writing train_log.csv".to_string(), e))?;
        if !state.events.is_empty() {
            std::fs::write(dir.join("events.log"), state.events.join("\n") + "\n")
                .map_err(|e| Error::io("writing events.log".to_string(), e))?;
        }
    }
    Ok(TrainOutputs { state, records })
}

/// Fraction of coarse classes with at least one assigned pixel on a probe
/// batch drawn from a training view.
pub fn coarse_utilization<T: Scalar>(state: &TrainState<T>, views: &ViewSet) -> Result<f64> {
    let train = views.train_indices();
    let view = &views.views[train[0]];
    let (h, w) = (views.height as usize, views.width as usize);
    let n = state.cfg.rays_per_step.min(h * w);
    let mut rng = stream(state.cfg.seed, Domain::Probe, 0);
    let chosen = rand::seq::index::sample(&mut rng, h * w, n).into_vec();
    let pixels: Vec<(u32, u32)> = chosen
        .iter()
        .map(|&i| ((i % w) as u32, (i / w) as u32))
        .collect();
    let mut rays = generate_rays(&view.camera, &pixels);
    for r in &mut rays {
        clip_to_cube(r);
    }
    let sample_cfg = SampleConfig {
        n_coarse: state.cfg.n_coarse_samples,
        n_importance: state.cfg.n_importance,
    };
    let samples = sample_rays(&state.model, &state.store, &rays, sample_cfg, state.cfg.seed, 1);
    let (pack, pos) = build_pack::<T>(&rays, &samples);

    let mut tape: Tape<T> = Tape::new();
    let pos_node = tape.constant(pos);
    let psi = state.model.psi_forward(&mut tape, &state.store, pos_node);
    let w_full = tape.render_weights(psi.sigma, pack.clone());
    let gamma = state
        .model
        .gamma_forward(&mut tape, &state.store, pos_node)?;
    let f3d_map = tape.ray_apply(w_full, gamma, pack.clone());
    let f3d_n = tape.normalize_cols(f3d_map);
    let f3d_t = tape.transpose(f3d_n);
    let f3v = tensor_to_f64(tape.value(f3d_t));

    let encoder = state
        .encoder
        .as_ref()
        .ok_or_else(|| Error::BranchAbsent("encoder".into()))?;
    let image = Tensor::from_fn(1, h * w, |_, j| sc(view.gray[j] as f64));
    let enc = encoder.infer(&state.store, &image, h, w)?;
    let mut f2v = Tensor::<f64>::zeros(n, state.cfg.field.gamma_dim);
    for (j, &i) in chosen.iter().enumerate() {
        let mut norm = 0.0;
        for r in 0..state.cfg.field.gamma_dim {
            let x = enc.features.at(r, i).to_f64().unwrap();
            norm += x * x;
        }
        let norm = norm.sqrt().max(1e-12);
        for r in 0..state.cfg.field.gamma_dim {
            *f2v.at_mut(j, r) = enc.features.at(r, i).to_f64().unwrap() / norm;
        }
    }
    let targets = derive_coarse_targets(&f2v, &f3v, &state.bank, &state.cfg.labeling)?;
    let k = state.cfg.field.k_coarse;
    Ok((k - targets.empty_classes.len()) as f64 / k as f64)
}
