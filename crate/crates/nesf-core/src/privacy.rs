//! Feature-inversion privacy evaluation: train a decoder that maps rendered
//! internal geometric features to grayscale images on attacker scenes, then
//! attack held-out victim fields and compare reconstruction quality across
//! supervision variants.

use std::path::Path;

use image::{ImageBuffer, Luma};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::params::Group;
use crate::diffcore::{
    conv_out, sc, Adam, AdamConfig, ImageShape, NodeId, ParamId, ParamStore, Scalar, Tape, Tensor,
};
use crate::error::{Error, Result};
use crate::fields::{render_view, FieldModel, PayloadKind, SampleConfig, Variant};
use crate::rng::{stream, Domain};
use crate::scenes::ViewSet;
use crate::training::{state_to_checkpoint, train_scene, TrainConfig, TrainOutputs, TrainState};

// ---------------------------------------------------------------------------
// Reconstruction metrics.

pub const PSNR_CAP: f64 = 99.0;

pub fn mae(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    assert!(!a.is_empty());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

/// Peak signal-to-noise ratio for unit-range images, capped at 99 dB so
/// identical inputs stay finite.
pub fn psnr(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    assert!(!a.is_empty());
    let mse = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    if mse <= 0.0 {
        return PSNR_CAP;
    }
    (10.0 * (1.0 / mse).log10()).clamp(0.0, PSNR_CAP)
}

/// Mean structural similarity with the standard 11x11 Gaussian window
/// (sigma 1.5), evaluated on fully interior windows only.
pub fn ssim(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    assert_eq!(a.len(), h * w);
    assert_eq!(b.len(), h * w);
    const HALF: usize = 5;
    const C1: f64 = 1e-4;
    const C2: f64 = 9e-4;
    assert!(h >= 2 * HALF + 1 && w >= 2 * HALF + 1, "image smaller than the ssim window");

    let mut kern = [0.0f64; 2 * HALF + 1];
    for (i, k) in kern.iter_mut().enumerate() {
        let d = i as f64 - HALF as f64;
        *k = (-d * d / (2.0 * 1.5 * 1.5)).exp();
    }
    let s: f64 = kern.iter().sum();
    for k in &mut kern {
        *k /= s;
    }

    // Separable weighted moments via a horizontal pass then a vertical pass.
    let hpass = |img: &[f64], out: &mut Vec<f64>| {
        out.clear();
        out.resize(h * w, 0.0);
        for y in 0..h {
            for x in HALF..w - HALF {
                let mut acc = 0.0;
                for (i, k) in kern.iter().enumerate() {
                    acc += k * img[y * w + x + i - HALF];
                }
                out[y * w + x] = acc;
            }
        }
    };
    let vpass = |img: &[f64], out: &mut Vec<f64>| {
        out.clear();
        out.resize(h * w, 0.0);
        for y in HALF..h - HALF {
            for x in 0..w {
                let mut acc = 0.0;
                for (i, k) in kern.iter().enumerate() {
                    acc += k * img[(y + i - HALF) * w + x];
                }
                out[y * w + x] = acc;
            }
        }
    };
    let blur = |img: &[f64]| {
        let mut tmp = Vec::new();
        let mut out = Vec::new();
        hpass(img, &mut tmp);
        vpass(&tmp, &mut out);
        out
    };

    let aa: Vec<f64> = a.iter().map(|x| x * x).collect();
    let bb: Vec<f64> = b.iter().map(|x| x * x).collect();
    let ab: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    let mu_a = blur(a);
    let mu_b = blur(b);
    let m_aa = blur(&aa);
    let m_bb = blur(&bb);
    let m_ab = blur(&ab);

    let mut total = 0.0;
    let mut count = 0usize;
    for y in HALF..h - HALF {
        for x in HALF..w - HALF {
            let i = y * w + x;
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = m_aa[i] - ma * ma;
            let vb = m_bb[i] - mb * mb;
            let cov = m_ab[i] - ma * mb;
            let v = ((2.0 * ma * mb + C1) * (2.0 * cov + C2))
                / ((ma * ma + mb * mb + C1) * (va + vb + C2));
            total += v;
            count += 1;
        }
    }
    (total / count as f64).clamp(-1.0, 1.0)
}

/// PSNR of predicting the mean of `train` on every image of `test`; the
/// information-free floor an attack must beat to demonstrate leakage.
pub fn mean_image_baseline(train: &[Vec<f64>], test: &[Vec<f64>]) -> f64 {
    assert!(!train.is_empty() && !test.is_empty());
    let n = train[0].len();
    let mut mean = vec![0.0; n];
    for img in train {
        for (m, v) in mean.iter_mut().zip(img) {
            *m += v / train.len() as f64;
        }
    }
    test.iter().map(|t| psnr(&mean, t)).sum::<f64>() / test.len() as f64
}

// ---------------------------------------------------------------------------
// Inversion decoder.

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InversionConfig {
    pub epochs: usize,
    pub iters_per_epoch: usize,
    /// Views accumulated into one optimizer step.
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Weight of the gradient-difference term next to the L1 term.
    pub gdl_weight: f64,
    pub widths: [usize; 4],
    pub n_coarse_samples: usize,
    pub n_importance: usize,
    pub seed: u64,
}

impl Default for InversionConfig {
    fn default() -> Self {
        InversionConfig {
            epochs: 50,
            iters_per_epoch: 100,
            batch: 2,
            lr: 1e-3,
            weight_decay: 1e-4,
            gdl_weight: 1.0,
            widths: [32, 48, 64, 64],
            n_coarse_samples: 16,
            n_importance: 8,
            seed: 0,
        }
    }
}

impl InversionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.iters_per_epoch == 0 || self.batch == 0 {
            return Err(Error::invalid("inversion counts must be positive"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::invalid("inversion lr must be positive"));
        }
        if self.widths.iter().any(|&w| w == 0) {
            return Err(Error::invalid("decoder widths must be positive"));
        }
        Ok(())
    }
}

struct ConvLayer {
    w: ParamId,
    b: ParamId,
    cin: usize,
    stride: usize,
}

impl ConvLayer {
    fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = cin * 9;
        let bound = (6.0 / fan_in as f64).sqrt();
        let w = Tensor::from_fn(cout, fan_in, |_, _| sc(rng.gen_range(-bound..bound)));
        ConvLayer {
            w: store.add(format!("{name}.w"), Group::Encoder, w),
            b: store.add(format!("{name}.b"), Group::Encoder, Tensor::zeros(cout, 1)),
            cin,
            stride,
        }
    }

    fn apply<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: NodeId,
        h: usize,
        w: usize,
    ) -> (NodeId, usize, usize) {
        let wn = tape.param(store, self.w);
        let bn = tape.param(store, self.b);
        let y = tape.conv3x3(x, wn, bn, ImageShape::new(self.cin, h, w), self.stride);
        let (ho, wo) = conv_out(h, w, self.stride);
        (y, ho, wo)
    }
}

/// Encoder-decoder with skip connections: four stride-2 stages down, four
/// upsample-concat-conv stages back, sigmoid output in [0,1]. Fully
/// convolutional, so any input size decodes to the same size.
pub struct InversionDecoder {
    pub cin: usize,
    pub widths: [usize; 4],
    /// Scenes whose renders trained this decoder; the attack protocol
    /// rejects victims found here.
    pub trained_scene_ids: Vec<u64>,
    pub train_h: usize,
    pub train_w: usize,
    stem: ConvLayer,
    down: Vec<ConvLayer>,
    up: Vec<ConvLayer>,
    out: ConvLayer,
}

impl InversionDecoder {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        cin: usize,
        widths: [usize; 4],
        seed: u64,
    ) -> Self {
        let mut rng = stream(seed, Domain::DecoderInit, 0);
        let [w0, w1, w2, w3] = widths;
        let stem = ConvLayer::new(store, "dec.stem", cin, w0, 1, &mut rng);
        let mut down = Vec::new();
        for (i, (ci, co)) in [(w0, w0), (w0, w1), (w1, w2), (w2, w3)].iter().enumerate() {
            down.push(ConvLayer::new(store, &format!("dec.down{i}"), *ci, *co, 2, &mut rng));
        }
        // Each up stage consumes the upsampled deeper map concatenated with
        // the equally sized skip from the down path.
        let mut up = Vec::new();
        for (i, (deep, skip, out)) in [(w3, w2, w2), (w2, w1, w1), (w1, w0, w0), (w0, w0, w0)]
            .iter()
            .enumerate()
        {
            up.push(ConvLayer::new(
                store,
                &format!("dec.up{i}"),
                deep + skip,
                *out,
                1,
                &mut rng,
            ));
        }
        let out = ConvLayer::new(store, "dec.out", widths[0], 1, 1, &mut rng);
        InversionDecoder {
            cin,
            widths,
            trained_scene_ids: Vec::new(),
            train_h: 0,
            train_w: 0,
            stem,
            down,
            up,
            out,
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: NodeId,
        h: usize,
        w: usize,
    ) -> NodeId {
        assert_eq!(tape.shape(x), (self.cin, h * w));
        let (s, _, _) = self.stem.apply(tape, store, x, h, w);
        let mut cur = tape.relu(s);
        let mut dims = vec![(h, w)];
        let mut skips = vec![cur];
        for d in &self.down {
            let (hh, ww) = *dims.last().unwrap();
            let (y, ho, wo) = d.apply(tape, store, cur, hh, ww);
            cur = tape.relu(y);
            dims.push((ho, wo));
            skips.push(cur);
        }
        let [w0, w1, w2, w3] = self.widths;
        for (i, u) in self.up.iter().enumerate() {
            let lvl = 4 - i;
            let (hd, wd) = dims[lvl];
            let (ht, wt) = dims[lvl - 1];
            let c_deep = [w3, w2, w1, w0][i];
            let ups = tape.upsample2x(cur, ImageShape::new(c_deep, hd, wd));
            let ups = if (2 * hd, 2 * wd) != (ht, wt) {
                tape.crop(ups, ImageShape::new(c_deep, 2 * hd, 2 * wd), ht, wt)
            } else {
                ups
            };
            let cat = tape.concat_rows(ups, skips[lvl - 1]);
            let (y, _, _) = u.apply(tape, store, cat, ht, wt);
            cur = tape.relu(y);
        }
        let (y, _, _) = self.out.apply(tape, store, cur, h, w);
        tape.sigmoid(y)
    }

    /// Inference decode of one standardized feature map.
    pub fn infer<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        features: &Tensor<T>,
        h: usize,
        w: usize,
    ) -> Vec<f64> {
        let mut tape = Tape::<T>::new();
        let x = tape.constant(features.clone());
        let y = self.forward(&mut tape, store, x, h, w);
        tape.value(y).data.iter().map(|v| v.to_f64().unwrap()).collect()
    }
}

/// Per-channel standardization of a rendered feature map. The floor on the
/// deviation keeps near-constant channels near zero instead of amplifying
/// numerical noise.
pub fn standardize_features(values: &Tensor<f64>) -> Tensor<f64> {
    let n = values.cols as f64;
    Tensor::from_fn(values.rows, values.cols, |r, c| {
        let row = values.row(r);
        let mean: f64 = row.iter().sum::<f64>() / n;
        let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        (values.at(r, c) - mean) / var.sqrt().max(1e-3)
    })
}

fn feature_map<T: Scalar>(
    model: &FieldModel,
    store: &ParamStore<T>,
    camera: &crate::geometry::Camera,
    cfg: SampleConfig,
    seed: u64,
) -> Result<Tensor<f64>> {
    let r = render_view(model, store, camera, PayloadKind::GeoFeature, cfg, seed)?;
    Ok(standardize_features(&r.values))
}

fn to_t<T: Scalar>(x: &Tensor<f64>) -> Tensor<T> {
    Tensor::from_fn(x.rows, x.cols, |r, c| sc::<T>(x.at(r, c)))
}

// ---------------------------------------------------------------------------
// Inversion training.

pub struct AttackerScene<'a, T: Scalar> {
    pub model: &'a FieldModel,
    pub store: &'a ParamStore<T>,
    pub views: &'a ViewSet,
}

/// L1 plus gradient-difference reconstruction loss on one view.
fn recon_loss<T: Scalar>(
    tape: &mut Tape<T>,
    pred: NodeId,
    gt: NodeId,
    h: usize,
    w: usize,
    gdl_weight: f64,
) -> NodeId {
    let shape = ImageShape::new(1, h, w);
    let diff = tape.sub(pred, gt);
    let absd = tape.abs(diff);
    let l1 = tape.mean_all(absd);
    let mut total = l1;
    for horizontal in [true, false] {
        let gp = tape.shift_diff(pred, shape, horizontal);
        let gg = tape.shift_diff(gt, shape, horizontal);
        let gd = tape.sub(gp, gg);
        let ga = tape.abs(gd);
        let gm = tape.mean_all(ga);
        let gw = tape.scale(gm, sc::<T>(gdl_weight));
        total = tape.add(total, gw);
    }
    total
}

/// Trains the inversion decoder on pre-rendered geo-feature maps of the
/// attacker scenes. Per epoch one scene is drawn; per iteration a batch of
/// training views is regressed against their grayscale ground truth.
pub fn train_inversion<T: Scalar>(
    attackers: &[AttackerScene<'_, T>],
    cfg: &InversionConfig,
) -> Result<(InversionDecoder, ParamStore<T>)> {
    cfg.validate()?;
    if attackers.len() < 2 {
        return Err(Error::invalid("need at least two attacker scenes"));
    }
    let cin = attackers[0].model.cfg.g_dim;
    let (h, w) = (
        attackers[0].views.height as usize,
        attackers[0].views.width as usize,
    );
    let mut ids = Vec::new();
    for a in attackers {
        if a.model.cfg.g_dim != cin {
            return Err(Error::invalid("attacker feature widths disagree"));
        }
        if (a.views.height as usize, a.views.width as usize) != (h, w) {
            return Err(Error::invalid("attacker view resolutions disagree"));
        }
        if ids.contains(&a.views.scene_id) {
            return Err(Error::Protocol("duplicate attacker scene id".into()));
        }
        if a.views.train_indices().is_empty() {
            return Err(Error::invalid("attacker scene has no training views"));
        }
        ids.push(a.views.scene_id);
    }

    let samples = SampleConfig {
        n_coarse: cfg.n_coarse_samples,
        n_importance: cfg.n_importance,
    };
    // Rendering dominates the budget, so each training view is rendered
    // exactly once up front.
    let mut features: Vec<Vec<Tensor<T>>> = Vec::new();
    let mut targets: Vec<Vec<Tensor<T>>> = Vec::new();
    for a in attackers {
        let mut f = Vec::new();
        let mut t = Vec::new();
        for vi in a.views.train_indices() {
            let view = &a.views.views[vi];
            let map = feature_map(a.model, a.store, &view.camera, samples, cfg.seed)?;
            f.push(to_t::<T>(&map));
            t.push(Tensor::from_vec(
                1,
                view.gray.len(),
                view.gray.iter().map(|&g| sc::<T>(g as f64)).collect(),
            ));
        }
        features.push(f);
        targets.push(t);
    }

    let mut store = ParamStore::<T>::new();
    let mut decoder = InversionDecoder::new(&mut store, cin, cfg.widths, cfg.seed);
    decoder.trained_scene_ids = ids;
    decoder.train_h = h;
    decoder.train_w = w;

    let mut opt = Adam::new(vec![(
        Group::Encoder,
        AdamConfig::new(cfg.lr, cfg.lr, 0).with_weight_decay(cfg.weight_decay),
    )]);

    for epoch in 0..cfg.epochs {
        let mut rng = stream(cfg.seed, Domain::DecoderIter, epoch as u64);
        let scene = rng.gen_range(0..attackers.len());
        let n_views = features[scene].len();
        for _ in 0..cfg.iters_per_epoch {
            let mut tape = Tape::<T>::new();
            let mut loss = None;
            for _ in 0..cfg.batch {
                let vi = rng.gen_range(0..n_views);
                let x = tape.constant(features[scene][vi].clone());
                let gt = tape.constant(targets[scene][vi].clone());
                let pred = decoder.forward(&mut tape, &store, x, h, w);
                let l = recon_loss(&mut tape, pred, gt, h, w, cfg.gdl_weight);
                loss = Some(match loss {
                    None => l,
                    Some(acc) => tape.add(acc, l),
                });
            }
            let total = tape.scale(loss.unwrap(), sc::<T>(1.0 / cfg.batch as f64));
            let grads = tape.backward(total);
            store.zero_grads();
            tape.accumulate_grads(&grads, &mut store);
            let _ = opt.apply(&mut store);
        }
    }
    Ok((decoder, store))
}

// ---------------------------------------------------------------------------
// Attack.

#[derive(Clone, Copy, Debug)]
pub struct AttackConfig {
    pub n_coarse_samples: usize,
    pub n_importance: usize,
    pub seed: u64,
    /// Disables the attacker/victim disjointness check (self-attack
    /// diagnostics only).
    pub unchecked: bool,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            n_coarse_samples: 16,
            n_importance: 8,
            seed: 0,
            unchecked: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ViewMetrics {
    pub view: usize,
    pub mae: f64,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug)]
pub struct PrivacyReport {
    pub variant: Variant,
    pub scene_id: u64,
    pub per_view: Vec<ViewMetrics>,
    pub mean_mae: f64,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub events: Vec<String>,
    /// Reconstructions in view order, for contact sheets.
    pub reconstructions: Vec<Vec<f64>>,
}

impl PrivacyReport {
    pub fn csv_header() -> &'static str {
        "view,mae,psnr,ssim"
    }

    pub fn csv(&self) -> String {
        let mut out = String::from(Self::csv_header());
        out.push('\n');
        for m in &self.per_view {
            out.push_str(&format!(
                "{},{:.6},{:.4},{:.6}\n",
                m.view, m.mae, m.psnr, m.ssim
            ));
        }
        out.push_str(&format!(
            "mean,{:.6},{:.4},{:.6}\n",
            self.mean_mae, self.mean_psnr, self.mean_ssim
        ));
        out
    }
}

/// Bilinear resize of a channel-major map; used only when attack resolution
/// disagrees with the decoder's training resolution.
fn resize_bilinear(src: &Tensor<f64>, h0: usize, w0: usize, h1: usize, w1: usize) -> Tensor<f64> {
    assert_eq!(src.cols, h0 * w0);
    Tensor::from_fn(src.rows, h1 * w1, |c, i| {
        let (y1, x1) = (i / w1, i % w1);
        let fy = (y1 as f64 + 0.5) * h0 as f64 / h1 as f64 - 0.5;
        let fx = (x1 as f64 + 0.5) * w0 as f64 / w1 as f64 - 0.5;
        let y = fy.floor().clamp(0.0, (h0 - 1) as f64) as usize;
        let x = fx.floor().clamp(0.0, (w0 - 1) as f64) as usize;
        let (yn, xn) = ((y + 1).min(h0 - 1), (x + 1).min(w0 - 1));
        let (dy, dx) = ((fy - y as f64).clamp(0.0, 1.0), (fx - x as f64).clamp(0.0, 1.0));
        let v00 = src.at(c, y * w0 + x);
        let v01 = src.at(c, y * w0 + xn);
        let v10 = src.at(c, yn * w0 + x);
        let v11 = src.at(c, yn * w0 + xn);
        v00 * (1.0 - dy) * (1.0 - dx)
            + v01 * (1.0 - dy) * dx
            + v10 * dy * (1.0 - dx)
            + v11 * dy * dx
    })
}

/// Decodes one standardized feature map, routing through the decoder's
/// training resolution when the input disagrees with it.
pub fn decode_features<T: Scalar>(
    decoder: &InversionDecoder,
    store: &ParamStore<T>,
    features: &Tensor<f64>,
    h: usize,
    w: usize,
    events: &mut Vec<String>,
) -> Vec<f64> {
    assert_eq!(features.rows, decoder.cin);
    assert_eq!(features.cols, h * w);
    if (h, w) == (decoder.train_h, decoder.train_w) || decoder.train_h == 0 {
        return decoder.infer(store, &to_t::<T>(features), h, w);
    }
    events.push(format!(
        "resolution {}x{} resampled to decoder training resolution {}x{}",
        w, h, decoder.train_w, decoder.train_h
    ));
    let small = resize_bilinear(features, h, w, decoder.train_h, decoder.train_w);
    let pred = decoder.infer(store, &to_t::<T>(&small), decoder.train_h, decoder.train_w);
    let pred_t = Tensor::from_vec(1, pred.len(), pred);
    resize_bilinear(&pred_t, decoder.train_h, decoder.train_w, h, w).data
}

/// Renders the victim's geo-features from every training view, decodes them,
/// and scores the reconstructions against the ground-truth images.
pub fn attack<T: Scalar>(
    decoder: &InversionDecoder,
    dstore: &ParamStore<T>,
    victim_model: &FieldModel,
    victim_store: &ParamStore<T>,
    views: &ViewSet,
    cfg: &AttackConfig,
) -> Result<PrivacyReport> {
    if decoder.trained_scene_ids.contains(&views.scene_id) && !cfg.unchecked {
        return Err(Error::Protocol(format!(
            "victim scene {} appears in the attacker training set",
            views.scene_id
        )));
    }
    if victim_model.cfg.g_dim != decoder.cin {
        return Err(Error::invalid("victim feature width disagrees with decoder"));
    }
    let train = views.train_indices();
    if train.is_empty() {
        return Err(Error::invalid("victim scene has no training views"));
    }
    let samples = SampleConfig {
        n_coarse: cfg.n_coarse_samples,
        n_importance: cfg.n_importance,
    };
    let (h, w) = (views.height as usize, views.width as usize);
    let mut events = Vec::new();
    let mut per_view = Vec::new();
    let mut recons = Vec::new();
    for vi in train {
        let view = &views.views[vi];
        let map = feature_map(victim_model, victim_store, &view.camera, samples, cfg.seed)?;
        let pred = decode_features(decoder, dstore, &map, h, w, &mut events);
        let gt: Vec<f64> = view.gray.iter().map(|&g| g as f64).collect();
        per_view.push(ViewMetrics {
            view: vi,
            mae: mae(&pred, &gt),
            psnr: psnr(&pred, &gt),
            ssim: ssim(&pred, &gt, h, w),
        });
        recons.push(pred);
    }
    let n = per_view.len() as f64;
    Ok(PrivacyReport {
        variant: victim_model.variant,
        scene_id: views.scene_id,
        mean_mae: per_view.iter().map(|m| m.mae).sum::<f64>() / n,
        mean_psnr: per_view.iter().map(|m| m.psnr).sum::<f64>() / n,
        mean_ssim: per_view.iter().map(|m| m.ssim).sum::<f64>() / n,
        per_view,
        events,
        reconstructions: recons,
    })
}

// ---------------------------------------------------------------------------
// Victim artifacts.

/// Checkpoint for handing a trained victim to the attack: feature field,
/// radiance head, and optimizer moments are all stripped.
pub fn victim_checkpoint<T: Scalar>(state: &TrainState<T>) -> crate::io::Checkpoint {
    let mut ckpt = state_to_checkpoint(state, false);
    ckpt.sections.retain(|s| !s.name.starts_with("param.rgb."));
    ckpt
}

/// Trains a radiance-supervised victim and returns the run outputs together
/// with the stripped checkpoint handed to the attacker. `Rgb` trains on the
/// photometric loss alone; `RgbSeg` keeps the segmentation losses alongside.
pub fn train_rgb_baseline<T: Scalar>(
    mut cfg: TrainConfig,
    variant: Variant,
    views: &ViewSet,
    out_dir: Option<&Path>,
) -> Result<(TrainOutputs<T>, crate::io::Checkpoint)> {
    if !variant.has_rgb() {
        return Err(Error::invalid(format!(
            "baseline variant {variant:?} has no radiance head to supervise"
        )));
    }
    cfg.variant = variant;
    let outputs = train_scene(cfg, views, out_dir)?;
    let ckpt = victim_checkpoint(&outputs.state);
    Ok((outputs, ckpt))
}

/// Side-by-side grayscale grid: one row per entry, one column per panel,
/// 2-pixel separators. Panels are unit-range images of size h x w.
pub fn save_contact_sheet(
    path: &Path,
    rows: &[Vec<&[f64]>],
    h: usize,
    w: usize,
) -> Result<()> {
    if rows.is_empty() || rows[0].is_empty() {
        return Err(Error::invalid("contact sheet needs at least one panel"));
    }
    let cols = rows[0].len();
    for r in rows {
        if r.len() != cols {
            return Err(Error::invalid("contact sheet rows have unequal panel counts"));
        }
        for p in r {
            if p.len() != h * w {
                return Err(Error::invalid("contact sheet panel has wrong size"));
            }
        }
    }
    const SEP: usize = 2;
    let sheet_w = cols * w + (cols - 1) * SEP;
    let sheet_h = rows.len() * h + (rows.len() - 1) * SEP;
    let mut img = ImageBuffer::<Luma<u8>, Vec<u8>>::from_pixel(
        sheet_w as u32,
        sheet_h as u32,
        Luma([255u8]),
    );
    for (ri, row) in rows.iter().enumerate() {
        for (ci, panel) in row.iter().enumerate() {
            let oy = ri * (h + SEP);
            let ox = ci * (w + SEP);
            for y in 0..h {
                for x in 0..w {
                    let v = (panel[y * w + x].clamp(0.0, 1.0) * 255.0).round() as u8;
                    img.put_pixel((ox + x) as u32, (oy + y) as u32, Luma([v]));
                }
            }
        }
    }
    img.save(path)
        .map_err(|e| Error::invalid(format!("failed to write contact sheet: {e}")))?;
    Ok(())
}
