//! 2D image encoder producing pixel-aligned feature, segmentation and
//! uncertainty maps from a grayscale view. A strided conv pyramid feeds a
//! two-stage upsampling decoder with skip fusion; segmentation heads train
//! the shared trunk while feature and uncertainty heads read a detached copy
//! so their losses cannot steer the trunk.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::params::Group;
use crate::diffcore::{conv_out, ImageShape, NodeId, ParamId, ParamStore, Scalar, Tape, Tensor, sc};
use crate::rng::{stream, Domain};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// Widths of the four encoder stages (strides 1, 2, 2, 2).
    pub widths: [usize; 4],
    /// Width of the first fusion conv (operates at quarter resolution).
    pub dec_mid: usize,
    /// Width of the shared trunk (half resolution).
    pub trunk: usize,
    /// Hidden width inside each head.
    pub head_hidden: usize,
    pub feat_dim: usize,
    pub k_coarse: usize,
    pub k_fine: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            widths: [16, 32, 64, 64],
            dec_mid: 64,
            trunk: 48,
            head_hidden: 32,
            feat_dim: 16,
            k_coarse: 20,
            k_fine: 100,
        }
    }
}

impl EncoderConfig {
    /// Shrunk copy for fast finite-difference tests.
    pub fn tiny() -> Self {
        EncoderConfig {
            widths: [3, 4, 5, 5],
            dec_mid: 4,
            trunk: 4,
            head_hidden: 3,
            feat_dim: 2,
            k_coarse: 3,
            k_fine: 4,
        }
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

    /// Applies the conv and returns (node, output height, output width).
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

/// conv3x3 -> relu -> 1x1 projection, evaluated at half resolution and
/// upsampled back to the input grid.
struct Head {
    conv: ConvLayer,
    proj_w: ParamId,
    proj_b: ParamId,
}

impl Head {
    fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        hidden: usize,
        cout: usize,
        rng: &mut R,
    ) -> Self {
        let conv = ConvLayer::new(store, &format!("{name}.conv"), cin, hidden, 1, rng);
        let bound = (6.0 / hidden as f64).sqrt();
        let w = Tensor::from_fn(cout, hidden, |_, _| sc(rng.gen_range(-bound..bound)));
        Head {
            conv,
            proj_w: store.add(format!("{name}.proj.w"), Group::Encoder, w),
            proj_b: store.add(format!("{name}.proj.b"), Group::Encoder, Tensor::zeros(cout, 1)),
        }
    }

    fn apply<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        trunk: NodeId,
        h2: usize,
        w2: usize,
    ) -> NodeId {
        let (c, _, _) = self.conv.apply(tape, store, trunk, h2, w2);
        let c = tape.relu(c);
        let pw = tape.param(store, self.proj_w);
        let pb = tape.param(store, self.proj_b);
        let y = tape.affine(pw, c, Some(pb));
        let cout = store.value(self.proj_w).rows;
        tape.upsample2x(y, ImageShape::new(cout, h2, w2))
    }
}

pub struct Encoder2d {
    pub cfg: EncoderConfig,
    stem: ConvLayer,
    down: [ConvLayer; 3],
    fuse_mid: ConvLayer,
    fuse_trunk: ConvLayer,
    head_coarse: Head,
    head_fine: Head,
    head_feat: Head,
    head_unc_coarse: Head,
    head_unc_fine: Head,
}

/// Tape handles for one forward pass. All maps are pixel-aligned with the
/// input: features `feat_dim x H*W`, logits `K x H*W`, uncertainties
/// `K x H*W` and strictly positive.
pub struct EncoderNodes {
    pub features: NodeId,
    pub logits_coarse: NodeId,
    pub logits_fine: NodeId,
    pub unc_coarse: NodeId,
    pub unc_fine: NodeId,
    pub h: usize,
    pub w: usize,
}

/// Owned copy of the forward outputs, for inference-style callers.
pub struct EncoderOutput<T: Scalar> {
    pub features: Tensor<T>,
    pub logits_coarse: Tensor<T>,
    pub logits_fine: Tensor<T>,
    pub unc_coarse: Tensor<T>,
    pub unc_fine: Tensor<T>,
    pub h: usize,
    pub w: usize,
}

impl Encoder2d {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, cfg: EncoderConfig, seed: u64) -> Self {
        let mut rng = stream(seed, Domain::EncoderInit, 0);
        let [w0, w1, w2, w3] = cfg.widths;
        let stem = ConvLayer::new(store, "enc.stem", 1, w0, 1, &mut rng);
        let down = [
            ConvLayer::new(store, "enc.down1", w0, w1, 2, &mut rng),
            ConvLayer::new(store, "enc.down2", w1, w2, 2, &mut rng),
            ConvLayer::new(store, "enc.down3", w2, w3, 2, &mut rng),
        ];
        let fuse_mid = ConvLayer::new(store, "enc.fuse_mid", w3 + w2, cfg.dec_mid, 1, &mut rng);
        let fuse_trunk =
            ConvLayer::new(store, "enc.fuse_trunk", cfg.dec_mid + w1, cfg.trunk, 1, &mut rng);
        let mk = |store: &mut ParamStore<T>, name: &str, cout: usize, rng: &mut _| {
            Head::new(store, name, cfg.trunk, cfg.head_hidden, cout, rng)
        };
        let head_coarse = mk(store, "enc.head.coarse", cfg.k_coarse, &mut rng);
        let head_fine = mk(store, "enc.head.fine", cfg.k_fine, &mut rng);
        let head_feat = mk(store, "enc.head.feat", cfg.feat_dim, &mut rng);
        let head_unc_coarse = mk(store, "enc.head.unc_coarse", cfg.k_coarse, &mut rng);
        let head_unc_fine = mk(store, "enc.head.unc_fine", cfg.k_fine, &mut rng);
        Encoder2d {
            cfg,
            stem,
            down,
            fuse_mid,
            fuse_trunk,
            head_coarse,
            head_fine,
            head_feat,
            head_unc_coarse,
            head_unc_fine,
        }
    }

    /// Forward pass over a grayscale image node of shape `1 x h*w`.
    /// Both dimensions must be divisible by 4.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        image: NodeId,
        h: usize,
        w: usize,
    ) -> Result<EncoderNodes> {
        if h == 0 || w == 0 || h % 4 != 0 || w % 4 != 0 {
            return Err(Error::invalid(format!(
                "encoder input must have dimensions divisible by 4, got {h}x{w}"
            )));
        }
        let [w0, w1, w2, w3] = self.cfg.widths;
        let (e0, h0, wd0) = self.stem.apply(tape, store, image, h, w);
        let e0 = tape.relu(e0);
        let (e1, h1, wd1) = self.down[0].apply(tape, store, e0, h0, wd0);
        let e1 = tape.relu(e1);
        let (e2, h2, wd2) = self.down[1].apply(tape, store, e1, h1, wd1);
        let e2 = tape.relu(e2);
        let (e3, h3, wd3) = self.down[2].apply(tape, store, e2, h2, wd2);
        let e3 = tape.relu(e3);

        // Deepest stage back to quarter resolution; depth can round up on
        // sizes not divisible by 8, so crop before fusing the skip.
        let u3 = tape.upsample2x(e3, ImageShape::new(w3, h3, wd3));
        let u3 = if (2 * h3, 2 * wd3) != (h2, wd2) {
            tape.crop(u3, ImageShape::new(w3, 2 * h3, 2 * wd3), h2, wd2)
        } else {
            u3
        };
        let cat_mid = tape.concat_rows(u3, e2);
        let (d_mid, _, _) = self.fuse_mid.apply(tape, store, cat_mid, h2, wd2);
        let d_mid = tape.relu(d_mid);

        // Quarter to half resolution; halves are exact for inputs divisible
        // by 4 so no crop is needed here or after the heads.
        debug_assert_eq!((2 * h2, 2 * wd2), (h1, wd1));
        let u_mid = tape.upsample2x(d_mid, ImageShape::new(self.cfg.dec_mid, h2, wd2));
        let cat_trunk = tape.concat_rows(u_mid, e1);
        let (trunk, _, _) = self.fuse_trunk.apply(tape, store, cat_trunk, h1, wd1);
        let trunk = tape.relu(trunk);
        let trunk_sg = tape.stop_grad(trunk);
        let _ = (w0, w1, w2);

        let logits_coarse = self.head_coarse.apply(tape, store, trunk, h1, wd1);
        let logits_fine = self.head_fine.apply(tape, store, trunk, h1, wd1);
        let features = self.head_feat.apply(tape, store, trunk_sg, h1, wd1);
        let unc_c = self.head_unc_coarse.apply(tape, store, trunk_sg, h1, wd1);
        let unc_coarse = tape.softplus(unc_c);
        let unc_f = self.head_unc_fine.apply(tape, store, trunk_sg, h1, wd1);
        let unc_fine = tape.softplus(unc_f);
        Ok(EncoderNodes {
            features,
            logits_coarse,
            logits_fine,
            unc_coarse,
            unc_fine,
            h,
            w,
        })
    }

    /// Convenience wrapper: runs the forward pass on a throwaway tape and
    /// returns owned tensors.
    pub fn infer<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        image: &Tensor<T>,
        h: usize,
        w: usize,
    ) -> Result<EncoderOutput<T>> {
        let mut tape = Tape::new();
        let img = tape.constant(image.clone());
        let nodes = self.forward(&mut tape, store, img, h, w)?;
        Ok(EncoderOutput {
            features: tape.value(nodes.features).clone(),
            logits_coarse: tape.value(nodes.logits_coarse).clone(),
            logits_fine: tape.value(nodes.logits_fine).clone(),
            unc_coarse: tape.value(nodes.unc_coarse).clone(),
            unc_fine: tape.value(nodes.unc_fine).clone(),
            h,
            w,
        })
    }

    /// Final projection parameters of the two segmentation heads; zeroing
    /// them yields exactly uniform class posteriors.
    pub fn seg_proj_params(&self) -> [ParamId; 4] {
        [
            self.head_coarse.proj_w,
            self.head_coarse.proj_b,
            self.head_fine.proj_w,
            self.head_fine.proj_b,
        ]
    }
}
