//! The trainable per-scale noise predictor: a small convolutional
//! encoder-decoder with a spatial attention block at the bottleneck,
//! conditioned on the contour mask by channel concatenation and on the
//! timestep/style tag by learned embeddings added as per-channel biases.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::contour::ContourMask;
use crate::diffusion::{
    forward_diffuse, sigmoid, total_loss, ConditionSet, NoiseSchedule, SoftContourReward, BCE_EPS,
};
use crate::error::{MuralError, Result};
use crate::image::{Image, LatentImage, LUMA_B, LUMA_G, LUMA_R};
use crate::nn::{
    add_channel_bias, attention_backward, attention_forward, avgpool2, avgpool2_backward,
    channel_bias_grad, describe_hash, load_store, restore_into, save_store, silu_backward,
    silu_feat, silu_feat_backward, silu_forward, time_features, upsample2, upsample2_backward,
    Adam, AttnCache, CheckpointMeta, Conv2d, Conv2dCache, Embedding, Feat, GradBuffer, Linear,
    LinearCache, ParameterStore,
};
use crate::rng;

/// Shape and capacity of one per-scale denoiser.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DenoiserConfig {
    pub base_channels: usize,
    pub depth: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub time_embed_dim: usize,
    pub tag_vocab: usize,
    pub img_channels: usize,
    pub height: usize,
    pub width: usize,
}

impl DenoiserConfig {
    /// Desk-scale defaults at a given native resolution.
    pub fn desk(height: usize, width: usize, img_channels: usize) -> DenoiserConfig {
        DenoiserConfig {
            base_channels: 32,
            depth: 2,
            heads: 4,
            head_dim: 8,
            time_embed_dim: 32,
            tag_vocab: 8,
            img_channels,
            height,
            width,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads < 1 {
            return Err(MuralError::InvalidParameter("need heads >= 1".into()));
        }
        if self.base_channels % self.heads != 0 {
            return Err(MuralError::InvalidParameter(format!(
                "base_channels {} must divide into {} heads",
                self.base_channels, self.heads
            )));
        }
        if self.head_dim * self.heads != self.base_channels {
            return Err(MuralError::InvalidParameter(format!(
                "head_dim {} x heads {} must equal base_channels {}",
                self.head_dim, self.heads, self.base_channels
            )));
        }
        if self.time_embed_dim % 2 != 0 || self.time_embed_dim == 0 {
            return Err(MuralError::InvalidParameter(
                "time_embed_dim must be a positive even number".into(),
            ));
        }
        if self.img_channels != 1 && self.img_channels != 3 {
            return Err(MuralError::InvalidParameter(
                "img_channels must be 1 or 3".into(),
            ));
        }
        // depth poolings plus one more inside the attention block
        let div = 1usize << (self.depth + 1);
        if self.height % div != 0 || self.width % div != 0 || self.height == 0 {
            return Err(MuralError::InvalidParameter(format!(
                "native size {}x{} must be divisible by {div}",
                self.height, self.width
            )));
        }
        if self.tag_vocab == 0 {
            return Err(MuralError::InvalidParameter("tag_vocab must be >= 1".into()));
        }
        Ok(())
    }

    /// Canonical description; its hash guards checkpoint compatibility.
    pub fn describe(&self) -> String {
        format!(
            "denoiser;base={};depth={};heads={};head_dim={};time={};vocab={};img_c={};h={};w={}",
            self.base_channels,
            self.depth,
            self.heads,
            self.head_dim,
            self.time_embed_dim,
            self.tag_vocab,
            self.img_channels,
            self.height,
            self.width
        )
    }

    pub fn hash(&self) -> u64 {
        describe_hash(&self.describe())
    }
}

/// Canonical description of a schedule, hashed into checkpoints so a model
/// is never resumed under different diffusion coefficients.
pub fn schedule_describe(timesteps: usize, beta_start: f64, beta_end: f64) -> String {
    format!("schedule;T={timesteps};b0={beta_start};b1={beta_end}")
}

// ---------------------------------------------------------------------------
// blocks
// ---------------------------------------------------------------------------

/// Residual block: conv -> +time bias -> SiLU -> conv, added to the input.
struct ResBlock {
    conv1: Conv2d,
    conv2: Conv2d,
    time_proj: Linear,
}

struct ResBlockCache {
    c1: Conv2dCache,
    tp: LinearCache,
    pre_act: Feat,
    activated: Feat,
    c2: Conv2dCache,
}

impl ResBlock {
    fn new(
        store: &mut ParameterStore,
        name: &str,
        channels: usize,
        time_dim: usize,
        rng: &mut impl Rng,
    ) -> ResBlock {
        // conv2 starts at zero so the branch opens gradually; training
        // then behaves the same for every init seed.
        ResBlock {
            conv1: Conv2d::new(store, &format!("{name}.conv1"), channels, channels, 3, false, rng),
            conv2: Conv2d::new(store, &format!("{name}.conv2"), channels, channels, 3, true, rng),
            time_proj: Linear::new(store, &format!("{name}.time"), time_dim, channels, rng),
        }
    }

    fn forward(&self, store: &ParameterStore, x: &Feat, temb: &[f64]) -> (Feat, ResBlockCache) {
        let (mut a, c1) = self.conv1.forward(store, x);
        let (bias, tp) = self.time_proj.forward(store, temb);
        add_channel_bias(&mut a, &bias);
        let pre_act = a.clone();
        let activated = silu_feat(&pre_act);
        let (h, c2) = self.conv2.forward(store, &activated);
        let mut out = x.clone();
        out.add_assign(&h);
        (
            out,
            ResBlockCache {
                c1,
                tp,
                pre_act,
                activated,
                c2,
            },
        )
    }

    /// Returns (d_input, d_temb).
    fn backward(
        &self,
        store: &ParameterStore,
        gb: &mut GradBuffer,
        cache: &ResBlockCache,
        dout: &Feat,
    ) -> (Feat, Vec<f64>) {
        let dh = self.conv2.backward(store, gb, &cache.c2, dout);
        let da = silu_feat_backward(&cache.pre_act, &dh);
        let _ = &cache.activated;
        let dbias = channel_bias_grad(&da);
        let dtemb = self.time_proj.backward(store, gb, &cache.tp, &dbias);
        let mut din = self.conv1.backward(store, gb, &cache.c1, &da);
        din.add_assign(dout); // residual path
        (din, dtemb)
    }
}

/// Mural spatial attention: pool 2x to widen the receptive field, run
/// multi-head scaled dot-product attention over the pooled positions,
/// project, upsample back and add residually.
struct MsaBlock {
    heads: usize,
    to_q: Conv2d,
    to_k: Conv2d,
    to_v: Conv2d,
    proj: Conv2d,
}

struct MsaCache {
    pooled: Feat,
    cq: Conv2dCache,
    ck: Conv2dCache,
    cv: Conv2dCache,
    attn: AttnCache,
    cp: Conv2dCache,
    in_h: usize,
    in_w: usize,
}

impl MsaBlock {
    fn new(
        store: &mut ParameterStore,
        name: &str,
        channels: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> MsaBlock {
        MsaBlock {
            heads,
            to_q: Conv2d::new(store, &format!("{name}.q"), channels, channels, 1, false, rng),
            to_k: Conv2d::new(store, &format!("{name}.k"), channels, channels, 1, false, rng),
            to_v: Conv2d::new(store, &format!("{name}.v"), channels, channels, 1, false, rng),
            proj: Conv2d::new(store, &format!("{name}.proj"), channels, channels, 1, true, rng),
        }
    }

    fn forward(&self, store: &ParameterStore, x: &Feat) -> (Feat, MsaCache) {
        let pooled = avgpool2(x);
        let (q, cq) = self.to_q.forward(store, &pooled);
        let (k, ck) = self.to_k.forward(store, &pooled);
        let (v, cv) = self.to_v.forward(store, &pooled);
        let (attn_out, attn) = attention_forward(&q, &k, &v, self.heads);
        let (proj, cp) = self.proj.forward(store, &attn_out);
        let up = upsample2(&proj);
        let mut out = x.clone();
        out.add_assign(&up);
        (
            out,
            MsaCache {
                pooled,
                cq,
                ck,
                cv,
                attn,
                cp,
                in_h: x.h,
                in_w: x.w,
            },
        )
    }

    fn backward(
        &self,
        store: &ParameterStore,
        gb: &mut GradBuffer,
        cache: &MsaCache,
        dout: &Feat,
    ) -> Feat {
        let dproj = upsample2_backward(dout);
        let dattn_out = self.proj.backward(store, gb, &cache.cp, &dproj);
        let (dq, dk, dv) = attention_backward(&cache.attn, &dattn_out, self.heads);
        let mut dpooled = self.to_q.backward(store, gb, &cache.cq, &dq);
        dpooled.add_assign(&self.to_k.backward(store, gb, &cache.ck, &dk));
        dpooled.add_assign(&self.to_v.backward(store, gb, &cache.cv, &dv));
        let _ = &cache.pooled;
        let mut din = avgpool2_backward(&dpooled, cache.in_h, cache.in_w);
        din.add_assign(dout); // residual path
        din
    }
}

// ---------------------------------------------------------------------------
// model
// ---------------------------------------------------------------------------

/// Parameter-id view of the network; the values live in a separate
/// [`ParameterStore`] so gradient checking can borrow them independently.
pub struct DenoiserArch {
    cfg: DenoiserConfig,
    conv_in: Conv2d,
    time_lin1: Linear,
    time_lin2: Linear,
    tag_embed: Embedding,
    down: Vec<ResBlock>,
    mid1: ResBlock,
    msa: MsaBlock,
    mid2: ResBlock,
    up: Vec<ResBlock>,
    conv_out: Conv2d,
}

/// Forward-pass record consumed by [`DenoiserArch::backward`].
pub struct DenoiserTape {
    input: Feat,
    t: usize,
    tag: Option<usize>,
    tf: Vec<f64>,
    l1: LinearCache,
    h1: Vec<f64>,
    l2: LinearCache,
    c_in: Conv2dCache,
    down: Vec<(ResBlockCache, Feat)>, // cache + pre-pool feature (skip source)
    m1: ResBlockCache,
    msa: MsaCache,
    m2: ResBlockCache,
    up: Vec<ResBlockCache>,
    c_out: Conv2dCache,
}

/// A per-scale noise predictor: architecture plus its parameters.
pub struct Denoiser {
    pub config: DenoiserConfig,
    pub arch: DenoiserArch,
    pub store: ParameterStore,
}

impl Denoiser {
    /// Deterministic construction from a seed.
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Denoiser> {
        config.validate()?;
        let mut store = ParameterStore::new();
        let mut r = rng::stream(seed, "denoiser-init", 0);
        let f = config.base_channels;
        let te = config.time_embed_dim;
        let arch = DenoiserArch {
            cfg: config.clone(),
            conv_in: Conv2d::new(
                &mut store,
                "conv_in",
                config.img_channels + 1,
                f,
                3,
                false,
                &mut r,
            ),
            time_lin1: Linear::new(&mut store, "time_mlp.0", te, te, &mut r),
            time_lin2: Linear::new(&mut store, "time_mlp.1", te, te, &mut r),
            tag_embed: Embedding::new(&mut store, "tag", config.tag_vocab, te, &mut r),
            down: (0..config.depth)
                .map(|i| ResBlock::new(&mut store, &format!("down{i}"), f, te, &mut r))
                .collect(),
            mid1: ResBlock::new(&mut store, "mid1", f, te, &mut r),
            msa: MsaBlock::new(&mut store, "msa", f, config.heads, &mut r),
            mid2: ResBlock::new(&mut store, "mid2", f, te, &mut r),
            up: (0..config.depth)
                .map(|i| ResBlock::new(&mut store, &format!("up{i}"), f, te, &mut r))
                .collect(),
            conv_out: Conv2d::new(&mut store, "conv_out", f, config.img_channels, 3, true, &mut r),
        };
        Ok(Denoiser {
            config,
            arch,
            store,
        })
    }

    /// Predict the noise component of `xt`. Deterministic in (inputs, params).
    pub fn predict_eps(
        &self,
        xt: &LatentImage,
        t: usize,
        cond: &ConditionSet,
    ) -> Result<LatentImage> {
        let (eps, _) = self.arch.forward(&self.store, xt, t, cond)?;
        Ok(eps)
    }

    pub fn save(&self, path: &Path, schedule_hash: u64) -> Result<()> {
        save_store(
            path,
            &self.store,
            CheckpointMeta {
                config_hash: self.config.hash(),
                schedule_hash,
            },
        )
    }

    /// Load a checkpoint, rejecting config or schedule hash mismatches.
    pub fn load(path: &Path, config: DenoiserConfig, schedule_hash: u64) -> Result<Denoiser> {
        let mut model = Denoiser::new(config, 0)?;
        let (tensors, meta) = load_store(path)?;
        if meta.config_hash != model.config.hash() {
            return Err(MuralError::Checkpoint(format!(
                "{}: config hash mismatch (checkpoint {:x}, expected {:x})",
                path.display(),
                meta.config_hash,
                model.config.hash()
            )));
        }
        if meta.schedule_hash != schedule_hash {
            return Err(MuralError::Checkpoint(format!(
                "{}: schedule hash mismatch",
                path.display()
            )));
        }
        restore_into(&mut model.store, tensors, path)?;
        Ok(model)
    }
}

impl DenoiserArch {
    fn check_scale(&self, xt: &LatentImage, cond: &ConditionSet) -> Result<()> {
        let c = &self.cfg;
        if xt.height() != c.height || xt.width() != c.width || xt.channels() != c.img_channels {
            return Err(MuralError::shape(
                format!("{}x{}x{} (native scale)", c.height, c.width, c.img_channels),
                xt.shape_string(),
            ));
        }
        if cond.contour.height() != c.height || cond.contour.width() != c.width {
            return Err(MuralError::shape(
                format!("{}x{} contour", c.height, c.width),
                format!("{}x{}", cond.contour.height(), cond.contour.width()),
            ));
        }
        if let Some(tag) = cond.tag {
            if tag >= c.tag_vocab {
                return Err(MuralError::InvalidParameter(format!(
                    "tag {tag} outside vocab {}",
                    c.tag_vocab
                )));
            }
        }
        Ok(())
    }

    /// Full forward pass returning the prediction and the tape.
    pub fn forward(
        &self,
        store: &ParameterStore,
        xt: &LatentImage,
        t: usize,
        cond: &ConditionSet,
    ) -> Result<(LatentImage, DenoiserTape)> {
        self.check_scale(xt, cond)?;
        let input = stack_input(xt, &cond.contour);

        // timestep + tag embedding
        let tf = time_features(t, self.cfg.time_embed_dim);
        let (h1, l1) = self.time_lin1.forward(store, &tf);
        let h1s = silu_forward(&h1);
        let (mut temb, l2) = self.time_lin2.forward(store, &h1s);
        if let Some(tag) = cond.tag {
            let row = self.tag_embed.forward(store, tag);
            for (a, b) in temb.iter_mut().zip(&row) {
                *a += b;
            }
        }

        let (mut x, c_in) = self.conv_in.forward(store, &input);
        let mut down = Vec::with_capacity(self.cfg.depth);
        for block in &self.down {
            let (y, cache) = block.forward(store, &x, &temb);
            down.push((cache, y.clone()));
            x = avgpool2(&y);
        }
        let (mut x, m1) = self.mid1.forward(store, &x, &temb);
        let (y, msa) = self.msa.forward(store, &x);
        x = y;
        let (mut x, m2) = self.mid2.forward(store, &x, &temb);
        let mut up = Vec::with_capacity(self.cfg.depth);
        for (i, block) in self.up.iter().enumerate() {
            let mut y = upsample2(&x);
            // skip connection from the matching resolution on the way down
            y.add_assign(&down[self.cfg.depth - 1 - i].1);
            let (z, cache) = block.forward(store, &y, &temb);
            up.push(cache);
            x = z;
        }
        let (out, c_out) = self.conv_out.forward(store, &x);

        let eps = latent_from_feat(&out)?;
        Ok((
            eps,
            DenoiserTape {
                input,
                t,
                tag: cond.tag,
                tf,
                l1,
                h1,
                l2,
                c_in,
                down,
                m1,
                msa,
                m2,
                up,
                c_out,
            },
        ))
    }

    /// Reverse pass: accumulate parameter gradients for `d_eps` into `gb`.
    pub fn backward(
        &self,
        store: &ParameterStore,
        gb: &mut GradBuffer,
        tape: &DenoiserTape,
        d_eps: &LatentImage,
    ) -> Result<()> {
        let dout = feat_from_latent(d_eps);
        let mut dtemb = vec![0.0; self.cfg.time_embed_dim];

        let mut dx = self.conv_out.backward(store, gb, &tape.c_out, &dout);
        // up path in reverse
        let mut dskips: Vec<Feat> = Vec::with_capacity(self.cfg.depth);
        for (i, block) in self.up.iter().enumerate().rev() {
            let (dy, dt) = block.backward(store, gb, &tape.up[i], &dx);
            for (a, b) in dtemb.iter_mut().zip(&dt) {
                *a += b;
            }
            // dy splits into the upsample path and the skip connection
            dskips.push(dy.clone());
            dx = upsample2_backward(&dy);
        }
        // middle
        let (dm2, dt) = self.mid2.backward(store, gb, &tape.m2, &dx);
        for (a, b) in dtemb.iter_mut().zip(&dt) {
            *a += b;
        }
        let dmsa = self.msa.backward(store, gb, &tape.msa, &dm2);
        let (mut dx, dt) = self.mid1.backward(store, gb, &tape.m1, &dmsa);
        for (a, b) in dtemb.iter_mut().zip(&dt) {
            *a += b;
        }
        // The reversed up loop pushes the gradient for up block depth-1
        // first, so dskips[d] is exactly the skip gradient of down block d.
        for (i, block) in self.down.iter().enumerate().rev() {
            let mut dy = avgpool2_backward(&dx, tape.down[i].1.h, tape.down[i].1.w);
            dy.add_assign(&dskips[i]);
            let (dz, dt) = block.backward(store, gb, &tape.down[i].0, &dy);
            for (a, b) in dtemb.iter_mut().zip(&dt) {
                *a += b;
            }
            dx = dz;
        }
        let _d_input = self.conv_in.backward(store, gb, &tape.c_in, &dx);

        // embedding paths
        if let Some(tag) = tape.tag {
            self.tag_embed.backward(gb, tag, &dtemb);
        }
        let dh1s = self.time_lin2.backward(store, gb, &tape.l2, &dtemb);
        let dh1 = silu_backward(&tape.h1, &dh1s);
        let _dtf = self.time_lin1.backward(store, gb, &tape.l1, &dh1);
        let _ = (&tape.tf, tape.t, &tape.input);
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// layout conversions
// ---------------------------------------------------------------------------

/// Interleaved latent + contour mask -> channel-major feature planes.
fn stack_input(xt: &LatentImage, contour: &ContourMask) -> Feat {
    let (h, w, c) = (xt.height(), xt.width(), xt.channels());
    let mut feat = Feat::zeros(c + 1, h, w);
    for ch in 0..c {
        let plane = feat.plane_mut(ch);
        for y in 0..h {
            for x in 0..w {
                plane[y * w + x] = xt.at(y, x, ch);
            }
        }
    }
    let plane = feat.plane_mut(c);
    for (p, &m) in plane.iter_mut().zip(contour.data()) {
        *p = m as f64;
    }
    feat
}

pub(crate) fn feat_from_latent(lat: &LatentImage) -> Feat {
    let (h, w, c) = (lat.height(), lat.width(), lat.channels());
    let mut feat = Feat::zeros(c, h, w);
    for ch in 0..c {
        let plane = feat.plane_mut(ch);
        for y in 0..h {
            for x in 0..w {
                plane[y * w + x] = lat.at(y, x, ch);
            }
        }
    }
    feat
}

pub(crate) fn latent_from_feat(feat: &Feat) -> Result<LatentImage> {
    let mut data = vec![0.0; feat.c * feat.h * feat.w];
    for ch in 0..feat.c {
        let plane = feat.plane(ch);
        for y in 0..feat.h {
            for x in 0..feat.w {
                data[(y * feat.w + x) * feat.c + ch] = plane[y * feat.w + x];
            }
        }
    }
    LatentImage::new(feat.h, feat.w, feat.c, data)
}

// ---------------------------------------------------------------------------
// training
// ---------------------------------------------------------------------------

/// One training example: a clean patch, its condition, and the reward proxy
/// derived from the patch's own contour clustering.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub x0: Image,
    pub cond: ConditionSet,
    pub reward: SoftContourReward,
}

/// Loss pieces plus the gradient of the total loss w.r.t. the prediction.
struct SampleLoss {
    total: f64,
    d_eps: LatentImage,
}

/// Diffusion MSE plus the single-step reward consistency term and its
/// gradient with respect to the noise prediction.
fn composite_loss(
    eps_pred: &LatentImage,
    eps_true: &LatentImage,
    xt: &LatentImage,
    t: usize,
    sched: &NoiseSchedule,
    sample: &TrainSample,
) -> Result<SampleLoss> {
    let n = eps_pred.data().len() as f64;
    let mut d_eps = vec![0.0; eps_pred.data().len()];
    let mut train = 0.0;
    for (i, (p, e)) in eps_pred.data().iter().zip(eps_true.data()).enumerate() {
        let d = p - e;
        train += d * d;
        d_eps[i] = 2.0 * d / n;
    }
    train /= n;

    // The single-step x0 estimate has signal-to-noise abar/(1 - abar);
    // weighting the reward by abar_t keeps its gradients meaningful where
    // the estimate is sharp and mutes them where it is mostly noise.
    let lambda = sample.cond.lambda * sched.alpha_bar(t);
    let mut reward = 0.0;
    if lambda > 0.0 {
        let ab = sched.alpha_bar(t);
        let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
        // x0_hat in latent space, then its display-range luminance
        let c = eps_pred.channels();
        let (h, w) = (eps_pred.height(), eps_pred.width());
        let px = h * w;
        let rw = &sample.reward;
        let mask = sample.cond.contour.data();
        let weights = if c == 3 {
            vec![LUMA_R, LUMA_G, LUMA_B]
        } else {
            vec![1.0]
        };
        // d(x0_hat)/d(eps_pred) = -sb/sa, d(lum)/d(x0_lat) = weights/2
        let dx0_deps = -sb / sa;
        for p in 0..px {
            let mut lum = 0.0;
            for (ch, wgt) in weights.iter().enumerate() {
                let x0_hat = (xt.data()[p * c + ch] - sb * eps_pred.data()[p * c + ch]) / sa;
                lum += wgt * (x0_hat + 1.0) / 2.0;
            }
            let z = (rw.threshold - lum) / rw.temperature;
            let prob = sigmoid(z);
            let target = mask[p] as f64;
            let clamped = prob.clamp(BCE_EPS, 1.0 - BCE_EPS);
            reward -= target * clamped.ln() + (1.0 - target) * (1.0 - clamped).ln();
            // gradient flows only while the probability is inside the clamp
            if prob > BCE_EPS && prob < 1.0 - BCE_EPS {
                let dl_dprob = (-target / clamped + (1.0 - target) / (1.0 - clamped)) / px as f64;
                let dprob_dlum = prob * (1.0 - prob) * (-1.0 / rw.temperature);
                for (ch, wgt) in weights.iter().enumerate() {
                    d_eps[p * c + ch] +=
                        lambda * dl_dprob * dprob_dlum * (wgt / 2.0) * dx0_deps;
                }
            }
        }
        reward /= px as f64;
    }

    let total = total_loss(train, reward, lambda)?;
    Ok(SampleLoss {
        total,
        d_eps: LatentImage::new(
            eps_pred.height(),
            eps_pred.width(),
            eps_pred.channels(),
            d_eps,
        )?,
    })
}

/// Per-sample timestep/noise draw, made before any parallel work so the
/// batch is reproducible regardless of thread scheduling.
pub struct DrawnSample<'a> {
    pub sample: &'a TrainSample,
    pub t: usize,
    pub eps: LatentImage,
}

pub fn draw_batch<'a>(
    batch: &'a [TrainSample],
    sched: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Vec<DrawnSample<'a>> {
    batch
        .iter()
        .map(|sample| {
            let t = rng.gen_range(1..=sched.timesteps());
            let eps = crate::diffusion::sample_noise(
                sample.x0.height(),
                sample.x0.width(),
                sample.x0.channels(),
                rng,
            );
            DrawnSample { sample, t, eps }
        })
        .collect()
}

/// Forward + backward for one drawn sample.
fn sample_grad(
    arch: &DenoiserArch,
    store: &ParameterStore,
    drawn: &DrawnSample<'_>,
    sched: &NoiseSchedule,
) -> Result<(f64, GradBuffer)> {
    let x0 = drawn.sample.x0.to_signed_latent();
    let xt = forward_diffuse(&x0, drawn.t, &drawn.eps, sched)?;
    let (eps_pred, tape) = arch.forward(store, &xt, drawn.t, &drawn.sample.cond)?;
    let loss = composite_loss(&eps_pred, &drawn.eps, &xt, drawn.t, sched, drawn.sample)?;
    let mut gb = store.grad_buffer();
    arch.backward(store, &mut gb, &tape, &loss.d_eps)?;
    Ok((loss.total, gb))
}

/// One optimizer step over a batch: samples t and noise per element,
/// accumulates gradients of the mean total loss (deterministic reduction
/// order), applies Adam, and returns the pre-update mean loss.
pub fn train_step(
    model: &mut Denoiser,
    batch: &[TrainSample],
    sched: &NoiseSchedule,
    adam: &mut Adam,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(MuralError::InvalidParameter("empty batch".into()));
    }
    let drawn = draw_batch(batch, sched, rng);
    let arch = &model.arch;
    let store = &model.store;
    let results: Vec<Result<(f64, GradBuffer)>> = drawn
        .par_iter()
        .map(|d| sample_grad(arch, store, d, sched))
        .collect();

    model.store.zero_grads();
    let mut mean_loss = 0.0;
    for r in results {
        let (loss, gb) = r?;
        if !loss.is_finite() {
            return Err(MuralError::NonFinite {
                context: "training loss".into(),
            });
        }
        mean_loss += loss;
        model.store.add_grads(&gb);
    }
    mean_loss /= batch.len() as f64;
    model.store.scale_grads(1.0 / batch.len() as f64);
    adam.step(&mut model.store)?;
    Ok(mean_loss)
}

/// Reward consistency of a full generative rollout: sample with the model
/// from pure noise under `cond`, then score the contour agreement. This is
/// the expensive full-rollout form of the reward, exposed for periodic
/// evaluation rather than the per-step training path.
pub fn reward_full_rollout(
    model: &Denoiser,
    cond: &ConditionSet,
    reward: &SoftContourReward,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<f64> {
    let mut r = rng::stream(seed, "reward-rollout", 0);
    let c = model.config.img_channels;
    let x = crate::diffusion::sample_single(
        |xt, t| model.predict_eps(xt, t, cond),
        sched,
        model.config.height,
        model.config.width,
        c,
        &mut r,
    )?;
    let img = x.to_image_clamped();
    crate::diffusion::reward_loss(cond, &img, reward)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::contour::ContourMask;
    use crate::nn::{check_gradients, CheckOptions};

    fn small_config() -> DenoiserConfig {
        DenoiserConfig {
            base_channels: 8,
            depth: 2,
            heads: 2,
            head_dim: 4,
            time_embed_dim: 8,
            tag_vocab: 4,
            img_channels: 1,
            height: 8,
            width: 8,
        }
    }

    fn toy_sample(h: usize, w: usize) -> TrainSample {
        let mut data = vec![0.8; h * w];
        for i in (0..h * w).step_by(5) {
            data[i] = 0.1;
        }
        let x0 = Image::new(h, w, 1, data.clone()).unwrap();
        let contour = ContourMask::new(
            h,
            w,
            data.iter().map(|&v| (v < 0.5) as u8).collect(),
        )
        .unwrap();
        TrainSample {
            x0,
            cond: ConditionSet::new(contour, Some(1), 0.3).unwrap(),
            reward: SoftContourReward::from_centroid_luminances(0.1, 0.8),
        }
    }

    #[test]
    fn config_validation() {
        assert!(small_config().validate().is_ok());
        let mut bad = small_config();
        bad.head_dim = 3;
        assert!(bad.validate().is_err());
        let mut bad = small_config();
        bad.height = 12; // not divisible by 2^(depth+1) = 8
        assert!(bad.validate().is_err());
    }

    #[test]
    fn zero_final_projection_emits_zero() {
        let model = Denoiser::new(small_config(), 3).unwrap();
        let sample = toy_sample(8, 8);
        let xt = LatentImage::constant(8, 8, 1, 0.7).unwrap();
        let eps = model.predict_eps(&xt, 4, &sample.cond).unwrap();
        // conv_out is zero-initialized
        assert!(eps.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn prediction_deterministic_and_scale_checked() {
        let model = Denoiser::new(small_config(), 3).unwrap();
        let sample = toy_sample(8, 8);
        let mut r = rng::stream(1, "test", 0);
        let xt = crate::diffusion::sample_noise(8, 8, 1, &mut r);
        let a = model.predict_eps(&xt, 4, &sample.cond).unwrap();
        let b = model.predict_eps(&xt, 4, &sample.cond).unwrap();
        assert_eq!(a.data(), b.data());

        let wrong = LatentImage::zeros(16, 16, 1);
        assert!(model.predict_eps(&wrong, 4, &sample.cond).is_err());
    }

    // The full composite loss (diffusion MSE + reward term) against central
    // finite differences, every parameter tensor of the small config.
    #[test]
    fn gradients_match_finite_differences() {
        let mut model = Denoiser::new(small_config(), 7).unwrap();
        // move off the zero inits so every path carries generic gradients
        let mut r = rng::stream(8, "perturb", 0);
        for id in model.store.ids().collect::<Vec<_>>() {
            for v in model.store.value_mut(id).data_mut() {
                *v += 0.05 * rand::Rng::sample::<f64, _>(&mut r, rand_distr::StandardNormal);
            }
        }
        let sched = NoiseSchedule::linear(10, 0.02, 0.2).unwrap();
        let sample = toy_sample(8, 8);
        let mut rng_draw = rng::stream(9, "draw", 0);
        let drawn = draw_batch(std::slice::from_ref(&sample), &sched, &mut rng_draw);
        let drawn = &drawn[0];

        let x0 = sample.x0.to_signed_latent();
        let xt = forward_diffuse(&x0, drawn.t, &drawn.eps, &sched).unwrap();

        model.store.zero_grads();
        let (eps_pred, tape) = model
            .arch
            .forward(&model.store, &xt, drawn.t, &sample.cond)
            .unwrap();
        let loss = composite_loss(&eps_pred, &drawn.eps, &xt, drawn.t, &sched, &sample).unwrap();
        let mut gb = model.store.grad_buffer();
        model
            .arch
            .backward(&model.store, &mut gb, &tape, &loss.d_eps)
            .unwrap();
        model.store.add_grads(&gb);

        let arch = &model.arch;
        let reports = check_gradients(
            &mut model.store,
            |s| {
                let (eps_pred, _) = arch.forward(s, &xt, drawn.t, &sample.cond)?;
                Ok(composite_loss(&eps_pred, &drawn.eps, &xt, drawn.t, &sched, &sample)?.total)
            },
            CheckOptions::default(),
        )
        .unwrap();
        for r in &reports {
            assert!(
                r.pass,
                "{}: rel err {} over {} elements",
                r.name, r.max_rel_err, r.elements_checked
            );
        }
        assert!(reports.len() >= 20, "expected every tensor checked");
    }

    // Frozen zero predictor with lambda = 0: the expected loss is
    // E||eps||^2 = 1 per element.
    #[test]
    fn zero_predictor_unit_loss() {
        let model = Denoiser::new(small_config(), 3).unwrap();
        let sched = NoiseSchedule::linear(10, 0.02, 0.2).unwrap();
        let mut sample = toy_sample(8, 8);
        sample.cond.lambda = 0.0;
        let mut r = rng::stream(2, "zero-loss", 0);
        let mut acc = 0.0;
        let n = 200;
        for _ in 0..n {
            let drawn = draw_batch(std::slice::from_ref(&sample), &sched, &mut r);
            let d = &drawn[0];
            let x0 = sample.x0.to_signed_latent();
            let xt = forward_diffuse(&x0, d.t, &d.eps, &sched).unwrap();
            let (eps_pred, _) = model.arch.forward(&model.store, &xt, d.t, &sample.cond).unwrap();
            let loss = composite_loss(&eps_pred, &d.eps, &xt, d.t, &sched, &sample).unwrap();
            acc += loss.total;
        }
        let mean = acc / n as f64;
        // 64 pixels x 200 draws: 3 standard errors of the mean of chi^2/64
        let se = (2.0 / 64.0f64).sqrt() / (n as f64).sqrt();
        assert!((mean - 1.0).abs() < 3.0 * se, "mean {mean}");
    }

    // Overfit a single repeated sample: the loss trend must clearly drop.
    #[test]
    fn overfits_single_sample() {
        let mut model = Denoiser::new(small_config(), 3).unwrap();
        let sched = NoiseSchedule::linear(10, 0.02, 0.2).unwrap();
        let sample = toy_sample(8, 8);
        let batch = vec![sample.clone(), sample.clone()];
        let mut adam = Adam::new(&model.store, 2e-3);
        let mut r = rng::stream(4, "train", 0);
        let mut first = 0.0;
        let mut last = 0.0;
        for step in 0..200 {
            let loss = train_step(&mut model, &batch, &sched, &mut adam, &mut r).unwrap();
            if step < 10 {
                first += loss / 10.0;
            }
            if step >= 190 {
                last += loss / 10.0;
            }
        }
        assert!(
            last < 0.5 * first,
            "no training progress: first {first}, last {last}"
        );
    }

    #[test]
    fn training_is_reproducible() {
        let sched = NoiseSchedule::linear(10, 0.02, 0.2).unwrap();
        let sample = toy_sample(8, 8);
        let run = || {
            let mut model = Denoiser::new(small_config(), 3).unwrap();
            let mut adam = Adam::new(&model.store, 1e-3);
            let mut r = rng::stream(4, "train", 0);
            let mut losses = Vec::new();
            for _ in 0..5 {
                losses.push(
                    train_step(&mut model, std::slice::from_ref(&sample), &sched, &mut adam, &mut r)
                        .unwrap(),
                );
            }
            (losses, model.store.value_digest())
        };
        let (l1, d1) = run();
        let (l2, d2) = run();
        assert_eq!(l1, l2);
        assert_eq!(d1, d2);
    }

    #[test]
    fn checkpoint_round_trip_rejects_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.ckpt");
        let model = Denoiser::new(small_config(), 3).unwrap();
        let shash = describe_hash(&schedule_describe(10, 0.02, 0.2));
        model.save(&path, shash).unwrap();

        let loaded = Denoiser::load(&path, small_config(), shash).unwrap();
        assert_eq!(loaded.store.value_digest(), model.store.value_digest());

        let mut other = small_config();
        other.base_channels = 16;
        other.head_dim = 8;
        assert!(Denoiser::load(&path, other, shash).is_err());
        assert!(Denoiser::load(&path, small_config(), shash ^ 1).is_err());
    }
}
