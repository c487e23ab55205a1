use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::layers::{self, Grid};
use super::lora::LoraAdapters;
use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::geometry::SHAPE_FAMILIES;
use crate::math;
use crate::render::{Image, MaskImage};
use crate::sequence::FrameSequence;

/// Per-pixel input channels: noisy sample (3), conditioning frame (3), mask (1).
pub const INPUT_CHANNELS: usize = 7;
/// Hidden width of each block's MLP relative to the token width.
pub const MLP_RATIO: usize = 2;
/// Lower bound on `1 − t` when turning a clean-frame estimate into a velocity.
pub const VELOCITY_FLOOR: f64 = 0.05;

fn velocity_scale(t: f64) -> f64 {
    1.0 / (1.0 - t).max(VELOCITY_FLOOR)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize), serde(default, deny_unknown_fields))]
pub struct DenoiserConfig {
    pub frame_size: usize,
    pub max_frames: usize,
    pub base_channels: usize,
    pub num_blocks: usize,
    pub condition_vocab: usize,
    pub time_embed_dim: usize,
    pub patch_size: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            frame_size: 64,
            max_frames: 18,
            base_channels: 64,
            num_blocks: 2,
            condition_vocab: SHAPE_FAMILIES,
            time_embed_dim: 32,
            patch_size: 8,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("frame_size", self.frame_size),
            ("max_frames", self.max_frames),
            ("base_channels", self.base_channels),
            ("num_blocks", self.num_blocks),
            ("condition_vocab", self.condition_vocab),
            ("time_embed_dim", self.time_embed_dim),
            ("patch_size", self.patch_size),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(Error::param(format!("denoiser {name} must be positive")));
        }
        if self.frame_size % 8 != 0 {
            return Err(Error::param(format!("frame_size {} is not a multiple of 8", self.frame_size)));
        }
        if self.frame_size % self.patch_size != 0 {
            return Err(Error::param("patch_size must divide frame_size"));
        }
        if self.time_embed_dim % 2 != 0 {
            return Err(Error::param("time_embed_dim must be even"));
        }
        Ok(())
    }

    pub fn grid_side(&self) -> usize {
        self.frame_size / self.patch_size
    }

    pub fn hidden(&self) -> usize {
        self.base_channels * MLP_RATIO
    }

    /// Hash identifying the parameter layout; adapters record it to refuse
    /// loading onto a different base.
    pub fn fingerprint(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(b"loopfill-denoiser/1");
        for v in [
            self.frame_size,
            self.max_frames,
            self.base_channels,
            self.num_blocks,
            self.condition_vocab,
            self.time_embed_dim,
            self.patch_size,
        ] {
            h.update((v as u64).to_le_bytes());
        }
        h.finalize().into()
    }
}

/// Maps `[0, 1]` images to the model's `[-1, 1]` signal space, frame-major.
pub fn to_signal(images: &[Image]) -> Vec<f64> {
    images.iter().flat_map(|im| im.pixels.iter().map(|v| 2.0 * *v as f64 - 1.0)).collect()
}

/// Inverse of [`to_signal`], clamping to `[0, 1]`.
pub fn from_signal(signal: &[f64], frames: usize, size: usize) -> Vec<Image> {
    let n = size * size * 3;
    (0..frames)
        .map(|f| {
            let vals: Vec<f64> = signal[f * n..(f + 1) * n].iter().map(|v| 0.5 * (v + 1.0)).collect();
            Image::from_f64(size, size, &vals)
        })
        .collect()
}

/// Conditioning inputs of one sequence: mask-filled frames in signal space,
/// binary masks, and the class label.
#[derive(Debug, Clone, PartialEq)]
pub struct Conditioning {
    pub frames: usize,
    pub size: usize,
    pub cond: Vec<f64>,
    pub mask: Vec<f64>,
    pub label: usize,
}

impl Conditioning {
    pub fn new(frames: &[Image], masks: &[MaskImage], label: usize) -> Result<Self> {
        let Some(first) = frames.first() else {
            return Err(Error::param("conditioning needs at least one frame"));
        };
        let size = first.width;
        if frames.len() != masks.len()
            || frames.iter().any(|f| f.width != size || f.height != size)
            || masks.iter().any(|m| m.width != size || m.height != size)
        {
            return Err(Error::param("conditioning frames and masks must be square and equally sized"));
        }
        Ok(Self {
            frames: frames.len(),
            size,
            cond: to_signal(frames),
            mask: masks.iter().flat_map(|m| m.values.iter().map(|v| *v as f64)).collect(),
            label,
        })
    }

    /// Uses the sequence's mask-filled frames.
    pub fn from_sequence(seq: &FrameSequence) -> Result<Self> {
        Self::new(&seq.filled_frames(), &seq.masks, seq.label)
    }

    pub fn frame(&self, f: usize) -> Self {
        let n = self.size * self.size;
        Self {
            frames: 1,
            size: self.size,
            cond: self.cond[f * n * 3..(f + 1) * n * 3].to_vec(),
            mask: self.mask[f * n..(f + 1) * n].to_vec(),
            label: self.label,
        }
    }

    pub fn signal_len(&self) -> usize {
        self.frames * self.size * self.size * 3
    }

    /// Reorders frames; `order[i]` is the source frame of output frame `i`.
    pub fn reorder(&self, order: &[usize]) -> Self {
        let n = self.size * self.size;
        let mut out = Self { frames: order.len(), size: self.size, cond: Vec::new(), mask: Vec::new(), label: self.label };
        for &f in order {
            out.cond.extend_from_slice(&self.cond[f * n * 3..(f + 1) * n * 3]);
            out.mask.extend_from_slice(&self.mask[f * n..(f + 1) * n]);
        }
        out
    }
}

/// Reorders a frame-major signal the same way as [`Conditioning::reorder`].
pub fn reorder_signal(signal: &[f64], frame_len: usize, order: &[usize]) -> Vec<f64> {
    order.iter().flat_map(|&f| signal[f * frame_len..(f + 1) * frame_len].iter().copied()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Lin {
    w: usize,
    b: usize,
    d_in: usize,
    d_out: usize,
    slot: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Block {
    modulation: Lin,
    dw_w: usize,
    dw_b: usize,
    spatial: Lin,
    q: Lin,
    k: Lin,
    v: Lin,
    o: Lin,
    mlp_in: Lin,
    mlp_out: Lin,
}

/// Flow-matching velocity network over a stack of frames.
///
/// The head predicts a clean frame stack `D` as a correction to the
/// conditioning frames; the velocity is `(D − x_t) / max(1 − t, VELOCITY_FLOOR)`,
/// which carries the per-pixel noise through exactly.
///
/// Each frame is cut into `patch_size²` patches; every patch becomes a token
/// carrying the noisy sample, the conditioning frame and the mask. Blocks
/// alternate a depthwise spatial convolution over the patch grid, attention
/// across frames at each grid position, and a time/label-modulated MLP.
#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser {
    config: DenoiserConfig,
    params: ParamStore,
    embed: Lin,
    pos_space: usize,
    pos_frame: usize,
    time_in: Lin,
    time_out: Lin,
    labels: usize,
    blocks: Vec<Block>,
    final_mod: Lin,
    head: Lin,
    lora_targets: Vec<(String, usize, usize)>,
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn normal(&mut self, n: usize, std: f64) -> Vec<f64> {
        (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut self.rng);
                z * std
            })
            .collect()
    }
}

impl Denoiser {
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut init = Init { rng: ChaCha8Rng::seed_from_u64(seed) };
        let mut params = ParamStore::new();
        let mut targets = Vec::new();
        let c = config.base_channels;
        let hd = config.hidden();
        let p2 = config.patch_size * config.patch_size;
        let positions = config.grid_side() * config.grid_side();

        let mut linear = |params: &mut ParamStore,
                          init: &mut Init,
                          name: &str,
                          d_in: usize,
                          d_out: usize,
                          std: f64,
                          lora: bool| {
            let w = params.add(format!("{name}.weight"), vec![d_in, d_out], init.normal(d_in * d_out, std));
            let b = params.add(format!("{name}.bias"), vec![d_out], vec![0.0; d_out]);
            let slot = lora.then(|| {
                targets.push((String::from(name), d_in, d_out));
                targets.len() - 1
            });
            Lin { w, b, d_in, d_out, slot }
        };
        let inv = |d: usize| 1.0 / math::sqrt(d as f64);

        let din = INPUT_CHANNELS * p2;
        let embed = linear(&mut params, &mut init, "embed", din, c, inv(din), false);
        let pos_space = params.add("pos_space", vec![positions, c], init.normal(positions * c, 0.1));
        let pos_frame = params.add("pos_frame", vec![config.max_frames, c], init.normal(config.max_frames * c, 0.1));
        let te = config.time_embed_dim;
        let time_in = linear(&mut params, &mut init, "time.in", te, c, inv(te), false);
        let time_out = linear(&mut params, &mut init, "time.out", c, c, inv(c), false);
        let vocab = config.condition_vocab + 1;
        let labels = params.add("labels", vec![vocab, c], init.normal(vocab * c, 0.3));
        let mut blocks = Vec::with_capacity(config.num_blocks);
        for i in 0..config.num_blocks {
            let p = |s: &str| format!("blocks.{i}.{s}");
            let modulation = linear(&mut params, &mut init, &p("mod"), c, 4 * c, 0.02, false);
            let dw_w = params.add(p("dwconv.weight"), vec![9, c], init.normal(9 * c, 1.0 / 3.0));
            let dw_b = params.add(p("dwconv.bias"), vec![c], vec![0.0; c]);
            let spatial = linear(&mut params, &mut init, &p("spatial"), c, c, 0.5 * inv(c), true);
            let q = linear(&mut params, &mut init, &p("attn.q"), c, c, inv(c), true);
            let k = linear(&mut params, &mut init, &p("attn.k"), c, c, inv(c), true);
            let v = linear(&mut params, &mut init, &p("attn.v"), c, c, inv(c), true);
            let o = linear(&mut params, &mut init, &p("attn.o"), c, c, 0.5 * inv(c), true);
            let mlp_in = linear(&mut params, &mut init, &p("mlp.in"), c, hd, inv(c), true);
            let mlp_out = linear(&mut params, &mut init, &p("mlp.out"), hd, c, 0.5 * inv(hd), true);
            blocks.push(Block { modulation, dw_w, dw_b, spatial, q, k, v, o, mlp_in, mlp_out });
        }
        let final_mod = linear(&mut params, &mut init, "final.mod", c, 2 * c, 0.02, false);
        let head = linear(&mut params, &mut init, "head", c, 3 * p2, 0.0, false);
        Ok(Self {
            config,
            params,
            embed,
            pos_space,
            pos_frame,
            time_in,
            time_out,
            labels,
            blocks,
            final_mod,
            head,
            lora_targets: targets,
        })
    }

    /// Rebuilds a model from a configuration and a flat parameter list in declaration order.
    pub fn from_flat(config: DenoiserConfig, values: &[f64]) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        if !model.params.load_flat(values) {
            return Err(Error::Compatibility(format!(
                "expected {} parameters, found {}",
                model.params.num_scalars(),
                values.len()
            )));
        }
        Ok(model)
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Adapted linear maps as `(name, d_in, d_out)`, in slot order.
    pub fn lora_targets(&self) -> &[(String, usize, usize)] {
        &self.lora_targets
    }

    /// Predicted velocity for `x_t` (frame-major `[frames][y][x][rgb]` signal).
    pub fn forward(
        &self,
        adapters: Option<(&LoraAdapters, f64)>,
        t: f64,
        x_t: &[f64],
        cond: &Conditioning,
        cond_drop: bool,
    ) -> Result<Vec<f64>> {
        let lora = self.lora_ctx(adapters)?;
        Ok(self.run(lora.as_ref(), t, x_t, cond, cond_drop)?.0)
    }

    /// Forward pass followed by the vector-Jacobian product with `g_out`.
    /// Base gradients are accumulated into `base` and adapter gradients into
    /// `lora` when given. Returns the forward output.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_backward(
        &self,
        adapters: Option<(&LoraAdapters, f64)>,
        t: f64,
        x_t: &[f64],
        cond: &Conditioning,
        cond_drop: bool,
        g_out: impl FnOnce(&[f64]) -> Vec<f64>,
        base: Option<&mut [Vec<f64>]>,
        lora: Option<&mut [Vec<f64>]>,
    ) -> Result<Vec<f64>> {
        let ctx = self.lora_ctx(adapters)?;
        let (out, cache) = self.run(ctx.as_ref(), t, x_t, cond, cond_drop)?;
        let g = g_out(&out);
        let mut sink = Sink { base, lora };
        self.backward(ctx.as_ref(), &cache, &g, &mut sink);
        Ok(out)
    }

    fn lora_ctx<'a>(&self, adapters: Option<(&'a LoraAdapters, f64)>) -> Result<Option<LoraCtx<'a>>> {
        match adapters {
            None => Ok(None),
            Some((a, scale)) => {
                if a.base_fingerprint != self.config.fingerprint() {
                    return Err(Error::Compatibility("adapters were built for a different base configuration".into()));
                }
                Ok(Some(LoraCtx { adapters: a, scale: scale * a.scale }))
            }
        }
    }

    fn check_inputs(&self, t: f64, x_t: &[f64], cond: &Conditioning) -> Result<()> {
        if cond.size != self.config.frame_size {
            return Err(Error::param(format!(
                "frames are {}px, model expects {}px",
                cond.size, self.config.frame_size
            )));
        }
        if cond.frames == 0 || cond.frames > self.config.max_frames {
            return Err(Error::param(format!("{} frames outside 1..={}", cond.frames, self.config.max_frames)));
        }
        if x_t.len() != cond.signal_len() {
            return Err(Error::param(format!("x_t has {} values, expected {}", x_t.len(), cond.signal_len())));
        }
        if cond.label >= self.config.condition_vocab {
            return Err(Error::param(format!("label {} outside vocabulary", cond.label)));
        }
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::param(format!("t = {t} outside [0, 1]")));
        }
        Ok(())
    }

    fn grid(&self, frames: usize, channels: usize) -> Grid {
        Grid { frames, side: self.config.grid_side(), channels }
    }

    fn patchify(&self, x_t: &[f64], cond: &Conditioning) -> Vec<f64> {
        let (s, p, g) = (self.config.frame_size, self.config.patch_size, self.config.grid_side());
        let din = INPUT_CHANNELS * p * p;
        let mut out = vec![0.0; cond.frames * g * g * din];
        for f in 0..cond.frames {
            for gy in 0..g {
                for gx in 0..g {
                    let tok = ((f * g + gy) * g + gx) * din;
                    for py in 0..p {
                        for px in 0..p {
                            let pix = (f * s + gy * p + py) * s + gx * p + px;
                            let o = tok + (py * p + px) * INPUT_CHANNELS;
                            out[o..o + 3].copy_from_slice(&x_t[pix * 3..pix * 3 + 3]);
                            out[o + 3..o + 6].copy_from_slice(&cond.cond[pix * 3..pix * 3 + 3]);
                            out[o + 6] = cond.mask[pix];
                        }
                    }
                }
            }
        }
        out
    }

    /// Token outputs `[token][py][px][rgb]` to a frame-major signal, or the reverse.
    fn unpatchify(&self, tokens: &[f64], frames: usize, inverse: bool) -> Vec<f64> {
        let (s, p, g) = (self.config.frame_size, self.config.patch_size, self.config.grid_side());
        let mut out = vec![0.0; frames * s * s * 3];
        for f in 0..frames {
            for gy in 0..g {
                for gx in 0..g {
                    let tok = ((f * g + gy) * g + gx) * 3 * p * p;
                    for py in 0..p {
                        for px in 0..p {
                            let pix = ((f * s + gy * p + py) * s + gx * p + px) * 3;
                            let o = tok + (py * p + px) * 3;
                            for ch in 0..3 {
                                if inverse {
                                    out[o + ch] = tokens[pix + ch];
                                } else {
                                    out[pix + ch] = tokens[o + ch];
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    fn lin(&self, l: &Lin, lora: Option<&LoraCtx>, x: &[f64], m: usize) -> (Vec<f64>, Option<Vec<f64>>) {
        let mut y = vec![0.0; m * l.d_out];
        layers::matmul_acc(x, self.params.data(l.w), &mut y, m, l.d_in, l.d_out);
        layers::add_bias(&mut y, self.params.data(l.b));
        let xa = match (lora, l.slot) {
            (Some(ctx), Some(slot)) => {
                let (a, b) = ctx.adapters.pair(slot);
                let r = ctx.adapters.rank;
                let mut xa = vec![0.0; m * r];
                layers::matmul_acc(x, a, &mut xa, m, l.d_in, r);
                let scaled: Vec<f64> = xa.iter().map(|v| v * ctx.scale).collect();
                layers::matmul_acc(&scaled, b, &mut y, m, r, l.d_out);
                Some(xa)
            }
            _ => None,
        };
        (y, xa)
    }

    #[allow(clippy::too_many_arguments)]
    fn lin_back(
        &self,
        l: &Lin,
        lora: Option<&LoraCtx>,
        x: &[f64],
        xa: Option<&[f64]>,
        gy: &[f64],
        m: usize,
        sink: &mut Sink,
        need_input_grad: bool,
    ) -> Vec<f64> {
        let mut gx = if need_input_grad { vec![0.0; m * l.d_in] } else { Vec::new() };
        let w = self.params.data(l.w);
        if need_input_grad {
            layers::matmul_nt_acc(gy, w, &mut gx, m, l.d_in, l.d_out);
        }
        if let Some(base) = sink.base.as_deref_mut() {
            layers::matmul_tn_acc(x, gy, &mut base[l.w], m, l.d_in, l.d_out);
            layers::bias_grad_acc(gy, &mut base[l.b]);
        }
        if let (Some(ctx), Some(slot), Some(xa)) = (lora, l.slot, xa) {
            let (a, b) = ctx.adapters.pair(slot);
            let r = ctx.adapters.rank;
            let mut gxa = vec![0.0; m * r];
            layers::matmul_nt_acc(gy, b, &mut gxa, m, r, l.d_out);
            gxa.iter_mut().for_each(|v| *v *= ctx.scale);
            if need_input_grad {
                layers::matmul_nt_acc(&gxa, a, &mut gx, m, l.d_in, r);
            }
            if let Some(lg) = sink.lora.as_deref_mut() {
                let (ia, ib) = ctx.adapters.pairs[slot];
                layers::matmul_tn_acc(x, &gxa, &mut lg[ia], m, l.d_in, r);
                let scaled: Vec<f64> = xa.iter().map(|v| v * ctx.scale).collect();
                layers::matmul_tn_acc(&scaled, gy, &mut lg[ib], m, r, l.d_out);
            }
        }
        gx
    }

    fn run(&self, lora: Option<&LoraCtx>, t: f64, x_t: &[f64], cond: &Conditioning, cond_drop: bool) -> Result<(Vec<f64>, Cache)> {
        self.check_inputs(t, x_t, cond)?;
        let c = self.config.base_channels;
        let frames = cond.frames;
        let grid = self.grid(frames, c);
        let m = grid.tokens();
        let np = grid.positions();

        let tokens_in = self.patchify(x_t, cond);
        let (mut h, _) = self.lin(&self.embed, None, &tokens_in, m);
        let ps = self.params.data(self.pos_space);
        let pf = self.params.data(self.pos_frame);
        for f in 0..frames {
            for p in 0..np {
                let row = &mut h[(f * np + p) * c..(f * np + p + 1) * c];
                for j in 0..c {
                    row[j] += ps[p * c + j] + pf[f * c + j];
                }
            }
        }

        let temb = layers::time_embedding(t, self.config.time_embed_dim);
        let (t_pre, _) = self.lin(&self.time_in, None, &temb, 1);
        let t_act = layers::silu_vec(&t_pre);
        let (mut e, _) = self.lin(&self.time_out, None, &t_act, 1);
        let label = if cond_drop { self.config.condition_vocab } else { cond.label };
        for (ev, lv) in e.iter_mut().zip(&self.params.data(self.labels)[label * c..(label + 1) * c]) {
            *ev += lv;
        }
        let se = layers::silu_vec(&e);

        let mut blocks = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (next, bc) = self.block_forward(block, lora, h, &se, grid);
            h = next;
            blocks.push(bc);
        }

        let (fm, _) = self.lin(&self.final_mod, None, &se, 1);
        let (fn_, frstd) = layers::layer_norm(&h, c);
        let fa = layers::modulate(&fn_, &fm[..c], &fm[c..]);
        let (out_tok, _) = self.lin(&self.head, None, &fa, m);
        // the head refines the conditioning frame into a clean estimate
        let scale = velocity_scale(t);
        let mut out = self.unpatchify(&out_tok, frames, false);
        for ((o, c), x) in out.iter_mut().zip(&cond.cond).zip(x_t) {
            *o = (*o + c - x) * scale;
        }
        let cache =
            Cache { frames, scale, tokens_in, temb, t_pre, t_act, e, se, label, blocks, fm, fn_, frstd, fa };
        Ok((out, cache))
    }

    fn block_forward(&self, b: &Block, lora: Option<&LoraCtx>, h0: Vec<f64>, se: &[f64], grid: Grid) -> (Vec<f64>, BlockCache) {
        let c = grid.channels;
        let m = grid.tokens();
        let (md, _) = self.lin(&b.modulation, None, se, 1);
        let (n1, r1) = layers::layer_norm(&h0, c);
        let a1 = layers::modulate(&n1, &md[..c], &md[c..2 * c]);
        let conv = layers::dwconv3(&a1, self.params.data(b.dw_w), self.params.data(b.dw_b), grid);
        let conv_act = layers::silu_vec(&conv);
        let (ys, xa_s) = self.lin(&b.spatial, lora, &conv_act, m);
        let mut h = h0;
        h.iter_mut().zip(&ys).for_each(|(a, d)| *a += d);

        let (n2, r2) = layers::layer_norm(&h, c);
        let (q, xa_q) = self.lin(&b.q, lora, &n2, m);
        let (k, xa_k) = self.lin(&b.k, lora, &n2, m);
        let (v, xa_v) = self.lin(&b.v, lora, &n2, m);
        let (att, probs) = layers::temporal_attention(&q, &k, &v, grid);
        let (yo, xa_o) = self.lin(&b.o, lora, &att, m);
        h.iter_mut().zip(&yo).for_each(|(a, d)| *a += d);

        let (n3, r3) = layers::layer_norm(&h, c);
        let a3 = layers::modulate(&n3, &md[2 * c..3 * c], &md[3 * c..]);
        let (z, xa_1) = self.lin(&b.mlp_in, lora, &a3, m);
        let z_act = layers::silu_vec(&z);
        let (y2, xa_2) = self.lin(&b.mlp_out, lora, &z_act, m);
        h.iter_mut().zip(&y2).for_each(|(a, d)| *a += d);

        let cache = BlockCache {
            md,
            n1,
            r1,
            a1,
            conv,
            conv_act,
            xa_s,
            n2,
            r2,
            q,
            k,
            v,
            probs,
            att,
            xa_q,
            xa_k,
            xa_v,
            xa_o,
            n3,
            r3,
            a3,
            z,
            z_act,
            xa_1,
            xa_2,
        };
        (h, cache)
    }

    fn backward(&self, lora: Option<&LoraCtx>, cache: &Cache, g_out: &[f64], sink: &mut Sink) {
        let c = self.config.base_channels;
        let frames = cache.frames;
        let grid = self.grid(frames, c);
        let m = grid.tokens();
        let np = grid.positions();

        let g_scaled: Vec<f64> = g_out.iter().map(|g| g * cache.scale).collect();
        let g_tok = self.unpatchify(&g_scaled, frames, true);
        let g_fa = self.lin_back(&self.head, None, &cache.fa, None, &g_tok, m, sink, true);
        let mut g_fm = vec![0.0; 2 * c];
        let (gs, gsc) = g_fm.split_at_mut(c);
        let g_fn = layers::modulate_backward(&cache.fn_, &cache.fm[c..], &g_fa, gs, gsc);
        let mut g_h = vec![0.0; m * c];
        layers::layer_norm_backward(&cache.fn_, &cache.frstd, &g_fn, c, &mut g_h);
        let mut g_se = self.lin_back(&self.final_mod, None, &cache.se, None, &g_fm, 1, sink, true);

        for (b, bc) in self.blocks.iter().zip(&cache.blocks).rev() {
            g_h = self.block_backward(b, bc, lora, g_h, &cache.se, &mut g_se, grid, sink);
        }

        if let Some(base) = sink.base.as_deref_mut() {
            for f in 0..frames {
                for p in 0..np {
                    let row = &g_h[(f * np + p) * c..(f * np + p + 1) * c];
                    for j in 0..c {
                        base[self.pos_space][p * c + j] += row[j];
                        base[self.pos_frame][f * c + j] += row[j];
                    }
                }
            }
        }
        self.lin_back(&self.embed, None, &cache.tokens_in, None, &g_h, m, sink, false);

        let g_e: Vec<f64> = g_se.iter().zip(&cache.e).map(|(g, e)| g * math::silu_grad(*e)).collect();
        if let Some(base) = sink.base.as_deref_mut() {
            for j in 0..c {
                base[self.labels][cache.label * c + j] += g_e[j];
            }
        }
        let g_tact = self.lin_back(&self.time_out, None, &cache.t_act, None, &g_e, 1, sink, true);
        let g_tpre = layers::silu_backward(&cache.t_pre, &g_tact);
        self.lin_back(&self.time_in, None, &cache.temb, None, &g_tpre, 1, sink, false);
    }

    #[allow(clippy::too_many_arguments)]
    fn block_backward(
        &self,
        b: &Block,
        bc: &BlockCache,
        lora: Option<&LoraCtx>,
        g_h3: Vec<f64>,
        se: &[f64],
        g_se: &mut [f64],
        grid: Grid,
        sink: &mut Sink,
    ) -> Vec<f64> {
        let c = grid.channels;
        let m = grid.tokens();
        let mut g_md = vec![0.0; 4 * c];

        // MLP sub-layer
        let g_zact = self.lin_back(&b.mlp_out, lora, &bc.z_act, bc.xa_2.as_deref(), &g_h3, m, sink, true);
        let g_z = layers::silu_backward(&bc.z, &g_zact);
        let g_a3 = self.lin_back(&b.mlp_in, lora, &bc.a3, bc.xa_1.as_deref(), &g_z, m, sink, true);
        let (g_sh2, g_sc2) = g_md[2 * c..].split_at_mut(c);
        let g_n3 = layers::modulate_backward(&bc.n3, &bc.md[3 * c..], &g_a3, g_sh2, g_sc2);
        let mut g_h2 = g_h3;
        layers::layer_norm_backward(&bc.n3, &bc.r3, &g_n3, c, &mut g_h2);

        // temporal attention sub-layer
        let g_att = self.lin_back(&b.o, lora, &bc.att, bc.xa_o.as_deref(), &g_h2, m, sink, true);
        let (gq, gk, gv) = layers::temporal_attention_backward(&bc.q, &bc.k, &bc.v, &bc.probs, &g_att, grid);
        let mut g_n2 = self.lin_back(&b.q, lora, &bc.n2, bc.xa_q.as_deref(), &gq, m, sink, true);
        let gn_k = self.lin_back(&b.k, lora, &bc.n2, bc.xa_k.as_deref(), &gk, m, sink, true);
        let gn_v = self.lin_back(&b.v, lora, &bc.n2, bc.xa_v.as_deref(), &gv, m, sink, true);
        for ((a, bk), bv) in g_n2.iter_mut().zip(&gn_k).zip(&gn_v) {
            *a += bk + bv;
        }
        let mut g_h1 = g_h2;
        layers::layer_norm_backward(&bc.n2, &bc.r2, &g_n2, c, &mut g_h1);

        // spatial sub-layer
        let g_cact = self.lin_back(&b.spatial, lora, &bc.conv_act, bc.xa_s.as_deref(), &g_h1, m, sink, true);
        let g_conv = layers::silu_backward(&bc.conv, &g_cact);
        let g_a1 = match sink.base.as_deref_mut() {
            Some(base) => {
                let mut gw = core::mem::take(&mut base[b.dw_w]);
                let mut gb = core::mem::take(&mut base[b.dw_b]);
                let gx = layers::dwconv3_backward(&bc.a1, self.params.data(b.dw_w), &g_conv, grid, Some(&mut gw), Some(&mut gb));
                base[b.dw_w] = gw;
                base[b.dw_b] = gb;
                gx
            }
            None => layers::dwconv3_backward(&bc.a1, self.params.data(b.dw_w), &g_conv, grid, None, None),
        };
        let (g_sh1, g_sc1) = g_md[..2 * c].split_at_mut(c);
        let g_n1 = layers::modulate_backward(&bc.n1, &bc.md[c..2 * c], &g_a1, g_sh1, g_sc1);
        let mut g_h0 = g_h1;
        layers::layer_norm_backward(&bc.n1, &bc.r1, &g_n1, c, &mut g_h0);

        let gse = self.lin_back(&b.modulation, None, se, None, &g_md, 1, sink, true);
        g_se.iter_mut().zip(&gse).for_each(|(a, d)| *a += d);
        g_h0
    }
}

struct LoraCtx<'a> {
    adapters: &'a LoraAdapters,
    scale: f64,
}

struct Sink<'a> {
    base: Option<&'a mut [Vec<f64>]>,
    lora: Option<&'a mut [Vec<f64>]>,
}

struct BlockCache {
    md: Vec<f64>,
    n1: Vec<f64>,
    r1: Vec<f64>,
    a1: Vec<f64>,
    conv: Vec<f64>,
    conv_act: Vec<f64>,
    xa_s: Option<Vec<f64>>,
    n2: Vec<f64>,
    r2: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    probs: Vec<f64>,
    att: Vec<f64>,
    xa_q: Option<Vec<f64>>,
    xa_k: Option<Vec<f64>>,
    xa_v: Option<Vec<f64>>,
    xa_o: Option<Vec<f64>>,
    n3: Vec<f64>,
    r3: Vec<f64>,
    a3: Vec<f64>,
    z: Vec<f64>,
    z_act: Vec<f64>,
    xa_1: Option<Vec<f64>>,
    xa_2: Option<Vec<f64>>,
}

struct Cache {
    frames: usize,
    scale: f64,
    tokens_in: Vec<f64>,
    temb: Vec<f64>,
    t_pre: Vec<f64>,
    t_act: Vec<f64>,
    e: Vec<f64>,
    se: Vec<f64>,
    label: usize,
    blocks: Vec<BlockCache>,
    fm: Vec<f64>,
    fn_: Vec<f64>,
    frstd: Vec<f64>,
    fa: Vec<f64>,
}
