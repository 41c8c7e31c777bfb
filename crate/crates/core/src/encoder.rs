//! Patch tokenization, toy ViT encoders, block-wise RGB masking, and masked
//! autoencoder pretraining for the thermal branch.
//!
//! Both spectral branches use the same geometry, so RGB and thermal images
//! produce spatially aligned `[N, d]` token grids and fuse one-to-one without
//! interpolation.

use rand::Rng;

use crate::error::{Error, Result};
use crate::image::ImagePlane;
use crate::nn::{
    layer_norm, linear, mlp, multi_head_attention, Binder, LayerNormParams, LinVals,
    LinearParams, LnVals, MhaParams, MhaVals, MlpParams, MlpVals, ParamSet,
};
use crate::rng::{self, Stream};
use crate::tape::{Tape, Val};
use crate::tensor::Tensor;

fn join(prefix: &str, leaf: &str) -> String {
    if prefix.is_empty() {
        leaf.to_string()
    } else {
        format!("{prefix}.{leaf}")
    }
}

// ── Channel replication ──────────────────────────────────────────────

/// Replicate a single-channel plane across three identical channels; values
/// are preserved bit-exactly.
pub fn replicate_channels(th: &ImagePlane) -> Result<ImagePlane> {
    if th.channels != 1 {
        return Err(Error::contract(format!(
            "channel replication expects a single-channel input, got {} channels",
            th.channels
        )));
    }
    let mut pixels = Vec::with_capacity(th.pixels().len() * 3);
    for &v in th.pixels() {
        pixels.extend_from_slice(&[v, v, v]);
    }
    ImagePlane::new(th.height, th.width, 3, pixels)
}

// ── Block-wise RGB masking ───────────────────────────────────────────

/// Zero out contiguous square regions of a 3-channel image until their union
/// covers exactly `round(rho * H * W)` pixels. Squares have side
/// `round(0.18 * min(H, W))`, are placed uniformly at random (clipped at the
/// borders), and the last square is trimmed in row-major order to hit the
/// target count exactly. Deterministic under `seed`.
pub fn block_mask_rgb(img: &ImagePlane, rho: f64, seed: u64) -> Result<ImagePlane> {
    if img.channels != 3 {
        return Err(Error::contract("block masking applies to the RGB plane only"));
    }
    if !(0.0..1.0).contains(&rho) {
        return Err(Error::contract(format!("mask ratio {rho} outside [0, 1)")));
    }
    let (h, w) = (img.height, img.width);
    let target = (rho * (h * w) as f64).round() as usize;
    if target == 0 {
        return Ok(img.clone());
    }
    let side = ((0.18 * h.min(w) as f64).round() as usize).max(1);
    let mut rng = rng::stream(seed);
    let mut masked = vec![false; h * w];
    let mut covered = 0usize;
    let mut attempts = 0usize;
    while covered < target {
        attempts += 1;
        let (y0, x0) = if attempts <= 10_000 {
            (rng.gen_range(0..h), rng.gen_range(0..w))
        } else {
            // random placement is not filling the remainder; scan instead
            match masked.iter().position(|&m| !m) {
                Some(p) => (p / w, p % w),
                None => break,
            }
        };
        let y1 = (y0 + side).min(h);
        let x1 = (x0 + side).min(w);
        let mut newly = Vec::new();
        for y in y0..y1 {
            for x in x0..x1 {
                if !masked[y * w + x] {
                    masked[y * w + x] = true;
                    newly.push(y * w + x);
                }
            }
        }
        covered += newly.len();
        if covered > target {
            let excess = covered - target;
            for &p in newly.iter().take(excess) {
                masked[p] = false;
            }
            covered = target;
        }
    }
    let mut out = img.clone();
    for (p, &m) in masked.iter().enumerate() {
        if m {
            let (y, x) = (p / w, p % w);
            for c in 0..3 {
                out.set(y, x, c, 0.0);
            }
        }
    }
    Ok(out)
}

// ── ViT encoder ──────────────────────────────────────────────────────

/// Pre-norm transformer block.
#[derive(Debug, Clone)]
pub struct VitBlock {
    pub ln1: LayerNormParams,
    pub attn: MhaParams,
    pub ln2: LayerNormParams,
    pub mlp: MlpParams,
}

impl VitBlock {
    pub fn new(d: usize, heads: usize, rng: &mut Stream) -> Self {
        VitBlock {
            ln1: LayerNormParams::identity(d),
            attn: MhaParams::new(d, heads, rng),
            ln2: LayerNormParams::identity(d),
            mlp: MlpParams::new(d, 2 * d, d, rng),
        }
    }

    pub fn bind(&self, b: &mut Binder, name: &str) -> VitBlockVals {
        b.scoped(name, |b| VitBlockVals {
            ln1: self.ln1.bind(b, "ln1"),
            attn: self.attn.bind(b, "attn"),
            ln2: self.ln2.bind(b, "ln2"),
            mlp: self.mlp.bind(b, "mlp"),
        })
    }
}

impl ParamSet for VitBlock {
    fn for_each(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.ln1.for_each(&join(prefix, "ln1"), f);
        self.attn.for_each(&join(prefix, "attn"), f);
        self.ln2.for_each(&join(prefix, "ln2"), f);
        self.mlp.for_each(&join(prefix, "mlp"), f);
    }

    fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.ln1.for_each_mut(&join(prefix, "ln1"), f);
        self.attn.for_each_mut(&join(prefix, "attn"), f);
        self.ln2.for_each_mut(&join(prefix, "ln2"), f);
        self.mlp.for_each_mut(&join(prefix, "mlp"), f);
    }
}

pub struct VitBlockVals {
    pub ln1: LnVals,
    pub attn: MhaVals,
    pub ln2: LnVals,
    pub mlp: MlpVals,
}

/// x + MHA(LN(x)), then x + MLP(LN(x)).
pub fn vit_block_forward(tape: &mut Tape, x: Val, b: &VitBlockVals) -> Result<Val> {
    let n1 = layer_norm(tape, x, &b.ln1)?;
    let a = multi_head_attention(tape, n1, n1, n1, &b.attn, None)?;
    let x = tape.add(x, a)?;
    let n2 = layer_norm(tape, x, &b.ln2)?;
    let m = mlp(tape, n2, &b.mlp)?;
    tape.add(x, m)
}

#[derive(Debug, Clone)]
pub struct VitEncoderParams {
    pub patch_embed: LinearParams,
    /// `[N, d]` learned absolute position table.
    pub pos: Tensor,
    pub blocks: Vec<VitBlock>,
    pub ln_f: LayerNormParams,
    pub patch_size: usize,
    pub image_h: usize,
    pub image_w: usize,
}

impl VitEncoderParams {
    pub fn new(
        image_h: usize,
        image_w: usize,
        patch_size: usize,
        d: usize,
        heads: usize,
        n_blocks: usize,
        rng: &mut Stream,
    ) -> Result<Self> {
        if image_h % patch_size != 0 || image_w % patch_size != 0 {
            return Err(Error::contract(format!(
                "image {image_h}x{image_w} not divisible by patch size {patch_size}"
            )));
        }
        let n = (image_h / patch_size) * (image_w / patch_size);
        let patch_dim = patch_size * patch_size * 3;
        Ok(VitEncoderParams {
            patch_embed: LinearParams::xavier(d, patch_dim, rng),
            pos: Tensor::uniform(vec![n, d], 0.02, rng),
            blocks: (0..n_blocks).map(|_| VitBlock::new(d, heads, rng)).collect(),
            ln_f: LayerNormParams::identity(d),
            patch_size,
            image_h,
            image_w,
        })
    }

    pub fn n_tokens(&self) -> usize {
        self.pos.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.pos.shape()[1]
    }

    pub fn bind(&self, b: &mut Binder, name: &str) -> VitVals {
        b.scoped(name, |b| VitVals {
            patch_embed: self.patch_embed.bind(b, "patch_embed"),
            pos: b.leaf("pos", &self.pos),
            blocks: self
                .blocks
                .iter()
                .enumerate()
                .map(|(i, blk)| blk.bind(b, &format!("blocks.{i}")))
                .collect(),
            ln_f: self.ln_f.bind(b, "ln_f"),
        })
    }
}

impl ParamSet for VitEncoderParams {
    fn for_each(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.patch_embed.for_each(&join(prefix, "patch_embed"), f);
        f(&join(prefix, "pos"), &self.pos);
        for (i, blk) in self.blocks.iter().enumerate() {
            blk.for_each(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.ln_f.for_each(&join(prefix, "ln_f"), f);
    }

    fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.patch_embed.for_each_mut(&join(prefix, "patch_embed"), f);
        f(&join(prefix, "pos"), &mut self.pos);
        for (i, blk) in self.blocks.iter_mut().enumerate() {
            blk.for_each_mut(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.ln_f.for_each_mut(&join(prefix, "ln_f"), f);
    }
}

pub struct VitVals {
    pub patch_embed: LinVals,
    pub pos: Val,
    pub blocks: Vec<VitBlockVals>,
    pub ln_f: LnVals,
}

/// Flatten a 3-channel image into its `[N, ps*ps*3]` patch matrix, patches in
/// row-major grid order, pixels row-major within the patch with channels
/// interleaved.
pub fn patch_matrix(img: &ImagePlane, patch_size: usize) -> Result<Tensor> {
    if img.channels != 3 {
        return Err(Error::contract("patchify expects a 3-channel image"));
    }
    if img.height % patch_size != 0 || img.width % patch_size != 0 {
        return Err(Error::dim(
            "patchify",
            &[img.height, img.width],
            &[patch_size, patch_size],
        ));
    }
    let gh = img.height / patch_size;
    let gw = img.width / patch_size;
    let patch_dim = patch_size * patch_size * 3;
    let mut data = Vec::with_capacity(gh * gw * patch_dim);
    for py in 0..gh {
        for px in 0..gw {
            for dy in 0..patch_size {
                for dx in 0..patch_size {
                    for c in 0..3 {
                        data.push(img.get(py * patch_size + dy, px * patch_size + dx, c));
                    }
                }
            }
        }
    }
    Tensor::new(vec![gh * gw, patch_dim], data)
}

/// Patch-embed an image and add position embeddings (the stage before any
/// transformer block; differences stay local to the changed patch here).
pub fn embed_tokens(tape: &mut Tape, img: &ImagePlane, enc: &VitVals, patch_size: usize) -> Result<Val> {
    let patches = patch_matrix(img, patch_size)?;
    let pv = tape.leaf(&patches);
    let emb = linear(tape, pv, &enc.patch_embed)?;
    tape.add(emb, enc.pos)
}

/// Full encoder: patch embed, position add, pre-norm blocks, final LN.
pub fn patchify_encode(
    tape: &mut Tape,
    img: &ImagePlane,
    enc: &VitVals,
    patch_size: usize,
) -> Result<Val> {
    let mut x = embed_tokens(tape, img, enc, patch_size)?;
    for blk in &enc.blocks {
        x = vit_block_forward(tape, x, blk)?;
    }
    layer_norm(tape, x, &enc.ln_f)
}

// ── Freeze split ─────────────────────────────────────────────────────

/// Which trailing blocks of an encoder train; everything else stays frozen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FreezeSplit {
    pub n_blocks: usize,
    pub n_trainable: usize,
}

impl FreezeSplit {
    pub fn new(n_blocks: usize, n_trainable: usize) -> Result<Self> {
        if n_trainable > n_blocks {
            return Err(Error::contract(format!(
                "cannot train {n_trainable} of {n_blocks} blocks"
            )));
        }
        Ok(FreezeSplit {
            n_blocks,
            n_trainable,
        })
    }

    pub fn first_trainable(&self) -> usize {
        self.n_blocks - self.n_trainable
    }

    pub fn is_trainable(&self, block: usize) -> bool {
        block >= self.first_trainable()
    }

    /// Set `requires_grad` accordingly: trailing blocks on, everything else
    /// (patch embed, positions, leading blocks, final LN) off.
    pub fn apply(&self, enc: &mut VitEncoderParams) {
        assert_eq!(enc.blocks.len(), self.n_blocks);
        enc.patch_embed.weight.requires_grad = false;
        enc.patch_embed.bias.requires_grad = false;
        enc.pos.requires_grad = false;
        enc.ln_f.gamma.requires_grad = false;
        enc.ln_f.beta.requires_grad = false;
        for (i, blk) in enc.blocks.iter_mut().enumerate() {
            let on = self.is_trainable(i);
            blk.for_each_mut("", &mut |_, t| t.requires_grad = on);
        }
    }
}

// ── MAE ──────────────────────────────────────────────────────────────

/// Set of masked token indices.
#[derive(Debug, Clone, PartialEq)]
pub struct MaeMask {
    masked: Vec<usize>,
    pub n_tokens: usize,
    pub ratio: f64,
}

impl MaeMask {
    pub fn masked(&self) -> &[usize] {
        &self.masked
    }

    pub fn visible(&self) -> Vec<usize> {
        let mut is_masked = vec![false; self.n_tokens];
        for &m in &self.masked {
            is_masked[m] = true;
        }
        (0..self.n_tokens).filter(|&i| !is_masked[i]).collect()
    }

    pub fn len(&self) -> usize {
        self.masked.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masked.is_empty()
    }
}

/// Uniform sample without replacement of `round(ratio * n)` token indices.
pub fn sample_mae_mask(n_tokens: usize, ratio: f64, seed: u64) -> Result<MaeMask> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::contract(format!("mask ratio {ratio} outside [0, 1)")));
    }
    let k = (ratio * n_tokens as f64).round() as usize;
    let mut rng = rng::stream(seed);
    let mut masked = rng::sample_without_replacement(&mut rng, n_tokens, k);
    masked.sort_unstable();
    Ok(MaeMask {
        masked,
        n_tokens,
        ratio,
    })
}

/// Lightweight pixel-space reconstruction decoder.
#[derive(Debug, Clone)]
pub struct MaeDecoderParams {
    /// Projects encoder width `d` down to decoder width.
    pub input_proj: LinearParams,
    /// `[N, dd]` decoder position table; restores token order.
    pub pos: Tensor,
    /// `[dd]` shared embedding for masked slots.
    pub mask_token: Tensor,
    pub blocks: Vec<VitBlock>,
    /// `[ps*ps*3, dd]` per-patch pixel prediction.
    pub pixel_head: LinearParams,
}

impl MaeDecoderParams {
    pub fn new(
        n_tokens: usize,
        d: usize,
        dec_width: usize,
        heads: usize,
        n_blocks: usize,
        patch_size: usize,
        rng: &mut Stream,
    ) -> Self {
        MaeDecoderParams {
            input_proj: LinearParams::xavier(dec_width, d, rng),
            pos: Tensor::uniform(vec![n_tokens, dec_width], 0.02, rng),
            mask_token: Tensor::uniform(vec![dec_width], 0.02, rng),
            blocks: (0..n_blocks)
                .map(|_| VitBlock::new(dec_width, heads, rng))
                .collect(),
            pixel_head: LinearParams::xavier(patch_size * patch_size * 3, dec_width, rng),
        }
    }

    pub fn bind(&self, b: &mut Binder, name: &str) -> MaeDecoderVals {
        b.scoped(name, |b| MaeDecoderVals {
            input_proj: self.input_proj.bind(b, "input_proj"),
            pos: b.leaf("pos", &self.pos),
            mask_token: b.leaf("mask_token", &self.mask_token),
            blocks: self
                .blocks
                .iter()
                .enumerate()
                .map(|(i, blk)| blk.bind(b, &format!("blocks.{i}")))
                .collect(),
            pixel_head: self.pixel_head.bind(b, "pixel_head"),
        })
    }
}

impl ParamSet for MaeDecoderParams {
    fn for_each(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.input_proj.for_each(&join(prefix, "input_proj"), f);
        f(&join(prefix, "pos"), &self.pos);
        f(&join(prefix, "mask_token"), &self.mask_token);
        for (i, blk) in self.blocks.iter().enumerate() {
            blk.for_each(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.pixel_head.for_each(&join(prefix, "pixel_head"), f);
    }

    fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.input_proj.for_each_mut(&join(prefix, "input_proj"), f);
        f(&join(prefix, "pos"), &mut self.pos);
        f(&join(prefix, "mask_token"), &mut self.mask_token);
        for (i, blk) in self.blocks.iter_mut().enumerate() {
            blk.for_each_mut(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.pixel_head.for_each_mut(&join(prefix, "pixel_head"), f);
    }
}

pub struct MaeDecoderVals {
    pub input_proj: LinVals,
    pub pos: Val,
    pub mask_token: Val,
    pub blocks: Vec<VitBlockVals>,
    pub pixel_head: LinVals,
}

#[derive(Debug)]
pub struct MaeForward {
    pub loss: Val,
    /// `[N, ps*ps*3]` reconstruction for every patch.
    pub prediction: Val,
}

/// Masked-autoencoder forward pass. The encoder runs on unmasked tokens only;
/// the decoder sees encoded tokens plus mask tokens restored to original
/// order via position embeddings and predicts all patch pixels. The loss is
/// the mean over masked patches of the squared pixel error.
pub fn mae_forward_loss(
    tape: &mut Tape,
    img: &ImagePlane,
    enc: &VitVals,
    dec: &MaeDecoderVals,
    mask: &MaeMask,
    patch_size: usize,
) -> Result<MaeForward> {
    let patches = patch_matrix(img, patch_size)?;
    let n_tokens = patches.shape()[0];
    if mask.n_tokens != n_tokens {
        return Err(Error::contract(format!(
            "mask sized for {} tokens, image has {n_tokens}",
            mask.n_tokens
        )));
    }
    if mask.is_empty() {
        return Err(Error::contract(
            "MAE loss undefined for an empty mask (division by |M|)",
        ));
    }
    let visible = mask.visible();
    let patch_dim = patches.shape()[1];

    // encoder over visible patches only
    let mut vis_rows = Vec::with_capacity(visible.len() * patch_dim);
    for &i in &visible {
        vis_rows.extend_from_slice(&patches.data()[i * patch_dim..(i + 1) * patch_dim]);
    }
    let vis = tape.constant(vec![visible.len(), patch_dim], vis_rows);
    let emb = linear(tape, vis, &enc.patch_embed)?;
    let pos_vis = tape.gather_rows(enc.pos, &visible)?;
    let mut x = tape.add(emb, pos_vis)?;
    for blk in &enc.blocks {
        x = vit_block_forward(tape, x, blk)?;
    }
    let encoded = layer_norm(tape, x, &enc.ln_f)?;

    // decoder over the restored full grid
    let proj = linear(tape, encoded, &dec.input_proj)?;
    let restored = tape.restore_tokens(proj, dec.mask_token, &visible, n_tokens)?;
    let mut y = tape.add(restored, dec.pos)?;
    for blk in &dec.blocks {
        y = vit_block_forward(tape, y, blk)?;
    }
    let prediction = linear(tape, y, &dec.pixel_head)?;

    // squared pixel error over masked patches only
    let pred_masked = tape.gather_rows(prediction, mask.masked())?;
    let mut target_rows = Vec::with_capacity(mask.len() * patch_dim);
    for &i in mask.masked() {
        target_rows.extend_from_slice(&patches.data()[i * patch_dim..(i + 1) * patch_dim]);
    }
    let target = tape.constant(vec![mask.len(), patch_dim], target_rows);
    let diff = tape.sub(pred_masked, target)?;
    let sq = tape.mul(diff, diff)?;
    let total = tape.sum_all(sq);
    let loss = tape.scale(total, 1.0 / mask.len() as f64);
    Ok(MaeForward { loss, prediction })
}
