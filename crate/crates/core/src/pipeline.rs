//! End-to-end assembly: paired encoders feeding the fusion block, the frozen
//! toy decoder, the four-term training step with dual-group AdamW, MAE and
//! text pretraining phases, and deterministic evaluation.

use std::collections::HashMap;
use std::io::Write;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::seq::SliceRandom;

use crate::config::TrainConfig;
use crate::datagen::{LoadedSample, Modality};
use crate::decoder::{decoder_logits, DecoderParams, DecoderVals};
use crate::encoder::{
    block_mask_rgb, patchify_encode, replicate_channels, sample_mae_mask, FreezeSplit,
    MaeDecoderParams, VitEncoderParams, VitVals,
};
use crate::error::{Error, Result};
use crate::fusion::{fuse, AblationFlags, FusionOutput, FusionParameters, FusionVals};
use crate::image::ImagePlane;
use crate::loss::{align_loss, contrastive_loss, gate_entropy_loss, total_loss, LossValues};
use crate::nn::{
    apply_grads, harvest_grads, layer_norm, masked_mean_pool, mean_pool, Binder, KeyMask,
    LayerNormParams, LnVals, ParamSet,
};
use crate::optim::{AdamHyper, AdamW, FreezeRegistry, ParamGroup};
use crate::par;
use crate::rng::{self, derive_seed};
use crate::tape::{Tape, Val};
use crate::tensor::Tensor;
use crate::vocab::{Vocab, NO, PAD, YES};

fn join(prefix: &str, leaf: &str) -> String {
    if prefix.is_empty() {
        leaf.to_string()
    } else {
        format!("{prefix}.{leaf}")
    }
}

// ── Model ────────────────────────────────────────────────────────────

/// Every parameter of the system, under stable path prefixes:
/// `rgb.*` and `decoder.*` are frozen; `thermal.*` trains only in its
/// trailing blocks; `ln_t.*` and `fusion.*` train; `aux.*` holds the fixed
/// null-modality token grids.
#[derive(Clone)]
pub struct FusionModel {
    pub rgb_encoder: VitEncoderParams,
    pub thermal_encoder: VitEncoderParams,
    /// Output norm applied to thermal tokens after the encoder.
    pub ln_thermal: LayerNormParams,
    pub fusion: FusionParameters,
    pub decoder: DecoderParams,
    /// `[N, d]` stand-in token grid when the RGB stream is absent.
    pub null_rgb: Tensor,
    /// `[N, d]` stand-in when the thermal stream is absent.
    pub null_thermal: Tensor,
}

impl ParamSet for FusionModel {
    fn for_each(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.rgb_encoder.for_each(&join(prefix, "rgb"), f);
        self.thermal_encoder.for_each(&join(prefix, "thermal"), f);
        self.ln_thermal.for_each(&join(prefix, "ln_t"), f);
        self.fusion.for_each(&join(prefix, "fusion"), f);
        self.decoder.for_each(&join(prefix, "decoder"), f);
        f(&join(prefix, "aux.null_rgb"), &self.null_rgb);
        f(&join(prefix, "aux.null_thermal"), &self.null_thermal);
    }

    fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.rgb_encoder.for_each_mut(&join(prefix, "rgb"), f);
        self.thermal_encoder.for_each_mut(&join(prefix, "thermal"), f);
        self.ln_thermal.for_each_mut(&join(prefix, "ln_t"), f);
        self.fusion.for_each_mut(&join(prefix, "fusion"), f);
        self.decoder.for_each_mut(&join(prefix, "decoder"), f);
        f(&join(prefix, "aux.null_rgb"), &mut self.null_rgb);
        f(&join(prefix, "aux.null_thermal"), &mut self.null_thermal);
    }
}

pub struct BoundModel {
    pub rgb: VitVals,
    pub thermal: VitVals,
    pub ln_t: LnVals,
    pub fusion: FusionVals,
    pub decoder: DecoderVals,
    pub null_rgb: Val,
    pub null_thermal: Val,
}

impl FusionModel {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut r = rng::stream(derive_seed(cfg.seed, 0x0de1, 0));
        let rgb_encoder = VitEncoderParams::new(
            cfg.image_h,
            cfg.image_w,
            cfg.patch_size,
            cfg.d_model,
            cfg.heads,
            cfg.encoder_blocks,
            &mut r,
        )?;
        let thermal_encoder = VitEncoderParams::new(
            cfg.image_h,
            cfg.image_w,
            cfg.patch_size,
            cfg.d_model,
            cfg.heads,
            cfg.encoder_blocks,
            &mut r,
        )?;
        let ln_thermal = LayerNormParams::identity(cfg.d_model);
        let fusion = FusionParameters::new(cfg.d_model, cfg.d_prompt, cfg.heads, &mut r);
        let decoder = DecoderParams::new(
            cfg.vocab_size,
            cfg.d_model,
            cfg.heads,
            cfg.decoder_blocks,
            cfg.n_tokens(),
            cfg.max_prompt_len + 2,
            &mut r,
        );
        let n = cfg.n_tokens();
        let mut model = FusionModel {
            rgb_encoder,
            thermal_encoder,
            ln_thermal,
            fusion,
            decoder,
            null_rgb: Tensor::zeros(vec![n, cfg.d_model]),
            null_thermal: Tensor::zeros(vec![n, cfg.d_model]),
        };
        model.refresh_null_grids(cfg)?;
        model.apply_freeze(cfg);
        Ok(model)
    }

    /// Null grids are the encodings of an all-black input, so a missing
    /// stream looks like a dark scene rather than arbitrary noise. They are
    /// captured once here and stay frozen.
    pub fn refresh_null_grids(&mut self, cfg: &TrainConfig) -> Result<()> {
        let black_rgb = ImagePlane::constant(cfg.image_h, cfg.image_w, 3, 0.0);
        let black_th3 =
            replicate_channels(&ImagePlane::constant(cfg.image_h, cfg.image_w, 1, 0.0))?;
        let mut tape = Tape::new();
        let mut b = Binder::new(&mut tape);
        let rgb_vals = self.rgb_encoder.bind(&mut b, "rgb");
        let th_vals = self.thermal_encoder.bind(&mut b, "thermal");
        let ln_t = self.ln_thermal.bind(&mut b, "ln_t");
        let r_tokens = patchify_encode(&mut tape, &black_rgb, &rgb_vals, cfg.patch_size)?;
        let t_enc = patchify_encode(&mut tape, &black_th3, &th_vals, cfg.patch_size)?;
        let t_tokens = layer_norm(&mut tape, t_enc, &ln_t)?;
        self.null_rgb = tape.to_tensor(r_tokens);
        self.null_thermal = tape.to_tensor(t_tokens);
        Ok(())
    }

    /// Freeze everything except the trailing thermal blocks, the thermal
    /// output norm, and the fusion parameters.
    pub fn apply_freeze(&mut self, cfg: &TrainConfig) {
        crate::nn::set_trainable(&mut self.rgb_encoder, "", false);
        let split = FreezeSplit::new(cfg.encoder_blocks, cfg.trainable_blocks)
            .expect("validated config");
        split.apply(&mut self.thermal_encoder);
        self.ln_thermal.gamma.requires_grad = true;
        self.ln_thermal.beta.requires_grad = true;
        crate::nn::set_trainable(&mut self.fusion, "", true);
        crate::nn::set_trainable(&mut self.decoder, "", false);
        self.null_rgb.requires_grad = false;
        self.null_thermal.requires_grad = false;
    }

    pub fn bind(&self, b: &mut Binder) -> BoundModel {
        BoundModel {
            rgb: self.rgb_encoder.bind(b, "rgb"),
            thermal: self.thermal_encoder.bind(b, "thermal"),
            ln_t: self.ln_thermal.bind(b, "ln_t"),
            fusion: self.fusion.bind(b, "fusion"),
            decoder: self.decoder.bind(b, "decoder"),
            null_rgb: b.leaf("aux.null_rgb", &self.null_rgb),
            null_thermal: b.leaf("aux.null_thermal", &self.null_thermal),
        }
    }

    /// Group-T: trainable trailing thermal blocks. Group-F: fusion + LN_T.
    pub fn optimizer(&self, cfg: &TrainConfig) -> AdamW {
        let split = FreezeSplit::new(cfg.encoder_blocks, cfg.trainable_blocks)
            .expect("validated config");
        let mut group_t = Vec::new();
        let mut group_f = Vec::new();
        self.for_each("", &mut |name, _| {
            if let Some(rest) = name.strip_prefix("thermal.blocks.") {
                let idx: usize = rest.split('.').next().unwrap().parse().unwrap();
                if split.is_trainable(idx) {
                    group_t.push(name.to_string());
                }
            } else if name.starts_with("fusion.") || name.starts_with("ln_t.") {
                group_f.push(name.to_string());
            }
        });
        AdamW::new(vec![
            ParamGroup::new(
                "thermal-tail",
                group_t,
                AdamHyper {
                    lr: cfg.lr_thermal,
                    weight_decay: cfg.weight_decay,
                    warmup_steps: cfg.warmup_steps,
                    ..AdamHyper::default()
                },
            ),
            ParamGroup::new(
                "fusion",
                group_f,
                AdamHyper {
                    lr: cfg.lr_fusion,
                    weight_decay: cfg.weight_decay,
                    warmup_steps: cfg.warmup_steps,
                    ..AdamHyper::default()
                },
            ),
        ])
    }

    /// Digest registry over everything that must never move during fusion
    /// training: the RGB tower, the decoder, the leading thermal blocks,
    /// thermal patch/pos/final-norm, and the null grids.
    pub fn freeze_registry(&self, cfg: &TrainConfig) -> FreezeRegistry {
        let split = FreezeSplit::new(cfg.encoder_blocks, cfg.trainable_blocks)
            .expect("validated config");
        FreezeRegistry::capture(self, |name| {
            if name.starts_with("rgb.") || name.starts_with("decoder.") || name.starts_with("aux.")
            {
                return true;
            }
            if let Some(rest) = name.strip_prefix("thermal.blocks.") {
                let idx: usize = rest.split('.').next().unwrap().parse().unwrap();
                return !split.is_trainable(idx);
            }
            name.starts_with("thermal.")
        })
    }

    pub fn ablation(&self, cfg: &TrainConfig) -> AblationFlags {
        AblationFlags {
            no_text_attention: cfg.no_text_attention,
            no_rgb_attention: cfg.no_rgb_attention,
            direct_fusion: cfg.direct_fusion,
            gate_override: None,
        }
    }

    /// Overwrite parameters from a name-keyed map; names must match exactly.
    pub fn load_params(&mut self, params: &HashMap<String, Tensor>) -> Result<()> {
        let mut missing = Vec::new();
        let mut used = 0usize;
        self.for_each_mut("", &mut |name, t| {
            if let Some(stored) = params.get(name) {
                let rg = t.requires_grad;
                *t = stored.clone();
                t.requires_grad = rg;
                t.grad = None;
                used += 1;
            } else {
                missing.push(name.to_string());
            }
        });
        if !missing.is_empty() {
            return Err(Error::contract(format!(
                "checkpoint lacks {} parameters, e.g. {}",
                missing.len(),
                missing[0]
            )));
        }
        if used != params.len() {
            return Err(Error::contract(format!(
                "checkpoint has {} extra parameter records",
                params.len() - used
            )));
        }
        Ok(())
    }
}

// ── Instrumentation ──────────────────────────────────────────────────

/// Counters shared across threads; inference must never touch the mask
/// counter.
#[derive(Debug, Default)]
pub struct RunStats {
    pub mask_applications: AtomicU64,
    pub steps: AtomicU64,
}

impl RunStats {
    pub fn masks(&self) -> u64 {
        self.mask_applications.load(Ordering::Relaxed)
    }
}

// ── Shared forward pieces ────────────────────────────────────────────

fn pad_prompt(ids: &[usize], max_len: usize) -> Result<(Vec<usize>, KeyMask)> {
    if ids.is_empty() {
        return Err(Error::contract("empty prompt"));
    }
    if ids.len() > max_len {
        return Err(Error::contract(format!(
            "prompt of {} tokens exceeds max_prompt_len {max_len}",
            ids.len()
        )));
    }
    let mut padded = ids.to_vec();
    let mut flags = vec![true; ids.len()];
    padded.resize(max_len, PAD);
    flags.resize(max_len, false);
    Ok((padded, KeyMask::new(flags)))
}

/// Encode the thermal plane: replicate channels, run the tower, apply LN_T.
fn encode_thermal(
    tape: &mut Tape,
    bm: &BoundModel,
    cfg: &TrainConfig,
    thermal: &ImagePlane,
) -> Result<Val> {
    let th3 = replicate_channels(thermal)?;
    let enc = patchify_encode(tape, &th3, &bm.thermal, cfg.patch_size)?;
    layer_norm(tape, enc, &bm.ln_t)
}

/// `[fused visual tokens + type embedding; text embeddings]` through the
/// frozen decoder; visual tokens sit at positions `0..N`, text at `N..`.
fn decoder_over(
    tape: &mut Tape,
    bm: &BoundModel,
    fused: Val,
    text_ids: &[usize],
) -> Result<Val> {
    let n = tape.shape(fused)[0];
    let vis = tape.add_row_vec(fused, bm.decoder.type_embed)?;
    let text = tape.gather_rows(bm.decoder.token_embed, text_ids)?;
    let seq = tape.concat_rows(&[vis, text])?;
    let positions: Vec<usize> = (0..n + text_ids.len()).collect();
    decoder_logits(tape, &bm.decoder, seq, &positions)
}

struct SampleForward {
    lm: Val,
    align: Option<Val>,
    gate_entropy: Val,
    pooled: Option<(Val, Val, Val)>,
}

#[allow(clippy::too_many_arguments)]
fn training_sample_forward(
    tape: &mut Tape,
    bm: &BoundModel,
    cfg: &TrainConfig,
    sample: &LoadedSample,
    mask_seed: u64,
    ablation: &AblationFlags,
    stats: &RunStats,
) -> Result<SampleForward> {
    // modality dropout mirrors the evaluation protocol for tagged samples
    let (use_rgb, use_thermal) = if cfg.modality_dropout {
        match sample.item.modality {
            Modality::Rgb => (true, false),
            Modality::Ir => (false, true),
            Modality::RgbIr => (true, true),
        }
    } else {
        (true, true)
    };

    let rgb_tokens = if use_rgb {
        let masked = if cfg.rgb_mask_ratio > 0.0 {
            stats.mask_applications.fetch_add(1, Ordering::Relaxed);
            block_mask_rgb(&sample.rgb, cfg.rgb_mask_ratio, mask_seed)?
        } else {
            sample.rgb.clone()
        };
        patchify_encode(tape, &masked, &bm.rgb, cfg.patch_size)?
    } else {
        bm.null_rgb
    };
    let thermal_tokens = if use_thermal {
        encode_thermal(tape, bm, cfg, &sample.thermal)?
    } else {
        bm.null_thermal
    };

    let (padded, mask) = pad_prompt(&sample.item.question_ids, cfg.max_prompt_len)?;
    let prompt_emb = tape.gather_rows(bm.decoder.token_embed, &padded)?;
    let fused = fuse(
        tape,
        rgb_tokens,
        thermal_tokens,
        prompt_emb,
        &mask,
        &bm.fusion,
        ablation,
    )?;

    // answer cross-entropy at the answer position only
    let answer_token = if sample.item.answer_yes { YES } else { NO };
    let mut text_ids = sample.item.question_ids.clone();
    let prompt_len = text_ids.len();
    text_ids.push(answer_token);
    let logits = decoder_over(tape, bm, fused.fused, &text_ids)?;
    let n = cfg.n_tokens();
    let total_rows = n + text_ids.len();
    let mut targets = vec![0usize; total_rows];
    let mut keep = vec![false; total_rows];
    targets[n + prompt_len - 1] = answer_token;
    keep[n + prompt_len - 1] = true;
    let lm = tape.cross_entropy_rows(logits, &targets, &keep)?;

    // alignment needs both real streams; with dropout the absent stream is a
    // constant and pulling the other toward it would be harmful
    let align = if use_rgb && use_thermal {
        let align_rgb = if cfg.align_uses_clean_rgb {
            patchify_encode(tape, &sample.rgb, &bm.rgb, cfg.patch_size)?
        } else {
            rgb_tokens
        };
        Some(align_loss(tape, align_rgb, thermal_tokens)?)
    } else {
        None
    };

    let gate_entropy = gate_entropy_loss(tape, fused.gates)?;

    let pooled = if use_rgb && use_thermal {
        let p_r = mean_pool(tape, fused.fused)?;
        let p_t = mean_pool(tape, thermal_tokens)?;
        let p_p = masked_mean_pool(tape, prompt_emb, &mask)?;
        Some((p_r, p_t, p_p))
    } else {
        None
    };

    Ok(SampleForward {
        lm,
        align,
        gate_entropy,
        pooled,
    })
}

fn mean_of(tape: &mut Tape, vals: &[Val]) -> Result<Val> {
    debug_assert!(!vals.is_empty());
    let mut acc = vals[0];
    for &v in &vals[1..] {
        acc = tape.add(acc, v)?;
    }
    Ok(tape.scale(acc, 1.0 / vals.len() as f64))
}

// ── Training step ────────────────────────────────────────────────────

/// One optimization step over a batch: mask, encode, fuse, decode, compute
/// the four losses, backpropagate, and update both parameter groups.
pub fn train_step(
    model: &mut FusionModel,
    opt: &mut AdamW,
    batch: &[&LoadedSample],
    cfg: &TrainConfig,
    step: u64,
    stats: &RunStats,
) -> Result<LossValues> {
    if batch.is_empty() {
        return Err(Error::contract("empty training batch"));
    }
    let weights = cfg.loss_weights();
    let ablation = model.ablation(cfg);

    let mut tape = Tape::new();
    let mut binder = Binder::new(&mut tape);
    let bm = model.bind(&mut binder);
    let bound = binder.into_bound();

    let mut lms = Vec::new();
    let mut aligns = Vec::new();
    let mut gates = Vec::new();
    let mut pooled_r = Vec::new();
    let mut pooled_t = Vec::new();
    let mut pooled_p = Vec::new();
    for (i, sample) in batch.iter().enumerate() {
        let mask_seed = derive_seed(cfg.seed, 0xb10c, step * batch.len() as u64 + i as u64);
        let fwd = training_sample_forward(&mut tape, &bm, cfg, sample, mask_seed, &ablation, stats)?;
        lms.push(fwd.lm);
        if let Some(a) = fwd.align {
            aligns.push(a);
        }
        gates.push(fwd.gate_entropy);
        if let Some((r, t, p)) = fwd.pooled {
            pooled_r.push(r);
            pooled_t.push(t);
            pooled_p.push(p);
        }
    }

    let lm = mean_of(&mut tape, &lms)?;
    let align = if aligns.is_empty() {
        tape.scalar(0.0)
    } else {
        mean_of(&mut tape, &aligns)?
    };
    let gate = mean_of(&mut tape, &gates)?;
    let contr = if pooled_r.len() >= 2 {
        let pr = tape.concat_rows(&pooled_r)?;
        let pt = tape.concat_rows(&pooled_t)?;
        let pp = tape.concat_rows(&pooled_p)?;
        contrastive_loss(&mut tape, pr, pt, pp, weights.tau, cfg.infonce_one_direction)?
    } else {
        tape.scalar(0.0)
    };

    let breakdown = total_loss(&mut tape, lm, align, contr, gate, &weights)?;
    let values = breakdown.values(&tape);
    tape.backward(breakdown.total)?;
    let mut grads = harvest_grads(&tape, &bound);
    // a trainable leaf that was bound but received nothing (its consumers
    // were dropped from this batch, e.g. an all-rgb batch under modality
    // dropout) has a genuinely zero gradient this step
    for (name, val) in &bound {
        if tape.needs_grad(*val) && !grads.contains_key(name) {
            grads.insert(name.clone(), vec![0.0; tape.value(*val).len()]);
        }
    }
    drop(tape);
    apply_grads(model, &grads);
    opt.step(model)?;
    stats.steps.fetch_add(1, Ordering::Relaxed);
    Ok(values)
}

// ── Inference ────────────────────────────────────────────────────────

/// Which input streams the model receives at inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModalitySubset {
    Rgb,
    Thermal,
    Both,
}

impl ModalitySubset {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "rgb" => Ok(ModalitySubset::Rgb),
            "thermal" => Ok(ModalitySubset::Thermal),
            "rgb+thermal" => Ok(ModalitySubset::Both),
            other => Err(Error::contract(format!("unknown modality subset '{other}'"))),
        }
    }

    /// The streams a benchmark item's tag designates.
    pub fn for_modality(m: Modality) -> Self {
        match m {
            Modality::Rgb => ModalitySubset::Rgb,
            Modality::Ir => ModalitySubset::Thermal,
            Modality::RgbIr => ModalitySubset::Both,
        }
    }
}

/// Full-vocabulary logits at the answer position; masking never runs here.
pub fn infer_logits(
    model: &FusionModel,
    cfg: &TrainConfig,
    rgb: &ImagePlane,
    thermal: &ImagePlane,
    prompt_ids: &[usize],
    subset: ModalitySubset,
    gate_override: Option<f64>,
) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let mut binder = Binder::new(&mut tape);
    let bm = model.bind(&mut binder);

    let rgb_tokens = match subset {
        ModalitySubset::Rgb | ModalitySubset::Both => {
            patchify_encode(&mut tape, rgb, &bm.rgb, cfg.patch_size)?
        }
        ModalitySubset::Thermal => bm.null_rgb,
    };
    let thermal_tokens = match subset {
        ModalitySubset::Thermal | ModalitySubset::Both => {
            encode_thermal(&mut tape, &bm, cfg, thermal)?
        }
        ModalitySubset::Rgb => bm.null_thermal,
    };

    let (padded, mask) = pad_prompt(prompt_ids, cfg.max_prompt_len)?;
    let prompt_emb = tape.gather_rows(bm.decoder.token_embed, &padded)?;
    let mut ablation = model.ablation(cfg);
    ablation.gate_override = gate_override;
    let fused: FusionOutput = fuse(
        &mut tape,
        rgb_tokens,
        thermal_tokens,
        prompt_emb,
        &mask,
        &bm.fusion,
        &ablation,
    )?;
    let logits = decoder_over(&mut tape, &bm, fused.fused, prompt_ids)?;
    let last = cfg.n_tokens() + prompt_ids.len() - 1;
    let v = model.decoder.vocab();
    Ok(tape.value(logits)[last * v..(last + 1) * v].to_vec())
}

/// Greedy decode restricted to the answer vocabulary.
pub fn infer_answer(
    model: &FusionModel,
    cfg: &TrainConfig,
    rgb: &ImagePlane,
    thermal: &ImagePlane,
    prompt_ids: &[usize],
    subset: ModalitySubset,
    gate_override: Option<f64>,
) -> Result<&'static str> {
    let logits = infer_logits(model, cfg, rgb, thermal, prompt_ids, subset, gate_override)?;
    Ok(if logits[YES] >= logits[NO] { "yes" } else { "no" })
}

/// Evaluate samples in parallel under the per-item modality protocol (or a
/// fixed override); returns predictions keyed by item id.
pub fn evaluate(
    model: &FusionModel,
    cfg: &TrainConfig,
    samples: &[LoadedSample],
    subset_override: Option<ModalitySubset>,
    gate_override: Option<f64>,
) -> Result<HashMap<String, String>> {
    let results: Vec<Result<(String, String)>> = par::map_indexed(samples.len(), |i| {
        let s = &samples[i];
        let subset = subset_override.unwrap_or_else(|| ModalitySubset::for_modality(s.item.modality));
        let answer = infer_answer(
            model,
            cfg,
            &s.rgb,
            &s.thermal,
            &s.item.question_ids,
            subset,
            gate_override,
        )?;
        Ok((s.item.id.clone(), answer.to_string()))
    });
    results.into_iter().collect()
}

// ── Training driver ──────────────────────────────────────────────────

pub struct TrainOutcome {
    pub losses: Vec<LossValues>,
}

/// Epoch loop with seeded shuffling; one JSON object per step when a metrics
/// sink is given.
pub fn train(
    model: &mut FusionModel,
    samples: &[LoadedSample],
    cfg: &TrainConfig,
    stats: &RunStats,
    mut metrics: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    if samples.is_empty() {
        return Err(Error::contract("empty training set"));
    }
    let mut opt = model.optimizer(cfg);
    let mut losses = Vec::new();
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        let mut shuffle_rng = rng::stream(derive_seed(cfg.seed, 0x50f1e, epoch as u64));
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&LoadedSample> = chunk.iter().map(|&i| &samples[i]).collect();
            let values = train_step(model, &mut opt, &batch, cfg, step, stats)?;
            if let Some(w) = metrics.as_deref_mut() {
                writeln!(
                    w,
                    "{{\"step\":{},\"lm\":{},\"align\":{},\"contr\":{},\"gate\":{},\"total\":{}}}",
                    step, values.lm, values.align, values.contr, values.gate, values.total
                )?;
            }
            losses.push(values);
            step += 1;
        }
    }
    Ok(TrainOutcome { losses })
}

// ── Decoder pretraining ──────────────────────────────────────────────

/// Text corpus for the decoder: every question template continued by both
/// answers (teaching the answer format), plus declarative filler sentences
/// with deterministic continuations.
pub fn pretraining_corpus(vocab: &Vocab) -> Vec<Vec<usize>> {
    use crate::datagen::{question_text, QuestionKind};
    let mut sentences: Vec<String> = Vec::new();
    let templates = [
        QuestionKind::WarmPresence,
        QuestionKind::LightPresence,
        QuestionKind::WarmAtLeast(1),
        QuestionKind::WarmAtLeast(2),
        QuestionKind::WarmAtLeast(3),
    ];
    for kind in templates {
        for answer in ["yes", "no"] {
            sentences.push(format!("{} {answer}", question_text(kind)));
        }
    }
    sentences.extend(
        [
            "thermal cameras measure heat",
            "warm people glow at night",
            "cold shadows hide shapes",
            "lamps emit light in the dark",
            "fog drifts over fields",
            "quiet streets sleep deeply",
            "stars cover the sky",
            "rain and clouds cover the sky",
            "sensors detect people in the dark",
            "cameras detect bright shapes",
            "faintly visible objects glow",
        ]
        .into_iter()
        .map(str::to_string),
    );
    sentences.iter().map(|s| vocab.tokenize(s)).collect()
}

/// Next-token CE over a text sequence preceded by the given visual-slot rows
/// (type embedding added, positions `0..n_vis`); only text-to-text
/// predictions count.
fn grounded_lm_loss(
    tape: &mut Tape,
    dv: &DecoderVals,
    visual_rows: &Tensor,
    text: &[usize],
) -> Result<Val> {
    if text.len() < 2 {
        return Err(Error::contract("text sequence needs at least two tokens"));
    }
    let n_vis = visual_rows.shape()[0];
    let vis = tape.leaf(visual_rows);
    let vis = tape.add_row_vec(vis, dv.type_embed)?;
    let emb = tape.gather_rows(dv.token_embed, text)?;
    let seq = tape.concat_rows(&[vis, emb])?;
    let positions: Vec<usize> = (0..n_vis + text.len()).collect();
    let logits = decoder_logits(tape, dv, seq, &positions)?;
    let rows = n_vis + text.len();
    let mut targets = vec![0usize; rows];
    let mut keep = vec![false; rows];
    for i in 0..text.len() - 1 {
        targets[n_vis + i] = text[i + 1];
        keep[n_vis + i] = true;
    }
    tape.cross_entropy_rows(logits, &targets, &keep)
}

/// Train the decoder into a frozen stand-in for a vision-conditioned LM,
/// then freeze it.
///
/// Half of each batch is plain next-token modeling of the text corpus. The
/// other half grounds the visual interface: the visual slots hold seeded
/// noise rows shifted along a fixed hidden direction, the text is a question
/// template, and the answer token is determined by the sign of the shift.
/// After pretraining the answer position genuinely reads the visual slots,
/// which is the property the downstream fusion trains against; no images are
/// involved at any point.
pub fn pretrain_decoder(
    decoder: &mut DecoderParams,
    corpus: &[Vec<usize>],
    steps: usize,
    batch_size: usize,
    lr: f64,
    seed: u64,
) -> Result<()> {
    if corpus.is_empty() {
        return Err(Error::contract("empty pretraining corpus"));
    }
    let vocab = Vocab::toy();
    let d = decoder.dim();
    let n_vis = decoder.text_offset;
    // fixed hidden cue axis; only pretraining data generation knows it
    let cue_axis = {
        let mut r = rng::stream(derive_seed(seed, 0xc0e, 0));
        let v = Tensor::uniform(vec![d], 1.0, &mut r);
        let norm = v.data().iter().map(|x| x * x).sum::<f64>().sqrt();
        Tensor::new(vec![d], v.data().iter().map(|x| x / norm).collect()).unwrap()
    };
    let templates: Vec<Vec<usize>> = {
        use crate::datagen::{question_text, QuestionKind};
        [
            QuestionKind::WarmPresence,
            QuestionKind::LightPresence,
            QuestionKind::WarmAtLeast(1),
            QuestionKind::WarmAtLeast(2),
            QuestionKind::WarmAtLeast(3),
        ]
        .into_iter()
        .map(|k| vocab.tokenize(&question_text(k)))
        .collect()
    };

    crate::nn::set_trainable(decoder, "", true);
    let member_names: Vec<String> = crate::nn::param_names(decoder);
    let mut opt = AdamW::new(vec![ParamGroup::new(
        "decoder",
        member_names,
        AdamHyper {
            lr,
            weight_decay: 0.0,
            ..AdamHyper::default()
        },
    )]);

    enum Item {
        Text(Vec<usize>),
        Grounded { rows: Tensor, text: Vec<usize> },
    }

    for step in 0..steps {
        let mut r = rng::stream(derive_seed(seed, 0x7e37, step as u64));
        let batch: Vec<Item> = (0..batch_size)
            .map(|_| {
                use rand::Rng;
                if r.gen_bool(0.5) {
                    Item::Text(corpus[r.gen_range(0..corpus.len())].clone())
                } else {
                    let positive = r.gen_bool(0.5);
                    let mut rows = Tensor::uniform(vec![n_vis, d], 1.0, &mut r);
                    let shift = if positive { 1.0 } else { -1.0 };
                    for row in 0..n_vis {
                        for j in 0..d {
                            rows.data_mut()[row * d + j] += shift * cue_axis.data()[j];
                        }
                    }
                    let mut text = templates[r.gen_range(0..templates.len())].clone();
                    text.push(if positive { YES } else { NO });
                    Item::Grounded { rows, text }
                }
            })
            .collect();
        let per_sample: Vec<Result<HashMap<String, Vec<f64>>>> =
            par::map_indexed(batch.len(), |i| {
                let mut tape = Tape::new();
                let mut b = Binder::new(&mut tape);
                let dv = decoder.bind(&mut b, "");
                let bound = b.into_bound();
                let loss = match &batch[i] {
                    Item::Text(ids) => crate::decoder::text_lm_loss(&mut tape, &dv, ids, 0)?,
                    Item::Grounded { rows, text } => {
                        grounded_lm_loss(&mut tape, &dv, rows, text)?
                    }
                };
                tape.backward(loss)?;
                Ok(harvest_grads(&tape, &bound))
            });
        let mut summed: HashMap<String, Vec<f64>> = HashMap::new();
        for grads in per_sample {
            for (name, g) in grads? {
                let acc = summed.entry(name).or_insert_with(|| vec![0.0; g.len()]);
                for (a, b) in acc.iter_mut().zip(&g) {
                    *a += b / batch_size as f64;
                }
            }
        }
        // a parameter absent from every sample in a mixed batch (the type
        // embedding in an all-text batch) contributes a zero gradient
        decoder.for_each("", &mut |name, t| {
            summed
                .entry(name.to_string())
                .or_insert_with(|| vec![0.0; t.numel()]);
        });
        apply_grads(decoder, &summed);
        opt.step(decoder)?;
    }
    crate::nn::set_trainable(decoder, "", false);
    Ok(())
}

/// Mean next-token CE of one sentence given at least one token of context.
pub fn sentence_perplexity_probe(decoder: &DecoderParams, ids: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let mut b = Binder::new(&mut tape);
    let dv = decoder.bind(&mut b, "");
    let loss = crate::decoder::text_lm_loss(&mut tape, &dv, ids, 1)?;
    Ok(tape.item(loss))
}

// ── MAE pretraining ──────────────────────────────────────────────────

/// Encoder/decoder pair owned together so one optimizer can walk both.
pub struct MaeTrainer {
    pub encoder: VitEncoderParams,
    pub decoder: MaeDecoderParams,
}

impl ParamSet for MaeTrainer {
    fn for_each(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.encoder.for_each(&join(prefix, "enc"), f);
        self.decoder.for_each(&join(prefix, "dec"), f);
    }
    fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.encoder.for_each_mut(&join(prefix, "enc"), f);
        self.decoder.for_each_mut(&join(prefix, "dec"), f);
    }
}

/// MAE pretraining over single-channel thermal images; returns the per-step
/// batch losses. The whole encoder trains during this phase.
pub fn pretrain_mae(
    trainer: &mut MaeTrainer,
    images: &[ImagePlane],
    steps: usize,
    batch_size: usize,
    lr: f64,
    mask_ratio: f64,
    patch_size: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if images.is_empty() {
        return Err(Error::contract("no images for MAE pretraining"));
    }
    crate::nn::set_trainable(trainer, "", true);
    let n_tokens = trainer.encoder.n_tokens();
    let mut opt = AdamW::new(vec![ParamGroup::new(
        "mae",
        crate::nn::param_names(trainer),
        AdamHyper {
            lr,
            weight_decay: 0.0,
            ..AdamHyper::default()
        },
    )]);

    let replicated: Vec<ImagePlane> = images
        .iter()
        .map(replicate_channels)
        .collect::<Result<_>>()?;

    let mut step_losses = Vec::with_capacity(steps);
    for step in 0..steps {
        let ids: Vec<usize> = (0..batch_size)
            .map(|i| (step * batch_size + i) % replicated.len())
            .collect();
        let per_sample: Vec<Result<(f64, HashMap<String, Vec<f64>>)>> =
            par::map_indexed(ids.len(), |i| {
                let mask_seed = derive_seed(seed, 0x3ae, (step * batch_size + i) as u64);
                let mask = sample_mae_mask(n_tokens, mask_ratio, mask_seed)?;
                let mut tape = Tape::new();
                let mut b = Binder::new(&mut tape);
                let ev = trainer.encoder.bind(&mut b, "enc");
                let dv = trainer.decoder.bind(&mut b, "dec");
                let bound = b.into_bound();
                let fwd = crate::encoder::mae_forward_loss(
                    &mut tape,
                    &replicated[ids[i]],
                    &ev,
                    &dv,
                    &mask,
                    patch_size,
                )?;
                tape.backward(fwd.loss)?;
                Ok((tape.item(fwd.loss), harvest_grads(&tape, &bound)))
            });
        let mut summed: HashMap<String, Vec<f64>> = HashMap::new();
        let mut batch_loss = 0.0;
        for r in per_sample {
            let (loss, grads) = r?;
            batch_loss += loss / batch_size as f64;
            for (name, g) in grads {
                let acc = summed.entry(name).or_insert_with(|| vec![0.0; g.len()]);
                for (a, b) in acc.iter_mut().zip(&g) {
                    *a += b / batch_size as f64;
                }
            }
        }
        apply_grads(trainer, &summed);
        opt.step(trainer)?;
        step_losses.push(batch_loss);
    }
    Ok(step_losses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_scene, DatasetPlan, QaItem};
    use crate::vocab::Vocab;

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            image_h: 28,
            image_w: 28,
            patch_size: 14,
            d_model: 16,
            d_prompt: 16,
            heads: 2,
            encoder_blocks: 2,
            trainable_blocks: 1,
            decoder_blocks: 1,
            mae_decoder_width: 8,
            vocab_size: 64,
            epochs: 1,
            ..TrainConfig::default()
        }
    }

    fn tiny_samples(n_scenes: usize, cfg: &TrainConfig) -> Vec<LoadedSample> {
        let plan = DatasetPlan {
            n_scenes,
            image_h: cfg.image_h,
            image_w: cfg.image_w,
            ..DatasetPlan::default()
        };
        let mut out = Vec::new();
        for i in 0..n_scenes {
            let scene = generate_scene(i, 17, &plan).unwrap();
            for item in &scene.items {
                out.push(LoadedSample {
                    item: item.clone(),
                    rgb: scene.rgb.clone(),
                    thermal: scene.thermal.clone(),
                });
            }
        }
        out
    }

    #[test]
    fn group_membership_covers_exactly_the_trainable_set() {
        let cfg = tiny_config();
        let model = FusionModel::new(&cfg).unwrap();
        let opt = model.optimizer(&cfg);
        let in_groups: std::collections::HashSet<String> = opt
            .groups
            .iter()
            .flat_map(|g| g.members.iter().cloned())
            .collect();
        let mut mismatch = Vec::new();
        model.for_each("", &mut |name, t| {
            if t.requires_grad != in_groups.contains(name) {
                mismatch.push(name.to_string());
            }
        });
        assert!(mismatch.is_empty(), "{mismatch:?}");
        assert!(in_groups.iter().any(|n| n.starts_with("thermal.blocks.1.")));
        assert!(!in_groups.iter().any(|n| n.starts_with("thermal.blocks.0.")));
        assert!(in_groups.contains("ln_t.gamma"));
    }

    #[test]
    fn bound_names_match_model_traversal() {
        let cfg = tiny_config();
        let model = FusionModel::new(&cfg).unwrap();
        let mut tape = Tape::new();
        let mut b = Binder::new(&mut tape);
        model.bind(&mut b);
        let bound: Vec<String> = b.into_bound().into_iter().map(|(n, _)| n).collect();
        let names = crate::nn::param_names(&model);
        assert_eq!(bound, names);
    }

    #[test]
    fn lm_only_configuration_matches_rgb_pathway_loss() {
        // lambda_* = 0 and gates forced to 0: the step loss must equal the
        // cross entropy of the pure RGB pathway
        let mut cfg = tiny_config();
        cfg.lambda_align = 0.0;
        cfg.lambda_contr = 0.0;
        cfg.lambda_gate = 0.0;
        cfg.rgb_mask_ratio = 0.0;
        cfg.modality_dropout = false;
        let model = FusionModel::new(&cfg).unwrap();
        let samples = tiny_samples(4, &cfg);
        let sample = &samples[0];

        // forward via the training path with gate override
        let mut tape = Tape::new();
        let mut binder = Binder::new(&mut tape);
        let bm = model.bind(&mut binder);
        let stats = RunStats::default();
        let ablation = AblationFlags::gate_override(0.0);
        let fwd =
            training_sample_forward(&mut tape, &bm, &cfg, sample, 1, &ablation, &stats).unwrap();
        let lm_fused = tape.item(fwd.lm);

        // independent RGB-only pathway: fused tokens are exactly the RGB
        // tokens when gates are zero
        let mut tape2 = Tape::new();
        let mut binder2 = Binder::new(&mut tape2);
        let bm2 = model.bind(&mut binder2);
        let r_tokens = patchify_encode(&mut tape2, &sample.rgb, &bm2.rgb, cfg.patch_size).unwrap();
        let answer = if sample.item.answer_yes { YES } else { NO };
        let mut text = sample.item.question_ids.clone();
        let plen = text.len();
        text.push(answer);
        let logits = decoder_over(&mut tape2, &bm2, r_tokens, &text).unwrap();
        let rows = cfg.n_tokens() + text.len();
        let mut targets = vec![0usize; rows];
        let mut keep = vec![false; rows];
        targets[cfg.n_tokens() + plen - 1] = answer;
        keep[cfg.n_tokens() + plen - 1] = true;
        let lm_rgb = tape2.cross_entropy_rows(logits, &targets, &keep).unwrap();
        assert_eq!(lm_fused.to_bits(), tape2.item(lm_rgb).to_bits());
    }

    #[test]
    fn frozen_interface_invariant_at_initialization() {
        // zero-initialized residual head: logits identical with and without
        // the thermal stream
        let cfg = tiny_config();
        let model = FusionModel::new(&cfg).unwrap();
        let samples = tiny_samples(2, &cfg);
        for s in &samples {
            let with_thermal = infer_logits(
                &model,
                &cfg,
                &s.rgb,
                &s.thermal,
                &s.item.question_ids,
                ModalitySubset::Both,
                None,
            )
            .unwrap();
            let without = infer_logits(
                &model,
                &cfg,
                &s.rgb,
                &s.thermal,
                &s.item.question_ids,
                ModalitySubset::Rgb,
                None,
            )
            .unwrap();
            for (a, b) in with_thermal.iter().zip(&without) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn inference_never_applies_masking_and_is_deterministic() {
        let cfg = tiny_config();
        let model = FusionModel::new(&cfg).unwrap();
        let samples = tiny_samples(3, &cfg);
        let preds1 = evaluate(&model, &cfg, &samples, None, None).unwrap();
        let preds2 = evaluate(&model, &cfg, &samples, None, None).unwrap();
        assert_eq!(preds1, preds2);
        // the mask counter belongs to training; evaluation takes no stats
        // and infer_logits has no masking call path. Exercise a train step
        // then confirm inference does not move the counter.
        let stats = RunStats::default();
        let mut model2 = model.clone();
        let mut opt = model2.optimizer(&cfg);
        let batch: Vec<&LoadedSample> = samples.iter().take(2).collect();
        train_step(&mut model2, &mut opt, &batch, &cfg, 0, &stats).unwrap();
        let after_training = stats.masks();
        assert!(after_training > 0);
        evaluate(&model2, &cfg, &samples, None, None).unwrap();
        assert_eq!(stats.masks(), after_training);
    }

    #[test]
    fn short_training_reduces_loss_and_keeps_frozen_digests() {
        let mut cfg = tiny_config();
        cfg.epochs = 2;
        cfg.lr_fusion = 2e-3;
        let mut model = FusionModel::new(&cfg).unwrap();
        let registry = model.freeze_registry(&cfg);
        let samples = tiny_samples(24, &cfg);
        let stats = RunStats::default();
        let outcome = train(&mut model, &samples, &cfg, &stats, None).unwrap();
        assert!(outcome.losses.len() >= 10);
        let first: f64 = outcome.losses[..5].iter().map(|l| l.total).sum::<f64>() / 5.0;
        let last_n = outcome.losses.len().min(5);
        let last: f64 = outcome.losses[outcome.losses.len() - last_n..]
            .iter()
            .map(|l| l.total)
            .sum::<f64>()
            / last_n as f64;
        assert!(last < first, "no training progress: {first} -> {last}");
        assert!(registry.verify(&model).is_empty());
    }

    #[test]
    fn trained_parameters_actually_change() {
        let cfg = tiny_config();
        let mut model = FusionModel::new(&cfg).unwrap();
        let before_fusion = model.fusion.mlp_g.l1.weight.clone();
        let before_thermal = model.thermal_encoder.blocks[1].attn.wq.weight.clone();
        let samples = tiny_samples(8, &cfg);
        let stats = RunStats::default();
        train(&mut model, &samples, &cfg, &stats, None).unwrap();
        assert_ne!(model.fusion.mlp_g.l1.weight, before_fusion);
        assert_ne!(model.thermal_encoder.blocks[1].attn.wq.weight, before_thermal);
    }

    #[test]
    fn decoder_pretraining_memorizes_and_freezes() {
        let vocab = Vocab::toy();
        let cfg = tiny_config();
        let mut model = FusionModel::new(&cfg).unwrap();
        let corpus = pretraining_corpus(&vocab);
        pretrain_decoder(&mut model.decoder, &corpus, 200, 8, 3e-3, 5).unwrap();
        assert!(!model.decoder.token_embed.requires_grad);
        let probe = vocab.tokenize("thermal cameras measure heat");
        let ce = sentence_perplexity_probe(&model.decoder, &probe).unwrap();
        // the deliberately tiny test decoder only needs to show learning;
        // the acceptance suite holds the full-size decoder to < 0.1
        assert!(ce < 1.0, "memorization CE {ce}");
        // determinism across runs
        let mut model2 = FusionModel::new(&cfg).unwrap();
        pretrain_decoder(&mut model2.decoder, &corpus, 200, 8, 3e-3, 5).unwrap();
        assert_eq!(model.decoder.token_embed, model2.decoder.token_embed);
    }

    #[test]
    fn modality_dropout_uses_null_grids() {
        // an ir-tagged sample with dropout on must not read the rgb image
        let mut cfg = tiny_config();
        cfg.modality_dropout = true;
        let model = FusionModel::new(&cfg).unwrap();
        let samples = tiny_samples(4, &cfg);
        let ir_sample = samples
            .iter()
            .find(|s| s.item.modality == Modality::Ir)
            .unwrap();
        let stats = RunStats::default();
        let run = |rgb: &ImagePlane| {
            let mut tape = Tape::new();
            let mut binder = Binder::new(&mut tape);
            let bm = model.bind(&mut binder);
            let sample = LoadedSample {
                item: ir_sample.item.clone(),
                rgb: rgb.clone(),
                thermal: ir_sample.thermal.clone(),
            };
            let fwd = training_sample_forward(
                &mut tape,
                &bm,
                &cfg,
                &sample,
                7,
                &AblationFlags::none(),
                &stats,
            )
            .unwrap();
            tape.item(fwd.lm)
        };
        let a = run(&ir_sample.rgb);
        let b = run(&ImagePlane::constant(cfg.image_h, cfg.image_w, 3, 0.9));
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn unknown_subset_tag_is_contract_error() {
        assert!(ModalitySubset::parse("rgb+thermal").is_ok());
        assert!(ModalitySubset::parse("both").is_err());
    }

    #[test]
    fn mae_pretraining_reduces_reconstruction_loss() {
        let cfg = tiny_config();
        let mut r = rng::stream(3);
        let images: Vec<ImagePlane> = (0..8)
            .map(|_| {
                use rand::Rng;
                let px: Vec<f64> = (0..cfg.image_h * cfg.image_w)
                    .map(|_| r.gen_range(0.0..1.0))
                    .collect();
                ImagePlane::new(cfg.image_h, cfg.image_w, 1, px).unwrap()
            })
            .collect();
        let mut trainer = MaeTrainer {
            encoder: VitEncoderParams::new(
                cfg.image_h,
                cfg.image_w,
                cfg.patch_size,
                cfg.d_model,
                cfg.heads,
                cfg.encoder_blocks,
                &mut rng::stream(4),
            )
            .unwrap(),
            decoder: MaeDecoderParams::new(
                cfg.n_tokens(),
                cfg.d_model,
                cfg.mae_decoder_width,
                cfg.heads,
                cfg.mae_decoder_blocks,
                cfg.patch_size,
                &mut rng::stream(5),
            ),
        };
        let losses = pretrain_mae(&mut trainer, &images, 40, 4, 2e-3, 0.5, cfg.patch_size, 9).unwrap();
        assert!(losses.last().unwrap() < &losses[0]);
    }

    #[test]
    fn prompt_longer_than_limit_is_contract_error() {
        let ids = vec![4usize; 20];
        assert!(pad_prompt(&ids, 12).is_err());
        let (padded, mask) = pad_prompt(&[4, 5, 6], 6).unwrap();
        assert_eq!(padded, vec![4, 5, 6, PAD, PAD, PAD]);
        assert_eq!(mask.valid_count(), 3);
    }

    #[test]
    fn loaded_sample_questions_tokenize_cleanly() {
        let cfg = tiny_config();
        let samples = tiny_samples(8, &cfg);
        for s in &samples {
            assert!(!s.item.question_ids.contains(&crate::vocab::UNK), "{}", s.item.question);
        }
        let _: Vec<&QaItem> = samples.iter().map(|s| &s.item).collect();
    }
}
