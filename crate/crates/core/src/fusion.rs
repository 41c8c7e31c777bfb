//! Text-guided dual-attention fusion with token-wise gated residual
//! injection.
//!
//! Thermal tokens attend separately to projected prompt embeddings and to RGB
//! tokens; the merged thermal evidence predicts a residual and per-token
//! gates, and the gated residual is added onto the RGB stream. The RGB input
//! passes through untouched when the residual predictor is zero or gating is
//! forced shut, which keeps the frozen downstream interface stable.

use crate::error::{Error, Result};
use crate::nn::{
    layer_norm, linear, mlp, multi_head_attention, Binder, KeyMask, LayerNormParams,
    LinearParams, LinVals, LnVals, MhaParams, MhaVals, MlpParams, MlpVals, ParamSet,
};
use crate::rng::Stream;
use crate::tape::{Tape, Val};
use crate::tensor::Tensor;

fn join(prefix: &str, leaf: &str) -> String {
    if prefix.is_empty() {
        leaf.to_string()
    } else {
        format!("{prefix}.{leaf}")
    }
}

/// Architecture switches for the ablation variants; everything defaults off.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct AblationFlags {
    /// Zero the prompt-conditioned attention path.
    pub no_text_attention: bool,
    /// Zero the RGB-conditioned attention path.
    pub no_rgb_attention: bool,
    /// Bypass gating: residual added at full strength (gates forced to 1).
    pub direct_fusion: bool,
    /// Test hook: force every gate to the given value.
    pub gate_override: Option<f64>,
}

impl AblationFlags {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn gate_override(value: f64) -> Self {
        AblationFlags {
            gate_override: Some(value),
            ..Self::default()
        }
    }
}

/// All trainable weights of the fusion block.
#[derive(Debug, Clone)]
pub struct FusionParameters {
    /// Text-to-visual projection `[d, d_p]`.
    pub w_p: LinearParams,
    /// Prompt-conditioned thermal attention.
    pub mha_txt: MhaParams,
    /// RGB-conditioned thermal attention.
    pub mha_rgb: MhaParams,
    /// Multisource merger `[3d -> d]`.
    pub mlp_m: MlpParams,
    /// Residual predictor `[d -> d]`; final layer zero-initialized so
    /// training starts with the RGB stream unchanged.
    pub mlp_r: MlpParams,
    /// Gate predictor `[2d -> 1]`.
    pub mlp_g: MlpParams,
    pub ln_r: LayerNormParams,
    pub ln_t: LayerNormParams,
    pub ln_p: LayerNormParams,
    pub ln_merge: LayerNormParams,
    pub ln_res: LayerNormParams,
    pub ln_gate: LayerNormParams,
}

impl FusionParameters {
    pub fn new(d: usize, d_p: usize, heads: usize, rng: &mut Stream) -> Self {
        let hidden = 2 * d;
        FusionParameters {
            w_p: LinearParams::xavier(d, d_p, rng),
            mha_txt: MhaParams::new(d, heads, rng),
            mha_rgb: MhaParams::new(d, heads, rng),
            mlp_m: MlpParams::new(3 * d, hidden, d, rng),
            mlp_r: MlpParams::zero_final(d, hidden, d, rng),
            mlp_g: MlpParams::new(2 * d, hidden, 1, rng),
            ln_r: LayerNormParams::identity(d),
            ln_t: LayerNormParams::identity(d),
            ln_p: LayerNormParams::identity(d),
            ln_merge: LayerNormParams::identity(d),
            ln_res: LayerNormParams::identity(d),
            ln_gate: LayerNormParams::identity(2 * d),
        }
    }

    pub fn dim(&self) -> usize {
        self.ln_r.dim()
    }

    pub fn bind(&self, b: &mut Binder, name: &str) -> FusionVals {
        b.scoped(name, |b| FusionVals {
            w_p: self.w_p.bind(b, "w_p"),
            mha_txt: self.mha_txt.bind(b, "mha_txt"),
            mha_rgb: self.mha_rgb.bind(b, "mha_rgb"),
            mlp_m: self.mlp_m.bind(b, "mlp_m"),
            mlp_r: self.mlp_r.bind(b, "mlp_r"),
            mlp_g: self.mlp_g.bind(b, "mlp_g"),
            ln_r: self.ln_r.bind(b, "ln_r"),
            ln_t: self.ln_t.bind(b, "ln_t"),
            ln_p: self.ln_p.bind(b, "ln_p"),
            ln_merge: self.ln_merge.bind(b, "ln_merge"),
            ln_res: self.ln_res.bind(b, "ln_res"),
            ln_gate: self.ln_gate.bind(b, "ln_gate"),
        })
    }
}

impl ParamSet for FusionParameters {
    fn for_each(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.w_p.for_each(&join(prefix, "w_p"), f);
        self.mha_txt.for_each(&join(prefix, "mha_txt"), f);
        self.mha_rgb.for_each(&join(prefix, "mha_rgb"), f);
        self.mlp_m.for_each(&join(prefix, "mlp_m"), f);
        self.mlp_r.for_each(&join(prefix, "mlp_r"), f);
        self.mlp_g.for_each(&join(prefix, "mlp_g"), f);
        self.ln_r.for_each(&join(prefix, "ln_r"), f);
        self.ln_t.for_each(&join(prefix, "ln_t"), f);
        self.ln_p.for_each(&join(prefix, "ln_p"), f);
        self.ln_merge.for_each(&join(prefix, "ln_merge"), f);
        self.ln_res.for_each(&join(prefix, "ln_res"), f);
        self.ln_gate.for_each(&join(prefix, "ln_gate"), f);
    }

    fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.w_p.for_each_mut(&join(prefix, "w_p"), f);
        self.mha_txt.for_each_mut(&join(prefix, "mha_txt"), f);
        self.mha_rgb.for_each_mut(&join(prefix, "mha_rgb"), f);
        self.mlp_m.for_each_mut(&join(prefix, "mlp_m"), f);
        self.mlp_r.for_each_mut(&join(prefix, "mlp_r"), f);
        self.mlp_g.for_each_mut(&join(prefix, "mlp_g"), f);
        self.ln_r.for_each_mut(&join(prefix, "ln_r"), f);
        self.ln_t.for_each_mut(&join(prefix, "ln_t"), f);
        self.ln_p.for_each_mut(&join(prefix, "ln_p"), f);
        self.ln_merge.for_each_mut(&join(prefix, "ln_merge"), f);
        self.ln_res.for_each_mut(&join(prefix, "ln_res"), f);
        self.ln_gate.for_each_mut(&join(prefix, "ln_gate"), f);
    }
}

pub struct FusionVals {
    pub w_p: LinVals,
    pub mha_txt: MhaVals,
    pub mha_rgb: MhaVals,
    pub mlp_m: MlpVals,
    pub mlp_r: MlpVals,
    pub mlp_g: MlpVals,
    pub ln_r: LnVals,
    pub ln_t: LnVals,
    pub ln_p: LnVals,
    pub ln_merge: LnVals,
    pub ln_res: LnVals,
    pub ln_gate: LnVals,
}

/// Fusion result plus the intermediates the tests inspect.
#[derive(Debug)]
pub struct FusionOutput {
    /// `[N, d]` fused RGB tokens.
    pub fused: Val,
    /// `[N, 1]` token-wise gates, each strictly inside (0, 1) unless
    /// overridden.
    pub gates: Val,
    pub t_txt: Val,
    pub t_rgb: Val,
    pub t_hat: Val,
    pub delta_r: Val,
}

/// Refine thermal tokens with prompt- and RGB-conditioned attention, merge,
/// then inject a token-gated residual into the RGB stream:
///
/// ```text
/// Rb = LN(R); Tb = LN(T); Pb = LN(Wp P)
/// T_txt = MHA(Tb, Pb, Pb; mask)      T_rgb = MHA(Tb, Rb, Rb)
/// That  = LN(T + MLPm([Tb; T_txt; T_rgb]))
/// dR    = MLPr(LN(That))
/// alpha = sigmoid(MLPg(LN([Rb; That])))
/// out   = R + alpha . dR
/// ```
pub fn fuse(
    tape: &mut Tape,
    rgb: Val,
    thermal: Val,
    prompt: Val,
    prompt_mask: &KeyMask,
    p: &FusionVals,
    variant: &AblationFlags,
) -> Result<FusionOutput> {
    if tape.shape(rgb) != tape.shape(thermal) {
        return Err(Error::dim("fuse R/T", tape.shape(rgb), tape.shape(thermal)));
    }
    let n = tape.shape(rgb)[0];
    let d = tape.shape(rgb)[1];
    if prompt_mask.len() != tape.shape(prompt)[0] {
        return Err(Error::contract(format!(
            "prompt mask length {} does not match {} prompt rows",
            prompt_mask.len(),
            tape.shape(prompt)[0]
        )));
    }
    if prompt_mask.valid_count() == 0 {
        return Err(Error::contract("prompt mask admits no valid positions"));
    }

    let r_bar = layer_norm(tape, rgb, &p.ln_r)?;
    let t_bar = layer_norm(tape, thermal, &p.ln_t)?;
    let projected = linear(tape, prompt, &p.w_p)?;
    let p_bar = layer_norm(tape, projected, &p.ln_p)?;

    let t_txt = if variant.no_text_attention {
        tape.constant(vec![n, d], vec![0.0; n * d])
    } else {
        multi_head_attention(tape, t_bar, p_bar, p_bar, &p.mha_txt, Some(prompt_mask))?
    };
    let t_rgb = if variant.no_rgb_attention {
        tape.constant(vec![n, d], vec![0.0; n * d])
    } else {
        multi_head_attention(tape, t_bar, r_bar, r_bar, &p.mha_rgb, None)?
    };

    let merged_in = tape.concat_cols(&[t_bar, t_txt, t_rgb])?;
    let merged = mlp(tape, merged_in, &p.mlp_m)?;
    let summed = tape.add(thermal, merged)?;
    let t_hat = layer_norm(tape, summed, &p.ln_merge)?;

    let res_in = layer_norm(tape, t_hat, &p.ln_res)?;
    let delta_r = mlp(tape, res_in, &p.mlp_r)?;

    let gate_in = tape.concat_cols(&[r_bar, t_hat])?;
    let gate_normed = layer_norm(tape, gate_in, &p.ln_gate)?;
    let gate_logits = mlp(tape, gate_normed, &p.mlp_g)?;
    let gates = match (variant.gate_override, variant.direct_fusion) {
        (Some(v), _) => tape.constant(vec![n, 1], vec![v; n]),
        (None, true) => tape.constant(vec![n, 1], vec![1.0; n]),
        (None, false) => tape.sigmoid(gate_logits),
    };

    let gated = tape.scale_rows(delta_r, gates)?;
    let fused = tape.add(rgb, gated)?;

    Ok(FusionOutput {
        fused,
        gates,
        t_txt,
        t_rgb,
        t_hat,
        delta_r,
    })
}
