//! Toy autoregressive decoder that stands in for a pretrained language
//! model: token/position embeddings, a visual-token type embedding, causal
//! pre-norm blocks, and an output projection over the vocabulary.
//!
//! Text always lives at positions `text_offset..`, leaving the first
//! `text_offset` slots for visual tokens, so the answer positions seen during
//! text-only pretraining are the same ones used once fused visual tokens are
//! prepended.

use crate::encoder::VitBlock;
use crate::error::{Error, Result};
use crate::nn::{
    causal_self_attention, layer_norm, linear, mlp, Binder, LayerNormParams, LinVals,
    LinearParams, LnVals, ParamSet,
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

#[derive(Debug, Clone)]
pub struct DecoderParams {
    /// `[V, d]` token embedding table; doubles as the prompt-embedding source
    /// for the fusion block.
    pub token_embed: Tensor,
    /// `[text_offset + max_text_len, d]`.
    pub pos_embed: Tensor,
    /// `[d]` added to every visual token at the decoder boundary.
    pub type_embed: Tensor,
    pub blocks: Vec<VitBlock>,
    pub ln_f: LayerNormParams,
    /// `[V, d]` output projection.
    pub out_proj: LinearParams,
    /// Number of leading positions reserved for visual tokens.
    pub text_offset: usize,
}

impl DecoderParams {
    pub fn new(
        vocab: usize,
        d: usize,
        heads: usize,
        n_blocks: usize,
        text_offset: usize,
        max_text_len: usize,
        rng: &mut Stream,
    ) -> Self {
        DecoderParams {
            token_embed: Tensor::uniform(vec![vocab, d], 0.05, rng),
            pos_embed: Tensor::uniform(vec![text_offset + max_text_len, d], 0.02, rng),
            type_embed: Tensor::uniform(vec![d], 0.02, rng),
            blocks: (0..n_blocks).map(|_| VitBlock::new(d, heads, rng)).collect(),
            ln_f: LayerNormParams::identity(d),
            out_proj: LinearParams::xavier(vocab, d, rng),
            text_offset,
        }
    }

    pub fn dim(&self) -> usize {
        self.token_embed.shape()[1]
    }

    pub fn vocab(&self) -> usize {
        self.token_embed.shape()[0]
    }

    pub fn max_seq(&self) -> usize {
        self.pos_embed.shape()[0]
    }

    pub fn bind(&self, b: &mut Binder, name: &str) -> DecoderVals {
        b.scoped(name, |b| DecoderVals {
            token_embed: b.leaf("token_embed", &self.token_embed),
            pos_embed: b.leaf("pos_embed", &self.pos_embed),
            type_embed: b.leaf("type_embed", &self.type_embed),
            blocks: self
                .blocks
                .iter()
                .enumerate()
                .map(|(i, blk)| blk.bind(b, &format!("blocks.{i}")))
                .collect(),
            ln_f: self.ln_f.bind(b, "ln_f"),
            out_proj: self.out_proj.bind(b, "out_proj"),
            text_offset: self.text_offset,
        })
    }
}

impl ParamSet for DecoderParams {
    fn for_each(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(prefix, "token_embed"), &self.token_embed);
        f(&join(prefix, "pos_embed"), &self.pos_embed);
        f(&join(prefix, "type_embed"), &self.type_embed);
        for (i, blk) in self.blocks.iter().enumerate() {
            blk.for_each(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.ln_f.for_each(&join(prefix, "ln_f"), f);
        self.out_proj.for_each(&join(prefix, "out_proj"), f);
    }

    fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(prefix, "token_embed"), &mut self.token_embed);
        f(&join(prefix, "pos_embed"), &mut self.pos_embed);
        f(&join(prefix, "type_embed"), &mut self.type_embed);
        for (i, blk) in self.blocks.iter_mut().enumerate() {
            blk.for_each_mut(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.ln_f.for_each_mut(&join(prefix, "ln_f"), f);
        self.out_proj.for_each_mut(&join(prefix, "out_proj"), f);
    }
}

pub struct DecoderVals {
    pub token_embed: Val,
    pub pos_embed: Val,
    pub type_embed: Val,
    pub blocks: Vec<crate::encoder::VitBlockVals>,
    pub ln_f: LnVals,
    pub out_proj: LinVals,
    pub text_offset: usize,
}

/// Pre-norm block with causal self-attention.
fn decoder_block(tape: &mut Tape, x: Val, b: &crate::encoder::VitBlockVals) -> Result<Val> {
    let n1 = layer_norm(tape, x, &b.ln1)?;
    let a = causal_self_attention(tape, n1, &b.attn)?;
    let x = tape.add(x, a)?;
    let n2 = layer_norm(tape, x, &b.ln2)?;
    let m = mlp(tape, n2, &b.mlp)?;
    tape.add(x, m)
}

pub fn embed_text(tape: &mut Tape, dec: &DecoderVals, ids: &[usize]) -> Result<Val> {
    tape.gather_rows(dec.token_embed, ids)
}

/// Run the decoder stack over already-embedded inputs sitting at the given
/// absolute positions; returns `[S, V]` logits.
pub fn decoder_logits(
    tape: &mut Tape,
    dec: &DecoderVals,
    inputs: Val,
    positions: &[usize],
) -> Result<Val> {
    let s = tape.shape(inputs)[0];
    if positions.len() != s {
        return Err(Error::contract(format!(
            "{s} input rows but {} positions",
            positions.len()
        )));
    }
    let pos = tape.gather_rows(dec.pos_embed, positions)?;
    let mut x = tape.add(inputs, pos)?;
    for blk in &dec.blocks {
        x = decoder_block(tape, x, blk)?;
    }
    let normed = layer_norm(tape, x, &dec.ln_f)?;
    linear(tape, normed, &dec.out_proj)
}

/// Next-token cross-entropy over a text-only sequence placed at the text
/// offset; used for decoder pretraining and perplexity probes. When
/// `from_position` is set, only predictions at that position or later count.
pub fn text_lm_loss(
    tape: &mut Tape,
    dec: &DecoderVals,
    ids: &[usize],
    from_position: usize,
) -> Result<Val> {
    if ids.len() < 2 {
        return Err(Error::contract("text sequence needs at least two tokens"));
    }
    let embeds = embed_text(tape, dec, ids)?;
    let positions: Vec<usize> = (0..ids.len()).map(|i| dec.text_offset + i).collect();
    let logits = decoder_logits(tape, dec, embeds, &positions)?;
    let mut targets = vec![0usize; ids.len()];
    let mut keep = vec![false; ids.len()];
    for i in 0..ids.len() - 1 {
        targets[i] = ids[i + 1];
        keep[i] = i >= from_position;
    }
    if keep.iter().all(|&k| !k) {
        return Err(Error::contract("no predictable positions in sequence"));
    }
    tape.cross_entropy_rows(logits, &targets, &keep)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn toy_decoder(seed: u64) -> DecoderParams {
        DecoderParams::new(16, 8, 2, 2, 4, 10, &mut rng::stream(seed))
    }

    #[test]
    fn logits_shape_covers_vocab() {
        let dec = toy_decoder(1);
        let mut tape = Tape::new();
        let mut b = Binder::new(&mut tape);
        let dv = dec.bind(&mut b, "decoder");
        let ids = [2usize, 5, 3, 7];
        let emb = embed_text(&mut tape, &dv, &ids).unwrap();
        let logits = decoder_logits(&mut tape, &dv, emb, &[4, 5, 6, 7]).unwrap();
        assert_eq!(tape.shape(logits), &[4, 16]);
    }

    #[test]
    fn causal_masking_blocks_future_influence() {
        let dec = toy_decoder(2);
        let run = |ids: &[usize]| {
            let mut tape = Tape::new();
            let mut b = Binder::new(&mut tape);
            let dv = dec.bind(&mut b, "decoder");
            let emb = embed_text(&mut tape, &dv, ids).unwrap();
            let positions: Vec<usize> = (0..ids.len()).map(|i| 4 + i).collect();
            let logits = decoder_logits(&mut tape, &dv, emb, &positions).unwrap();
            tape.value(logits).to_vec()
        };
        let base = run(&[2, 5, 3, 7]);
        let changed = run(&[2, 5, 3, 9]); // only the last token differs
        let v = 16;
        for row in 0..3 {
            for j in 0..v {
                assert_eq!(
                    base[row * v + j].to_bits(),
                    changed[row * v + j].to_bits(),
                    "row {row} influenced by a future token"
                );
            }
        }
        assert!((0..v).any(|j| base[3 * v + j] != changed[3 * v + j]));
    }

    #[test]
    fn text_lm_loss_prediction_window() {
        let dec = toy_decoder(3);
        let mut tape = Tape::new();
        let mut b = Binder::new(&mut tape);
        let dv = dec.bind(&mut b, "decoder");
        let loss = text_lm_loss(&mut tape, &dv, &[2, 5, 3, 7, 1], 1).unwrap();
        assert!(tape.item(loss).is_finite());
        let mut t2 = Tape::new();
        let mut b2 = Binder::new(&mut t2);
        let dv2 = dec.bind(&mut b2, "decoder");
        assert!(text_lm_loss(&mut t2, &dv2, &[2], 0).is_err());
    }

    #[test]
    fn same_seed_same_decoder() {
        let a = toy_decoder(9);
        let b = toy_decoder(9);
        assert_eq!(a.token_embed, b.token_embed);
        assert_eq!(a.out_proj.weight, b.out_proj.weight);
    }
}
