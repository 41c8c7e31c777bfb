//! Training objective: answer cross-entropy, token-level RGB-thermal
//! alignment, symmetrized InfoNCE over pooled embeddings, gate-entropy
//! regularization, and their weighted combination.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::tape::{Tape, Val};

/// Combination weights and the contrastive temperature.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_align: f64,
    pub lambda_contr: f64,
    pub lambda_gate: f64,
    pub tau: f64,
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.tau <= 0.0 {
            return Err(Error::contract(format!("temperature {} must be > 0", self.tau)));
        }
        if self.lambda_align < 0.0 || self.lambda_contr < 0.0 || self.lambda_gate < 0.0 {
            return Err(Error::contract("loss weights must be non-negative"));
        }
        Ok(())
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_align: 0.1,
            lambda_contr: 0.1,
            lambda_gate: 0.01,
            tau: 0.07,
        }
    }
}

/// Per-term scalars, kept on the tape for backward and mirrored as f64 for
/// logging.
pub struct LossBreakdown {
    pub lm: Val,
    pub align: Val,
    pub contr: Val,
    pub gate: Val,
    pub total: Val,
}

impl LossBreakdown {
    pub fn values(&self, tape: &Tape) -> LossValues {
        LossValues {
            lm: tape.item(self.lm),
            align: tape.item(self.align),
            contr: tape.item(self.contr),
            gate: tape.item(self.gate),
            total: tape.item(self.total),
        }
    }
}

/// Logged per step as one JSON object per line.
#[derive(Debug, Clone, Copy, Serialize, PartialEq)]
pub struct LossValues {
    pub lm: f64,
    pub align: f64,
    pub contr: f64,
    pub gate: f64,
    pub total: f64,
}

/// Mean token-level negative log-likelihood over unignored positions.
pub fn lm_loss(tape: &mut Tape, logits: Val, targets: &[usize], keep: &[bool]) -> Result<Val> {
    tape.cross_entropy_rows(logits, targets, keep)
}

/// Mean over tokens of the squared Euclidean distance between the two grids.
pub fn align_loss(tape: &mut Tape, rgb: Val, thermal: Val) -> Result<Val> {
    if tape.shape(rgb) != tape.shape(thermal) {
        return Err(Error::dim("align_loss", tape.shape(rgb), tape.shape(thermal)));
    }
    let n = tape.shape(rgb)[0];
    let diff = tape.sub(rgb, thermal)?;
    let sq = tape.mul(diff, diff)?;
    let total = tape.sum_all(sq);
    Ok(tape.scale(total, 1.0 / n as f64))
}

/// InfoNCE over L2-normalized rows with in-batch negatives: similarity
/// matrix `S = A_hat B_hat^T / tau`, cross-entropy toward the diagonal.
/// Symmetrized (row- and column-wise averaged) unless `one_direction`.
pub fn info_nce(
    tape: &mut Tape,
    a: Val,
    b: Val,
    tau: f64,
    one_direction: bool,
) -> Result<Val> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::dim("info_nce", tape.shape(a), tape.shape(b)));
    }
    if tau <= 0.0 {
        return Err(Error::contract(format!("temperature {tau} must be > 0")));
    }
    let batch = tape.shape(a)[0];
    if batch == 0 {
        return Err(Error::contract("info_nce over an empty batch"));
    }
    let a_hat = tape.l2_normalize_rows(a)?;
    let b_hat = tape.l2_normalize_rows(b)?;
    let b_t = tape.transpose(b_hat)?;
    let sim = tape.matmul(a_hat, b_t)?;
    let logits = tape.scale(sim, 1.0 / tau);
    let diagonal: Vec<usize> = (0..batch).collect();
    let keep = vec![true; batch];
    let row_ce = tape.cross_entropy_rows(logits, &diagonal, &keep)?;
    if one_direction {
        return Ok(row_ce);
    }
    let logits_t = tape.transpose(logits)?;
    let col_ce = tape.cross_entropy_rows(logits_t, &diagonal, &keep)?;
    let sum = tape.add(row_ce, col_ce)?;
    Ok(tape.scale(sum, 0.5))
}

/// `0.5 * [NCE(p_R, p_T) + NCE(p_R, p_P)]` over pooled per-sample embeddings.
pub fn contrastive_loss(
    tape: &mut Tape,
    pooled_rgb: Val,
    pooled_thermal: Val,
    pooled_prompt: Val,
    tau: f64,
    one_direction: bool,
) -> Result<Val> {
    let rt = info_nce(tape, pooled_rgb, pooled_thermal, tau, one_direction)?;
    let rp = info_nce(tape, pooled_rgb, pooled_prompt, tau, one_direction)?;
    let sum = tape.add(rt, rp)?;
    Ok(tape.scale(sum, 0.5))
}

/// Negative mean binary entropy of the gates: minimizing this maximizes
/// entropy and keeps gates away from saturation. Arguments are clamped to
/// `[1e-12, 1 - 1e-12]` before the logs.
pub fn gate_entropy_loss(tape: &mut Tape, gates: Val) -> Result<Val> {
    let shape = tape.shape(gates).to_vec();
    let n: usize = shape.iter().product();
    if n == 0 {
        return Err(Error::contract("gate entropy over zero gates"));
    }
    let a = tape.clamp(gates, 1e-12, 1.0 - 1e-12);
    let ones = tape.constant(shape.clone(), vec![1.0; n]);
    let one_minus = tape.sub(ones, a)?;
    let log_a = tape.log(a)?;
    let log_om = tape.log(one_minus)?;
    let t1 = tape.mul(a, log_a)?;
    let t2 = tape.mul(one_minus, log_om)?;
    let s = tape.add(t1, t2)?;
    // mean over gates of (a ln a + (1-a) ln(1-a)) == -(1/N) sum H
    Ok(tape.mean_all(s))
}

/// Weighted combination, with the parts preserved for logging.
pub fn total_loss(
    tape: &mut Tape,
    lm: Val,
    align: Val,
    contr: Val,
    gate: Val,
    w: &LossWeights,
) -> Result<LossBreakdown> {
    w.validate()?;
    let a = tape.scale(align, w.lambda_align);
    let c = tape.scale(contr, w.lambda_contr);
    let g = tape.scale(gate, w.lambda_gate);
    let s1 = tape.add(lm, a)?;
    let s2 = tape.add(s1, c)?;
    let total = tape.add(s2, g)?;
    Ok(LossBreakdown {
        lm,
        align,
        contr,
        gate,
        total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::tensor::Tensor;
    use rand::seq::SliceRandom;

    const LOG_2: f64 = std::f64::consts::LN_2;

    #[test]
    fn lm_loss_near_zero_for_confident_logits() {
        let mut tape = Tape::new();
        let mut data = vec![0.0; 3 * 5];
        let targets = [2usize, 0, 4];
        for (row, &t) in targets.iter().enumerate() {
            data[row * 5 + t] = 20.0;
        }
        let logits = tape.constant(vec![3, 5], data);
        let loss = lm_loss(&mut tape, logits, &targets, &[true; 3]).unwrap();
        assert!(tape.item(loss) < 1e-8);
    }

    #[test]
    fn lm_loss_uniform_logits_is_log_v() {
        let mut tape = Tape::new();
        let logits = tape.constant(vec![2, 4], vec![0.7; 8]);
        let loss = lm_loss(&mut tape, logits, &[1, 3], &[true, true]).unwrap();
        assert!((tape.item(loss) - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn lm_loss_matches_per_position_softmax_oracle() {
        let mut r = rng::stream(40);
        let logits_t = Tensor::uniform(vec![3, 5], 2.0, &mut r);
        let targets = [4usize, 1, 3];
        let keep = [true, false, true];
        let mut tape = Tape::new();
        let lv = tape.leaf(&logits_t);
        let loss = lm_loss(&mut tape, lv, &targets, &keep).unwrap();

        let mut total = 0.0;
        let mut count = 0;
        for row in 0..3 {
            if !keep[row] {
                continue;
            }
            let vals = &logits_t.data()[row * 5..(row + 1) * 5];
            let denom: f64 = vals.iter().map(|v| v.exp()).sum();
            let p = vals[targets[row]].exp() / denom;
            total += -p.ln();
            count += 1;
        }
        assert!((tape.item(loss) - total / count as f64).abs() < 1e-12);
    }

    #[test]
    fn lm_loss_empty_keep_is_contract_error() {
        let mut tape = Tape::new();
        let logits = tape.constant(vec![2, 3], vec![0.0; 6]);
        assert!(lm_loss(&mut tape, logits, &[0, 1], &[false, false]).is_err());
    }

    #[test]
    fn lm_loss_is_nonnegative() {
        let mut r = rng::stream(41);
        for _ in 0..10 {
            let logits_t = Tensor::uniform(vec![4, 6], 5.0, &mut r);
            let mut tape = Tape::new();
            let lv = tape.leaf(&logits_t);
            let loss = lm_loss(&mut tape, lv, &[0, 1, 2, 3], &[true; 4]).unwrap();
            assert!(tape.item(loss) >= 0.0);
        }
    }

    #[test]
    fn align_loss_zero_for_identical_grids() {
        let mut r = rng::stream(42);
        let x = Tensor::uniform(vec![4, 6], 2.0, &mut r);
        let mut tape = Tape::new();
        let a = tape.leaf(&x);
        let b = tape.leaf(&x);
        let loss = align_loss(&mut tape, a, b).unwrap();
        assert_eq!(tape.item(loss), 0.0);
    }

    #[test]
    fn align_loss_unit_offset_equals_d() {
        for (n, d) in [(3usize, 5usize), (7, 2), (1, 9)] {
            let mut tape = Tape::new();
            let a = tape.constant(vec![n, d], vec![1.5; n * d]);
            let b = tape.constant(vec![n, d], vec![0.5; n * d]);
            let loss = align_loss(&mut tape, a, b).unwrap();
            assert!((tape.item(loss) - d as f64).abs() < 1e-9);
        }
    }

    #[test]
    fn align_loss_matches_loop_oracle() {
        let mut r = rng::stream(43);
        let a = Tensor::uniform(vec![5, 4], 2.0, &mut r);
        let b = Tensor::uniform(vec![5, 4], 2.0, &mut r);
        let mut tape = Tape::new();
        let av = tape.leaf(&a);
        let bv = tape.leaf(&b);
        let loss = align_loss(&mut tape, av, bv).unwrap();
        let mut total = 0.0;
        for i in 0..5 {
            for j in 0..4 {
                let d = a.data()[i * 4 + j] - b.data()[i * 4 + j];
                total += d * d;
            }
        }
        assert!((tape.item(loss) - total / 5.0).abs() < 1e-12);
    }

    #[test]
    fn align_loss_nonnegative_and_shape_checked() {
        let mut tape = Tape::new();
        let a = tape.constant(vec![2, 2], vec![0.0; 4]);
        let b = tape.constant(vec![2, 3], vec![0.0; 6]);
        assert!(align_loss(&mut tape, a, b).is_err());
    }

    #[test]
    fn info_nce_single_pair_is_zero() {
        let mut tape = Tape::new();
        let a = tape.constant(vec![1, 4], vec![0.3, 0.4, 0.5, 0.6]);
        let b = tape.constant(vec![1, 4], vec![0.6, 0.5, 0.4, 0.3]);
        let loss = info_nce(&mut tape, a, b, 0.07, false).unwrap();
        assert!(tape.item(loss).abs() < 1e-12);
    }

    #[test]
    fn info_nce_identical_embeddings_is_log_2() {
        let mut tape = Tape::new();
        let u = vec![0.1, 0.2, 0.3];
        let mut data = u.clone();
        data.extend_from_slice(&u);
        let a = tape.constant(vec![2, 3], data.clone());
        let b = tape.constant(vec![2, 3], data);
        let loss = info_nce(&mut tape, a, b, 0.07, false).unwrap();
        assert!((tape.item(loss) - LOG_2).abs() < 1e-9);
    }

    #[test]
    fn info_nce_orthonormal_pairs_matches_closed_form() {
        // matched pairs on orthogonal axes, tau = 1:
        // per row loss = -ln(e / (e + 1))
        let mut tape = Tape::new();
        let a = tape.constant(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let b = tape.constant(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let loss = info_nce(&mut tape, a, b, 1.0, false).unwrap();
        let expected = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        assert!((tape.item(loss) - expected).abs() < 1e-12);
    }

    #[test]
    fn info_nce_zero_norm_row_is_contract_error() {
        let mut tape = Tape::new();
        let a = tape.constant(vec![2, 2], vec![0.0, 0.0, 1.0, 0.0]);
        let b = tape.constant(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        assert!(info_nce(&mut tape, a, b, 0.5, false).is_err());
    }

    #[test]
    fn info_nce_is_permutation_equivariant() {
        let mut r = rng::stream(44);
        let a = Tensor::uniform(vec![5, 6], 1.0, &mut r);
        let b = Tensor::uniform(vec![5, 6], 1.0, &mut r);
        let base = {
            let mut tape = Tape::new();
            let av = tape.leaf(&a);
            let bv = tape.leaf(&b);
            let l = info_nce(&mut tape, av, bv, 0.2, false).unwrap();
            tape.item(l)
        };
        let mut order: Vec<usize> = (0..5).collect();
        order.shuffle(&mut r);
        let permute = |t: &Tensor| {
            let mut data = Vec::new();
            for &i in &order {
                data.extend_from_slice(&t.data()[i * 6..(i + 1) * 6]);
            }
            Tensor::new(vec![5, 6], data).unwrap()
        };
        let (ap, bp) = (permute(&a), permute(&b));
        let permuted = {
            let mut tape = Tape::new();
            let av = tape.leaf(&ap);
            let bv = tape.leaf(&bp);
            let l = info_nce(&mut tape, av, bv, 0.2, false).unwrap();
            tape.item(l)
        };
        assert!((base - permuted).abs() < 1e-12);
    }

    #[test]
    fn info_nce_decreases_as_matched_similarity_grows() {
        // one-parameter family: rotate the first row of B toward A's first row
        let eval = |t: f64| {
            let mut tape = Tape::new();
            let a = tape.constant(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
            let b = tape.constant(vec![2, 2], vec![t.cos(), t.sin(), 0.0, 1.0]);
            let l = info_nce(&mut tape, a, b, 0.5, false).unwrap();
            tape.item(l)
        };
        let far = eval(1.2);
        let mid = eval(0.6);
        let near = eval(0.1);
        assert!(near < mid && mid < far, "{near} {mid} {far}");
    }

    #[test]
    fn contrastive_loss_is_average_of_two_nce_terms() {
        let mut r = rng::stream(45);
        let pr = Tensor::uniform(vec![3, 4], 1.0, &mut r);
        let pt = Tensor::uniform(vec![3, 4], 1.0, &mut r);
        let pp = Tensor::uniform(vec![3, 4], 1.0, &mut r);
        let mut tape = Tape::new();
        let prv = tape.leaf(&pr);
        let ptv = tape.leaf(&pt);
        let ppv = tape.leaf(&pp);
        let combined = contrastive_loss(&mut tape, prv, ptv, ppv, 0.1, false).unwrap();
        let t1 = info_nce(&mut tape, prv, ptv, 0.1, false).unwrap();
        let t2 = info_nce(&mut tape, prv, ppv, 0.1, false).unwrap();
        let expect = 0.5 * (tape.item(t1) + tape.item(t2));
        assert!((tape.item(combined) - expect).abs() < 1e-12);
    }

    #[test]
    fn contrastive_loss_collapses_when_thermal_equals_prompt_pool() {
        let mut r = rng::stream(46);
        let pr = Tensor::uniform(vec![3, 4], 1.0, &mut r);
        let pt = Tensor::uniform(vec![3, 4], 1.0, &mut r);
        let mut tape = Tape::new();
        let prv = tape.leaf(&pr);
        let ptv = tape.leaf(&pt);
        let combined = contrastive_loss(&mut tape, prv, ptv, ptv, 0.1, false).unwrap();
        let single = info_nce(&mut tape, prv, ptv, 0.1, false).unwrap();
        assert!((tape.item(combined) - tape.item(single)).abs() < 1e-12);
    }

    #[test]
    fn contrastive_loss_zero_for_singleton_batch() {
        let mut tape = Tape::new();
        let pr = tape.constant(vec![1, 3], vec![0.5, 0.1, 0.2]);
        let pt = tape.constant(vec![1, 3], vec![0.3, 0.3, 0.1]);
        let pp = tape.constant(vec![1, 3], vec![0.2, 0.8, 0.5]);
        let l = contrastive_loss(&mut tape, pr, pt, pp, 0.07, false).unwrap();
        assert!(tape.item(l).abs() < 1e-12);
    }

    #[test]
    fn gate_entropy_at_half_is_minus_log_2() {
        let mut tape = Tape::new();
        let gates = tape.constant(vec![8, 1], vec![0.5; 8]);
        let loss = gate_entropy_loss(&mut tape, gates).unwrap();
        assert!((tape.item(loss) + LOG_2).abs() < 1e-9);
    }

    #[test]
    fn gate_entropy_saturation_limit_approaches_zero_from_below() {
        let mut tape = Tape::new();
        let gates = tape.constant(vec![4, 1], vec![1.0 - 1e-12; 4]);
        let loss = gate_entropy_loss(&mut tape, gates).unwrap();
        let v = tape.item(loss);
        assert!(v < 0.0 && v > -1e-9, "{v}");
    }

    #[test]
    fn gate_entropy_mixed_matches_formula() {
        let mut tape = Tape::new();
        let gates = tape.constant(vec![2, 1], vec![0.5, 0.9]);
        let loss = gate_entropy_loss(&mut tape, gates).unwrap();
        let h = |a: f64| -a * a.ln() - (1.0 - a) * (1.0 - a).ln();
        let expected = -0.5 * (h(0.5) + h(0.9));
        assert!((tape.item(loss) - expected).abs() < 1e-12);
    }

    #[test]
    fn gate_entropy_bounded_with_minimum_at_half() {
        let mut r = rng::stream(47);
        for _ in 0..20 {
            use rand::Rng;
            let gates_t = Tensor::new(
                vec![6, 1],
                (0..6).map(|_| r.gen_range(0.001..0.999)).collect(),
            )
            .unwrap();
            let mut tape = Tape::new();
            let g = tape.leaf(&gates_t);
            let loss = gate_entropy_loss(&mut tape, g).unwrap();
            let v = tape.item(loss);
            assert!((-LOG_2..0.0).contains(&v), "{v}");
        }
        // equality at the bound iff every gate is 0.5
        let mut tape = Tape::new();
        let g = tape.constant(vec![3, 1], vec![0.5; 3]);
        let loss = gate_entropy_loss(&mut tape, g).unwrap();
        assert!((tape.item(loss) + LOG_2).abs() < 1e-12);
    }

    #[test]
    fn total_loss_weighted_sum_and_breakdown() {
        let w = LossWeights {
            lambda_align: 0.1,
            lambda_contr: 0.1,
            lambda_gate: 0.01,
            tau: 0.07,
        };
        let mut tape = Tape::new();
        let lm = tape.scalar(1.0);
        let align = tape.scalar(2.0);
        let contr = tape.scalar(3.0);
        let gate = tape.scalar(-0.5);
        let breakdown = total_loss(&mut tape, lm, align, contr, gate, &w).unwrap();
        let v = breakdown.values(&tape);
        assert!((v.total - 1.495).abs() < 1e-12);
        // breakdown invariant
        let recomputed = v.lm + w.lambda_align * v.align + w.lambda_contr * v.contr
            + w.lambda_gate * v.gate;
        assert!((v.total - recomputed).abs() < 1e-12);
    }

    #[test]
    fn total_loss_zero_weights_equals_lm() {
        let w = LossWeights {
            lambda_align: 0.0,
            lambda_contr: 0.0,
            lambda_gate: 0.0,
            tau: 1.0,
        };
        let mut tape = Tape::new();
        let lm = tape.scalar(0.875);
        let align = tape.scalar(13.0);
        let contr = tape.scalar(-4.0);
        let gate = tape.scalar(-0.6);
        let breakdown = total_loss(&mut tape, lm, align, contr, gate, &w).unwrap();
        assert_eq!(tape.item(breakdown.total).to_bits(), 0.875f64.to_bits());
    }

    #[test]
    fn total_loss_all_zero_parts_is_zero() {
        let w = LossWeights::default();
        let mut tape = Tape::new();
        let z1 = tape.scalar(0.0);
        let z2 = tape.scalar(0.0);
        let z3 = tape.scalar(0.0);
        let z4 = tape.scalar(0.0);
        let breakdown = total_loss(&mut tape, z1, z2, z3, z4, &w).unwrap();
        assert_eq!(tape.item(breakdown.total), 0.0);
    }

    #[test]
    fn losses_pass_finite_difference_checks() {
        let mut r = rng::stream(48);
        let h = 1e-5;

        // info_nce gradient
        let a = Tensor::uniform(vec![3, 4], 1.0, &mut r).with_grad();
        let b = Tensor::uniform(vec![3, 4], 1.0, &mut r);
        let eval = |a: &Tensor| {
            let mut tape = Tape::new();
            let av = tape.leaf(a);
            let bv = tape.leaf(&b);
            let l = info_nce(&mut tape, av, bv, 0.3, false).unwrap();
            (tape.item(l), {
                tape.backward(l).unwrap();
                tape.grad(av).map(|g| g.to_vec())
            })
        };
        let (_, grads) = eval(&a);
        let grads = grads.unwrap();
        for idx in 0..a.numel() {
            let mut ap = a.clone();
            ap.data_mut()[idx] += h;
            let (lp, _) = eval(&ap);
            ap.data_mut()[idx] -= 2.0 * h;
            let (lm, _) = eval(&ap);
            let fd = (lp - lm) / (2.0 * h);
            let tol = 1e-8 + 1e-4 * fd.abs().max(grads[idx].abs());
            assert!((fd - grads[idx]).abs() <= tol, "info_nce[{idx}]");
        }

        // gate entropy gradient
        let g0 = Tensor::new(vec![4, 1], vec![0.3, 0.5, 0.7, 0.9]).unwrap().with_grad();
        let eval_g = |g: &Tensor| {
            let mut tape = Tape::new();
            let gv = tape.leaf(g);
            let l = gate_entropy_loss(&mut tape, gv).unwrap();
            tape.backward(l).unwrap();
            (tape.item(l), tape.grad(gv).map(|x| x.to_vec()))
        };
        let (_, gg) = eval_g(&g0);
        let gg = gg.unwrap();
        for idx in 0..4 {
            let mut gp = g0.clone();
            gp.data_mut()[idx] += h;
            let (lp, _) = eval_g(&gp);
            gp.data_mut()[idx] -= 2.0 * h;
            let (lm, _) = eval_g(&gp);
            let fd = (lp - lm) / (2.0 * h);
            let tol = 1e-8 + 1e-4 * fd.abs().max(gg[idx].abs());
            assert!((fd - gg[idx]).abs() <= tol, "gate_entropy[{idx}]");
        }
    }
}
