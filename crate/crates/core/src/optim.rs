//! Decoupled-weight-decay Adam over named parameter groups, plus digest-based
//! freeze enforcement.
//!
//! Training uses two groups: the trailing thermal encoder blocks at one
//! learning rate, and the fusion parameters plus the thermal output norm at
//! another. Parameters outside every group are never touched.

use std::collections::{BTreeMap, HashMap};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Linear warmup over this many steps; 0 disables it.
    pub warmup_steps: u64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            lr: 1e-3,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_steps: 0,
        }
    }
}

/// One optimizer group: member parameter names, hyperparameters, and Adam
/// moment state. The step counter is shared by all members of the group.
#[derive(Debug, Clone)]
pub struct ParamGroup {
    pub name: String,
    pub members: Vec<String>,
    pub hyper: AdamHyper,
    step: u64,
    m: HashMap<String, Vec<f64>>,
    v: HashMap<String, Vec<f64>>,
}

impl ParamGroup {
    pub fn new(name: impl Into<String>, members: Vec<String>, hyper: AdamHyper) -> Self {
        ParamGroup {
            name: name.into(),
            members,
            hyper,
            step: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub(crate) fn state(&self) -> (u64, &HashMap<String, Vec<f64>>, &HashMap<String, Vec<f64>>) {
        (self.step, &self.m, &self.v)
    }

    pub(crate) fn restore_state(
        &mut self,
        step: u64,
        m: HashMap<String, Vec<f64>>,
        v: HashMap<String, Vec<f64>>,
    ) {
        self.step = step;
        self.m = m;
        self.v = v;
    }
}

pub struct AdamW {
    pub groups: Vec<ParamGroup>,
}

impl AdamW {
    pub fn new(groups: Vec<ParamGroup>) -> Self {
        AdamW { groups }
    }

    /// One decoupled AdamW update across all groups: bias-corrected moments,
    /// weight decay applied directly to the parameter value, and gradients
    /// cleared afterwards. A group member without a gradient is a contract
    /// error.
    pub fn step(&mut self, model: &mut impl ParamSet) -> Result<()> {
        // harvest gradients for all members up front
        let mut grads: HashMap<String, Vec<f64>> = HashMap::new();
        model.for_each("", &mut |name, t| {
            if let Some(g) = &t.grad {
                grads.insert(name.to_string(), g.clone());
            }
        });

        let mut deltas: HashMap<String, Vec<f64>> = HashMap::new();
        for group in &mut self.groups {
            group.step += 1;
            let t = group.step;
            let h = group.hyper;
            let lr = if h.warmup_steps > 0 {
                h.lr * (t as f64 / h.warmup_steps as f64).min(1.0)
            } else {
                h.lr
            };
            let bc1 = 1.0 - h.beta1.powi(t as i32);
            let bc2 = 1.0 - h.beta2.powi(t as i32);
            for name in &group.members {
                let Some(grad) = grads.get(name) else {
                    return Err(Error::contract(format!(
                        "group '{}' member '{}' has no gradient at step {}",
                        group.name, name, t
                    )));
                };
                let m = group
                    .m
                    .entry(name.clone())
                    .or_insert_with(|| vec![0.0; grad.len()]);
                let v = group
                    .v
                    .entry(name.clone())
                    .or_insert_with(|| vec![0.0; grad.len()]);
                let mut delta = vec![0.0; grad.len()];
                for i in 0..grad.len() {
                    m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * grad[i];
                    v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * grad[i] * grad[i];
                    let m_hat = m[i] / bc1;
                    let v_hat = v[i] / bc2;
                    delta[i] = -lr * m_hat / (v_hat.sqrt() + h.eps);
                }
                deltas.insert(name.clone(), delta);
            }
        }

        // apply: decay from the pre-step value, then the gradient step
        let decay_of: HashMap<String, f64> = self
            .groups
            .iter()
            .flat_map(|g| {
                let t = g.step;
                let h = g.hyper;
                let lr = if h.warmup_steps > 0 {
                    h.lr * (t as f64 / h.warmup_steps as f64).min(1.0)
                } else {
                    h.lr
                };
                g.members
                    .iter()
                    .map(move |n| (n.clone(), lr * h.weight_decay))
            })
            .collect();
        model.for_each_mut("", &mut |name, tensor| {
            if let Some(delta) = deltas.get(name) {
                let decay = decay_of[name];
                let data = tensor.data_mut();
                for i in 0..data.len() {
                    data[i] = data[i] - decay * data[i] + delta[i];
                }
                tensor.grad = None;
            }
        });
        Ok(())
    }
}

// ── Freeze registry ──────────────────────────────────────────────────

/// sha-256 over the shape and little-endian payload of a tensor.
pub fn digest_tensor(t: &Tensor) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update((t.shape().len() as u64).to_le_bytes());
    for &e in t.shape() {
        hasher.update((e as u64).to_le_bytes());
    }
    for &v in t.data() {
        hasher.update(v.to_le_bytes());
    }
    hasher.finalize().into()
}

/// Content digests of every parameter that must never change; recomputed on
/// demand to detect drift.
#[derive(Debug, Clone, Default)]
pub struct FreezeRegistry {
    digests: BTreeMap<String, [u8; 32]>,
}

impl FreezeRegistry {
    /// Capture digests of every parameter whose name passes the filter.
    pub fn capture(model: &impl ParamSet, filter: impl Fn(&str) -> bool) -> Self {
        let mut digests = BTreeMap::new();
        model.for_each("", &mut |name, t| {
            if filter(name) {
                digests.insert(name.to_string(), digest_tensor(t));
            }
        });
        FreezeRegistry { digests }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.digests.keys().map(|s| s.as_str())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.digests.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.digests.len()
    }

    pub fn is_empty(&self) -> bool {
        self.digests.is_empty()
    }

    /// Recompute digests; returns the names that drifted (empty means the
    /// freeze contract held).
    pub fn verify(&self, model: &impl ParamSet) -> Vec<String> {
        let mut drifted = Vec::new();
        model.for_each("", &mut |name, t| {
            if let Some(expected) = self.digests.get(name) {
                if digest_tensor(t) != *expected {
                    drifted.push(name.to_string());
                }
            }
        });
        drifted
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    /// Flat bag of named scalars for optimizer tests.
    #[derive(Clone)]
    struct Bag(Vec<(String, Tensor)>);

    impl ParamSet for Bag {
        fn for_each(&self, _prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
            for (n, t) in &self.0 {
                f(n, t);
            }
        }
        fn for_each_mut(&mut self, _prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
            for (n, t) in &mut self.0 {
                f(n, t);
            }
        }
    }

    fn scalar_param(v: f64, grad: Option<f64>) -> Tensor {
        let mut t = Tensor::scalar(v).with_grad();
        t.grad = grad.map(|g| vec![g]);
        t
    }

    #[test]
    fn decay_only_step_matches_hand_value() {
        let mut bag = Bag(vec![("theta".into(), scalar_param(1.0, Some(0.0)))]);
        let hyper = AdamHyper {
            lr: 0.01,
            weight_decay: 0.1,
            ..AdamHyper::default()
        };
        let mut opt = AdamW::new(vec![ParamGroup::new("g", vec!["theta".into()], hyper)]);
        opt.step(&mut bag).unwrap();
        assert!((bag.0[0].1.data()[0] - 0.999).abs() < 1e-15);
    }

    #[test]
    fn first_step_matches_reference_update() {
        let g = 0.37;
        let hyper = AdamHyper {
            lr: 1e-3,
            weight_decay: 0.0,
            ..AdamHyper::default()
        };
        let mut bag = Bag(vec![("theta".into(), scalar_param(0.0, Some(g)))]);
        let mut opt = AdamW::new(vec![ParamGroup::new("g", vec!["theta".into()], hyper)]);
        opt.step(&mut bag).unwrap();
        // reference update evaluated directly: t = 1
        let m_hat = g; // (1-b1)g / (1-b1)
        let v_hat = g * g;
        let expected = -hyper.lr * m_hat / (v_hat.sqrt() + hyper.eps);
        assert!((bag.0[0].1.data()[0] - expected).abs() < 1e-18);
    }

    #[test]
    fn non_member_parameter_is_bit_identical_after_steps() {
        let mut bag = Bag(vec![
            ("inside".into(), scalar_param(1.0, Some(0.5))),
            ("outside".into(), scalar_param(0.123456789, Some(0.9))),
        ]);
        let before = bag.0[1].1.data()[0].to_bits();
        let mut opt = AdamW::new(vec![ParamGroup::new(
            "g",
            vec!["inside".into()],
            AdamHyper::default(),
        )]);
        for _ in 0..5 {
            bag.0[0].1.grad = Some(vec![0.5]);
            bag.0[1].1.grad = Some(vec![0.9]);
            opt.step(&mut bag).unwrap();
        }
        assert_eq!(bag.0[1].1.data()[0].to_bits(), before);
    }

    #[test]
    fn missing_gradient_on_member_is_contract_error() {
        let mut bag = Bag(vec![("theta".into(), scalar_param(1.0, None))]);
        let mut opt = AdamW::new(vec![ParamGroup::new(
            "g",
            vec!["theta".into()],
            AdamHyper::default(),
        )]);
        let err = opt.step(&mut bag).unwrap_err();
        assert!(err.to_string().contains("theta"));
    }

    #[test]
    fn zero_gradient_and_zero_decay_leaves_member_unchanged() {
        let mut bag = Bag(vec![("theta".into(), scalar_param(0.777, Some(0.0)))]);
        let before = bag.0[0].1.data()[0].to_bits();
        let hyper = AdamHyper {
            weight_decay: 0.0,
            ..AdamHyper::default()
        };
        let mut opt = AdamW::new(vec![ParamGroup::new("g", vec!["theta".into()], hyper)]);
        opt.step(&mut bag).unwrap();
        assert_eq!(bag.0[0].1.data()[0].to_bits(), before);
    }

    #[test]
    fn one_step_descends_on_quadratic_bowls() {
        use rand::Rng;
        let mut r = rng::stream(50);
        for _ in 0..10 {
            let dim = 6;
            let center: Vec<f64> = (0..dim).map(|_| r.gen_range(-2.0..2.0)).collect();
            let mut theta = Tensor::uniform(vec![dim], 2.0, &mut r).with_grad();
            let objective = |t: &Tensor| -> f64 {
                t.data()
                    .iter()
                    .zip(&center)
                    .map(|(x, c)| (x - c) * (x - c))
                    .sum()
            };
            let before = objective(&theta);
            let grad: Vec<f64> = theta
                .data()
                .iter()
                .zip(&center)
                .map(|(x, c)| 2.0 * (x - c))
                .collect();
            theta.grad = Some(grad);
            let mut bag = Bag(vec![("theta".into(), theta)]);
            let hyper = AdamHyper {
                lr: 1e-3,
                weight_decay: 0.0,
                ..AdamHyper::default()
            };
            let mut opt = AdamW::new(vec![ParamGroup::new("g", vec!["theta".into()], hyper)]);
            opt.step(&mut bag).unwrap();
            let after = objective(&bag.0[0].1);
            assert!(after < before, "bowl ascent: {before} -> {after}");
        }
    }

    #[test]
    fn gradients_cleared_after_step() {
        let mut bag = Bag(vec![("theta".into(), scalar_param(1.0, Some(0.3)))]);
        let mut opt = AdamW::new(vec![ParamGroup::new(
            "g",
            vec!["theta".into()],
            AdamHyper::default(),
        )]);
        opt.step(&mut bag).unwrap();
        assert!(bag.0[0].1.grad.is_none());
    }

    #[test]
    fn two_groups_use_their_own_learning_rates() {
        let mut bag = Bag(vec![
            ("a".into(), scalar_param(0.0, Some(1.0))),
            ("b".into(), scalar_param(0.0, Some(1.0))),
        ]);
        let fast = AdamHyper {
            lr: 1e-2,
            weight_decay: 0.0,
            ..AdamHyper::default()
        };
        let slow = AdamHyper {
            lr: 1e-4,
            weight_decay: 0.0,
            ..AdamHyper::default()
        };
        let mut opt = AdamW::new(vec![
            ParamGroup::new("fast", vec!["a".into()], fast),
            ParamGroup::new("slow", vec!["b".into()], slow),
        ]);
        opt.step(&mut bag).unwrap();
        let a = bag.0[0].1.data()[0].abs();
        let b = bag.0[1].1.data()[0].abs();
        assert!((a / b - 100.0).abs() < 1e-6, "lr ratio {a}/{b}");
    }

    #[test]
    fn freeze_registry_detects_drift() {
        let mut r = rng::stream(51);
        let mut bag = Bag(vec![
            ("frozen.w".into(), Tensor::uniform(vec![3, 3], 1.0, &mut r)),
            ("live.w".into(), Tensor::uniform(vec![2], 1.0, &mut r)),
        ]);
        let reg = FreezeRegistry::capture(&bag, |n| n.starts_with("frozen."));
        assert_eq!(reg.len(), 1);
        assert!(reg.verify(&bag).is_empty());

        bag.0[1].1.data_mut()[0] += 1.0; // unregistered, ignored
        assert!(reg.verify(&bag).is_empty());

        bag.0[0].1.data_mut()[4] += 1e-9; // registered: any change is drift
        let drift = reg.verify(&bag);
        assert_eq!(drift, vec!["frozen.w".to_string()]);
    }

    #[test]
    fn warmup_scales_early_learning_rate() {
        let hyper = AdamHyper {
            lr: 1e-2,
            weight_decay: 0.0,
            warmup_steps: 10,
            ..AdamHyper::default()
        };
        let mut bag = Bag(vec![("theta".into(), scalar_param(0.0, Some(1.0)))]);
        let mut opt = AdamW::new(vec![ParamGroup::new("g", vec!["theta".into()], hyper)]);
        opt.step(&mut bag).unwrap();
        // step 1 of 10: a tenth of the full first-step magnitude
        let full = 1e-2 * 1.0 / (1.0 + hyper.eps);
        assert!((bag.0[0].1.data()[0].abs() - full / 10.0).abs() < 1e-12);
    }
}
