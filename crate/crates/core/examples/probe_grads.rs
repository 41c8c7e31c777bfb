// diagnostic: per-component gradient norms for one training batch
use std::collections::HashMap;
use spectrafuse::config::TrainConfig;
use spectrafuse::datagen::{generate_scenes, DatasetPlan, LoadedSample};
use spectrafuse::pipeline::*;
use spectrafuse::vocab::Vocab;
use spectrafuse::nn::ParamSet;

fn main() {
    let mut cfg = TrainConfig::default();
    cfg.lambda_align = 0.0;
    cfg.lambda_contr = 0.0;
    cfg.lambda_gate = 0.0;
    let plan = DatasetPlan { n_scenes: 16, ..DatasetPlan::default() };
    let scenes = generate_scenes(&plan, cfg.seed).unwrap();
    let mut samples = Vec::new();
    for s in &scenes {
        for item in &s.items {
            samples.push(LoadedSample { item: item.clone(), rgb: s.rgb.clone(), thermal: s.thermal.clone() });
        }
    }
    let mut model = FusionModel::new(&cfg).unwrap();
    let vocab = Vocab::toy();
    let corpus = pretraining_corpus(&vocab);
    pretrain_decoder(&mut model.decoder, &corpus, 400, 8, cfg.lm_lr, cfg.seed).unwrap();
    model.apply_freeze(&cfg);

    let mut opt = model.optimizer(&cfg);
    let stats = RunStats::default();
    let batch: Vec<&LoadedSample> = samples.iter().take(4).collect();
    // run one step, then inspect the gradients captured on the model by a
    // second forward/backward without stepping
    let v = train_step(&mut model, &mut opt, &batch, &cfg, 0, &stats).unwrap();
    println!("step loss: lm {:.4}", v.lm);

    // second pass: collect grads via train_step on a clone that skips the update
    let model2 = model.clone();
    let mut grads: HashMap<String, f64> = HashMap::new();
    {
        use spectrafuse::nn::{harvest_grads, Binder};
        use spectrafuse::tape::Tape;
        let mut tape = Tape::new();
        let mut b = Binder::new(&mut tape);
        let _bm = model2.bind(&mut b);
        let bound = b.into_bound();
        // replicate one sample's lm forward via public pieces
        drop(bound); drop(tape);
        let _ = harvest_grads; // silence
    }
    let _ = grads.insert(String::new(), 0.0);
    grads.clear();

    // simpler: re-run a step on a fresh clone and print grad norms before the update
    // by calling the internals through train_step is not possible; instead use
    // gradcheck-style eval via infer path. Print parameter deltas after 50 steps.
    let mut model3 = model.clone();
    let mut opt3 = model3.optimizer(&cfg);
    let before: Vec<(String, Vec<f64>)> = {
        let mut v = Vec::new();
        model3.for_each("", &mut |n, t| v.push((n.to_string(), t.data().to_vec())));
        v
    };
    for step in 0..50 {
        let b: Vec<&LoadedSample> = samples.iter().skip((step % 5) * 4).take(4).collect();
        train_step(&mut model3, &mut opt3, &b, &cfg, step as u64, &stats).unwrap();
    }
    let mut deltas: HashMap<String, (f64, f64)> = HashMap::new();
    model3.for_each("", &mut |n, t| {
        let (_, old) = before.iter().find(|(bn, _)| bn == n).map(|(a, b)| (a.clone(), b.clone())).unwrap();
        let d: f64 = t.data().iter().zip(&old).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let norm: f64 = t.data().iter().map(|x| x * x).sum::<f64>().sqrt();
        let prefix = n.split('.').take(2).collect::<Vec<_>>().join(".");
        let e = deltas.entry(prefix).or_insert((0.0, 0.0));
        e.0 += d * d;
        e.1 += norm * norm;
    });
    let mut keys: Vec<_> = deltas.keys().cloned().collect();
    keys.sort();
    println!("parameter movement over 50 steps (delta / norm):");
    for k in keys {
        let (d, n) = deltas[&k];
        println!("  {:30} {:.6} / {:.3}", k, d.sqrt(), n.sqrt());
    }
}
