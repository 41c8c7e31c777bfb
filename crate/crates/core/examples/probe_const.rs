// can the fusion steer the frozen decoder at all? constant-answer training
use spectrafuse::config::TrainConfig;
use spectrafuse::datagen::{generate_scenes, DatasetPlan, LoadedSample};
use spectrafuse::pipeline::*;
use spectrafuse::vocab::Vocab;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let mut cfg = TrainConfig::default();
    cfg.lambda_align = 0.0;
    cfg.lambda_contr = 0.0;
    cfg.lambda_gate = 0.0;
    cfg.epochs = 4;
    for kv in args.iter().skip(1) {
        let (k, v) = kv.split_once('=').unwrap();
        cfg.set(k, v).unwrap();
    }
    let plan = DatasetPlan { n_scenes: 80, ..DatasetPlan::default() };
    let scenes = generate_scenes(&plan, cfg.seed).unwrap();
    let mut samples = Vec::new();
    for s in &scenes {
        for item in &s.items {
            let mut it = item.clone();
            if std::env::var("CONST_YES").is_ok() { it.answer_yes = true; }
            samples.push(LoadedSample { item: it, rgb: s.rgb.clone(), thermal: s.thermal.clone() });
        }
    }
    let mut model = FusionModel::new(&cfg).unwrap();
    let vocab = Vocab::toy();
    let corpus = pretraining_corpus(&vocab);
    pretrain_decoder(&mut model.decoder, &corpus, 400, 8, cfg.lm_lr, cfg.seed).unwrap();
    model.apply_freeze(&cfg);
    let stats = RunStats::default();
    let outcome = train(&mut model, &samples, &cfg, &stats, None).unwrap();
    let k = outcome.losses.len();
    for w in (0..k).step_by(k / 8) {
        let chunk = &outcome.losses[w..(w + 10).min(k)];
        println!("step {:>4}: lm {:.4}", w, chunk.iter().map(|l| l.lm).sum::<f64>() / chunk.len() as f64);
    }
}
