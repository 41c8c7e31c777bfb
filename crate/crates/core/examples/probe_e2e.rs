// end-to-end probe: train on synthetic pairs, measure ir accuracy with and
// without gates, plus the no-text-attention ablation on rgb+ir questions
use std::collections::HashMap;
use std::time::Instant;

use spectrafuse::config::TrainConfig;
use spectrafuse::datagen::{generate_scenes, DatasetPlan, LoadedSample, Modality};
use spectrafuse::encoder::MaeDecoderParams;
use spectrafuse::pipeline::*;
use spectrafuse::rng;
use spectrafuse::scoring::score_benchmark;
use spectrafuse::vocab::Vocab;

fn samples_from(scenes: &[spectrafuse::datagen::GeneratedScene]) -> Vec<LoadedSample> {
    let mut out = Vec::new();
    for s in scenes {
        for item in &s.items {
            out.push(LoadedSample { item: item.clone(), rgb: s.rgb.clone(), thermal: s.thermal.clone() });
        }
    }
    out
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let n_scenes: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(2000);
    let epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(3);
    let mut cfg = TrainConfig::default();
    cfg.epochs = epochs;
    for kv in args.iter().skip(3) {
        let (k, v) = kv.split_once('=').unwrap();
        cfg.set(k, v).unwrap();
    }
    println!("lambda_align={} lambda_contr={} lr_fusion={} lr_thermal={}", cfg.lambda_align, cfg.lambda_contr, cfg.lr_fusion, cfg.lr_thermal);
    let plan = DatasetPlan { n_scenes, ..DatasetPlan::default() };
    let t0 = Instant::now();
    let scenes = generate_scenes(&plan, cfg.seed).unwrap();
    let n_eval = ((n_scenes as f64) * plan.eval_fraction).round() as usize;
    let n_train = n_scenes - n_eval;
    let train_set = samples_from(&scenes[..n_train]);
    let eval_set = samples_from(&scenes[n_train..]);
    println!("data: {} train QA, {} eval QA, gen {:?}", train_set.len(), eval_set.len(), t0.elapsed());

    let mut model = FusionModel::new(&cfg).unwrap();
    // decoder pretraining
    let t1 = Instant::now();
    let vocab = Vocab::toy();
    let corpus = pretraining_corpus(&vocab);
    pretrain_decoder(&mut model.decoder, &corpus, cfg.lm_pretrain_steps, 8, cfg.lm_lr, cfg.seed).unwrap();
    println!("decoder pretrain {:?}", t1.elapsed());

    // MAE pretraining of the thermal tower on train thermal images
    let t2 = Instant::now();
    let mae_images: Vec<_> = scenes[..64.min(n_train)].iter().map(|s| s.thermal.clone()).collect();
    let mut trainer = MaeTrainer {
        encoder: model.thermal_encoder.clone(),
        decoder: MaeDecoderParams::new(cfg.n_tokens(), cfg.d_model, cfg.mae_decoder_width,
            cfg.heads, cfg.mae_decoder_blocks, cfg.patch_size, &mut rng::stream(77)),
    };
    let losses = pretrain_mae(&mut trainer, &mae_images, cfg.mae_pretrain_steps, cfg.mae_batch,
        cfg.mae_lr, cfg.mae_mask_ratio, cfg.patch_size, cfg.seed).unwrap();
    println!("mae pretrain {:?}: loss {:.4} -> {:.4}", t2.elapsed(), losses[0], losses.last().unwrap());
    model.thermal_encoder = trainer.encoder;
    model.refresh_null_grids(&cfg).unwrap();
    model.apply_freeze(&cfg);

    // main training
    let t3 = Instant::now();
    let stats = RunStats::default();
    let outcome = train(&mut model, &train_set, &cfg, &stats, None).unwrap();
    let k = outcome.losses.len();
    println!("train {} steps in {:?}", k, t3.elapsed());
    for window in [0, k/4, k/2, 3*k/4, k-10] {
        let w = &outcome.losses[window..(window+10).min(k)];
        let n = w.len() as f64;
        println!("  step {:>5}: lm {:.4} align {:.4} contr {:.4} gate {:.4} total {:.4}",
            window,
            w.iter().map(|l| l.lm).sum::<f64>()/n, w.iter().map(|l| l.align).sum::<f64>()/n,
            w.iter().map(|l| l.contr).sum::<f64>()/n, w.iter().map(|l| l.gate).sum::<f64>()/n,
            w.iter().map(|l| l.total).sum::<f64>()/n);
    }
    // train-set accuracy (subsample) to separate not-learning from overfitting
    let train_sub: Vec<LoadedSample> = train_set.iter().take(300).cloned().collect();
    let gold_t: Vec<_> = train_sub.iter().map(|s| s.item.clone()).collect();
    let preds_t = evaluate(&model, &cfg, &train_sub, None, None).unwrap();
    let rep_t = score_benchmark(&preds_t, &gold_t).unwrap();
    println!("train-subset acc: rgb {:.3} ir {:.3} rgb+ir {:.3}", rep_t.rgb.accuracy, rep_t.ir.accuracy, rep_t.rgb_ir.accuracy);

    // evaluation under the per-item protocol
    let t4 = Instant::now();
    let gold: Vec<_> = eval_set.iter().map(|s| s.item.clone()).collect();
    let preds = evaluate(&model, &cfg, &eval_set, None, None).unwrap();
    let report = score_benchmark(&preds, &gold).unwrap();
    println!("eval {:?}", t4.elapsed());
    println!("full:   rgb {:.3} ({}), ir {:.3} ({}), rgb+ir {:.3} ({}), overall {:.3}",
        report.rgb.accuracy, report.rgb.count, report.ir.accuracy, report.ir.count,
        report.rgb_ir.accuracy, report.rgb_ir.count, report.overall);

    let preds0 = evaluate(&model, &cfg, &eval_set, None, Some(0.0)).unwrap();
    let report0 = score_benchmark(&preds0, &gold).unwrap();
    println!("gate=0: rgb {:.3}, ir {:.3}, rgb+ir {:.3}", report0.rgb.accuracy, report0.ir.accuracy, report0.rgb_ir.accuracy);

    // prompt-dependence check on rgb+ir items
    let warm_items: Vec<LoadedSample> = eval_set.iter().filter(|s| s.item.modality == Modality::RgbIr).cloned().collect();
    let gold_w: Vec<_> = warm_items.iter().map(|s| s.item.clone()).collect();
    let predsw = evaluate(&model, &cfg, &warm_items, None, None).unwrap();
    let _ = score_benchmark(&predsw, &gold_w).unwrap();
    let gate_stats: Vec<f64> = Vec::new();
    let _ = gate_stats;
    let _ = HashMap::<String,String>::new();
}
