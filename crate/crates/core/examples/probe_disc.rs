// 1) do scene differences reach the logits with a nonzero residual head?
// 2) what does the per-label mean gradient on the residual head look like?
use spectrafuse::config::TrainConfig;
use spectrafuse::datagen::{generate_scenes, DatasetPlan, LoadedSample, Modality};
use spectrafuse::nn::LinearParams;
use spectrafuse::pipeline::*;
use spectrafuse::rng;
use spectrafuse::vocab::Vocab;

fn main() {
    let mut cfg = TrainConfig::default();
    cfg.lambda_align = 0.0;
    cfg.lambda_contr = 0.0;
    cfg.lambda_gate = 0.0;
    let plan = DatasetPlan { n_scenes: 160, counting_fraction: 0.0, ..DatasetPlan::default() };
    let scenes = generate_scenes(&plan, cfg.seed).unwrap();
    let mut ir: Vec<LoadedSample> = Vec::new();
    for s in &scenes {
        for item in &s.items {
            if item.modality == Modality::Ir {
                ir.push(LoadedSample { item: item.clone(), rgb: s.rgb.clone(), thermal: s.thermal.clone() });
            }
        }
    }
    let vocab = Vocab::toy();
    let mut model = FusionModel::new(&cfg).unwrap();
    let corpus = pretraining_corpus(&vocab);
    pretrain_decoder(&mut model.decoder, &corpus, 400, 8, cfg.lm_lr, cfg.seed).unwrap();
    model.apply_freeze(&cfg);
    // nonzero residual head
    model.fusion.mlp_r.l2 = LinearParams::xavier(cfg.d_model, 2 * cfg.d_model, &mut rng::stream(123));
    model.fusion.mlp_r.l2.weight.requires_grad = true;
    model.fusion.mlp_r.l2.bias.requires_grad = true;

    // logit gap across scenes
    let yes = spectrafuse::vocab::YES;
    let no = spectrafuse::vocab::NO;
    let mut gaps_yes = Vec::new();
    let mut gaps_no = Vec::new();
    for s in ir.iter().take(40) {
        let l = infer_logits(&model, &cfg, &s.rgb, &s.thermal, &s.item.question_ids, ModalitySubset::Thermal, None).unwrap();
        let gap = l[yes] - l[no];
        if s.item.answer_yes { gaps_yes.push(gap) } else { gaps_no.push(gap) };
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let sd = |v: &[f64]| {
        let m = mean(v);
        (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64).sqrt()
    };
    println!("logit gap with random residual head:");
    println!("  yes-scenes mean {:.4} sd {:.4} (n={})", mean(&gaps_yes), sd(&gaps_yes), gaps_yes.len());
    println!("  no-scenes  mean {:.4} sd {:.4} (n={})", mean(&gaps_no), sd(&gaps_no), gaps_no.len());

    // per-label mean gradients on the residual head at zero init
    let mut model0 = model.clone();
    model0.fusion.mlp_r.l2 = LinearParams::zeros(cfg.d_model, 2 * cfg.d_model);
    model0.fusion.mlp_r.l2.weight.requires_grad = true;
    model0.fusion.mlp_r.l2.bias.requires_grad = true;
    let stats = RunStats::default();
    let grad_of = |sample: &LoadedSample, m: &FusionModel| -> Vec<f64> {
        use spectrafuse::nn::ParamSet;
        let mut mc = m.clone();
        let mut opt_dummy = spectrafuse::optim::AdamW::new(vec![]);
        let batch = vec![sample];
        // train_step with no groups: computes grads, applies nothing
        train_step(&mut mc, &mut opt_dummy, &batch, &cfg, 0, &stats).unwrap();
        let mut out = Vec::new();
        mc.for_each("", &mut |n, t| {
            if n == "fusion.mlp_r.l2.weight" {
                if let Some(g) = &t.grad { out = g.clone(); }
            }
        });
        out
    };
    let n_per = 24.min(gaps_yes.len().min(gaps_no.len()));
    let mut sum_yes = vec![0.0; cfg.d_model * 2 * cfg.d_model];
    let mut sum_no = sum_yes.clone();
    let mut norms = Vec::new();
    let mut cy = 0;
    let mut cn = 0;
    for s in &ir {
        let target = if s.item.answer_yes { (&mut sum_yes, &mut cy) } else { (&mut sum_no, &mut cn) };
        if *target.1 >= n_per { continue; }
        let g = grad_of(s, &model0);
        if g.is_empty() { println!("NO GRAD"); return; }
        norms.push(g.iter().map(|x| x * x).sum::<f64>().sqrt());
        for (a, b) in target.0.iter_mut().zip(&g) { *a += b; }
        *target.1 += 1;
        if cy >= n_per && cn >= n_per { break; }
    }
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = sum_yes.iter().zip(&sum_no).map(|(a, b)| a / cy as f64 - b / cn as f64).collect();
    let common: Vec<f64> = sum_yes.iter().zip(&sum_no).map(|(a, b)| (a / cy as f64 + b / cn as f64) / 2.0).collect();
    println!("per-sample grad norm ~{:.4}", norms.iter().sum::<f64>() / norms.len() as f64);
    println!("discriminative grad norm {:.6}", norm(&diff));
    println!("common-mode grad norm   {:.6}", norm(&common));
}
