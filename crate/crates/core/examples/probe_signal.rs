// measure how much two thermal scenes differ at each pipeline stage
use spectrafuse::config::TrainConfig;
use spectrafuse::datagen::{generate_pair, ObjectKind, SceneObject, SceneSpec};
use spectrafuse::encoder::patchify_encode;
use spectrafuse::nn::{layer_norm, Binder};
use spectrafuse::pipeline::*;
use spectrafuse::tape::Tape;
use spectrafuse::vocab::Vocab;

fn main() {
    let cfg = TrainConfig::default();
    let model = FusionModel::new(&cfg).unwrap();
    let vocab = Vocab::toy();

    let base = SceneSpec {
        height: 56, width: 56,
        objects: vec![],
        illumination: 0.1,
        seed: 1,
    };
    let mut with_body = base.clone();
    with_body.objects.push(SceneObject { cy: 28.0, cx: 28.0, radius: 6.0, kind: ObjectKind::WarmBody });
    let (_, th_no) = generate_pair(&base).unwrap();
    let (_, th_yes) = generate_pair(&with_body).unwrap();

    // stage 1: thermal tokens after encoder + ln_t
    let encode = |th: &spectrafuse::image::ImagePlane| -> Vec<f64> {
        let th3 = spectrafuse::encoder::replicate_channels(th).unwrap();
        let mut tape = Tape::new();
        let mut b = Binder::new(&mut tape);
        let tv = model.thermal_encoder.bind(&mut b, "thermal");
        let lnv = model.ln_thermal.bind(&mut b, "ln_t");
        let enc = patchify_encode(&mut tape, &th3, &tv, cfg.patch_size).unwrap();
        let t = layer_norm(&mut tape, enc, &lnv).unwrap();
        tape.value(t).to_vec()
    };
    let t_yes = encode(&th_yes);
    let t_no = encode(&th_no);
    let d = cfg.d_model;
    let mut per_token: Vec<f64> = (0..16)
        .map(|i| {
            (0..d).map(|j| (t_yes[i * d + j] - t_no[i * d + j]).powi(2)).sum::<f64>().sqrt()
        })
        .collect();
    println!("thermal token deltas: {:?}", per_token.iter().map(|v| (v * 100.0).round() / 100.0).collect::<Vec<_>>());
    per_token.sort_by(|a, b| b.partial_cmp(a).unwrap());
    println!("max token delta {:.3}, mean {:.3}", per_token[0], per_token.iter().sum::<f64>() / 16.0);

    // stage 2: answer logits at init and their sensitivity
    let prompt = vocab.tokenize("is there a person-like warm object ?");
    let ly = infer_logits(&model, &cfg, &th_yes_to_rgb(), &th_yes, &prompt, ModalitySubset::Thermal, None).unwrap();
    let ln_ = infer_logits(&model, &cfg, &th_yes_to_rgb(), &th_no, &prompt, ModalitySubset::Thermal, None).unwrap();
    let yes = spectrafuse::vocab::YES;
    let no = spectrafuse::vocab::NO;
    println!("init logit gap yes-scene {:.6} vs no-scene {:.6} (diff {:.6})",
        ly[yes] - ly[no], ln_[yes] - ln_[no], (ly[yes] - ly[no]) - (ln_[yes] - ln_[no]));
    let max_logit_diff = ly.iter().zip(&ln_).map(|(a, b)| (a - b).abs()).fold(0.0f64, f64::max);
    println!("max |logit delta| across vocab at init: {:.6}", max_logit_diff);
}

fn th_yes_to_rgb() -> spectrafuse::image::ImagePlane {
    spectrafuse::image::ImagePlane::constant(56, 56, 3, 0.1)
}
