// stage-by-stage scene-difference propagation through the fusion block
use spectrafuse::config::TrainConfig;
use spectrafuse::datagen::{generate_pair, ObjectKind, SceneObject, SceneSpec};
use spectrafuse::encoder::{patchify_encode, replicate_channels};
use spectrafuse::fusion::{fuse, AblationFlags};
use spectrafuse::image::ImagePlane;
use spectrafuse::nn::{layer_norm, Binder, KeyMask, LinearParams};
use spectrafuse::pipeline::*;
use spectrafuse::rng;
use spectrafuse::tape::Tape;
use spectrafuse::vocab::Vocab;

fn main() {
    let cfg = TrainConfig::default();
    let mut model = FusionModel::new(&cfg).unwrap();
    model.fusion.mlp_r.l2 = LinearParams::xavier(cfg.d_model, 2 * cfg.d_model, &mut rng::stream(123));
    let vocab = Vocab::toy();
    let prompt = vocab.tokenize("is there a person-like warm object ?");

    let base = SceneSpec { height: 56, width: 56, objects: vec![], illumination: 0.1, seed: 1 };
    let mut with_body = base.clone();
    with_body.objects.push(SceneObject { cy: 28.0, cx: 28.0, radius: 6.0, kind: ObjectKind::WarmBody });
    let (_, th_no) = generate_pair(&base).unwrap();
    let (_, th_yes) = generate_pair(&with_body).unwrap();

    let run = |th: &ImagePlane| -> Vec<Vec<f64>> {
        let mut tape = Tape::new();
        let mut b = Binder::new(&mut tape);
        let bm = model.bind(&mut b);
        let th3 = replicate_channels(th).unwrap();
        let enc = patchify_encode(&mut tape, &th3, &bm.thermal, cfg.patch_size).unwrap();
        let t = layer_norm(&mut tape, enc, &bm.ln_t).unwrap();
        let r = bm.null_rgb;
        let (padded, mask) = {
            let mut p = prompt.clone();
            let mut f = vec![true; p.len()];
            p.resize(cfg.max_prompt_len, 0);
            f.resize(cfg.max_prompt_len, false);
            (p, KeyMask::new(f))
        };
        let pe = tape.gather_rows(bm.decoder.token_embed, &padded).unwrap();
        let out = fuse(&mut tape, r, t, pe, &mask, &bm.fusion, &AblationFlags::none()).unwrap();
        let logits = {
            // decoder over [vis; prompt]
            let vis = tape.add_row_vec(out.fused, bm.decoder.type_embed).unwrap();
            let pt = tape.gather_rows(bm.decoder.token_embed, &prompt).unwrap();
            let seq = tape.concat_rows(&[vis, pt]).unwrap();
            let positions: Vec<usize> = (0..cfg.n_tokens() + prompt.len()).collect();
            spectrafuse::decoder::decoder_logits(&mut tape, &bm.decoder, seq, &positions).unwrap()
        };
        vec![
            tape.value(t).to_vec(),
            tape.value(out.t_txt).to_vec(),
            tape.value(out.t_rgb).to_vec(),
            tape.value(out.t_hat).to_vec(),
            tape.value(out.delta_r).to_vec(),
            tape.value(out.gates).to_vec(),
            tape.value(out.fused).to_vec(),
            tape.value(logits).to_vec(),
        ]
    };
    let a = run(&th_yes);
    let b = run(&th_no);
    let names = ["T", "T_txt", "T_rgb", "T_hat", "delta_R", "gates", "fused", "logits"];
    for (i, name) in names.iter().enumerate() {
        let d: f64 = a[i].iter().zip(&b[i]).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        let n: f64 = a[i].iter().map(|x| x * x).sum::<f64>().sqrt();
        let maxd = a[i].iter().zip(&b[i]).map(|(x, y)| (x - y).abs()).fold(0.0f64, f64::max);
        println!("{:8} |delta| {:.6}  max {:.6}  (norm {:.2})", name, d, maxd, n);
    }
}
