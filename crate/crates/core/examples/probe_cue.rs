// does the pretrained decoder actually read the planted cue axis?
use spectrafuse::config::TrainConfig;
use spectrafuse::decoder::decoder_logits;
use spectrafuse::nn::Binder;
use spectrafuse::pipeline::*;
use spectrafuse::rng::{self, derive_seed};
use spectrafuse::tape::Tape;
use spectrafuse::tensor::Tensor;
use spectrafuse::vocab::{Vocab, NO, YES};

fn main() {
    let cfg = TrainConfig::default();
    let vocab = Vocab::toy();
    let mut model = FusionModel::new(&cfg).unwrap();
    let corpus = pretraining_corpus(&vocab);
    pretrain_decoder(&mut model.decoder, &corpus, cfg.lm_pretrain_steps, 8, cfg.lm_lr, cfg.seed).unwrap();

    // reconstruct the cue axis exactly as pretraining derived it
    let d = cfg.d_model;
    let cue = {
        let mut r = rng::stream(derive_seed(cfg.seed, 0xc0e, 0));
        let v = Tensor::uniform(vec![d], 1.0, &mut r);
        let norm = v.data().iter().map(|x| x * x).sum::<f64>().sqrt();
        Tensor::new(vec![d], v.data().iter().map(|x| x / norm).collect()).unwrap()
    };
    let n = cfg.n_tokens();
    let prompt = vocab.tokenize("is there a person-like warm object ?");

    for (label, shift, fresh_noise_seed) in [("cue +1", 1.0, 500u64), ("cue -1", -1.0, 500), ("cue +1 (new noise)", 1.0, 501), ("cue 0", 0.0, 502)] {
        let mut rows = Tensor::uniform(vec![n, d], 1.0, &mut rng::stream(fresh_noise_seed));
        for row in 0..n {
            for j in 0..d {
                rows.data_mut()[row * d + j] += shift * cue.data()[j];
            }
        }
        let mut tape = Tape::new();
        let mut b = Binder::new(&mut tape);
        let dv = model.decoder.bind(&mut b, "");
        let vis = tape.leaf(&rows);
        let vis = tape.add_row_vec(vis, dv.type_embed).unwrap();
        let emb = tape.gather_rows(dv.token_embed, &prompt).unwrap();
        let seq = tape.concat_rows(&[vis, emb]).unwrap();
        let positions: Vec<usize> = (0..n + prompt.len()).collect();
        let logits = decoder_logits(&mut tape, &dv, seq, &positions).unwrap();
        let last = n + prompt.len() - 1;
        let v = cfg.vocab_size;
        let row = &tape.value(logits)[last * v..(last + 1) * v];
        println!("{label}: yes-no gap {:+.4}", row[YES] - row[NO]);
    }
}
