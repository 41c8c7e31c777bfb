// quick probe: full-config decoder memorization
use spectrafuse::config::TrainConfig;
use spectrafuse::pipeline::{pretrain_decoder, pretraining_corpus, sentence_perplexity_probe};
use spectrafuse::decoder::DecoderParams;
use spectrafuse::vocab::Vocab;
use spectrafuse::rng;

fn main() {
    let cfg = TrainConfig::default();
    let vocab = Vocab::toy();
    let mut dec = DecoderParams::new(cfg.vocab_size, cfg.d_model, cfg.heads, cfg.decoder_blocks,
        cfg.n_tokens(), cfg.max_prompt_len + 2, &mut rng::stream(1));
    let corpus = pretraining_corpus(&vocab);
    let t0 = std::time::Instant::now();
    pretrain_decoder(&mut dec, &corpus, cfg.lm_pretrain_steps, 8, cfg.lm_lr, cfg.seed).unwrap();
    let probe = vocab.tokenize("thermal cameras measure heat");
    let ce = sentence_perplexity_probe(&dec, &probe).unwrap();
    println!("steps={} ce={:.4} elapsed={:?}", cfg.lm_pretrain_steps, ce, t0.elapsed());
}
