use curricula::model::{ModelConfig, ModelParams};
use curricula::packer::{FlushPolicy, PackedSet, PackerConfig};
use curricula::pipeline::pack_texts;
use curricula::synth::{gen_corpus, Lang, SynthConfig};
use curricula::train::{train, TrainConfig};
use curricula::vocab::{Vocab, END_OF_TEXT, PAD};

fn base_vocab() -> Vocab {
    Vocab::with_bytes(&[END_OF_TEXT, PAD]).unwrap()
}

fn corpus_a(seed: u64, vocab: &Vocab, seq_len: usize) -> PackedSet {
    let cfg = SynthConfig {
        seed,
        ..SynthConfig::default()
    };
    let texts: Vec<String> = gen_corpus(&cfg, Lang::A).into_iter().map(|r| r.text).collect();
    let packer = PackerConfig {
        seq_len,
        sep_id: vocab.end_of_text().unwrap(),
        flush_policy: FlushPolicy::DropTail,
        pad_id: vocab.pad().unwrap(),
    };
    pack_texts(vocab, &texts, packer, 1).unwrap().0
}

fn model_cfg(vocab: &Vocab) -> ModelConfig {
    ModelConfig {
        context: 8,
        embed_dim: 16,
        hidden_dim: 32,
        vocab_size: vocab.len(),
        sep_id: vocab.end_of_text().unwrap(),
    }
}

fn moving_average(xs: &[f64], w: usize) -> (f64, f64) {
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    (mean(&xs[..w]), mean(&xs[xs.len() - w..]))
}

#[test]
fn loss_decreases_on_language_a() {
    let vocab = base_vocab();
    let cfg = TrainConfig {
        batch_size: 16,
        steps: 2000,
        lr: 3e-3,
        ..TrainConfig::default()
    };
    for seed in [1, 2, 3] {
        let data = corpus_a(seed, &vocab, 64);
        let init = ModelParams::init(model_cfg(&vocab), seed).unwrap();
        let (_, metrics) = train(init, &cfg, &data, None, |_| Ok(())).unwrap();
        let losses: Vec<f64> = metrics.iter().map(|m| m.train_loss).collect();
        let (first, last) = moving_average(&losses, 100);
        println!("seed {seed}: first-100 mean {first:.4}, last-100 mean {last:.4}");
        assert!(last < first, "seed {seed}: {first} -> {last}");
    }
}

/// Extending the vocab leaves every base logit unchanged and only adds the
/// new tokens' mass to the softmax denominator.
#[test]
fn extension_shift_is_the_added_softmax_mass() {
    let vocab = base_vocab();
    let data = corpus_a(9, &vocab, 32);
    let cfg = TrainConfig {
        batch_size: 8,
        steps: 100,
        lr: 3e-3,
        ..TrainConfig::default()
    };
    let init = ModelParams::init(model_cfg(&vocab), 9).unwrap();
    let (base, _) = train(init, &cfg, &data, None, |_| Ok(())).unwrap();
    let new = SynthConfig::default().alphabet(Lang::B);
    let (ext, e) = base.extend_vocab(&vocab, &new).unwrap();
    assert_eq!(e.vocab.len(), vocab.len() + new.len());

    let k = base.cfg.context;
    let sep = base.cfg.sep_id;
    let n_base = vocab.len();
    let (mut before, mut after, mut positions) = (0.0, 0.0, 0usize);
    for seq in data.iter().take(20) {
        for i in 0..seq.len() {
            let mut ctx = vec![sep; k];
            let start = i.saturating_sub(k);
            ctx[k - (i - start)..].copy_from_slice(&seq[start..i]);
            let lb = base.log_probs(&ctx).unwrap();
            let le = ext.log_probs(&ctx).unwrap();
            let y = seq[i] as usize;
            // log of the probability mass the extended model leaves on base ids
            let m = le[..n_base].iter().cloned().fold(f64::MIN, f64::max);
            let base_mass = m + le[..n_base].iter().map(|l| (l - m).exp()).sum::<f64>().ln();
            assert!((lb[y] - (le[y] - base_mass)).abs() < 1e-12);
            before -= lb[y];
            after -= le[y];
            positions += 1;
        }
    }
    let rel = (after - before).abs() / before;
    println!("mean nll {:.6} -> {:.6}, relative shift {rel:.3e}", before / positions as f64, after / positions as f64);
    assert!(after >= before);
}
