use curricula::synth::{gen_corpus, Lang, SynthConfig};
use statrs::distribution::{Binomial, DiscreteCDF};

#[test]
fn transitions_match_chain() {
    let cfg = SynthConfig {
        seed: 17,
        corpus_docs: 8000,
        ..SynthConfig::default()
    };
    let chain = cfg.chain();
    let k = chain.classes();
    let mut counts = vec![0u64; k * k * k];
    let mut symbols = 0usize;
    for doc in gen_corpus(&cfg, Lang::A) {
        let c = cfg.classes_of(Lang::A, &doc.text).unwrap();
        symbols += c.len();
        for w in c.windows(3) {
            counts[(w[0] * k + w[1]) * k + w[2]] += 1;
        }
    }
    assert!(symbols >= 100_000, "{symbols} symbols");

    // z-score per (context, next) cell with a nonzero row count
    let mut cells = 0u64;
    let mut beyond = 0u64;
    for ctx in 0..k * k {
        let row = chain.row(ctx / k, ctx % k);
        let obs = &counts[ctx * k..(ctx + 1) * k];
        let n: u64 = obs.iter().sum();
        if n < 30 {
            continue;
        }
        for (&o, &p) in obs.iter().zip(row) {
            if p == 0.0 {
                assert_eq!(o, 0, "impossible transition observed");
                continue;
            }
            let se = (p * (1.0 - p) / n as f64).sqrt();
            let z = (o as f64 / n as f64 - p) / se;
            assert!(z.abs() < 5.0, "context {ctx}: z = {z:.2}");
            cells += 1;
            beyond += u64::from(z.abs() > 3.0);
        }
    }
    // under the chain each |z| > 3 with probability ~0.0027; allow the
    // binomial 99.9% quantile of such cells
    let limit = (0..=cells)
        .find(|&x| Binomial::new(0.0027, cells).unwrap().cdf(x) >= 0.999)
        .unwrap();
    assert!(beyond <= limit, "{beyond} of {cells} cells beyond 3 SE (limit {limit})");
}

#[test]
fn languages_share_latent_sequences() {
    let cfg = SynthConfig {
        seed: 3,
        corpus_docs: 50,
        ..SynthConfig::default()
    };
    let a = gen_corpus(&cfg, Lang::A);
    let b = gen_corpus(&cfg, Lang::B);
    for (x, y) in a.iter().zip(&b) {
        assert_ne!(x.text, y.text);
        assert_eq!(cfg.classes_of(Lang::A, &x.text), cfg.classes_of(Lang::B, &y.text));
    }
}
