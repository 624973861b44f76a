use doge_core::corpus::{Corpus, CorpusConfig, Vocabulary};
use doge_core::lab::fresh_bundle;
use doge_core::model::{HeadParams, ModelBundle, Role};
use doge_core::numerics::SeededRng;
use doge_core::objective::AdvConfig;
use doge_core::trainer::{defensive_train, defensive_train_report, lr_schedule, TrainConfig};

fn setup() -> (Corpus, ModelBundle, Vec<ModelBundle>) {
    let vocab = Vocabulary::arithmetic();
    let corpus = Corpus::generate(
        &vocab,
        &CorpusConfig {
            size: 300,
            ..CorpusConfig::default()
        },
    )
    .unwrap();
    let mut rng = SeededRng::new(8, "trainer-it");
    let mut teacher = fresh_bundle(&vocab, 11, 32, Role::Teacher).unwrap();
    teacher.head = HeadParams::random_linear(vocab.len(), 32, 0.1, &mut rng);
    let proxies = [(22, 16), (44, 24)]
        .iter()
        .map(|&(s, d)| {
            let mut p = fresh_bundle(&vocab, s, d, Role::ProxyStudent).unwrap();
            p.head = HeadParams::random_linear(vocab.len(), d, 0.1, &mut rng);
            p
        })
        .collect();
    (corpus, teacher, proxies)
}

fn cfg(steps: usize, lambda: f64) -> TrainConfig {
    TrainConfig {
        steps,
        batch_size: 8,
        peak_lr: 1e-2,
        lambda,
        ..TrainConfig::default()
    }
}

#[test]
fn zero_steps_return_the_input_head() {
    let (corpus, teacher, proxies) = setup();
    let adv = AdvConfig::new(0.5, 2.0, proxies).unwrap();
    let (head, log) = defensive_train(&teacher, &corpus.vocab, &corpus.train_set(), &cfg(0, 0.5), &adv).unwrap();
    assert_eq!(head, teacher.head);
    assert!(log.is_empty());
}

#[test]
fn log_respects_loss_identities_and_schedule() {
    let (corpus, teacher, proxies) = setup();
    let c = cfg(30, 0.5);
    let adv = AdvConfig::new(0.5, 2.0, proxies).unwrap();
    let (_, log) = defensive_train(&teacher, &corpus.vocab, &corpus.train_set(), &c, &adv).unwrap();
    assert_eq!(log.len(), 30);
    for (i, m) in log.iter().enumerate() {
        assert_eq!(m.step, i);
        assert_eq!(m.total_loss, m.sft_loss + 0.5 * m.adv_loss);
        assert_eq!(m.masked_kl, -m.adv_loss);
        assert!(m.adv_loss <= 0.0 && m.sft_loss > 0.0);
        assert_eq!(m.lr, lr_schedule(i, 30, 1e-2, 0.1));
    }
}

#[test]
fn same_seed_reproduces_bitwise_and_seed_changes_the_run() {
    let (corpus, teacher, proxies) = setup();
    let adv = AdvConfig::new(0.5, 2.0, proxies).unwrap();
    let train = corpus.train_set();
    let a = defensive_train_report(&teacher, &corpus.vocab, &train, &cfg(20, 0.5), &adv).unwrap();
    let b = defensive_train_report(&teacher, &corpus.vocab, &train, &cfg(20, 0.5), &adv).unwrap();
    assert_eq!(a.head, b.head);
    assert_eq!(a.log, b.log);
    let other = TrainConfig { seed: 7, ..cfg(20, 0.5) };
    let c = defensive_train_report(&teacher, &corpus.vocab, &train, &other, &adv).unwrap();
    assert_ne!(a.head, c.head);
}

#[test]
fn base_and_proxies_are_left_untouched() {
    let (corpus, teacher, proxies) = setup();
    let before: Vec<(u64, HeadParams)> = proxies.iter().map(|p| (p.base.fingerprint(), p.head.clone())).collect();
    let base = teacher.base.fingerprint();
    let adv = AdvConfig::new(0.5, 2.0, proxies).unwrap();
    let (head, _) = defensive_train(&teacher, &corpus.vocab, &corpus.train_set(), &cfg(10, 0.5), &adv).unwrap();
    assert_ne!(head, teacher.head);
    assert_eq!(teacher.base.fingerprint(), base);
    for (p, (fp, h)) in adv.proxies.iter().zip(before) {
        assert_eq!((p.base.fingerprint(), &p.head), (fp, &h));
    }
}
