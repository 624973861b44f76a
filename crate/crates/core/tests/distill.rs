use doge_core::corpus::{Corpus, CorpusConfig, TokenSequence, Vocabulary};
use doge_core::distill::{
    dataset_nll, defense_gap, evaluate_accuracy, generate_kd_dataset, model_id, train_student, DistillDataset,
    KdSettings, StudentTemplate, StudentTrainConfig,
};
use doge_core::lab::sft_model;
use doge_core::model::{DecodingStrategy, ModelBundle, Role};
use doge_core::numerics::argmax;
use doge_core::trainer::SftConfig;

fn setup() -> (Corpus, ModelBundle) {
    let vocab = Vocabulary::arithmetic();
    let corpus = Corpus::generate(
        &vocab,
        &CorpusConfig {
            size: 600,
            ..CorpusConfig::default()
        },
    )
    .unwrap();
    let sft = SftConfig {
        steps: 200,
        batch_size: 32,
        pool_size: 480,
        ..SftConfig::default()
    };
    let teacher = sft_model(&vocab, &corpus, 11, 48, Role::Teacher, &sft).unwrap();
    (corpus, teacher)
}

fn template() -> StudentTemplate {
    StudentTemplate {
        base_seed: 33,
        hidden_dim: 24,
        mlp_hidden: None,
        init_std: 0.0,
    }
}

#[test]
fn dataset_has_one_pair_per_prompt_with_provenance() {
    let (corpus, teacher) = setup();
    let prompts = corpus.kd_prompts();
    let end = corpus.vocab.end_token().unwrap();
    let s = DecodingStrategy::top_k(5, 1.0, 24, 7);
    let data = generate_kd_dataset(&teacher, &prompts, end, &s).unwrap();
    assert_eq!(data.len(), prompts.len());
    assert_eq!(data.provenance.teacher_id, model_id(&teacher));
    for ((p, o), q) in data.pairs.iter().zip(&prompts) {
        assert_eq!(p.tokens(), q.tokens());
        assert_eq!(&o.tokens()[..p.len()], p.tokens());
        assert!(o.len() <= p.len() + 24);
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("kd.jsonl");
    data.save(&path).unwrap();
    assert_eq!(DistillDataset::load(&path).unwrap(), data);
}

#[test]
fn greedy_is_deterministic_and_sampling_follows_the_seed() {
    let (corpus, teacher) = setup();
    let prompts = corpus.kd_prompts();
    let end = corpus.vocab.end_token().unwrap();
    let g = DecodingStrategy::greedy(24);
    // The seed is recorded in provenance but cannot change greedy outputs.
    assert_eq!(
        generate_kd_dataset(&teacher, &prompts, end, &g).unwrap().pairs,
        generate_kd_dataset(&teacher, &prompts, end, &DecodingStrategy { seed: 99, ..g.clone() }).unwrap().pairs
    );
    let a = generate_kd_dataset(&teacher, &prompts, end, &DecodingStrategy::top_k(5, 1.5, 24, 1)).unwrap();
    let b = generate_kd_dataset(&teacher, &prompts, end, &DecodingStrategy::top_k(5, 1.5, 24, 1)).unwrap();
    let c = generate_kd_dataset(&teacher, &prompts, end, &DecodingStrategy::top_k(5, 1.5, 24, 2)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.pairs, c.pairs);
}

#[test]
fn greedy_tokens_match_full_sequence_argmax() {
    // Re-derive each generated token from a fresh full-sequence forward.
    let (corpus, teacher) = setup();
    let end = corpus.vocab.end_token().unwrap();
    let prompts: Vec<TokenSequence> = corpus.kd_prompts().into_iter().take(30).collect();
    let data = generate_kd_dataset(&teacher, &prompts, end, &DecodingStrategy::greedy(24)).unwrap();
    let mut generated = 0;
    for (p, o) in &data.pairs {
        let z = teacher.logits(o.tokens()).unwrap();
        for t in p.len()..o.len() {
            assert_eq!(argmax(z.row(t - 1)), usize::from(o.tokens()[t]));
            generated += 1;
        }
        let stopped = o.tokens().last() == Some(&end) || o.len() == p.len() + 24;
        assert!(stopped);
    }
    assert!(generated > 30);
}

#[test]
fn student_training_lowers_nll_and_zero_epochs_is_identity() {
    let (corpus, teacher) = setup();
    let end = corpus.vocab.end_token().unwrap();
    let data = generate_kd_dataset(&teacher, &corpus.kd_prompts(), end, &DecodingStrategy::greedy(24)).unwrap();
    let fresh = template().instantiate(corpus.vocab.len(), 1).unwrap();
    let none = train_student(
        &fresh,
        &data,
        &StudentTrainConfig {
            epochs: 0,
            ..StudentTrainConfig::default()
        },
    )
    .unwrap();
    assert_eq!(none.head, fresh.head);
    let trained = train_student(&fresh, &data, &StudentTrainConfig::default()).unwrap();
    let (before, after) = (dataset_nll(&fresh, &data).unwrap(), dataset_nll(&trained, &data).unwrap());
    // A zero head scores every token at log V.
    assert!((before - (corpus.vocab.len() as f64).ln()).abs() < 1e-12);
    assert!(after < before - 0.5, "{before} -> {after}");
    assert_eq!(trained.base.fingerprint(), fresh.base.fingerprint());
}

#[test]
fn accuracy_extremes_and_manual_tally() {
    let (corpus, teacher) = setup();
    let vocab = &corpus.vocab;
    let (marker, end) = (vocab.answer_marker().unwrap(), vocab.end_token().unwrap());

    // Gold labels taken from the model's own greedy outputs: accuracy 1.
    let own: Vec<TokenSequence> = corpus
        .eval_set()
        .iter()
        .map(|s| {
            doge_core::model::decode(&teacher, &s.prompt(), end, &DecodingStrategy::greedy(s.len() - s.prompt_len() + 4))
                .unwrap()
                .label_response(marker)
        })
        .filter(|s| s.answer_tokens(marker, end).is_some() && s.tokens().last() == Some(&end))
        .take(20)
        .collect();
    assert_eq!(own.len(), 20);
    assert_eq!(evaluate_accuracy(&teacher, vocab, &own).unwrap().accuracy, 1.0);

    // A head that ends every response at once never emits an answer.
    let mut mute = teacher.clone();
    mute.head.bias[usize::from(end)] = 1e6;
    let r = evaluate_accuracy(&mute, vocab, &corpus.eval_set()).unwrap();
    assert_eq!((r.accuracy, r.correct.iter().filter(|&&c| c).count()), (0.0, 0));

    // Ten instances scored by hand.
    let ten: Vec<TokenSequence> = corpus.eval_set().into_iter().take(10).collect();
    let report = evaluate_accuracy(&teacher, vocab, &ten).unwrap();
    let mut hits = 0;
    for (i, s) in ten.iter().enumerate() {
        let out = doge_core::model::decode(
            &teacher,
            &s.prompt(),
            end,
            &DecodingStrategy::greedy(s.len() - s.prompt_len() + 4),
        )
        .unwrap();
        let gold = s.answer_tokens(marker, end).unwrap();
        let ok = out.answer_tokens(marker, end) == Some(gold);
        assert_eq!(report.correct[i], ok);
        hits += usize::from(ok);
    }
    assert_eq!(report.n_eval, 10);
    assert_eq!(report.accuracy, hits as f64 / 10.0);
}

#[test]
fn identical_teachers_give_zero_gap_under_greedy_decoding() {
    let (corpus, teacher) = setup();
    let kd = KdSettings {
        strategy: DecodingStrategy::greedy(24),
        student: StudentTrainConfig {
            epochs: 1,
            ..StudentTrainConfig::default()
        },
    };
    let eval: Vec<TokenSequence> = corpus.eval_set().into_iter().take(30).collect();
    let twin = teacher.clone();
    let r = defense_gap(&teacher, &twin, &template(), &corpus.vocab, &corpus.kd_prompts(), &eval, &[1, 2], &kd, 0.02)
        .unwrap();
    assert_eq!((r.teacher_delta, r.student_delta), (0.0, 0.0));
    assert_eq!(r.per_seed_student_from_sft, r.per_seed_student_from_defensive);
    assert!(r.teacher_preserved());
}
