mod common;

use proptest::prelude::*;

use absa_cda::classifier::{embed, grad_wrt_input, ModelParams, NUM_CLASSES};
use absa_cda::corpus::{build_vocab, encode, tokenize, tokenize_with_offsets, Polarity, Sample};
use absa_cda::eval::{macro_f1, ConfusionMatrix, RunMetrics};
use absa_cda::generation::GenerationCandidate;
use absa_cda::relabel::{argmax_fluctuation, assign_label, select_candidate, FinalRule};
use absa_cda::seeding::derive_seed;

fn polarity() -> impl Strategy<Value = Polarity> {
    (0usize..3).prop_map(|i| Polarity::ALL[i])
}

fn text() -> impl Strategy<Value = String> {
    proptest::collection::vec(
        prop_oneof![
            "[a-zA-Z]{1,8}",
            "[0-9]{1,3}",
            Just("isn't".to_string()),
            Just("it's".to_string()),
            Just("rock 'n' roll".to_string()),
            Just("!".to_string()),
            Just(",".to_string()),
            Just("\u{2019}".to_string()),
        ],
        1..12,
    )
    .prop_map(|w| w.join(" "))
}

proptest! {
    #[test]
    fn tokenizing_joined_tokens_is_idempotent(t in text()) {
        let tokens = tokenize(&t);
        prop_assert!(tokens.iter().all(|w| !w.is_empty() && !w.contains(char::is_whitespace)));
        prop_assert_eq!(tokenize(&tokens.join(" ")), tokens);
    }

    #[test]
    fn offsets_point_into_the_source(t in text()) {
        let chars: Vec<char> = t.chars().collect();
        for tok in tokenize_with_offsets(&t) {
            prop_assert!(tok.start < tok.end && tok.end <= chars.len());
            let raw: String = chars[tok.start..tok.end].iter().collect();
            prop_assert_eq!(raw.to_lowercase().replace('\u{2019}', "'"), tok.text);
        }
    }

    #[test]
    fn macro_f1_is_order_invariant_and_bounded(
        pairs in proptest::collection::vec((polarity(), polarity()), 1..60),
        rot in 0usize..60,
    ) {
        let (p, g): (Vec<_>, Vec<_>) = pairs.iter().copied().unzip();
        let f = macro_f1(&p, &g).unwrap();
        prop_assert!((0.0..=1.0).contains(&f));
        let mut shuffled = pairs.clone();
        shuffled.rotate_left(rot % pairs.len());
        shuffled.reverse();
        let (p2, g2): (Vec<_>, Vec<_>) = shuffled.into_iter().unzip();
        prop_assert_eq!(f, macro_f1(&p2, &g2).unwrap());
    }

    #[test]
    fn perfect_f1_iff_diagonal_with_all_classes(pairs in proptest::collection::vec((polarity(), polarity()), 1..30)) {
        let (p, g): (Vec<_>, Vec<_>) = pairs.iter().copied().unzip();
        let m = ConfusionMatrix::from_pairs(&p, &g).unwrap();
        let diagonal = p == g;
        let all_present = Polarity::ALL.iter().all(|c| g.contains(c));
        prop_assert_eq!(m.macro_f1() == 1.0, diagonal && all_present);
    }

    #[test]
    fn report_accuracy_matches_confusion(pairs in proptest::collection::vec((polarity(), polarity()), 1..40)) {
        let (p, g): (Vec<_>, Vec<_>) = pairs.iter().copied().unzip();
        let m = ConfusionMatrix::from_pairs(&p, &g).unwrap();
        let run = RunMetrics::from_confusion(1, m);
        let trace: usize = (0..NUM_CLASSES).map(|c| run.confusion.matrix[c][c]).sum();
        prop_assert_eq!(run.accuracy, trace as f64 / run.confusion.total() as f64);
        let mean_f1 = run.per_class.iter().map(|c| c.f1).sum::<f64>() / 3.0;
        prop_assert_eq!(run.macro_f1, mean_f1);
    }

    #[test]
    fn assigned_label_is_target_or_argmax(
        raw in proptest::array::uniform3(0.001f64..1.0),
        target in polarity(),
        thr in 0.01f64..0.99,
    ) {
        let s: f64 = raw.iter().sum();
        let p = raw.map(|v| v / s);
        let (label, rule) = assign_label(&p, target, thr);
        let top = absa_cda::classifier::argmax(&p);
        match rule {
            FinalRule::KeptTarget => {
                prop_assert_eq!(label, target);
                prop_assert!(top == target && p[target.index()] > thr);
            }
            FinalRule::ArgmaxOverride => prop_assert_eq!(label, top),
        }
    }

    #[test]
    fn fluctuation_argmax_ignores_dominated_additions(
        base in proptest::collection::vec(proptest::option::of(-1.0f64..1.0), 1..10),
        extra in proptest::collection::vec(proptest::option::of(-1.0f64..1.0), 0..10),
    ) {
        let before = argmax_fluctuation(&base);
        let best = base.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
        // additions that do not exceed the current best never change the pick
        let dominated: Vec<Option<f64>> = extra.iter().map(|e| e.map(|v| v.min(best))).collect();
        let mut all = base.clone();
        all.extend(dominated);
        if before.is_some() {
            prop_assert_eq!(argmax_fluctuation(&all), before);
        }
    }

    #[test]
    fn derived_seeds_separate_parts(seed in any::<u64>(), a in "[a-z]{0,4}", b in "[a-z]{0,4}") {
        prop_assert_eq!(derive_seed(seed, &[&a, &b]), derive_seed(seed, &[&a, &b]));
        let joined = format!("{a}{b}");
        if !b.is_empty() {
            prop_assert_ne!(derive_seed(seed, &[&a, &b]), derive_seed(seed, &[&joined]));
        }
    }
}

fn candidate(text: &str) -> GenerationCandidate {
    GenerationCandidate {
        source_id: "s".into(),
        text: text.into(),
        target_polarity: Polarity::Positive,
        prompt_id: "positive-1".into(),
        backend_name: "test".into(),
        seed: 0,
        stripped_ok: true,
    }
}

#[test]
fn select_candidate_is_stable_under_dominated_candidates() {
    let (train, _) = common::small_synthetic(150, 0);
    let (vocab, params) = common::trained(&train, 2);
    let source = train.samples.iter().find(|s| s.label == Polarity::Negative).unwrap();
    let aspect = source.aspect().surface.clone();
    let texts = [
        format!("the {aspect} was superb"),
        format!("the {aspect} was dreadful"),
        format!("i think the {aspect} was fine"),
    ];
    let cands: Vec<_> = texts.iter().map(|t| candidate(t)).collect();
    let sp = absa_cda::classifier::predict(&params, &vocab, source).unwrap();
    let chosen = select_candidate(&params, &vocab, source, &cands, &sp, Polarity::Positive).unwrap();

    let mut more = cands.clone();
    // a copy of a losing candidate and one without the aspect
    more.push(candidate(&texts[1]));
    more.push(candidate("nothing relevant here"));
    let again = select_candidate(&params, &vocab, source, &more, &sp, Polarity::Positive).unwrap();
    assert_eq!(again.index, chosen.index);
    assert_eq!(again.fluctuation, chosen.fluctuation);
}

#[test]
fn input_gradient_is_shared_across_positions() {
    let (train, _) = common::small_synthetic(30, 0);
    let vocab = build_vocab(&train, 1);
    let params = ModelParams::init(vocab.len(), 6, 5, 9);
    let s: &Sample = &train.samples[0];
    let x = embed(&params, &encode(s, &vocab));
    let g = grad_wrt_input(&params, &x, Polarity::Neutral).unwrap();
    assert!(g.sentence.windows(2).all(|w| w[0] == w[1]));
    assert_eq!(g.aspect.len(), x.aspect.len());
}
