use std::collections::BTreeSet;

use perpcs::bench::experiment::{bucket_labels, bucket_of, mix_seed, to_csv, ResultRow, CSV_HEADER};
use perpcs::bench::metrics::{macro_f1, mae, parse_rating, rmse, rouge_1, rouge_l, MetricReport, UNPARSEABLE_RATING_ERROR};
use perpcs::bench::retrieval::{lexical_retrieve, Bm25};
use perpcs::bench::synth::{generate_corpus, SplitCounts, TaskKind, TaskSpec};
use perpcs::pipeline::ItemKind;

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12
}

// (candidate, reference, rouge-1 F, rouge-L F)
const ROUGE: [(&str, &str, f64, f64); 7] = [
    ("the cat sat", "the cat ran", 2.0 / 3.0, 2.0 / 3.0),
    ("a b c d", "a c e", 4.0 / 7.0, 4.0 / 7.0),
    ("the the the", "the cat", 2.0 / 5.0, 2.0 / 5.0),
    ("alpha beta gamma delta", "delta gamma beta alpha", 1.0, 1.0 / 4.0),
    ("x y z", "p q", 0.0, 0.0),
    ("one two three four five", "one three five", 3.0 / 4.0, 3.0 / 4.0),
    ("red blue red green", "red red blue", 6.0 / 7.0, 4.0 / 7.0),
];

#[test]
fn rouge_fixtures() {
    for (c, r, r1, rl) in ROUGE {
        assert!(close(rouge_1(c, r), r1), "rouge-1 {c:?} vs {r:?}: {}", rouge_1(c, r));
        assert!(close(rouge_l(c, r), rl), "rouge-l {c:?} vs {r:?}: {}", rouge_l(c, r));
    }
}

#[test]
fn rouge_is_case_insensitive_and_handles_empty() {
    assert_eq!(rouge_1("The Cat", "the cat"), 1.0);
    assert_eq!(rouge_l("", "the cat"), 0.0);
    assert_eq!(rouge_1("the cat", ""), 0.0);
}

#[test]
fn macro_f1_fixtures() {
    let cases: [(&[&str], &[&str], f64); 6] = [
        (&["a", "b", "a", "c"], &["a", "b", "b", "c"], 7.0 / 9.0),
        (&["x", "x", "x"], &["x", "y", "z"], 1.0 / 6.0),
        (&["p", "q"], &["p", "q"], 1.0),
        (&["a", "a", "b", "b", "c"], &["a", "b", "b", "c", "c"], 11.0 / 18.0),
        (&["u", "v", "w", "u"], &["v", "u", "w", "w"], 2.0 / 9.0),
        (&["l1", "l2"], &["l3", "l4"], 0.0),
    ];
    for (p, g, want) in cases {
        let got = macro_f1(p, g);
        assert!(close(got, want), "{p:?} vs {g:?}: {got}");
    }
}

#[test]
fn rating_fixtures() {
    // (pred, gold, MAE, MSE)
    let cases: [(&[&str], &[u8], f64, f64); 5] = [
        (&["1", "2"], &[1, 4], 1.0, 2.0),
        (&["3", "3", "3"], &[1, 3, 5], 4.0 / 3.0, 8.0 / 3.0),
        (&["5", "4", "2", "1"], &[4, 4, 4, 4], 3.0 / 2.0, 7.0 / 2.0),
        (&["2"], &[5], 3.0, 9.0),
        (&["1", "5", "2", "4", "3"], &[2, 5, 2, 1, 3], 4.0 / 5.0, 2.0),
    ];
    for (p, g, want_mae, want_mse) in cases {
        assert!(close(mae(p, g), want_mae), "mae {p:?}: {}", mae(p, g));
        assert!(close(rmse(p, g), want_mse.sqrt()), "rmse {p:?}: {}", rmse(p, g));
    }
}

#[test]
fn rating_parsing() {
    assert_eq!(parse_rating("4"), Some(4));
    assert_eq!(parse_rating("rated 9 stars"), Some(5));
    assert_eq!(parse_rating("0"), Some(1));
    assert_eq!(parse_rating("none"), None);
    assert_eq!(mae(&["none"], &[2]), UNPARSEABLE_RATING_ERROR);
}

#[test]
fn metric_report_fields_follow_task() {
    let c = MetricReport::classification(&["a", "b"], &["a", "a"]);
    assert_eq!(c.accuracy, Some(0.5));
    assert!(c.mae.is_none() && c.rouge_1.is_none());
    let r = MetricReport::rating(&["1", "2"], &["1", "4"]);
    assert_eq!(r.mae, Some(1.0));
    assert_eq!(r.primary(), -1.0);
    let g = MetricReport::generation(&["the cat sat"], &["the cat ran"]);
    assert!(close(g.primary(), 2.0 / 3.0));
}

#[test]
fn bm25_three_document_fixture() {
    let docs = ["red apple pie", "green apple", "red red wine and cheese"];
    let bm = Bm25::new(&docs);
    let want = [0.9801023548252308, 0.561960861054684, 0.5665797174469143];
    for (i, w) in want.iter().enumerate() {
        assert!(close(bm.score("red apple", i), *w), "doc {i}: {}", bm.score("red apple", i));
    }
    assert!(close(bm.idf("red"), 0.47000362924573563));
    assert!(close(bm.idf("zzz"), 2.0794415416798357));
    assert_eq!(bm.top("red apple", 2), vec![0, 2]);
    assert_eq!(lexical_retrieve("red apple", &docs, 0), Vec::<usize>::new());
    assert_eq!(lexical_retrieve("nothing", &docs, 3), vec![0, 1, 2]);
}

fn feature_index(spec: &TaskSpec, input: &str) -> Vec<usize> {
    let words = spec.feature_words();
    input
        .split_whitespace()
        .map(|w| words.iter().position(|f| *f == w).expect("feature word"))
        .collect()
}

#[test]
fn noiseless_outputs_follow_the_prototype() {
    for kind in TaskKind::ALL {
        let spec = TaskSpec {
            kind,
            noise: 0.0,
            ..TaskSpec::default()
        };
        let data = generate_corpus(&spec, &SplitCounts { base: 8, sharer_candidates: 8, targets: 4 }, 3).unwrap();
        for u in &data.corpus.users {
            let proto = &data.prototypes[u.prototype.unwrap()];
            for it in u.items.iter().filter(|i| i.kind == ItemKind::Task) {
                let x = feature_index(&spec, &it.input);
                assert_eq!(it.output.as_deref(), Some(proto.respond(&spec, &x).as_str()));
            }
            for q in &u.queries {
                assert_eq!(q.target, proto.respond(&spec, &feature_index(&spec, &q.input)));
            }
        }
    }
}

#[test]
fn corpus_shape_and_splits() {
    let spec = TaskSpec::default();
    let counts = SplitCounts::default();
    let data = generate_corpus(&spec, &counts, 0).unwrap();
    let s = &data.split;
    assert_eq!((s.base.len(), s.sharer_candidates.len(), s.targets.len()), (80, 60, 20));
    let all: BTreeSet<u32> = s.base.iter().chain(&s.sharer_candidates).chain(&s.targets).copied().collect();
    assert_eq!(all.len(), 160);
    for ids in [&s.base, &s.sharer_candidates, &s.targets] {
        let mut per = vec![0usize; spec.prototypes];
        for &id in ids {
            per[data.corpus.user(id).unwrap().prototype.unwrap()] += 1;
        }
        assert_eq!(per.iter().max().unwrap() - per.iter().min().unwrap(), 0, "{per:?}");
    }
    for u in &data.corpus.users {
        assert!((spec.min_history..=spec.max_history).contains(&u.items.len()));
        assert_eq!(u.queries.len(), spec.queries_per_user);
        let seen: BTreeSet<Vec<usize>> = u
            .items
            .iter()
            .filter(|i| i.kind == ItemKind::Task)
            .map(|i| {
                let mut x = feature_index(&spec, &i.input);
                x.sort_unstable();
                x
            })
            .collect();
        for q in &u.queries {
            let mut x = feature_index(&spec, &q.input);
            x.sort_unstable();
            assert!(!seen.contains(&x), "user {} query repeats history", u.user_id);
        }
        for it in &u.items {
            for w in it.text().split_whitespace() {
                assert!(data.vocab.id(w).is_some(), "{w} not in vocab");
            }
        }
    }
}

#[test]
fn generation_is_seed_deterministic() {
    let spec = TaskSpec::default();
    let counts = SplitCounts { base: 4, sharer_candidates: 4, targets: 4 };
    let a = generate_corpus(&spec, &counts, 9).unwrap();
    let b = generate_corpus(&spec, &counts, 9).unwrap();
    let c = generate_corpus(&spec, &counts, 10).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.corpus.users, c.corpus.users);
}

#[test]
fn invalid_task_specs_rejected() {
    for spec in [
        TaskSpec { noise: 0.6, ..TaskSpec::default() },
        TaskSpec { min_history: 10, max_history: 5, ..TaskSpec::default() },
        TaskSpec { prototypes: 0, ..TaskSpec::default() },
        TaskSpec { input_len: 1, ..TaskSpec::default() },
    ] {
        assert!(spec.validate().is_err(), "{spec:?}");
    }
}

#[test]
fn activity_buckets() {
    let edges = [20, 30, 40];
    assert_eq!(bucket_of(&edges, 12), 0);
    assert_eq!(bucket_of(&edges, 19), 0);
    assert_eq!(bucket_of(&edges, 20), 1);
    assert_eq!(bucket_of(&edges, 39), 2);
    assert_eq!(bucket_of(&edges, 48), 3);
    assert_eq!(bucket_labels(&edges, 12, 48), vec!["12-19", "20-29", "30-39", "40-48"]);
}

#[test]
fn csv_is_deterministic() {
    let row = |m: &str, acc: f64| ResultRow {
        sweep: "matrix".into(),
        point: "-".into(),
        task: "classification".into(),
        method: m.into(),
        metrics: MetricReport {
            count: 4,
            accuracy: Some(acc),
            macro_f1: Some(0.5),
            ..MetricReport::default()
        },
    };
    let rows = vec![row("retrieval", 0.75), row("per-pcs", 1.0 / 3.0)];
    let a = to_csv(&rows);
    assert_eq!(a, to_csv(&rows));
    let mut lines = a.lines();
    assert_eq!(lines.next(), Some(CSV_HEADER));
    assert!(lines.next().unwrap().starts_with("matrix,-,classification,retrieval,4,0.750000,0.500000,"));
}

#[test]
fn seed_mixing_separates_tags() {
    assert_eq!(mix_seed(1, 2), mix_seed(1, 2));
    assert_ne!(mix_seed(1, 2), mix_seed(1, 3));
    assert_ne!(mix_seed(1, 2), mix_seed(2, 2));
}
