use std::path::PathBuf;

use pcnn::corpus::{write_corpus, Article};
use pcnn::pcl::{enumerate_pairs, PairScope};
use pcnn::synthgen::{
    conflicting_pairs, default_templates, generate, generate_nli, load_planted, scan_facts, write_planted, SynthSpec,
};
use proptest::prelude::*;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn corpus_bytes(articles: &[Article]) -> Vec<u8> {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.jsonl");
    write_corpus(&p, articles).unwrap();
    std::fs::read(p).unwrap()
}

#[test]
fn two_positive_articles_have_planted_pairs() {
    let c = generate(&SynthSpec {
        n_articles: 2,
        pos_fraction: 1.0,
        ..SynthSpec::default()
    })
    .unwrap();
    assert_eq!(c.articles.len(), 2);
    for a in &c.articles {
        assert_eq!(a.label, 1);
        assert!(c.planted_for(a).is_some());
    }
}

#[test]
fn zero_positive_fraction_has_no_plants() {
    let c = generate(&SynthSpec {
        n_articles: 30,
        pos_fraction: 0.0,
        ..SynthSpec::default()
    })
    .unwrap();
    assert!(c.planted.is_empty());
    assert!(c.articles.iter().all(|a| a.label == 0));
}

#[test]
fn generation_is_byte_deterministic() {
    let spec = SynthSpec {
        n_articles: 200,
        seed: 11,
        ..SynthSpec::default()
    };
    let (a, b) = (generate(&spec).unwrap(), generate(&spec).unwrap());
    assert_eq!(corpus_bytes(&a.articles), corpus_bytes(&b.articles));
    assert_eq!(a.planted, b.planted);
    let other = generate(&SynthSpec { seed: 12, ..spec }).unwrap();
    assert_ne!(corpus_bytes(&a.articles), corpus_bytes(&other.articles));
}

#[test]
fn committed_fixture_regenerates() {
    let spec = SynthSpec {
        n_articles: 200,
        seed: pcnn::seed::derive(7, "synth"),
        ..SynthSpec::default()
    };
    let c = generate(&spec).unwrap();
    assert_eq!(corpus_bytes(&c.articles), std::fs::read(fixture("synthetic_corpus.jsonl")).unwrap());
    assert_eq!(load_planted(fixture("synthetic_planted.jsonl")).unwrap(), c.planted);
}

#[test]
fn planted_sidecar_roundtrips() {
    let c = generate(&SynthSpec {
        n_articles: 40,
        seed: 2,
        ..SynthSpec::default()
    })
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("planted.jsonl");
    write_planted(&p, &c).unwrap();
    assert_eq!(load_planted(&p).unwrap(), c.planted);
    assert_eq!(std::fs::read_to_string(&p).unwrap().lines().count(), 40);
}

#[test]
fn nli_examples() {
    let spec = SynthSpec::default();
    let nli = generate_nli(&spec, 1000).unwrap();
    assert_eq!(nli.len(), 1000);
    assert_eq!(nli.iter().filter(|e| e.label == 1).count(), 500);
    let mut seen = [false; 2];
    for e in &nli {
        for t in &spec.templates {
            if let (Some((ea, va)), Some((eb, vb))) = (t.parse(&e.premise), t.parse(&e.hypothesis)) {
                if ea == eb {
                    let label = u8::from(va != vb);
                    assert_eq!(e.label, label, "{e:?}");
                    seen[usize::from(label)] = true;
                }
            }
        }
    }
    assert_eq!(seen, [true, true]);
    assert_eq!(generate_nli(&spec, 7).unwrap(), generate_nli(&spec, 7).unwrap());
}

#[test]
fn invalid_specs_rejected() {
    let bad = [
        SynthSpec {
            pos_fraction: 1.5,
            ..SynthSpec::default()
        },
        SynthSpec {
            sentences_per_paragraph: (4, 2),
            ..SynthSpec::default()
        },
        SynthSpec {
            paragraphs_per_article: (1, 1),
            cross_paragraph: true,
            ..SynthSpec::default()
        },
        SynthSpec {
            templates: default_templates().into_iter().take(1).collect(),
            ..SynthSpec::default()
        },
    ];
    for spec in bad {
        assert!(generate(&spec).is_err(), "{spec:?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// Exhaustive fact scan: negatives hold no conflicting pair, positives
    /// hold exactly the planted one, reachable under the configured scope.
    #[test]
    fn labels_are_sound_and_plants_reachable(seed in any::<u64>(), cross in any::<bool>(), pos in 0.0f64..=1.0) {
        let spec = SynthSpec {
            n_articles: 30,
            pos_fraction: pos,
            seed,
            cross_paragraph: cross,
            ..SynthSpec::default()
        };
        let c = generate(&spec).unwrap();
        prop_assert_eq!(c.articles.len(), 30);
        for a in &c.articles {
            let conflicts = conflicting_pairs(&spec.templates, a);
            prop_assert!(!scan_facts(&spec.templates, a).is_empty());
            if a.label == 0 {
                prop_assert!(conflicts.is_empty());
                prop_assert!(c.planted_for(a).is_none());
            } else {
                let planted = c.planted_for(a).unwrap();
                prop_assert_eq!(&conflicts, &vec![planted]);
                prop_assert_eq!(planted.0.para != planted.1.para, cross);
                let scope = if cross { PairScope::Article } else { PairScope::Paragraph };
                prop_assert!(enumerate_pairs(a, scope).iter().any(|(x, y)| (x.sent_ref(), y.sent_ref()) == planted));
            }
        }
    }
}
