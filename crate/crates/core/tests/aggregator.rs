use pcnn::aggregator::{attend, attend_features, classify, select_topk, AblationFlags, AggParams, Ffn};
use pcnn::corpus::{Article, SentRef};
use pcnn::encoder::EncoderConfig;
use pcnn::linalg::Matrix;
use pcnn::pcl::PairScore;
use pcnn::{Error, Model, ModelConfig};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_vec(rows, cols, random_vec(rng, rows * cols))
}

fn score(prob: f64, a: (usize, usize), b: (usize, usize), features: Vec<f64>) -> PairScore {
    PairScore {
        pair: (SentRef { para: a.0, idx: a.1 }, SentRef { para: b.0, idx: b.1 }),
        features,
        prob,
    }
}

fn random_scores(rng: &mut ChaCha8Rng, n: usize, coarse: bool) -> Vec<PairScore> {
    (0..n)
        .map(|i| {
            let p = if coarse {
                f64::from(rng.gen_range(0..5u8)) / 4.0
            } else {
                rng.gen_range(0.0..1.0)
            };
            score(p, (i % 3, i), (i % 3, i + 1 + rng.gen_range(0..4)), Vec::new())
        })
        .collect()
}

/// Full sort by (prob desc, pair asc), then truncate.
fn sort_oracle(scores: &[PairScore], k: usize) -> Vec<PairScore> {
    let mut v = scores.to_vec();
    v.sort_by(|a, b| b.prob.partial_cmp(&a.prob).unwrap().then(a.pair.cmp(&b.pair)));
    v.truncate(k);
    v
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn matvec(m: &Matrix, x: &[f64]) -> Vec<f64> {
    (0..m.rows())
        .map(|r| (0..m.cols()).map(|c| m.get(r, c) * x[c]).sum())
        .collect()
}

/// Straight-line attention pooling.
fn attend_oracle(feats: &[Vec<f64>], p: &AggParams) -> Vec<f64> {
    let e: Vec<f64> = feats
        .iter()
        .map(|c| dot(&matvec(&p.w_q, c), &matvec(&p.w_k, c)))
        .collect();
    let m = e.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = e.iter().map(|x| (x - m).exp()).sum();
    let mut out = vec![0.0; p.w_s.rows()];
    for (c, ek) in feats.iter().zip(&e) {
        let alpha = (ek - m).exp() / z;
        for (o, v) in out.iter_mut().zip(matvec(&p.w_s, c)) {
            *o += alpha * v / feats.len() as f64;
        }
    }
    out
}

fn random_agg(rng: &mut ChaCha8Rng, f: usize, d_a: usize, h: usize) -> AggParams {
    AggParams {
        w_q: random_matrix(rng, d_a, f),
        w_k: random_matrix(rng, d_a, f),
        w_s: random_matrix(rng, d_a, f),
        ffn: Ffn {
            w1: random_matrix(rng, h, d_a),
            b1: random_matrix(rng, h, 1),
            w2: random_matrix(rng, 1, h),
            b2: random_matrix(rng, 1, 1),
        },
    }
}

fn zero_agg(f: usize, d_a: usize, h: usize) -> AggParams {
    AggParams {
        w_q: Matrix::zeros(d_a, f),
        w_k: Matrix::zeros(d_a, f),
        w_s: Matrix::zeros(d_a, f),
        ffn: Ffn::zeros(d_a, h),
    }
}

fn small_config() -> ModelConfig {
    ModelConfig {
        d_t: 4,
        d_a: 4,
        hidden: 5,
        k: 10,
        ..ModelConfig::default()
    }
}

fn small_model(seed: u64) -> Model {
    Model::toy(small_config(), EncoderConfig::toy(8, 0), seed).unwrap()
}

fn zero_model() -> Model {
    let mut m = small_model(0);
    for t in m.tensors_mut() {
        t.data_mut().fill(0.0);
    }
    m
}

fn two_by_two() -> Article {
    Article::new(
        1,
        1,
        "t",
        1,
        vec![
            vec!["Ada was born in Lakewood.".into(), "Ada was born in Renton.".into()],
            vec!["The town has a mill.".into(), "The river is long.".into()],
        ],
    )
    .unwrap()
}

#[test]
fn topk_examples() {
    let s = vec![
        score(0.9, (0, 0), (0, 1), vec![]),
        score(0.1, (0, 0), (0, 2), vec![]),
        score(0.7, (0, 1), (0, 2), vec![]),
    ];
    let top = select_topk(&s, 2).unwrap();
    assert_eq!(top.iter().map(|p| p.prob).collect::<Vec<_>>(), vec![0.9, 0.7]);
    assert_eq!(select_topk(&s, 10).unwrap().len(), 3);
    assert!(matches!(select_topk(&s, 0), Err(Error::InvalidK)));
}

#[test]
fn topk_matches_sort_oracle_on_1000_scores() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let s = random_scores(&mut rng, 1000, false);
    assert_eq!(select_topk(&s, 10).unwrap(), sort_oracle(&s, 10));
}

#[test]
fn attend_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let p = random_agg(&mut rng, 6, 3, 2);
    let c = random_vec(&mut rng, 6);
    let t = attend_features(&[&c], &p).unwrap();
    assert_eq!(t.alpha, vec![1.0]);
    assert_eq!(t.output, p.w_s.matvec(&c));

    let t = attend_features(&[&c, &c], &p).unwrap();
    assert_eq!(t.alpha, vec![0.5, 0.5]);

    assert!(matches!(attend(&[], &p), Err(Error::EmptyTopK(_))));
}

#[test]
fn attend_matches_recomputation_at_k4() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let p = random_agg(&mut rng, 6, 3, 2);
        let feats: Vec<Vec<f64>> = (0..4).map(|_| random_vec(&mut rng, 6)).collect();
        let scores: Vec<PairScore> = feats
            .iter()
            .enumerate()
            .map(|(i, f)| score(0.5, (0, i), (0, i + 1), f.clone()))
            .collect();
        let a = attend(&scores, &p).unwrap();
        for (x, y) in a.iter().zip(attend_oracle(&feats, &p)) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn classify_examples() {
    let p = zero_agg(3, 4, 3);
    let pred = classify(&[0.4, -1.0, 2.0, 7.0], &p, 0.5).unwrap();
    assert_eq!(pred.prob, 0.5);
    assert_eq!(pred.label, 1);
    assert!(pred.explanation.is_empty());
    assert!(matches!(classify(&[1.0; 3], &p, 0.5), Err(Error::DimensionMismatch { .. })));
}

#[test]
fn classify_matches_recomputation() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..20 {
        let p = random_agg(&mut rng, 2, 4, 3);
        let a = random_vec(&mut rng, 4);
        let hidden: Vec<f64> = matvec(&p.ffn.w1, &a)
            .iter()
            .enumerate()
            .map(|(r, z)| (z + p.ffn.b1.get(r, 0)).max(0.0))
            .collect();
        let logit = dot(&hidden, p.ffn.w2.data()) + p.ffn.b2.get(0, 0);
        let want = 1.0 / (1.0 + (-logit).exp());
        let pred = classify(&a, &p, 0.5).unwrap();
        assert!((pred.prob - want).abs() < 1e-12);
        assert_eq!(pred.label, u8::from(want >= 0.5));
    }
}

#[test]
fn one_sentence_article_has_empty_explanation() {
    let art = Article::new(2, 1, "t", 0, vec![vec!["Only one sentence here.".into()]]).unwrap();
    let m = small_model(1);
    let pred = m.predict(&art).unwrap();
    assert!(pred.explanation.is_empty());
    let zero_input = vec![0.0; m.config.d_a];
    let fallback = classify(&zero_input, &m.agg, 0.5).unwrap();
    assert_eq!(pred.prob, fallback.prob);
}

#[test]
fn zero_model_predicts_half() {
    let m = zero_model();
    for art in [two_by_two(), Article::new(3, 1, "t", 0, vec![vec!["Alone.".into()]]).unwrap()] {
        let pred = m.predict(&art).unwrap();
        assert_eq!(pred.prob, 0.5);
        assert_eq!(pred.label, 1);
    }
}

#[test]
fn paragraph_ablation_scores_all_pairs() {
    let m = small_model(2);
    assert_eq!(m.forward(&two_by_two()).unwrap().scores.len(), 2);
    let flat = m
        .with_ablation(
            AblationFlags {
                no_paragraph: true,
                ..AblationFlags::default()
            },
            2,
        )
        .unwrap();
    assert_eq!(flat.forward(&two_by_two()).unwrap().scores.len(), 6);
}

#[test]
fn no_pcl_selects_first_pairs_by_identifier() {
    let cfg = ModelConfig {
        k: 2,
        ..small_config()
    };
    let m = Model::toy(cfg, EncoderConfig::toy(8, 0), 3)
        .unwrap()
        .with_ablation(
            AblationFlags {
                no_pcl: true,
                no_paragraph: true,
                ..AblationFlags::default()
            },
            3,
        )
        .unwrap();
    let pass = m.forward(&two_by_two()).unwrap();
    assert!(pass.scores.iter().all(|s| s.prob == 0.5));
    assert_eq!(pass.selected, vec![0, 1]);
    assert_eq!(pass.scores[0].features.len(), 2 * m.config.d_t);
}

#[test]
fn no_sa_pads_unused_slots() {
    let art = Article::new(
        4,
        1,
        "t",
        0,
        vec![vec!["One fact.".into(), "Two facts.".into(), "Three facts.".into()]],
    )
    .unwrap();
    let m = small_model(4)
        .with_ablation(
            AblationFlags {
                no_sa: true,
                ..AblationFlags::default()
            },
            4,
        )
        .unwrap();
    let pass = m.forward(&art).unwrap();
    let f = m.config.feature_dim();
    let x = pass.classifier_input();
    assert_eq!(pass.selected.len(), 3);
    assert_eq!(x.len(), 10 * f);
    assert!(x[3 * f..].iter().all(|&v| v == 0.0));
    assert!(x[..3 * f].iter().any(|&v| v != 0.0));
}

#[test]
fn conflicting_ablation_rejected() {
    let flags = AblationFlags {
        no_sa: true,
        no_top_pair: true,
        ..AblationFlags::default()
    };
    assert!(matches!(small_model(0).with_ablation(flags, 0), Err(Error::AblationConflict(_))));
}

/// Central differences over every parameter of the full model on a
/// 2-paragraph article, skipping entries whose perturbation changes the
/// selected set or crosses a ReLU kink.
#[test]
fn end_to_end_gradient_matches_finite_differences() {
    let cfg = ModelConfig {
        d_t: 3,
        d_a: 3,
        hidden: 4,
        k: 2,
        ..ModelConfig::default()
    };
    let art = Article::new(
        5,
        1,
        "t",
        1,
        vec![
            vec!["Ada was born in Lakewood.".into(), "Ada was born in Renton.".into(), "The mill is old.".into()],
            vec!["The river is long.".into(), "The town is small.".into()],
        ],
    )
    .unwrap();
    let h = 1e-6;
    for seed in 0..4 {
        let model = Model::toy(cfg.clone(), EncoderConfig::toy(6, 1), seed).unwrap();
        let base = model.forward(&art).unwrap();
        let (_, grads) = model.loss_and_grad(&art).unwrap();
        let analytic: Vec<Vec<f64>> = grads.tensors().iter().map(|m| m.data().to_vec()).collect();
        let mut checked = 0;
        for (t, g) in analytic.iter().enumerate() {
            for i in 0..g.len() {
                let nudge = |delta: f64| {
                    let mut m = model.clone();
                    m.tensors_mut()[t].data_mut()[i] += delta;
                    m
                };
                let (plus, minus) = (nudge(h), nudge(-h));
                let (pp, pm) = (plus.forward(&art).unwrap(), minus.forward(&art).unwrap());
                let kink = |p: &pcnn::model::ArticlePass| {
                    p.hidden_pre.iter().zip(&base.hidden_pre).any(|(a, b)| (a > &0.0) != (b > &0.0))
                };
                if pp.selected != base.selected || pm.selected != base.selected || kink(&pp) || kink(&pm) {
                    continue;
                }
                let fd = (pcnn::model::bce(pp.logit, 1) - pcnn::model::bce(pm.logit, 1)) / (2.0 * h);
                let rel = (g[i] - fd).abs() / g[i].abs().max(fd.abs()).max(1e-6);
                assert!(rel < 1e-4, "seed {seed} tensor {} entry {i}: {} vs {fd}", Model::TENSOR_NAMES[t], g[i]);
                checked += 1;
            }
        }
        assert!(checked > 100);
        // Hard selection: the pair classifier receives no gradient.
        assert!(grads.pcl.w_r.data().iter().all(|&x| x == 0.0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn topk_equals_sort_oracle(seed in any::<u64>(), n in 0usize..60, k in 1usize..15) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = random_scores(&mut rng, n, true);
        prop_assert_eq!(select_topk(&s, k).unwrap(), sort_oracle(&s, k));
    }

    #[test]
    fn attention_sums_to_one_and_is_permutation_invariant(seed in any::<u64>(), k in 1usize..8, scale in 0.1f64..5.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = random_agg(&mut rng, 5, 3, 2);
        for t in [&mut p.w_q, &mut p.w_k] {
            for x in t.data_mut() {
                *x *= scale;
            }
        }
        let mut feats: Vec<Vec<f64>> = (0..k).map(|_| random_vec(&mut rng, 5)).collect();
        let refs: Vec<&[f64]> = feats.iter().map(Vec::as_slice).collect();
        let t = attend_features(&refs, &p).unwrap();
        prop_assert!((t.alpha.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        feats.shuffle(&mut rng);
        let refs: Vec<&[f64]> = feats.iter().map(Vec::as_slice).collect();
        let u = attend_features(&refs, &p).unwrap();
        for (a, b) in t.output.iter().zip(&u.output) {
            prop_assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn explanation_is_sorted_and_label_follows_threshold(seed in 0u64..1000, sizes in prop::collection::vec(1usize..5, 1..4)) {
        let paras: Vec<Vec<String>> = sizes
            .iter()
            .enumerate()
            .map(|(p, &n)| (0..n).map(|i| format!("Entity {p} fact number {i} is {}.", (seed + i as u64) % 7)).collect())
            .collect();
        let art = Article::new(1, 1, "t", 0, paras).unwrap();
        let pred = small_model(seed).predict(&art).unwrap();
        prop_assert!(pred.explanation.windows(2).all(|w| w[0].prob >= w[1].prob));
        prop_assert!(pred.explanation.iter().all(|s| s.pair.0 < s.pair.1));
        prop_assert!((0.0..=1.0).contains(&pred.prob));
        prop_assert_eq!(pred.label == 1, pred.prob >= 0.5);
    }
}
