use pcnn::corpus::{Article, NliExample, SentRef};
use pcnn::encoder::{Encoder, EncoderConfig, SentenceEmbedding};
use pcnn::linalg::Matrix;
use pcnn::pcl::{
    class_probs, contradiction_prob, enumerate_pairs, nli_accuracy, pair_features, pair_loss_and_grad, pretrain,
    pretrain_with, PairScope, PclParams, PretrainOptions,
};
use pcnn::synthgen::{generate_nli, SynthSpec};
use pcnn::trainer::Hyperparams;
use pcnn::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn emb(v: Vec<f64>) -> SentenceEmbedding {
    SentenceEmbedding {
        vector: v,
        sent_ref: SentRef { para: 0, idx: 0 },
    }
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_vec(rows, cols, random_vec(rng, rows * cols))
}

fn article(sizes: &[usize]) -> Article {
    let paras = sizes
        .iter()
        .map(|&n| (0..n).map(|i| format!("Sentence {i}.")).collect())
        .collect();
    Article::new(1, 1, "t", 0, paras).unwrap()
}

/// Straight-line `(W s_i ‖ W s_j ‖ |W s_i − W s_j|)`.
fn oracle_features(w: &Matrix, a: &[f64], b: &[f64]) -> Vec<f64> {
    let mul = |s: &[f64]| -> Vec<f64> {
        (0..w.rows())
            .map(|r| (0..w.cols()).map(|c| w.get(r, c) * s[c]).sum())
            .collect()
    };
    let (ta, tb) = (mul(a), mul(b));
    let mut out = ta.clone();
    out.extend(&tb);
    out.extend(ta.iter().zip(&tb).map(|(x, y)| (x - y).abs()));
    out
}

#[test]
fn identity_transform_example() {
    let p = PclParams {
        w_t: Matrix::identity(2),
        w_r: Matrix::zeros(2, 6),
    };
    let c = pair_features(&emb(vec![1.0, 0.0]), &emb(vec![0.0, 1.0]), &p).unwrap();
    assert_eq!(c, vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
}

#[test]
fn features_match_recomputation_at_d_t_8() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let p = PclParams {
            w_t: random_matrix(&mut rng, 8, 5),
            w_r: Matrix::zeros(2, 24),
        };
        let (a, b) = (random_vec(&mut rng, 5), random_vec(&mut rng, 5));
        let c = pair_features(&emb(a.clone()), &emb(b.clone()), &p).unwrap();
        let want = oracle_features(&p.w_t, &a, &b);
        assert_eq!(c.len(), 24);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn pair_feature_dimension_mismatch() {
    let p = PclParams::zeros(3, 2);
    assert!(matches!(
        pair_features(&emb(vec![1.0; 3]), &emb(vec![1.0; 4]), &p),
        Err(Error::DimensionMismatch { expected: 3, actual: 4 })
    ));
}

#[test]
fn contradiction_prob_examples() {
    let p = PclParams::zeros(2, 2);
    assert_eq!(contradiction_prob(&[0.3, -1.0, 2.0, 0.0, 5.0, 1.0], &p).unwrap(), 0.5);

    // Equal logits for both classes.
    let p = PclParams {
        w_t: Matrix::zeros(1, 1),
        w_r: Matrix::from_rows(&[vec![3.0, 0.0, 0.0], vec![3.0, 0.0, 0.0]]),
    };
    assert!((contradiction_prob(&[1.7, 0.0, 0.0], &p).unwrap() - 0.5).abs() < 1e-15);

    // Contradiction logit 2, other logit 0.
    let p = PclParams {
        w_t: Matrix::zeros(1, 1),
        w_r: Matrix::from_rows(&[vec![0.0, 0.0, 0.0], vec![2.0, 0.0, 0.0]]),
    };
    let want = 1.0 / (1.0 + (-2.0f64).exp());
    assert!((contradiction_prob(&[1.0, 0.0, 0.0], &p).unwrap() - want).abs() < 1e-12);
    assert!((want - 0.8808).abs() < 1e-4);
}

#[test]
fn enumeration_examples() {
    assert_eq!(enumerate_pairs(&article(&[4]), PairScope::Paragraph).len(), 6);
    assert_eq!(enumerate_pairs(&article(&[3, 2]), PairScope::Paragraph).len(), 4);
    assert_eq!(enumerate_pairs(&article(&[3, 2]), PairScope::Article).len(), 10);
    assert!(enumerate_pairs(&article(&[1, 1, 1]), PairScope::Paragraph).is_empty());
    let a = article(&[3, 2]);
    let pairs = enumerate_pairs(&a, PairScope::Paragraph);
    assert!(pairs.iter().all(|(a, b)| a.para_idx == b.para_idx && a.sent_id < b.sent_id));
}

/// Central-difference check of every weight, relative error with an
/// absolute floor for entries whose gradient is essentially zero.
#[test]
fn pair_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let h = 1e-6;
    for draw in 0..20 {
        let params = PclParams {
            w_t: random_matrix(&mut rng, 3, 4),
            w_r: random_matrix(&mut rng, 2, 9),
        };
        let (a, b) = (random_vec(&mut rng, 4), random_vec(&mut rng, 4));
        let label = (draw % 2) as u8;
        let (_, grad) = pair_loss_and_grad(&params, &a, &b, label);
        for t in 0..2 {
            let n = params.tensors()[t].data().len();
            for i in 0..n {
                let nudge = |delta: f64| {
                    let mut p = params.clone();
                    let m = if t == 0 { &mut p.w_t } else { &mut p.w_r };
                    m.data_mut()[i] += delta;
                    p
                };
                let (plus, minus) = (nudge(h), nudge(-h));
                let fd = (pair_loss_and_grad(&plus, &a, &b, label).0 - pair_loss_and_grad(&minus, &a, &b, label).0)
                    / (2.0 * h);
                let an = grad.tensors()[t].data()[i];
                let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-6);
                assert!(rel < 1e-4, "draw {draw} tensor {t} entry {i}: analytic {an} numeric {fd}");
            }
        }
    }
}

fn separable_pair() -> Vec<NliExample> {
    vec![
        NliExample {
            premise: "Ada was born in Lakewood.".into(),
            hypothesis: "Ada was born in Renton.".into(),
            label: 1,
        },
        NliExample {
            premise: "The river is long.".into(),
            hypothesis: "The river is long.".into(),
            label: 0,
        },
    ]
}

#[test]
fn two_separable_examples_fit_in_200_steps() {
    let enc = Encoder::new(EncoderConfig::toy(16, 0)).unwrap();
    let mut rng = pcnn::seed::rng(1);
    let init = PclParams::new(16, 8, &mut rng);
    let hp = Hyperparams {
        batch_size: 1,
        epochs: 100,
        learning_rate: 1e-2,
        warmup_fraction: 0.0,
        seed: 3,
    };
    let (params, report) = pretrain_with(&separable_pair(), &enc, init, &hp, PretrainOptions::default()).unwrap();
    assert_eq!(report.steps, 200);
    assert_eq!(nli_accuracy(&params, &enc, &separable_pair()).unwrap(), 1.0);
}

#[test]
fn frozen_zero_classifier_stays_at_ln2() {
    let enc = Encoder::new(EncoderConfig::toy(16, 0)).unwrap();
    let mut rng = pcnn::seed::rng(2);
    let init = PclParams {
        w_t: Matrix::glorot(8, 16, &mut rng),
        w_r: Matrix::zeros(2, 24),
    };
    let hp = Hyperparams {
        batch_size: 2,
        epochs: 5,
        learning_rate: 1e-2,
        ..Hyperparams::default()
    };
    let opts = PretrainOptions { freeze_classifier: true };
    let (params, report) = pretrain_with(&separable_pair(), &enc, init, &hp, opts).unwrap();
    assert!(params.w_r.data().iter().all(|&x| x == 0.0));
    for l in report.epoch_losses {
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
    }
}

#[test]
fn single_class_pretraining_rejected() {
    let enc = Encoder::new(EncoderConfig::toy(8, 0)).unwrap();
    let only_pos = vec![separable_pair()[0].clone()];
    let err = pretrain(&only_pos, &enc, PclParams::zeros(8, 4), &Hyperparams::default()).unwrap_err();
    assert!(matches!(err, Error::SingleClass(_)));
}

/// Plain logistic regression with full-batch gradient descent, fitted on the
/// pair features produced by the learned transform. An independent learner
/// on the same features must clear the same held-out threshold.
fn logistic_oracle(train: &[(Vec<f64>, u8)], test: &[(Vec<f64>, u8)]) -> f64 {
    let d = train[0].0.len();
    let mut w = vec![0.0; d];
    let mut b = 0.0;
    let sig = |z: f64| 1.0 / (1.0 + (-z).exp());
    for _ in 0..2000 {
        let mut gw = vec![0.0; d];
        let mut gb = 0.0;
        for (x, y) in train {
            let p = sig(w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + b);
            let g = p - f64::from(*y);
            for (gi, xi) in gw.iter_mut().zip(x) {
                *gi += g * xi;
            }
            gb += g;
        }
        let n = train.len() as f64;
        for (wi, gi) in w.iter_mut().zip(&gw) {
            *wi -= 2.0 * gi / n;
        }
        b -= 2.0 * gb / n;
    }
    let correct = test
        .iter()
        .filter(|(x, y)| {
            let z = w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + b;
            u8::from(z >= 0.0) == *y
        })
        .count();
    correct as f64 / test.len() as f64
}

#[test]
fn templated_contradictions_generalise() {
    let examples = generate_nli(&SynthSpec { seed: 9, ..SynthSpec::default() }, 1000).unwrap();
    let (train, test) = examples.split_at(800);
    let enc = Encoder::new(EncoderConfig::toy(64, 0)).unwrap();
    let mut rng = pcnn::seed::rng(4);
    let hp = Hyperparams {
        learning_rate: 1e-3,
        epochs: 20,
        seed: 4,
        ..Hyperparams::default()
    };
    let (params, report) = pretrain_with(train, &enc, PclParams::new(64, 32, &mut rng), &hp, PretrainOptions::default()).unwrap();
    let acc = nli_accuracy(&params, &enc, test).unwrap();
    assert!(acc >= 0.9, "held-out accuracy {acc}");
    assert!(report.epoch_losses.last().unwrap() <= report.epoch_losses.first().unwrap());
    assert!(report.epoch_losses.iter().all(|l| l.is_finite()));

    let feats = |xs: &[NliExample]| -> Vec<(Vec<f64>, u8)> {
        xs.iter()
            .map(|e| {
                let v = enc.encode_texts(&[e.premise.as_str(), e.hypothesis.as_str()]).unwrap();
                let mut v = v.into_iter().map(emb);
                let (a, b) = (v.next().unwrap(), v.next().unwrap());
                (pair_features(&a, &b, &params).unwrap(), e.label)
            })
            .collect()
    };
    let oracle = logistic_oracle(&feats(train), &feats(test));
    assert!(oracle >= 0.9, "logistic oracle accuracy {oracle}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn class_probs_normalised(seed in any::<u64>(), d_t in 1usize..6, scale in 0.01f64..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = PclParams {
            w_t: Matrix::zeros(d_t, 2),
            w_r: Matrix::from_vec(2, 3 * d_t, random_vec(&mut rng, 6 * d_t).iter().map(|x| x * scale).collect()),
        };
        let c = random_vec(&mut rng, 3 * d_t);
        let [a, b] = class_probs(&c, &p).unwrap();
        prop_assert!((a + b - 1.0).abs() < 1e-6);
        prop_assert!((0.0..=1.0).contains(&a) && (0.0..=1.0).contains(&b));
    }

    #[test]
    fn self_pair_has_zero_difference_block(seed in any::<u64>(), d_s in 2usize..10, d_t in 1usize..10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = PclParams::new(d_s, d_t, &mut rng);
        let s = emb(random_vec(&mut rng, d_s));
        let c = pair_features(&s, &s, &p).unwrap();
        prop_assert!(c[2 * d_t..].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn enumeration_counts(sizes in prop::collection::vec(1usize..7, 1..6)) {
        let a = article(&sizes);
        let choose2 = |n: usize| n * n.saturating_sub(1) / 2;
        prop_assert_eq!(enumerate_pairs(&a, PairScope::Paragraph).len(), sizes.iter().map(|&n| choose2(n)).sum::<usize>());
        prop_assert_eq!(enumerate_pairs(&a, PairScope::Article).len(), choose2(sizes.iter().sum()));
    }
}
