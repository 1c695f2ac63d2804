use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::*;
use crate::synthgen::vocab::{render_labels, END};

const A: [u32; 6] = [40, 41, 42, 43, 44, 45];
const B: [u32; 7] = [40, 41, 42, 50, 44, 45, 46];

#[test]
fn bleu_identity_and_disjoint() {
    for n in 1..=4 {
        assert_eq!(bleu(&A, &A, n), 1.0);
        assert_eq!(bleu(&A, &[60, 61, 62, 63], n), 0.0);
    }
    assert_eq!(bleu(&[], &A, 1), 0.0);
    // shorter than the order: smoothed higher orders are 1
    assert_eq!(bleu(&[40, 41], &[40, 41], 4), 1.0);
}

#[test]
fn bleu_fixed_pair_hand_computed() {
    // unigram 5/6; bigram (3+1)/(5+1); trigram (1+1)/(4+1); 4-gram (0+1)/(3+1)
    let bp = (1.0f64 - 7.0 / 6.0).exp();
    let p = [5.0 / 6.0, 4.0 / 6.0, 2.0 / 5.0, 1.0 / 4.0];
    for n in 1..=4 {
        let geo = p[..n].iter().product::<f64>().powf(1.0 / n as f64);
        assert!((bleu(&A, &B, n) - bp * geo).abs() < 1e-12, "n={n}");
    }
    let scores: Vec<f64> = (1..=4).map(|n| bleu(&A, &B, n)).collect();
    assert!(scores.windows(2).all(|w| w[1] <= w[0]));
    assert!((bleu(&A, &B, 4) - 0.410_959_912_335_015).abs() < 1e-12);
}

#[test]
fn bleu_ignores_control_and_trailing_tokens() {
    let mut cand = A.to_vec();
    cand.push(END);
    cand.extend([70, 71]);
    assert_eq!(bleu(&cand, &A, 4), 1.0);
}

#[test]
fn corpus_bleu_pools_counts() {
    let cands = vec![A.to_vec(), vec![60, 61]];
    let refs = vec![B.to_vec(), vec![60, 61]];
    // unigram 7/8, bigram (4+1)/(6+1), lengths 8 vs 9
    let expected = (1.0f64 - 9.0 / 8.0).exp() * (7.0 / 8.0 * 5.0 / 7.0f64).sqrt();
    assert!((corpus_bleu(&cands, &refs, 2) - expected).abs() < 1e-12);
}

/// Exhaustive LCS: longest subsequence of `a` that is also one of `b`.
fn brute_lcs(a: &[u32], b: &[u32]) -> usize {
    let is_sub = |s: &[u32]| {
        let mut it = b.iter();
        s.iter().all(|x| it.any(|y| y == x))
    };
    (0u32..1 << a.len())
        .filter_map(|mask| {
            let s: Vec<u32> = (0..a.len())
                .filter(|i| mask >> i & 1 == 1)
                .map(|i| a[i])
                .collect();
            is_sub(&s).then_some(s.len())
        })
        .max()
        .unwrap_or(0)
}

#[test]
fn lcs_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..300 {
        let la = rng.random_range(0..10);
        let lb = rng.random_range(0..10);
        let a: Vec<u32> = (0..la).map(|_| rng.random_range(40..44)).collect();
        let b: Vec<u32> = (0..lb).map(|_| rng.random_range(40..44)).collect();
        assert_eq!(lcs_len(&a, &b), brute_lcs(&a, &b), "{a:?} {b:?}");
    }
}

#[test]
fn rouge_examples() {
    assert_eq!(rouge_l(&A, &A), 1.0);
    assert_eq!(rouge_l(&A, &[60, 61]), 0.0);
    // LCS 5; P = 5/6, R = 5/7
    let (p, r) = (5.0 / 6.0, 5.0 / 7.0);
    let b2 = 1.44;
    let expected = (1.0 + b2) * p * r / (r + b2 * p);
    assert_eq!(brute_lcs(&A, &B), 5);
    assert!((rouge_l(&A, &B) - expected).abs() < 1e-12);
}

fn random_labels(rng: &mut ChaCha8Rng) -> LabelSet {
    (0..NUM_CONDITIONS as u8)
        .filter(|_| rng.random_bool(0.3))
        .collect()
}

#[test]
fn ce_round_trip_is_perfect() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let gold: Vec<LabelSet> = (0..50).map(|_| random_labels(&mut rng)).collect();
    let reports: Vec<Vec<u32>> = gold.iter().map(render_labels).collect();
    assert_eq!(
        ce_metrics(&reports, &gold, Averaging::Micro),
        (1.0, 1.0, 1.0)
    );
    let empty = vec![vec![]; 50];
    let (p, r, f) = ce_metrics(&empty, &gold, Averaging::Micro);
    assert_eq!((p, r, f), (0.0, 0.0, 0.0));
}

#[test]
fn ce_matches_label_counting() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let gold: Vec<LabelSet> = (0..200).map(|_| random_labels(&mut rng)).collect();
    let pred: Vec<LabelSet> = (0..200).map(|_| random_labels(&mut rng)).collect();
    let reports: Vec<Vec<u32>> = pred.iter().map(render_labels).collect();
    let tp: usize = pred
        .iter()
        .zip(&gold)
        .map(|(p, g)| p.intersection(g).count())
        .sum();
    let np: usize = pred.iter().map(|p| p.len()).sum();
    let ng: usize = gold.iter().map(|g| g.len()).sum();
    let (p, r, f) = ce_metrics(&reports, &gold, Averaging::Micro);
    let (ep, er) = (tp as f64 / np as f64, tp as f64 / ng as f64);
    assert!((p - ep).abs() < 1e-12 && (r - er).abs() < 1e-12);
    assert!((f - 2.0 * ep * er / (ep + er)).abs() < 1e-12);

    let mut mp = 0.0;
    let mut mr = 0.0;
    for j in 0..NUM_CONDITIONS as u8 {
        let t = pred
            .iter()
            .zip(&gold)
            .filter(|(p, g)| p.contains(&j) && g.contains(&j))
            .count();
        let pp = pred.iter().filter(|p| p.contains(&j)).count();
        let gg = gold.iter().filter(|g| g.contains(&j)).count();
        mp += t as f64 / pp.max(1) as f64;
        mr += t as f64 / gg.max(1) as f64;
    }
    let (p, r, _) = ce_metrics(&reports, &gold, Averaging::Macro);
    assert!((p - mp / 14.0).abs() < 1e-12 && (r - mr / 14.0).abs() < 1e-12);
}

fn gaussian_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..d).map(|_| StandardNormal.sample(rng)).collect())
        .collect()
}

#[test]
fn retrieval_identity_and_exhaustive_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = gaussian_rows(&mut rng, 30, 5);
    assert_eq!(retrieval_recall(&x, &x).unwrap(), 1.0);

    let img = vec![
        vec![1.0, 0.0],
        vec![0.0, 1.0],
        vec![1.0, 1.0],
        vec![-1.0, 0.2],
    ];
    let txt = vec![
        vec![0.9, 0.1],
        vec![1.0, 0.0],
        vec![0.2, 1.0],
        vec![-1.0, 0.0],
    ];
    // by hand: query 0 -> text 1 (cos 1), 1 -> text 2 (0.981), 2 -> text 2
    // (0.832 over 0.781), 3 -> text 3 (0.981)
    let expected_best = [1, 2, 2, 3];
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    for (i, q) in img.iter().enumerate() {
        let mut best = 0;
        let mut best_s = f64::NEG_INFINITY;
        for (j, t) in txt.iter().enumerate() {
            let s = (q[0] * t[0] + q[1] * t[1]) / (norm(q) * norm(t));
            if s > best_s {
                (best, best_s) = (j, s);
            }
        }
        assert_eq!(best, expected_best[i]);
    }
    assert_eq!(retrieval_recall(&img, &txt).unwrap(), 0.5);
    assert!(retrieval_recall(&img, &txt[..3]).is_err());
}

#[test]
fn retrieval_of_unrelated_features_is_chance() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (n, trials) = (50, 40);
    let mut total = 0.0;
    for _ in 0..trials {
        let a = gaussian_rows(&mut rng, n, 16);
        let b = gaussian_rows(&mut rng, n, 16);
        total += retrieval_recall(&a, &b).unwrap();
    }
    let mean = total / trials as f64;
    let p = 1.0 / n as f64;
    let sigma = (p * (1.0 - p) / (n * trials) as f64).sqrt();
    assert!((mean - p).abs() < 3.0 * sigma, "{mean}");
}

#[test]
fn pca_of_planar_data_is_a_rotation() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let rows: Vec<Vec<f64>> = (0..40)
        .map(|_| {
            let u: f64 = StandardNormal.sample(&mut rng);
            let v: f64 = StandardNormal.sample(&mut rng);
            vec![3.0 * u + 0.5 * v, u - v]
        })
        .collect();
    let p = pca_2d(&rows).unwrap();
    for i in 0..40 {
        for j in 0..40 {
            let d_in = (rows[i][0] - rows[j][0]).hypot(rows[i][1] - rows[j][1]);
            let d_out = (p.coords[i][0] - p.coords[j][0]).hypot(p.coords[i][1] - p.coords[j][1]);
            assert!((d_in - d_out).abs() < 1e-10);
        }
    }
    assert!(p.variances[0] >= p.variances[1]);
    for axis in &p.axes {
        let lead = axis
            .iter()
            .fold(0.0f64, |b, &x| if x.abs() > b.abs() { x } else { b });
        assert!(lead > 0.0);
    }
}

#[test]
fn pca_of_rank_one_data_has_flat_second_axis() {
    let rows: Vec<Vec<f64>> = (0..20)
        .map(|i| {
            let t = i as f64 * 0.37 - 2.0;
            vec![t, -2.0 * t, 0.5 * t, 3.0]
        })
        .collect();
    let p = pca_2d(&rows).unwrap();
    assert!(p.coords.iter().all(|c| c[1].abs() < 1e-9));
}

/// Cyclic Jacobi eigenvalues of a symmetric matrix.
fn jacobi_eigenvalues(mut a: Vec<Vec<f64>>) -> Vec<f64> {
    let n = a.len();
    for _ in 0..100 {
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
    ev.sort_by(|x, y| y.total_cmp(x));
    ev
}

#[test]
fn pca_reconstruction_error_matches_jacobi_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let rows = gaussian_rows(&mut rng, 5, 5);
    let p = pca_2d(&rows).unwrap();
    let n = rows.len() as f64;
    let mean: Vec<f64> = (0..5)
        .map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n)
        .collect();
    let cov: Vec<Vec<f64>> = (0..5)
        .map(|a| {
            (0..5)
                .map(|b| {
                    rows.iter()
                        .map(|r| (r[a] - mean[a]) * (r[b] - mean[b]))
                        .sum::<f64>()
                        / (n - 1.0)
                })
                .collect()
        })
        .collect();
    let ev = jacobi_eigenvalues(cov);
    assert!((p.variances[0] - ev[0]).abs() < 1e-10);
    assert!((p.variances[1] - ev[1]).abs() < 1e-10);
    // squared reconstruction error from two axes = (n - 1) * discarded eigenvalues
    let mut err = 0.0;
    for (r, c) in rows.iter().zip(&p.coords) {
        for j in 0..5 {
            let rec = mean[j] + c[0] * p.axes[0][j] + c[1] * p.axes[1][j];
            err += (r[j] - rec).powi(2);
        }
    }
    let expected = (n - 1.0) * ev[2..].iter().sum::<f64>();
    assert!((err - expected).abs() < 1e-10, "{err} vs {expected}");
}

#[test]
fn pca_rejects_degenerate_input() {
    assert!(pca_2d(&[vec![1.0, 2.0]]).is_err());
    assert!(pca_2d(&[vec![1.0], vec![2.0]]).is_err());
    assert!(pca_2d(&[vec![1.0, 2.0], vec![2.0]]).is_err());
}

#[test]
fn eval_report_fields_are_bounded() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let gold: Vec<LabelSet> = (0..30).map(|_| random_labels(&mut rng)).collect();
    let refs: Vec<Vec<u32>> = gold.iter().map(render_labels).collect();
    let gen: Vec<Vec<u32>> = (0..30)
        .map(|_| render_labels(&random_labels(&mut rng)))
        .collect();
    let r = evaluate_reports(&gen, &refs, &gold, Averaging::Micro).unwrap();
    assert_eq!(r.n_samples, 30);
    assert!(r.values()[..8].iter().all(|v| (0.0..=1.0).contains(v)));
    let perfect = evaluate_reports(&refs, &refs, &gold, Averaging::Micro).unwrap();
    assert_eq!(perfect.values()[..8], [1.0; 8]);
}

proptest! {
    #[test]
    fn f1_lies_between_precision_and_recall(p in 1e-6f64..1.0, r in 1e-6f64..1.0) {
        let f = f1(p, r);
        prop_assert!(f >= p.min(r) - 1e-15 && f <= p.max(r) + 1e-15);
    }

    #[test]
    fn bleu_and_rouge_of_self_are_one(toks in proptest::collection::vec(38u32..60, 1..20), n in 1usize..5) {
        prop_assert_eq!(bleu(&toks, &toks, n), 1.0);
        prop_assert_eq!(rouge_l(&toks, &toks), 1.0);
    }

    #[test]
    fn pca_is_translation_invariant(seed in 0u64..1000, shift in proptest::collection::vec(-50.0f64..50.0, 4)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = gaussian_rows(&mut rng, 12, 4);
        let moved: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().zip(&shift).map(|(x, s)| x + s).collect()).collect();
        let (a, b) = (pca_2d(&rows).unwrap(), pca_2d(&moved).unwrap());
        for (x, y) in a.coords.iter().zip(&b.coords) {
            prop_assert!((x[0] - y[0]).abs() < 1e-8 && (x[1] - y[1]).abs() < 1e-8);
        }
    }
}
