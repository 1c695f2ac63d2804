use super::*;
use crate::autodiff::{Graph, Tensor, EPS_NORM};

fn vec_var(g: &Graph, v: &[f64]) -> Var {
    g.constant(&[v.len()], v.to_vec()).unwrap()
}

fn triplet(g: &Graph, pts: [&[f64]; 3]) -> TripletSequence {
    TripletSequence::new(vec_var(g, pts[0]), vec_var(g, pts[1]), vec_var(g, pts[2]))
}

#[test]
fn rrg_perfect_logits_give_zero() {
    let g = Graph::new();
    // one-hot rows with a huge margin: log-prob of gold rounds to 0
    let logits = g
        .constant(&[2, 3], vec![0.0, 800.0, 0.0, 800.0, 0.0, 0.0])
        .unwrap();
    let l = loss_rrg(&g, logits, &[1, 0], Reduction::Mean).unwrap();
    assert_eq!(g.scalar(l), 0.0);
}

#[test]
fn rrg_uniform_logits_give_log_vocab() {
    let g = Graph::new();
    let logits = g.constant(&[4, 200], vec![0.25; 800]).unwrap();
    let gold = [3, 199, 0, 42];
    let mean = g.scalar(loss_rrg(&g, logits, &gold, Reduction::Mean).unwrap());
    assert!((mean - 200f64.ln()).abs() < 1e-12);
    assert!((mean - 5.2983).abs() < 1e-4);
    let sum = g.scalar(loss_rrg(&g, logits, &gold, Reduction::Sum).unwrap());
    assert!((sum - 4.0 * 200f64.ln()).abs() < 1e-11);
}

#[test]
fn rrg_length_mismatch() {
    let g = Graph::new();
    let logits = g.constant(&[2, 3], vec![0.0; 6]).unwrap();
    assert!(matches!(
        loss_rrg(&g, logits, &[0], Reduction::Mean),
        Err(Error::LengthMismatch { .. })
    ));
}

#[test]
fn sim_examples() {
    let g = Graph::new();
    let a = vec_var(&g, &[0.3, -1.2, 4.0]);
    assert_eq!(g.scalar(loss_sim(&g, a, a).unwrap()), 0.0);
    let e1 = vec_var(&g, &[1.0, 0.0]);
    let z = vec_var(&g, &[0.0, 0.0]);
    assert_eq!(g.scalar(loss_sim(&g, e1, z).unwrap()), 0.5);
    assert!(loss_sim(&g, a, z).is_err());
}

#[test]
fn pool_examples() {
    let g = Graph::new();
    let a = vec_var(&g, &[2.0, 0.0]);
    let b = vec_var(&g, &[0.0, 2.0]);
    assert_eq!(g.value(pool_shared(&g, a, b).unwrap()), vec![1.0, 1.0]);
    assert_eq!(g.value(pool_shared(&g, a, a).unwrap()), vec![2.0, 0.0]);
}

#[test]
fn contrastive_uniform_similarity_is_ln3() {
    let g = Graph::new();
    let same = [1.0, 2.0, -0.5];
    let v = triplet(&g, [&same, &same, &same]);
    let l = triplet(&g, [&same, &same, &same]);
    let c = loss_contrastive(&g, &v, &l, 0.07, SimilarityKernel::Cosine, EPS_NORM).unwrap();
    for x in [c.i2t, c.t2i, c.con] {
        assert!((g.scalar(x) - 3f64.ln()).abs() < 1e-9);
    }
}

#[test]
fn contrastive_orthogonal_diagonal_vanishes_at_low_temperature() {
    let g = Graph::new();
    let v = triplet(&g, [&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0]]);
    let c = loss_contrastive(&g, &v, &v, 0.01, SimilarityKernel::Cosine, EPS_NORM).unwrap();
    assert!(g.scalar(c.con) < 1e-3);
}

#[test]
fn contrastive_rejects_zero_vector() {
    let g = Graph::new();
    let v = triplet(&g, [&[0.0, 0.0], &[0.0, 1.0], &[1.0, 0.0]]);
    let l = triplet(&g, [&[1.0, 1.0], &[0.0, 1.0], &[1.0, 0.0]]);
    let err = loss_contrastive(&g, &v, &l, 0.07, SimilarityKernel::Cosine, EPS_NORM).unwrap_err();
    assert!(err.is_degenerate());
}

#[test]
fn huber_branches_and_knee() {
    assert_eq!(huber_value(1.0, 0.0), 0.5);
    assert_eq!(huber_value(2.0, 0.0), 1.5);
    assert!((huber_value(1.0 + 1e-9, 0.0) - huber_value(1.0, 0.0)).abs() < 1e-8);
    let g = Graph::new();
    let one = vec_var(&g, &[1.0]);
    let two = vec_var(&g, &[2.0]);
    let zero = vec_var(&g, &[0.0]);
    assert_eq!(g.scalar(huber(&g, one, zero).unwrap()), 0.5);
    assert_eq!(g.scalar(huber(&g, two, zero).unwrap()), 1.5);
    assert_eq!(g.scalar(huber(&g, zero, two).unwrap()), 1.5);
}

#[test]
fn equilateral_triplet_has_unit_psi() {
    let g = Graph::new();
    let h = 3f64.sqrt() / 2.0;
    let t = triplet(&g, [&[0.0, 0.0], &[2.0, 0.0], &[1.0, 2.0 * h]]);
    let mu = compute_mu(&g, &t, EPS_NORM).unwrap();
    assert!((g.scalar(mu) - 2.0).abs() < 1e-12);
    let p = t.as_array();
    for (i, j) in [(0, 1), (0, 2), (1, 2)] {
        let psi = psi_distance(&g, p[i], p[j], mu, EPS_NORM).unwrap();
        assert!((g.scalar(psi) - 1.0).abs() < 1e-12);
    }
}

#[test]
fn collapsed_triplet_is_degenerate() {
    let g = Graph::new();
    let t = triplet(&g, [&[1.0, 1.0], &[1.0, 1.0], &[1.0, 1.0]]);
    assert!(compute_mu(&g, &t, EPS_NORM).unwrap_err().is_degenerate());
    assert!(loss_distance(&g, &t, &t, EPS_NORM)
        .unwrap_err()
        .is_degenerate());
}

#[test]
fn angle_examples() {
    let g = Graph::new();
    let o = vec_var(&g, &[0.0, 0.0]);
    let x = vec_var(&g, &[1.0, 0.0]);
    let y = vec_var(&g, &[0.0, 1.0]);
    assert!(g.scalar(psi_angle(&g, o, x, y, EPS_NORM).unwrap()).abs() < 1e-15);
    let far = vec_var(&g, &[3.0, 0.0]);
    assert!((g.scalar(psi_angle(&g, o, x, far, EPS_NORM).unwrap()) - 1.0).abs() < 1e-15);
    assert!(psi_angle(&g, o, o, x, EPS_NORM)
        .unwrap_err()
        .is_degenerate());
}

#[test]
fn right_isoceles_against_equilateral() {
    let g = Graph::new();
    let v = triplet(&g, [&[0.0, 0.0], &[1.0, 0.0], &[0.0, 1.0]]);
    let h = 3f64.sqrt() / 2.0;
    let l = triplet(&g, [&[0.0, 0.0], &[1.0, 0.0], &[0.5, h]]);
    let got = g.scalar(loss_angle(&g, &v, &l, EPS_NORM).unwrap());
    let r = 2f64.sqrt() / 2.0;
    let expected = 0.5 * (0.5f64.powi(2) + (r - 0.5).powi(2) * 2.0);
    assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
}

#[test]
fn equilateral_against_collinear_distance_regression() {
    // psi ratios {1, 1, 1} against {0.75, 0.75, 1.5}; six ordered pairs give
    // 2 * (0.5 * 0.25^2 * 2 + 0.5 * 0.5^2) = 0.375.
    let g = Graph::new();
    let h = 3f64.sqrt() / 2.0;
    let v = triplet(&g, [&[0.0, 0.0], &[1.0, 0.0], &[0.5, h]]);
    let l = triplet(&g, [&[0.0, 0.0], &[1.0, 0.0], &[2.0, 0.0]]);
    let got = g.scalar(loss_distance(&g, &v, &l, EPS_NORM).unwrap());
    assert!((got - 0.375).abs() < 1e-12, "{got}");
}

#[test]
fn total_weighting() {
    let g = Graph::new();
    let one = vec_var(&g, &[1.0]);
    let rrg = vec_var(&g, &[2.5]);
    let terms = LossTerms {
        rrg,
        sim_img: Some(one),
        sim_txt: Some(one),
        contrastive: Some(ContrastiveParts {
            i2t: one,
            t2i: one,
            con: one,
        }),
        structural: Some(StructuralParts {
            distance: one,
            angle: one,
            stru: one,
        }),
    };
    let (t, bd) = loss_total(&g, &terms, &ConstraintConfig::mimic_main()).unwrap();
    assert!((g.scalar(t) - (2.5 + 2.0 + 0.8 + 1.0)).abs() < 1e-15);
    assert_eq!(bd.l_total, g.scalar(t));

    let zero = ConstraintConfig {
        beta_sim: 0.0,
        beta_con: 0.0,
        beta_stru: 0.0,
        ..Default::default()
    };
    let (t, _) = loss_total(&g, &terms, &zero).unwrap();
    assert_eq!(g.scalar(t), 2.5);
}

#[test]
fn disabled_terms_add_no_nodes() {
    let g = Graph::new();
    let rrg = g.leaf(&Tensor::scalar(1.25).unwrap().with_grad());
    let before = g.len();
    let terms = LossTerms {
        rrg,
        sim_img: None,
        sim_txt: None,
        contrastive: None,
        structural: None,
    };
    let (t, bd) = loss_total(&g, &terms, &ConstraintConfig::default()).unwrap();
    assert_eq!(g.len(), before);
    assert_eq!(t, rrg);
    assert_eq!(bd.l_con, 0.0);
    assert_eq!(bd.l_total, 1.25);
}

#[test]
fn presets_and_validation() {
    let a = ConstraintConfig::preset("mscxrt-appendix").unwrap();
    assert_eq!((a.beta_sim, a.beta_con, a.beta_stru), (0.6, 1.0, 0.8));
    let m = ConstraintConfig::preset("mimic-main").unwrap();
    assert_eq!((m.beta_sim, m.beta_con, m.beta_stru), (1.0, 0.8, 1.0));
    assert!(ConstraintConfig::preset("other").is_none());
    let bad = ConstraintConfig {
        tau: 0.0,
        ..Default::default()
    };
    assert!(bad.validate().is_err());
    let bad = ConstraintConfig {
        beta_con: -1.0,
        ..Default::default()
    };
    assert!(bad.validate().is_err());
}
