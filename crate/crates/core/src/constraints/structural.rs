//! Distance-wise and angle-wise relational matching between the image and
//! text triplets.
//!
//! Distances are normalized by the mean pairwise distance of their own
//! triplet, so the loss is invariant to uniform scaling, rotation and
//! translation of either modality. Both terms compare the two modalities
//! through the Huber penalty with unit threshold.

use super::TripletSequence;
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct StructuralParts {
    pub distance: Var,
    pub angle: Var,
    pub stru: Var,
}

const PAIRS: [(usize, usize); 3] = [(0, 1), (0, 2), (1, 2)];

fn pair_distance(g: &Graph, a: Var, b: Var, eps: f64) -> Result<Var> {
    let d = g.sub(a, b)?;
    let norm = g.with_value(d, |v| v.iter().map(|x| x * x).sum::<f64>().sqrt());
    if norm <= eps {
        return Err(Error::Degenerate {
            op: "pair_distance",
            norm,
            eps,
        });
    }
    g.euclidean_norm(d)
}

/// Mean euclidean distance over the three unordered pairs of a triplet.
pub fn compute_mu(g: &Graph, t: &TripletSequence, eps: f64) -> Result<Var> {
    let p = t.as_array();
    let mut dists = Vec::with_capacity(3);
    for (i, j) in PAIRS {
        let d = g.sub(p[i], p[j])?;
        dists.push(g.with_value(d, |v| v.iter().map(|x| x * x).sum::<f64>().sqrt()));
    }
    if dists.iter().any(|d| *d <= eps) {
        let worst = dists.iter().cloned().fold(f64::INFINITY, f64::min);
        return Err(Error::Degenerate {
            op: "compute_mu",
            norm: worst,
            eps,
        });
    }
    let mut sum = None;
    for (i, j) in PAIRS {
        let d = pair_distance(g, p[i], p[j], eps)?;
        sum = Some(match sum {
            None => d,
            Some(s) => g.add(s, d)?,
        });
    }
    g.scalar_mul(sum.expect("three pairs"), 1.0 / 3.0)
}

/// `||a - b|| / mu`.
pub fn psi_distance(g: &Graph, a: Var, b: Var, mu: Var, eps: f64) -> Result<Var> {
    let m = g.scalar(mu);
    if m <= eps {
        return Err(Error::Degenerate {
            op: "psi_distance",
            norm: m,
            eps,
        });
    }
    g.div(pair_distance(g, a, b, eps)?, mu)
}

/// Cosine of the angle at vertex `ti` of the triangle `(ti, tj, tk)`.
pub fn psi_angle(g: &Graph, ti: Var, tj: Var, tk: Var, eps: f64) -> Result<Var> {
    let e1 = g.sub(ti, tj)?;
    let e2 = g.sub(ti, tk)?;
    let n1 = pair_distance(g, ti, tj, eps)?;
    let n2 = pair_distance(g, ti, tk, eps)?;
    g.div(g.dot(e1, e2)?, g.mul(n1, n2)?)
}

/// Plain-value Huber penalty with unit threshold.
pub fn huber_value(x: f64, y: f64) -> f64 {
    let d = (x - y).abs();
    if d <= 1.0 {
        0.5 * d * d
    } else {
        d - 0.5
    }
}

/// Huber penalty with unit threshold: quadratic for `|x - y| <= 1`,
/// linear beyond.
pub fn huber(g: &Graph, x: Var, y: Var) -> Result<Var> {
    let d = g.sub(x, y)?;
    if g.scalar(d).abs() <= 1.0 {
        g.scalar_mul(g.square(d)?, 0.5)
    } else {
        g.add_scalar(g.abs(d)?, -0.5)
    }
}

fn accumulate(g: &Graph, acc: Option<Var>, v: Var) -> Result<Option<Var>> {
    Ok(Some(match acc {
        None => v,
        Some(a) => g.add(a, v)?,
    }))
}

/// Sum over the six ordered pairs `i != j` of
/// `huber(psi_D(image_i, image_j), psi_D(text_i, text_j))`. Because the
/// distance is symmetric this is exactly twice the unordered sum.
pub fn loss_distance(
    g: &Graph,
    image: &TripletSequence,
    text: &TripletSequence,
    eps: f64,
) -> Result<Var> {
    let (v, l) = (image.as_array(), text.as_array());
    let mu_v = compute_mu(g, image, eps)?;
    let mu_l = compute_mu(g, text, eps)?;
    let mut acc = None;
    for i in 0..3 {
        for j in 0..3 {
            if i == j {
                continue;
            }
            let pv = psi_distance(g, v[i], v[j], mu_v, eps)?;
            let pl = psi_distance(g, l[i], l[j], mu_l, eps)?;
            acc = accumulate(g, acc, huber(g, pv, pl)?)?;
        }
    }
    Ok(acc.expect("six pairs"))
}

/// Sum over the three vertex angles of
/// `huber(psi_A(image_i, image_j, image_k), psi_A(text_i, text_j, text_k))`.
///
/// The cosine at a vertex is symmetric in the two other points, so the
/// distinct-index set of a triplet reduces to one term per vertex.
pub fn loss_angle(
    g: &Graph,
    image: &TripletSequence,
    text: &TripletSequence,
    eps: f64,
) -> Result<Var> {
    let (v, l) = (image.as_array(), text.as_array());
    let mut acc = None;
    for (i, j, k) in [(0, 1, 2), (1, 0, 2), (2, 0, 1)] {
        let av = psi_angle(g, v[i], v[j], v[k], eps)?;
        let al = psi_angle(g, l[i], l[j], l[k], eps)?;
        acc = accumulate(g, acc, huber(g, av, al)?)?;
    }
    Ok(acc.expect("three vertices"))
}

pub fn loss_structural(
    g: &Graph,
    image: &TripletSequence,
    text: &TripletSequence,
    eps: f64,
) -> Result<StructuralParts> {
    let distance = loss_distance(g, image, text, eps)?;
    let angle = loss_angle(g, image, text, eps)?;
    let stru = g.add(distance, angle)?;
    Ok(StructuralParts {
        distance,
        angle,
        stru,
    })
}
