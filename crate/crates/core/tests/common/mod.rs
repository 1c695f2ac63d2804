//! Plain-loop reference implementations of the training losses, written
//! without the autodiff engine.

#![allow(dead_code)]

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += (a[i] - b[i]) * (a[i] - b[i]);
    }
    s.sqrt()
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let mut m = f64::NEG_INFINITY;
    for &x in xs {
        if x > m {
            m = x;
        }
    }
    let mut s = 0.0;
    for &x in xs {
        s += (x - m).exp();
    }
    m + s.ln()
}

/// Mean negative log-likelihood; `logits` holds one row per gold token.
pub fn rrg(logits: &[Vec<f64>], gold: &[u32]) -> f64 {
    let mut total = 0.0;
    for (row, &t) in logits.iter().zip(gold) {
        total += log_sum_exp(row) - row[t as usize];
    }
    total / gold.len() as f64
}

pub fn sim(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += (a[i] - b[i]) * (a[i] - b[i]);
    }
    0.5 * s
}

/// `(i2t, t2i, mean)` of the within-triplet cosine InfoNCE.
pub fn contrastive(v: &[Vec<f64>; 3], l: &[Vec<f64>; 3], tau: f64) -> (f64, f64, f64) {
    let mut s = [[0.0; 3]; 3];
    for i in 0..3 {
        for k in 0..3 {
            s[i][k] =
                dot(&v[i], &l[k]) / (dot(&v[i], &v[i]).sqrt() * dot(&l[k], &l[k]).sqrt()) / tau;
        }
    }
    let (mut i2t, mut t2i) = (0.0, 0.0);
    for i in 0..3 {
        let row = [s[i][0], s[i][1], s[i][2]];
        let col = [s[0][i], s[1][i], s[2][i]];
        i2t += log_sum_exp(&row) - s[i][i];
        t2i += log_sum_exp(&col) - s[i][i];
    }
    i2t /= 3.0;
    t2i /= 3.0;
    (i2t, t2i, 0.5 * (i2t + t2i))
}

pub fn huber(x: f64, y: f64) -> f64 {
    let d = (x - y).abs();
    if d <= 1.0 {
        0.5 * d * d
    } else {
        d - 0.5
    }
}

fn mean_pair_distance(t: &[Vec<f64>; 3]) -> f64 {
    (dist(&t[0], &t[1]) + dist(&t[0], &t[2]) + dist(&t[1], &t[2])) / 3.0
}

/// Huber over all ordered pairs of normalized distances.
pub fn distance(v: &[Vec<f64>; 3], l: &[Vec<f64>; 3]) -> f64 {
    let (mv, ml) = (mean_pair_distance(v), mean_pair_distance(l));
    let mut total = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            if i != j {
                total += huber(dist(&v[i], &v[j]) / mv, dist(&l[i], &l[j]) / ml);
            }
        }
    }
    total
}

fn vertex_cosine(t: &[Vec<f64>; 3], i: usize) -> f64 {
    let (j, k) = ((i + 1) % 3, (i + 2) % 3);
    let e1: Vec<f64> = (0..t[i].len()).map(|n| t[i][n] - t[j][n]).collect();
    let e2: Vec<f64> = (0..t[i].len()).map(|n| t[i][n] - t[k][n]).collect();
    dot(&e1, &e2) / (dot(&e1, &e1).sqrt() * dot(&e2, &e2).sqrt())
}

/// Huber over the cosine at each vertex.
pub fn angle(v: &[Vec<f64>; 3], l: &[Vec<f64>; 3]) -> f64 {
    let mut total = 0.0;
    for i in 0..3 {
        total += huber(vertex_cosine(v, i), vertex_cosine(l, i));
    }
    total
}

pub fn structural(v: &[Vec<f64>; 3], l: &[Vec<f64>; 3]) -> f64 {
    distance(v, l) + angle(v, l)
}
