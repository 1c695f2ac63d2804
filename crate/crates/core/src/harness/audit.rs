use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::gradcheck::max_relative_errors;
use crate::autodiff::{Graph, Tensor, Var};
use crate::constraints::{
    loss_angle, loss_contrastive, loss_distance, loss_rrg, loss_sim, loss_structural, loss_total,
    ConstraintConfig, LossTerms, Reduction, TripletSequence,
};
use crate::Result;

pub const AUDIT_LOSSES: [&str; 6] = ["rrg", "sim", "contrastive", "distance", "angle", "total"];

/// Worst relative gradient error per loss for one random draw.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRow {
    pub trial: usize,
    /// One entry per [`AUDIT_LOSSES`] name, maximized over input tensors.
    pub max_rel_err: [f64; 6],
}

const DIM: usize = 6;
const ROWS: usize = 4;
const VOCAB: usize = 9;

fn normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("finite draw")
}

fn triplets(v: &[Var]) -> (TripletSequence, TripletSequence) {
    (
        TripletSequence::new(v[0], v[1], v[2]),
        TripletSequence::new(v[3], v[4], v[5]),
    )
}

fn worst(errs: Vec<f64>) -> f64 {
    errs.into_iter().fold(0.0, f64::max)
}

/// Reverse-mode gradients of every loss against central differences.
pub fn grad_audit(trials: usize, seed: u64) -> Result<Vec<AuditRow>> {
    let cfg = ConstraintConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(trials);
    for trial in 0..trials {
        let logits = normal(&mut rng, &[ROWS, VOCAB]);
        let gold: Vec<u32> = (0..ROWS)
            .map(|_| rng.random_range(0..VOCAB as u32))
            .collect();
        let six: Vec<Tensor> = (0..6).map(|_| normal(&mut rng, &[DIM])).collect();
        let pair = six[..2].to_vec();

        let rrg = |g: &Graph, v: &[Var]| loss_rrg(g, v[0], &gold, Reduction::Mean);
        let sim = |g: &Graph, v: &[Var]| loss_sim(g, v[0], v[1]);
        let con = |g: &Graph, v: &[Var]| {
            let (a, b) = triplets(v);
            Ok(loss_contrastive(g, &a, &b, cfg.tau, cfg.kernel, cfg.eps_norm)?.con)
        };
        let dist = |g: &Graph, v: &[Var]| {
            let (a, b) = triplets(v);
            loss_distance(g, &a, &b, cfg.eps_norm)
        };
        let angle = |g: &Graph, v: &[Var]| {
            let (a, b) = triplets(v);
            loss_angle(g, &a, &b, cfg.eps_norm)
        };
        // logits, then six triplet vectors shared by every term
        let total = |g: &Graph, v: &[Var]| {
            let (a, b) = triplets(&v[1..]);
            let terms = LossTerms {
                rrg: loss_rrg(g, v[0], &gold, Reduction::Mean)?,
                sim_img: Some(loss_sim(g, v[1], v[2])?),
                sim_txt: Some(loss_sim(g, v[4], v[5])?),
                contrastive: Some(loss_contrastive(
                    g,
                    &a,
                    &b,
                    cfg.tau,
                    cfg.kernel,
                    cfg.eps_norm,
                )?),
                structural: Some(loss_structural(g, &a, &b, cfg.eps_norm)?),
            };
            Ok(loss_total(g, &terms, &cfg)?.0)
        };
        let mut all = vec![logits.clone()];
        all.extend(six.iter().cloned());
        rows.push(AuditRow {
            trial,
            max_rel_err: [
                worst(max_relative_errors(&rrg, std::slice::from_ref(&logits))?),
                worst(max_relative_errors(&sim, &pair)?),
                worst(max_relative_errors(&con, &six)?),
                worst(max_relative_errors(&dist, &six)?),
                worst(max_relative_errors(&angle, &six)?),
                worst(max_relative_errors(&total, &all)?),
            ],
        });
    }
    Ok(rows)
}

pub fn audit_csv(rows: &[AuditRow]) -> String {
    let mut out = format!("trial,{}\n", AUDIT_LOSSES.join(","));
    for r in rows {
        let _ = write!(out, "{}", r.trial);
        for e in r.max_rel_err {
            let _ = write!(out, ",{e:.3e}");
        }
        out.push('\n');
    }
    out
}
