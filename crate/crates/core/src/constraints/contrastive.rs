use super::{SimilarityKernel, TripletSequence};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};

/// Image-to-text, text-to-image and averaged contrastive losses.
#[derive(Debug, Clone, Copy)]
pub struct ContrastiveParts {
    pub i2t: Var,
    pub t2i: Var,
    pub con: Var,
}

fn stack(g: &Graph, t: &TripletSequence, kernel: SimilarityKernel, eps: f64) -> Result<Var> {
    let rows = g.concat(&t.as_array())?;
    let norms_ok = g.with_value(rows, |v| {
        let d = v.len() / 3;
        (0..3)
            .map(|r| {
                v[r * d..(r + 1) * d]
                    .iter()
                    .map(|x| x * x)
                    .sum::<f64>()
                    .sqrt()
            })
            .find(|n| *n <= eps)
    });
    if let Some(norm) = norms_ok {
        return Err(Error::Degenerate {
            op: "loss_contrastive",
            norm,
            eps,
        });
    }
    match kernel {
        SimilarityKernel::Cosine => g.l2_normalize(rows),
        SimilarityKernel::Dot => Ok(rows),
    }
}

/// InfoNCE inside one sample: each image vector must pick its own text
/// vector among the three in the text triplet, and vice versa. Per-index
/// losses are averaged over the three positions; `con` is the mean of both
/// directions.
pub fn loss_contrastive(
    g: &Graph,
    image: &TripletSequence,
    text: &TripletSequence,
    tau: f64,
    kernel: SimilarityKernel,
    eps: f64,
) -> Result<ContrastiveParts> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("tau must be > 0, got {tau}")));
    }
    let (sv, sl) = (g.shape(image.shared), g.shape(text.shared));
    if sv != sl {
        return Err(Error::ShapeMismatch {
            op: "loss_contrastive",
            left: sv,
            right: sl,
        });
    }
    let v = stack(g, image, kernel, eps)?;
    let l = stack(g, text, kernel, eps)?;
    // scores[i][k] = (v_i, l_k) / tau
    let scores = g.scalar_mul(g.matmul(v, g.transpose(l)?)?, 1.0 / tau)?;
    let diag = [0usize, 1, 2];

    let i2t = g.log_softmax(scores)?;
    let i2t = g.neg(g.mean(g.gather(i2t, &diag)?)?)?;
    let t2i = g.log_softmax(g.transpose(scores)?)?;
    let t2i = g.neg(g.mean(g.gather(t2i, &diag)?)?)?;
    let con = g.scalar_mul(g.add(i2t, t2i)?, 0.5)?;
    Ok(ContrastiveParts { i2t, t2i, con })
}
