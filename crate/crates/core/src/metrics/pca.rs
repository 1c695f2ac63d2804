use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::{Error, Result};

/// Projection onto the two leading principal axes.
#[derive(Debug, Clone, PartialEq)]
pub struct Pca2d {
    pub mean: Vec<f64>,
    /// Unit axes; the largest-magnitude entry of each is positive.
    pub axes: [Vec<f64>; 2],
    /// Covariance eigenvalues of the two axes, descending.
    pub variances: [f64; 2],
    pub coords: Vec<[f64; 2]>,
}

/// Principal axes from the eigendecomposition of the sample covariance.
pub fn pca_2d(rows: &[Vec<f64>]) -> Result<Pca2d> {
    let n = rows.len();
    let d = rows.first().map_or(0, |r| r.len());
    if n < 2 || d < 2 || rows.iter().any(|r| r.len() != d) {
        return Err(Error::InvalidShape {
            op: "pca_2d",
            shape: vec![n, d],
            reason: "need at least two rows of equal width >= 2".into(),
        });
    }
    let mut mean = vec![0.0; d];
    for r in rows {
        for (m, x) in mean.iter_mut().zip(r) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered = DMatrix::from_fn(n, d, |i, j| rows[i][j] - mean[j]);
    let cov = centered.transpose() * &centered / (n - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .total_cmp(&eig.eigenvalues[a])
            .then(a.cmp(&b))
    });
    let axis = |k: usize| -> Vec<f64> {
        let col: Vec<f64> = eig.eigenvectors.column(order[k]).iter().copied().collect();
        let lead = col.iter().copied().fold(
            0.0f64,
            |best, x| if x.abs() > best.abs() { x } else { best },
        );
        if lead < 0.0 {
            col.iter().map(|x| -x).collect()
        } else {
            col
        }
    };
    let axes = [axis(0), axis(1)];
    let coords = (0..n)
        .map(|i| {
            let row = centered.row(i);
            let p = |a: &[f64]| row.iter().zip(a).map(|(x, y)| x * y).sum::<f64>();
            [p(&axes[0]), p(&axes[1])]
        })
        .collect();
    Ok(Pca2d {
        mean,
        variances: [eig.eigenvalues[order[0]], eig.eigenvalues[order[1]]],
        axes,
        coords,
    })
}

/// Writes `id,modality,label,x,y` rows after a comment line.
pub fn write_embeddings_csv(
    path: &Path,
    comment: &str,
    ids: &[String],
    modality: &[String],
    labels: &[String],
    pca: &Pca2d,
) -> Result<()> {
    let mut out = Vec::new();
    let io = |e| Error::io(path, e);
    writeln!(out, "# {comment}").map_err(io)?;
    writeln!(out, "id,modality,label,x,y").map_err(io)?;
    for (i, c) in pca.coords.iter().enumerate() {
        writeln!(
            out,
            "{},{},{},{},{}",
            ids[i], modality[i], labels[i], c[0], c[1]
        )
        .map_err(io)?;
    }
    std::fs::write(path, out).map_err(io)
}
