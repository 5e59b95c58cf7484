use ndarray::{Array2, ArrayView2, Zip};

use super::FeatureGrid;
use crate::masks::{Mask, PixelPair};
use crate::splat::FeatureMap;

/// Features with a smaller norm make a correspondence pair degenerate.
pub const MIN_FEATURE_NORM: f64 = 1e-8;

/// Masked average pooling over the grid cells flagged in `cells`. `None`
/// when no cell is covered, in which case the mask is left out of the loss.
pub fn mask_query(grid: &FeatureGrid, cells: &[bool]) -> Option<Vec<f64>> {
    let mut sum = vec![0.0; grid.dim];
    let mut count = 0usize;
    for (c, _) in cells.iter().enumerate().filter(|(_, &on)| on) {
        for (s, v) in sum.iter_mut().zip(grid.cell(c)) {
            *s += v;
        }
        count += 1;
    }
    if count == 0 {
        return None;
    }
    Some(sum.into_iter().map(|s| s / count as f64).collect())
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

#[derive(Debug, Clone)]
pub struct GuidanceLoss {
    pub loss: f64,
    /// `H x W x C`, gradient with respect to the rendered features.
    pub grad_rendered: Vec<f64>,
    /// Gradient with respect to the query vector.
    pub grad_query: Vec<f64>,
}

/// Pixel-mean binary cross-entropy between `sigmoid(query . F_p)` and the mask.
pub fn guidance_loss(query: &[f64], rendered: &FeatureMap, mask: &Mask) -> GuidanceLoss {
    let dim = rendered.dim;
    assert_eq!(query.len(), dim, "query width");
    assert_eq!(mask.bits.len(), rendered.pixel_count(), "mask size");
    let n = rendered.pixel_count() as f64;
    let mut loss = 0.0;
    let mut grad_rendered = vec![0.0; rendered.data.len()];
    let mut grad_query = vec![0.0; dim];
    for (p, &inside) in mask.bits.iter().enumerate() {
        let f = rendered.pixel(p);
        let z: f64 = f.iter().zip(query).map(|(a, b)| a * b).sum();
        let target = if inside { 1.0 } else { 0.0 };
        loss += softplus(z) - target * z;
        let dz = (sigmoid(z) - target) / n;
        for k in 0..dim {
            grad_rendered[p * dim + k] = dz * query[k];
            grad_query[k] += dz * f[k];
        }
    }
    GuidanceLoss {
        loss: loss / n,
        grad_rendered,
        grad_query,
    }
}

/// Guidance loss for several masks at once, as dense products.
///
/// `queries` is `M x C`, `rendered` is `P x C` and `targets` is `P x M`
/// with 0/1 entries. Returns per-mask losses and the gradients of
/// `weight * sum_m loss_m` with respect to the rendered features and queries.
pub(crate) fn guidance_loss_batch(
    queries: ArrayView2<f64>,
    rendered: ArrayView2<f64>,
    targets: ArrayView2<f64>,
    weight: f64,
) -> (Vec<f64>, Array2<f64>, Array2<f64>) {
    let n = rendered.nrows() as f64;
    let mut logits = rendered.dot(&queries.t());
    let mut losses = vec![0.0; queries.nrows()];
    Zip::from(logits.rows_mut())
        .and(targets.rows())
        .for_each(|mut z_row, t_row| {
            for ((z, &t), loss) in z_row.iter_mut().zip(t_row).zip(losses.iter_mut()) {
                *loss += softplus(*z) - t * *z;
                *z = weight * (sigmoid(*z) - t) / n;
            }
        });
    let grad_rendered = logits.dot(&queries);
    let grad_queries = logits.t().dot(&rendered);
    (
        losses.into_iter().map(|l| l / n).collect(),
        grad_rendered,
        grad_queries,
    )
}

#[derive(Debug, Clone)]
pub struct CorrespondenceLoss {
    pub loss: f64,
    pub grad_rendered: Vec<f64>,
    /// Pairs that entered the mean (non-degenerate).
    pub used_pairs: usize,
}

/// `-mean(K * cos(F_p1, F_p2))` over pairs whose features are not degenerate.
pub fn correspondence_loss(rendered: &FeatureMap, pairs: &[PixelPair]) -> CorrespondenceLoss {
    let dim = rendered.dim;
    let norm = |p: usize| rendered.pixel(p).iter().map(|v| v * v).sum::<f64>().sqrt();
    let usable: Vec<&PixelPair> = pairs
        .iter()
        .filter(|pair| norm(pair.p1) > MIN_FEATURE_NORM && norm(pair.p2) > MIN_FEATURE_NORM)
        .collect();
    let mut grad_rendered = vec![0.0; rendered.data.len()];
    if usable.is_empty() {
        if !pairs.is_empty() {
            log::warn!("all {} correspondence pairs are degenerate", pairs.len());
        }
        return CorrespondenceLoss {
            loss: 0.0,
            grad_rendered,
            used_pairs: 0,
        };
    }
    let scale = 1.0 / usable.len() as f64;
    let mut loss = 0.0;
    for pair in &usable {
        let (a, b) = (rendered.pixel(pair.p1), rendered.pixel(pair.p2));
        let (na, nb) = (norm(pair.p1), norm(pair.p2));
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let cos = dot / (na * nb);
        loss -= pair.corr * cos * scale;
        if pair.corr == 0.0 {
            continue;
        }
        let coeff = -pair.corr * scale;
        for k in 0..dim {
            let da = b[k] / (na * nb) - cos * a[k] / (na * na);
            let db = a[k] / (na * nb) - cos * b[k] / (nb * nb);
            grad_rendered[pair.p1 * dim + k] += coeff * da;
            grad_rendered[pair.p2 * dim + k] += coeff * db;
        }
    }
    CorrespondenceLoss {
        loss,
        grad_rendered,
        used_pairs: usable.len(),
    }
}
