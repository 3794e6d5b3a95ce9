use triad_tensor::{Real, Tensor, Var};

use super::{PretrainError, Result};

/// Added to every distance before taking a log.
pub const LOG_RATIO_EPS: f64 = 1e-6;

/// Mean absolute difference.
pub fn l1_loss<'t, T: Real>(recon: &Var<'t, T>, target: &Var<'t, T>) -> Result<Var<'t, T>> {
    if recon.shape() != target.shape() {
        return Err(PretrainError::Shape(format!(
            "reconstruction {:?} vs target {:?}",
            recon.shape(),
            target.shape()
        )));
    }
    Ok(recon.sub(target).abs().mean())
}

fn check_rows(f: &[Vec<f64>], y: &[Vec<f64>]) -> Result<()> {
    if f.len() != y.len() {
        return Err(PretrainError::Shape(format!("{} visual vs {} text embeddings", f.len(), y.len())));
    }
    if f.len() < 3 {
        return Err(PretrainError::BatchSize(f.len()));
    }
    for rows in [f, y] {
        let d = rows[0].len();
        if d == 0 || rows.iter().any(|r| r.len() != d) {
            return Err(PretrainError::Shape("embedding rows must share a positive width".into()));
        }
        if rows.iter().flatten().any(|v| !v.is_finite()) {
            return Err(PretrainError::NonFinite("embedding batch".into()));
        }
    }
    Ok(())
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Log of (distance + eps) for every ordered pair.
fn log_dists(rows: &[Vec<f64>], eps: f64) -> Vec<Vec<f64>> {
    rows.iter().map(|a| rows.iter().map(|b| (dist(a, b) + eps).ln()).collect()).collect()
}

fn n_terms(b: usize) -> usize {
    b * (b - 1) * (b - 2) / 2
}

/// Log-ratio loss between visual rows `f` and text rows `y`.
pub fn log_ratio_value(f: &[Vec<f64>], y: &[Vec<f64>], eps: f64) -> Result<f64> {
    check_rows(f, y)?;
    let (lf, ly) = (log_dists(f, eps), log_dists(y, eps));
    let b = f.len();
    let mut acc = 0.0;
    for a in 0..b {
        for i in 0..b {
            for j in i + 1..b {
                if i == a || j == a {
                    continue;
                }
                let r = (lf[a][i] - lf[a][j]) - (ly[a][i] - ly[a][j]);
                acc += r * r;
            }
        }
    }
    Ok(acc / n_terms(b) as f64)
}

/// Value and gradient with respect to `f`.
fn log_ratio_with_grad(f: &[Vec<f64>], y: &[Vec<f64>], eps: f64) -> (f64, Vec<Vec<f64>>) {
    let (lf, ly) = (log_dists(f, eps), log_dists(y, eps));
    let b = f.len();
    let n = n_terms(b) as f64;
    // coef[a][i] = dL / d log D_f(a, i)
    let mut coef = vec![vec![0.0; b]; b];
    let mut acc = 0.0;
    for a in 0..b {
        for i in 0..b {
            for j in i + 1..b {
                if i == a || j == a {
                    continue;
                }
                let r = (lf[a][i] - lf[a][j]) - (ly[a][i] - ly[a][j]);
                acc += r * r;
                coef[a][i] += 2.0 * r / n;
                coef[a][j] -= 2.0 * r / n;
            }
        }
    }
    let mut grad = vec![vec![0.0; f[0].len()]; b];
    for a in 0..b {
        for i in 0..b {
            if i == a || coef[a][i] == 0.0 {
                continue;
            }
            let d = dist(&f[a], &f[i]);
            if d == 0.0 {
                continue;
            }
            let s = coef[a][i] / (d * (d + eps));
            for k in 0..f[a].len() {
                let g = s * (f[a][k] - f[i][k]);
                grad[a][k] += g;
                grad[i][k] -= g;
            }
        }
    }
    (acc / n, grad)
}

/// Differentiable log-ratio loss for visual embeddings `f: [B, d]` against fixed text rows.
///
/// Accumulates in `f64` whatever the tape's element type.
pub fn log_ratio_loss<'t, T: Real>(f: &Var<'t, T>, y: &[Vec<f64>], eps: f64) -> Result<Var<'t, T>> {
    let shape = f.shape().to_vec();
    if shape.len() != 2 {
        return Err(PretrainError::Shape(format!("visual embeddings must be [B, d], got {shape:?}")));
    }
    let rows: Vec<Vec<f64>> = f
        .value()
        .data()
        .chunks(shape[1].max(1))
        .map(|c| c.iter().map(|v| v.to_f64().unwrap()).collect())
        .collect();
    check_rows(&rows, y)?;
    let (value, grad) = log_ratio_with_grad(&rows, y, eps);
    let grad: Vec<T> = grad.into_iter().flatten().map(T::lit).collect();
    let grad = Tensor::from_vec(&shape, grad);
    Ok(f.tape().op(Tensor::scalar(T::lit(value)), &[f], move |g, _| {
        let s = g.item();
        vec![Some(grad.map(|v| v * s))]
    }))
}

/// The three reported loss numbers.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParts {
    pub l1: f64,
    /// `None` when the batch is too small to form a triplet.
    pub log_ratio: Option<f64>,
    pub total: f64,
}

/// `l1 + lambda * log_ratio`.
pub fn combine(l1: f64, log_ratio: f64, lambda: f64) -> f64 {
    l1 + lambda * log_ratio
}

/// Weighted objective. With `lambda == 0` the log-ratio term stays off the graph and is only
/// reported, so the text rows cannot influence any gradient.
pub fn total_loss<'t, T: Real>(
    recon: &Var<'t, T>,
    target: &Var<'t, T>,
    f: &Var<'t, T>,
    y: &[Vec<f64>],
    lambda: f64,
) -> Result<(Var<'t, T>, LossParts)> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(PretrainError::Config(format!("loss weight must be finite and >= 0, got {lambda}")));
    }
    let l1 = l1_loss(recon, target)?;
    let l1v = l1.value().item().to_f64().unwrap();
    if lambda == 0.0 {
        let rows = rows_of(f.value());
        let metric = if rows.len() >= 3 { Some(log_ratio_value(&rows, y, LOG_RATIO_EPS)?) } else { None };
        return Ok((l1, LossParts { l1: l1v, log_ratio: metric, total: l1v }));
    }
    let lr = log_ratio_loss(f, y, LOG_RATIO_EPS)?;
    let lrv = lr.value().item().to_f64().unwrap();
    let total = l1.add(&lr.scale(T::lit(lambda)));
    let tv = total.value().item().to_f64().unwrap();
    Ok((total, LossParts { l1: l1v, log_ratio: Some(lrv), total: tv }))
}

pub(crate) fn rows_of<T: Real>(t: &Tensor<T>) -> Vec<Vec<f64>> {
    let w = t.shape().last().copied().unwrap_or(1).max(1);
    t.data().chunks(w).map(|c| c.iter().map(|v| v.to_f64().unwrap()).collect()).collect()
}
