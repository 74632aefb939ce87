//! Dense-vector primitives shared by the scoring, search and memory code.
//!
//! Embeddings are plain `Vec<f64>` / `&[f64]`. Every function here is pure;
//! randomness comes in through a caller-owned [`Substream`].

use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rng::Substream;

/// A d-dimensional embedding. Dimension is fixed per stream.
pub type Embedding = Vec<f64>;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity. Zero-norm operands are an error, never a silent 0.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dims("cosine", a.len(), b.len()));
    }
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Degenerate("cosine of a zero-norm vector".into()));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Cosine of `query` against each row of `set`.
pub fn cosine_many(query: &[f64], set: &[Embedding]) -> Result<Vec<f64>> {
    let nq = norm(query);
    if nq == 0.0 {
        return Err(Error::Degenerate("cosine of a zero-norm vector".into()));
    }
    set.iter()
        .map(|row| {
            if row.len() != query.len() {
                return Err(Error::dims("cosine", query.len(), row.len()));
            }
            let nr = norm(row);
            if nr == 0.0 {
                return Err(Error::Degenerate("cosine of a zero-norm vector".into()));
            }
            Ok((dot(query, row) / (nq * nr)).clamp(-1.0, 1.0))
        })
        .collect()
}

/// Unit-norm copy of `a`.
pub fn normalized(a: &[f64]) -> Result<Embedding> {
    let n = norm(a);
    if n == 0.0 {
        return Err(Error::Degenerate("normalizing a zero-norm vector".into()));
    }
    Ok(a.iter().map(|x| x / n).collect())
}

pub fn sigmoid(x: f64) -> f64 {
    // Split by sign so exp never overflows.
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(x: &[f64]) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(Error::Degenerate("softmax of an empty vector".into()));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Degenerate("softmax of a non-finite value".into()));
    }
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(x: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in x.iter().enumerate() {
        match best {
            Some((_, b)) if v <= b => {}
            _ => best = Some((i, v)),
        }
    }
    best.map(|(i, _)| i)
}

/// Draws a vector with i.i.d. `N(0, sigma^2)` entries.
pub fn sample_gaussian(dim: usize, sigma: f64, stream: &mut Substream) -> Result<Embedding> {
    let mut out = vec![0.0; dim];
    fill_gaussian(&mut out, sigma, stream)?;
    Ok(out)
}

/// Fills `out` with i.i.d. `N(0, sigma^2)` draws, in index order.
pub fn fill_gaussian(out: &mut [f64], sigma: f64, stream: &mut Substream) -> Result<()> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::invalid("sigma", format!("must be finite and >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        out.fill(0.0);
        return Ok(());
    }
    let rng = stream.rng();
    for x in out.iter_mut() {
        let z: f64 = StandardNormal.sample(rng);
        *x = sigma * z;
    }
    Ok(())
}

pub fn is_finite(a: &[f64]) -> bool {
    a.iter().all(|x| x.is_finite())
}
