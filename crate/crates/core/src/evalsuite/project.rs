//! Embedding-space projection: multi-vector tokens averaged to single
//! vectors, reduced by PCA to 10 dimensions (where nearest-neighbor structure
//! is evaluated) and then by a second PCA to 2-D coordinates for plotting.

use super::frechet::jacobi_eigh;
use crate::multitrain::InversionState;
use crate::textencode::FactorKey;
use crate::{Error, Result};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TokenPoint {
    pub key: FactorKey,
    pub x: f64,
    pub y: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NeighborEntry {
    pub specific: FactorKey,
    pub nearest_general: FactorKey,
    pub distance: f64,
    /// True when the nearest general token is the specific token's own
    /// (category, value) counterpart.
    pub matches_own: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EmbeddingProjection {
    pub points: Vec<TokenPoint>,
    pub neighbors: Vec<NeighborEntry>,
    /// Fraction of specific tokens whose nearest general neighbor is their
    /// own counterpart (NaN when there are no specific tokens).
    pub own_match_rate: f64,
}

/// Center columns; returns the centered matrix.
fn center(m: &Array2<f64>) -> Array2<f64> {
    let (n, d) = m.dim();
    let mut out = m.clone();
    for j in 0..d {
        let mean = (0..n).map(|i| m[[i, j]]).sum::<f64>() / n as f64;
        for i in 0..n {
            out[[i, j]] -= mean;
        }
    }
    out
}

/// PCA to `k` components: returns centered data projected onto the top-k
/// principal directions.
fn pca(m: &Array2<f64>, k: usize) -> Array2<f64> {
    let (n, d) = m.dim();
    let k = k.min(d).min(n);
    let xc = center(m);
    let mut cov = Array2::<f64>::zeros((d, d));
    for row in xc.rows() {
        for i in 0..d {
            for j in 0..d {
                cov[[i, j]] += row[i] * row[j];
            }
        }
    }
    let denom = (n as f64 - 1.0).max(1.0);
    cov.mapv_inplace(|v| v / denom);
    let (_vals, vecs) = jacobi_eigh(&cov);
    let basis = vecs.slice(ndarray::s![.., ..k]).to_owned();
    xc.dot(&basis)
}

/// Project every factor token (general and specific) of an inversion state.
pub fn project_embeddings(state: &InversionState) -> Result<EmbeddingProjection> {
    let keys: Vec<FactorKey> = state
        .general
        .keys()
        .chain(state.specific.keys())
        .cloned()
        .collect();
    if keys.len() < 3 {
        return Err(Error::Precondition(format!(
            "projection needs >= 3 tokens, got {}",
            keys.len()
        )));
    }
    let d = state.dim;
    let mut avg = Array2::<f64>::zeros((keys.len(), d));
    for (row, key) in keys.iter().enumerate() {
        let emb = if key.dataset.is_none() { &state.general[key] } else { &state.specific[key] };
        let n = emb.shape()[0] as f64;
        for r in 0..emb.shape()[0] {
            for c in 0..d {
                avg[[row, c]] += emb[[r, c]] as f64 / n;
            }
        }
    }

    let coords10 = pca(&avg, 10);
    let coords2 = pca(&coords10, 2);

    let points: Vec<TokenPoint> = keys
        .iter()
        .enumerate()
        .map(|(i, key)| TokenPoint { key: key.clone(), x: coords2[[i, 0]], y: coords2[[i, 1]] })
        .collect();

    // nearest general neighbor per specific token, measured in the 10-dim space
    let general_rows: Vec<usize> = keys
        .iter()
        .enumerate()
        .filter(|(_, k)| k.dataset.is_none())
        .map(|(i, _)| i)
        .collect();
    let mut neighbors = Vec::new();
    let mut matches = 0usize;
    let mut total = 0usize;
    for (i, key) in keys.iter().enumerate() {
        if key.dataset.is_none() {
            continue;
        }
        let mut best: Option<(usize, f64)> = None;
        for &g in &general_rows {
            let mut dist = 0.0;
            for c in 0..coords10.ncols() {
                let dv = coords10[[i, c]] - coords10[[g, c]];
                dist += dv * dv;
            }
            let dist = dist.sqrt();
            if best.map(|(_, bd)| dist < bd).unwrap_or(true) {
                best = Some((g, dist));
            }
        }
        let (g, distance) = best.expect("at least one general token");
        let nearest = keys[g].clone();
        let matches_own = nearest.category == key.category && nearest.value == key.value;
        if matches_own {
            matches += 1;
        }
        total += 1;
        neighbors.push(NeighborEntry { specific: key.clone(), nearest_general: nearest, distance, matches_own });
    }
    let own_match_rate = if total == 0 { f64::NAN } else { matches as f64 / total as f64 };
    Ok(EmbeddingProjection { points, neighbors, own_match_rate })
}
