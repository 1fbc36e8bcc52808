//! Truncated SVD of the binary adjacency, built for sparse inputs: a
//! randomized range finder (Gaussian sketch, two power iterations with
//! re-orthonormalization, oversampling 10) reduces A to a small core that a
//! one-sided Jacobi rotation sweep factorizes exactly. A convergence-checked
//! block subspace iteration is available as a fallback for spectra where the
//! sketch is not trusted.
//!
//! All randomness comes from one fixed internal stream, and every reduction
//! runs in a fixed order, so repeated calls on the same graph are
//! bit-identical at any thread count.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::graph::SparseBipartiteGraph;
use crate::rng::labeled;

/// Extra sketch columns beyond the requested rank.
pub const OVERSAMPLE: usize = 10;
/// Power iterations applied to sharpen the sketch.
pub const POWER_ITERATIONS: usize = 2;

const SKETCH_SEED: u64 = 0x51_6b_e7_c4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SvdMethod {
    /// Gaussian sketch with power iterations (default).
    Randomized,
    /// Block subspace iteration run to a fixed tolerance; errors out with the
    /// residual if the subspace fails to settle.
    Subspace,
}

/// Rank-`r` factorization A ~ U diag(s) V^T with orthonormal columns,
/// singular values in decreasing order. `u` is |U| x r row-major, `v` is
/// |V| x r row-major.
#[derive(Debug, Clone)]
pub struct TruncatedSvd {
    pub u: Vec<f64>,
    pub s: Vec<f64>,
    pub v: Vec<f64>,
    pub rank: usize,
}

impl TruncatedSvd {
    pub fn u_row(&self, i: usize) -> &[f64] {
        &self.u[i * self.rank..(i + 1) * self.rank]
    }

    pub fn v_row(&self, j: usize) -> &[f64] {
        &self.v[j * self.rank..(j + 1) * self.rank]
    }
}

/// y = A x over the sparse adjacency, one block column at a time: `x` is
/// |V| x l row-major, the result |U| x l.
fn mat_ax(graph: &SparseBipartiteGraph, x: &[f64], l: usize) -> Vec<f64> {
    let mut y = vec![0.0; graph.n_users() * l];
    y.par_chunks_mut(l).enumerate().for_each(|(i, row)| {
        for &(_, j) in graph.row_edges(i) {
            let src = &x[j as usize * l..(j as usize + 1) * l];
            for (acc, v) in row.iter_mut().zip(src) {
                *acc += v;
            }
        }
    });
    y
}

/// y = A^T x: `x` is |U| x l row-major, the result |V| x l.
fn mat_atx(graph: &SparseBipartiteGraph, x: &[f64], l: usize) -> Vec<f64> {
    let edges = graph.edges();
    let mut y = vec![0.0; graph.n_hosts() * l];
    y.par_chunks_mut(l).enumerate().for_each(|(j, row)| {
        for &eid in graph.col_edge_ids(j) {
            let i = edges[eid as usize].0 as usize;
            let src = &x[i * l..(i + 1) * l];
            for (acc, v) in row.iter_mut().zip(src) {
                *acc += v;
            }
        }
    });
    y
}

fn col_dot(m: &[f64], rows: usize, l: usize, p: usize, q: usize) -> f64 {
    let mut acc = 0.0;
    for row in 0..rows {
        acc += m[row * l + p] * m[row * l + q];
    }
    acc
}

/// In-place modified Gram-Schmidt with a second re-orthogonalization pass.
/// Columns that collapse to (numerical) zero stay zero instead of being
/// normalized, so rank-deficient blocks are safe.
fn orthonormalize(m: &mut [f64], rows: usize, l: usize) {
    for k in 0..l {
        for _pass in 0..2 {
            for prev in 0..k {
                let proj = col_dot(m, rows, l, prev, k);
                for row in 0..rows {
                    m[row * l + k] -= proj * m[row * l + prev];
                }
            }
        }
        let norm = col_dot(m, rows, l, k, k).sqrt();
        if norm > 1e-12 {
            for row in 0..rows {
                m[row * l + k] /= norm;
            }
        } else {
            for row in 0..rows {
                m[row * l + k] = 0.0;
            }
        }
    }
}

/// One-sided Jacobi factorization of a tall matrix `m` (rows x l, row-major):
/// returns (w, sigma, z) with m = w diag(sigma) z^T, sigma decreasing, w of
/// the same shape with orthonormal (or zero) columns, z an l x l rotation
/// product. The rotations drive every column pair to orthogonality, which is
/// exact for the small cores this module produces.
fn jacobi_svd(mut m: Vec<f64>, rows: usize, l: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut z = vec![0.0; l * l];
    for d in 0..l {
        z[d * l + d] = 1.0;
    }
    for _sweep in 0..60 {
        let mut max_off = 0.0f64;
        for p in 0..l {
            for q in p + 1..l {
                let app = col_dot(&m, rows, l, p, p);
                let aqq = col_dot(&m, rows, l, q, q);
                let apq = col_dot(&m, rows, l, p, q);
                let scale = (app * aqq).sqrt();
                if scale == 0.0 || apq.abs() <= 1e-15 * scale {
                    continue;
                }
                max_off = max_off.max(apq.abs() / scale);
                let tau = (aqq - app) / (2.0 * apq);
                let t = tau.signum() / (tau.abs() + (1.0 + tau * tau).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for row in 0..rows {
                    let mp = m[row * l + p];
                    let mq = m[row * l + q];
                    m[row * l + p] = c * mp - s * mq;
                    m[row * l + q] = s * mp + c * mq;
                }
                for row in 0..l {
                    let zp = z[row * l + p];
                    let zq = z[row * l + q];
                    z[row * l + p] = c * zp - s * zq;
                    z[row * l + q] = s * zp + c * zq;
                }
            }
        }
        if max_off < 1e-14 {
            break;
        }
    }
    let mut order: Vec<usize> = (0..l).collect();
    let norms: Vec<f64> = (0..l).map(|k| col_dot(&m, rows, l, k, k).sqrt()).collect();
    order.sort_by(|&a, &b| norms[b].partial_cmp(&norms[a]).unwrap());
    let mut w = vec![0.0; rows * l];
    let mut sigma = vec![0.0; l];
    let mut z_sorted = vec![0.0; l * l];
    for (dst, &src) in order.iter().enumerate() {
        sigma[dst] = norms[src];
        if norms[src] > 1e-300 {
            for row in 0..rows {
                w[row * l + dst] = m[row * l + src] / norms[src];
            }
        }
        for row in 0..l {
            z_sorted[row * l + dst] = z[row * l + src];
        }
    }
    (w, sigma, z_sorted)
}

fn gaussian_block(n: usize, l: usize) -> Vec<f64> {
    let mut rng = labeled(SKETCH_SEED, "svd/sketch");
    (0..n * l).map(|_| rng.sample(StandardNormal)).collect()
}

/// Finishes a factorization given an orthonormal basis `q` (|U| x l) for the
/// column space: factorizes the core B = Q^T A exactly and lifts back.
fn finish_from_basis(
    graph: &SparseBipartiteGraph,
    q: Vec<f64>,
    l: usize,
    rank: usize,
) -> TruncatedSvd {
    let n_users = graph.n_users();
    let n_hosts = graph.n_hosts();
    // B^T = A^T Q has shape |V| x l.
    let bt = mat_atx(graph, &q, l);
    let (w, sigma, z) = jacobi_svd(bt, n_hosts, l);
    // A ~ Q Z diag(sigma) W^T.
    let mut u = vec![0.0; n_users * rank];
    u.par_chunks_mut(rank).enumerate().for_each(|(i, row)| {
        for (t, slot) in row.iter_mut().enumerate() {
            let mut acc = 0.0;
            for c in 0..l {
                acc += q[i * l + c] * z[c * l + t];
            }
            *slot = acc;
        }
    });
    let mut v = vec![0.0; n_hosts * rank];
    v.par_chunks_mut(rank).enumerate().for_each(|(j, row)| {
        for (t, slot) in row.iter_mut().enumerate() {
            *slot = w[j * l + t];
        }
    });
    TruncatedSvd {
        u,
        s: sigma[..rank].to_vec(),
        v,
        rank,
    }
}

/// Rank-`r` truncated SVD of the binary adjacency.
pub fn truncated_svd(
    graph: &SparseBipartiteGraph,
    r: usize,
    method: SvdMethod,
) -> Result<TruncatedSvd> {
    let min_dim = graph.n_users().min(graph.n_hosts());
    if r == 0 || r > min_dim {
        return Err(Error::InvalidArgument(format!(
            "rank {r} out of range for a {} x {} matrix",
            graph.n_users(),
            graph.n_hosts()
        )));
    }
    let l = (r + OVERSAMPLE).min(min_dim);
    let omega = gaussian_block(graph.n_hosts(), l);
    let mut q = mat_ax(graph, &omega, l);
    orthonormalize(&mut q, graph.n_users(), l);
    match method {
        SvdMethod::Randomized => {
            for _ in 0..POWER_ITERATIONS {
                let mut z = mat_atx(graph, &q, l);
                orthonormalize(&mut z, graph.n_hosts(), l);
                q = mat_ax(graph, &z, l);
                orthonormalize(&mut q, graph.n_users(), l);
            }
            Ok(finish_from_basis(graph, q, l, r))
        }
        SvdMethod::Subspace => {
            const MAX_ITERS: usize = 500;
            const TOL: f64 = 1e-12;
            let mut prev = vec![f64::INFINITY; r];
            let mut residual = f64::INFINITY;
            for _ in 0..MAX_ITERS {
                let mut z = mat_atx(graph, &q, l);
                orthonormalize(&mut z, graph.n_hosts(), l);
                let y = mat_ax(graph, &z, l);
                // Column norms of AZ estimate the leading singular values.
                let est: Vec<f64> = (0..r)
                    .map(|k| col_dot(&y, graph.n_users(), l, k, k).sqrt())
                    .collect();
                residual = est
                    .iter()
                    .zip(&prev)
                    .map(|(e, p)| {
                        let scale = e.abs().max(1e-300);
                        (e - p).abs() / scale
                    })
                    .fold(0.0f64, f64::max);
                prev = est;
                q = y;
                orthonormalize(&mut q, graph.n_users(), l);
                if residual < TOL {
                    return Ok(finish_from_basis(graph, q, l, r));
                }
            }
            Err(Error::IterationFailure(format!(
                "subspace iteration did not settle in {MAX_ITERS} steps; \
                 last relative change of the leading singular values was {residual:.3e}"
            )))
        }
    }
}

/// Top `r_max` singular values in decreasing order, for eyeballing the elbow
/// when choosing the factorization rank.
pub fn scree(graph: &SparseBipartiteGraph, r_max: usize) -> Result<Vec<f64>> {
    Ok(truncated_svd(graph, r_max, SvdMethod::Randomized)?.s)
}
