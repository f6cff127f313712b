//! Naive reference implementations shared by the integration tests. Each one
//! is a direct loop over the definition and shares no code with the library.
#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn uniform(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

pub fn bits(rng: &mut ChaCha8Rng, n: usize, p: f64) -> Vec<f64> {
    (0..n).map(|_| if rng.random_bool(p) { 1.0 } else { 0.0 }).collect()
}

pub fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for t in 0..k {
                s += a[i * k + t] * b[t * n + j];
            }
            out[i * n + j] = s;
        }
    }
    out
}

/// Same-padded sliding window, `x: cin x l`, `w: cout x cin x k`.
pub fn conv1d(x: &[f64], w: &[f64], b: &[f64], cin: usize, l: usize, cout: usize, k: usize) -> Vec<f64> {
    let pad = (k / 2) as isize;
    let mut out = vec![0.0; cout * l];
    for co in 0..cout {
        for o in 0..l {
            let mut s = b[co];
            for ci in 0..cin {
                for kk in 0..k {
                    let i = o as isize + kk as isize - pad;
                    if i >= 0 && (i as usize) < l {
                        s += w[(co * cin + ci) * k + kk] * x[ci * l + i as usize];
                    }
                }
            }
            out[co * l + o] = s;
        }
    }
    out
}

/// Same-padded strided 2-D cross-correlation, `x: cin x h x w`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d(
    x: &[f64],
    wt: &[f64],
    b: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    stride: usize,
) -> Vec<f64> {
    let pad = (k / 2) as isize;
    let (oh, ow) = (h / stride, w / stride);
    let mut out = vec![0.0; cout * oh * ow];
    for co in 0..cout {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut s = b[co];
                for ci in 0..cin {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride) as isize + ky as isize - pad;
                            let ix = (ox * stride) as isize + kx as isize - pad;
                            if iy < 0 || ix < 0 || iy as usize >= h || ix as usize >= w {
                                continue;
                            }
                            s += wt[((co * cin + ci) * k + ky) * k + kx] * x[(ci * h + iy as usize) * w + ix as usize];
                        }
                    }
                }
                out[(co * oh + oy) * ow + ox] = s;
            }
        }
    }
    out
}

/// Cosine of two vectors, 0 when either has zero norm.
pub fn cosine(u: &[f64], v: &[f64]) -> f64 {
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        0.0
    } else {
        dot / (nu * nv)
    }
}

/// Column `j` of a row-major `rows x cols` matrix.
pub fn column(x: &[f64], rows: usize, cols: usize, j: usize) -> Vec<f64> {
    (0..rows).map(|i| x[i * cols + j]).collect()
}

pub fn bce(p: &[f64], m: &[f64], eps: f64) -> f64 {
    let total: f64 = p
        .iter()
        .zip(m)
        .map(|(&q, &t)| {
            let q = q.clamp(eps, 1.0 - eps);
            -(t * q.ln() + (1.0 - t) * (1.0 - q).ln())
        })
        .sum();
    total / p.len() as f64
}

/// Foreground IoU by pixel counting; two empty masks score 1.
pub fn iou(pred: &[f64], gt: &[f64]) -> f64 {
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&p, &g) in pred.iter().zip(gt) {
        if p == 1.0 && g == 1.0 {
            inter += 1;
        }
        if p == 1.0 || g == 1.0 {
            union += 1;
        }
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

pub fn fb_iou(pred: &[f64], gt: &[f64]) -> f64 {
    let inv = |m: &[f64]| m.iter().map(|v| 1.0 - v).collect::<Vec<_>>();
    (iou(pred, gt) + iou(&inv(pred), &inv(gt))) / 2.0
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations.
pub fn jacobi_eigenvalues(mut a: Vec<f64>, n: usize) -> Vec<f64> {
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j] * a[i * n + j])
            .sum();
        if off < 1e-22 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[i * n + i]).collect()
}
