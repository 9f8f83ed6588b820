//! Exact squared Euclidean distance transforms.
//!
//! Distances are computed with the two-pass 1D parabolic-envelope method
//! applied once per axis, which is exact in squared-distance arithmetic.
//! Sources are the `false` entries of the input mask; `true` entries receive
//! the squared distance to the nearest source. An entry with no reachable
//! source is `f64::INFINITY`.

use ndarray::{Array2, Array3};

const INF: f64 = f64::INFINITY;

/// 1D squared distance transform of a sampled cost function `f`.
///
/// `f[i]` is the cost of treating sample `i` as a source; the output is
/// `min_j (i - j)^2 + f[j]`.
fn dt_1d(f: &[f64], out: &mut [f64]) {
    let n = f.len();
    debug_assert_eq!(out.len(), n);
    if n == 0 {
        return;
    }
    // v: parabola apex indices, z: boundaries between parabolas.
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    v[0] = 0;
    z[0] = -INF;
    z[1] = INF;
    for q in 1..n {
        if f[q] == INF {
            continue;
        }
        loop {
            let p = v[k];
            let s = if f[p] == INF {
                // The standing parabola is infinite: the new one dominates everywhere.
                -INF
            } else {
                ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q - p) as f64)
            };
            if s <= z[k] {
                if k == 0 {
                    v[0] = q;
                    z[0] = -INF;
                    z[1] = INF;
                    break;
                }
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = INF;
                break;
            }
        }
    }
    let mut k = 0usize;
    for q in 0..n {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        out[q] = if f[p] == INF {
            INF
        } else {
            let d = q as f64 - p as f64;
            d * d + f[p]
        };
    }
}

/// Squared distance from each `true` pixel to the nearest `false` pixel.
/// Pixels outside the grid are ignored (they are not sources).
pub fn squared_edt_2d(mask: &Array2<bool>) -> Array2<f64> {
    let (h, w) = mask.dim();
    let mut dist = Array2::from_shape_fn((h, w), |p| if mask[p] { INF } else { 0.0 });
    let mut buf_in = vec![0.0; h.max(w)];
    let mut buf_out = vec![0.0; h.max(w)];
    // Pass along axis 0.
    for y in 0..w {
        for x in 0..h {
            buf_in[x] = dist[(x, y)];
        }
        dt_1d(&buf_in[..h], &mut buf_out[..h]);
        for x in 0..h {
            dist[(x, y)] = buf_out[x];
        }
    }
    // Pass along axis 1.
    for x in 0..h {
        for y in 0..w {
            buf_in[y] = dist[(x, y)];
        }
        dt_1d(&buf_in[..w], &mut buf_out[..w]);
        for y in 0..w {
            dist[(x, y)] = buf_out[y];
        }
    }
    dist
}

/// 2D variant that additionally treats everything outside the grid as a
/// source, so the result is bounded by the distance to the grid border.
pub fn squared_edt_2d_bounded(mask: &Array2<bool>) -> Array2<f64> {
    let (h, w) = mask.dim();
    let mut dist = squared_edt_2d(mask);
    for ((x, y), v) in dist.indexed_iter_mut() {
        let border = (x + 1).min(h - x).min(y + 1).min(w - y) as f64;
        if border * border < *v {
            *v = border * border;
        }
    }
    dist
}

/// Squared distance from each `true` voxel to the nearest `false` voxel.
/// Voxels outside the grid are ignored (they are not sources).
pub fn squared_edt_3d(mask: &Array3<bool>) -> Array3<f64> {
    let (h, w, d) = mask.dim();
    let mut dist = Array3::from_shape_fn((h, w, d), |p| if mask[p] { INF } else { 0.0 });
    let m = h.max(w).max(d);
    let mut buf_in = vec![0.0; m];
    let mut buf_out = vec![0.0; m];
    for y in 0..w {
        for z in 0..d {
            for x in 0..h {
                buf_in[x] = dist[(x, y, z)];
            }
            dt_1d(&buf_in[..h], &mut buf_out[..h]);
            for x in 0..h {
                dist[(x, y, z)] = buf_out[x];
            }
        }
    }
    for x in 0..h {
        for z in 0..d {
            for y in 0..w {
                buf_in[y] = dist[(x, y, z)];
            }
            dt_1d(&buf_in[..w], &mut buf_out[..w]);
            for y in 0..w {
                dist[(x, y, z)] = buf_out[y];
            }
        }
    }
    for x in 0..h {
        for y in 0..w {
            for z in 0..d {
                buf_in[z] = dist[(x, y, z)];
            }
            dt_1d(&buf_in[..d], &mut buf_out[..d]);
            for z in 0..d {
                dist[(x, y, z)] = buf_out[z];
            }
        }
    }
    dist
}
