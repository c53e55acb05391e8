//! Exact squared Euclidean distance transform (Felzenszwalb & Huttenlocher),
//! separable over the three axes with per-axis spacing.

use crate::par;
use crate::volume::Geometry;

/// Squared distance in mm² from every voxel center to the nearest site.
/// Returns `f64::INFINITY` everywhere when there are no sites.
pub fn squared_distance_to_sites(g: &Geometry, sites: &[bool]) -> Vec<f64> {
    assert_eq!(sites.len(), g.len());
    let mut dist: Vec<f64> = sites
        .iter()
        .map(|&s| if s { 0.0 } else { f64::INFINITY })
        .collect();
    for axis in [2, 1, 0] {
        transform_axis(g, &mut dist, axis);
    }
    dist
}

fn transform_axis(g: &Geometry, dist: &mut [f64], axis: usize) {
    let [nx, ny, nz] = g.shape;
    let n = g.shape[axis];
    let stride = match axis {
        0 => ny * nz,
        1 => nz,
        _ => 1,
    };
    // base offsets of every line along `axis`
    let bases: Vec<usize> = match axis {
        0 => (0..ny).flat_map(|y| (0..nz).map(move |z| y * nz + z)).collect(),
        1 => (0..nx).flat_map(|x| (0..nz).map(move |z| x * ny * nz + z)).collect(),
        _ => (0..nx * ny).map(|xy| xy * nz).collect(),
    };
    let spacing = g.spacing[axis];
    let src: &[f64] = dist;
    let lines = par::map_range(bases.len(), |l| {
        let base = bases[l];
        let f: Vec<f64> = (0..n).map(|q| src[base + q * stride]).collect();
        lower_envelope(&f, spacing)
    });
    for (base, line) in bases.iter().zip(lines) {
        for (q, d) in line.into_iter().enumerate() {
            dist[base + q * stride] = d;
        }
    }
}

/// 1D transform `d(q) = min_v (p_q - p_v)^2 + f(v)` with `p_q = q * spacing`.
fn lower_envelope(f: &[f64], spacing: f64) -> Vec<f64> {
    let n = f.len();
    let pos = |q: usize| q as f64 * spacing;
    let mut v: Vec<usize> = Vec::with_capacity(n);
    let mut z: Vec<f64> = Vec::with_capacity(n + 1);
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        if v.is_empty() {
            v.push(q);
            z.push(f64::NEG_INFINITY);
            continue;
        }
        let pq = pos(q);
        let mut s;
        loop {
            let r = *v.last().unwrap();
            let pr = pos(r);
            s = ((f[q] + pq * pq) - (f[r] + pr * pr)) / (2.0 * (pq - pr));
            if v.len() > 1 && s <= *z.last().unwrap() {
                v.pop();
                z.pop();
            } else {
                break;
            }
        }
        v.push(q);
        z.push(s);
    }
    if v.is_empty() {
        return vec![f64::INFINITY; n];
    }
    let mut out = vec![0.0; n];
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        let pq = pos(q);
        while k + 1 < v.len() && z[k + 1] < pq {
            k += 1;
        }
        let d = pq - pos(v[k]);
        *o = d * d + f[v[k]];
    }
    out
}
