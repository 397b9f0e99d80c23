use super::{Grid, ProbabilityMap, SemanticMask};

const INF: i64 = i64::MAX / 4;

/// Exact Euclidean distance from each pixel to the nearest background pixel.
///
/// Background pixels are 0; a foreground pixel whose 4-neighbour is
/// background is 1. The image is surrounded by background, so an all-
/// foreground image measures distance to the nearest outside pixel.
///
/// Separable two-pass lower-envelope algorithm (Felzenszwalb & Huttenlocher)
/// on squared distances, so results are exact up to the final `sqrt`.
pub fn distance_transform(mask: &SemanticMask) -> ProbabilityMap {
    squared_distance_transform(mask).map(|&d| (d as f64).sqrt() as f32)
}

/// Squared Euclidean distances backing [`distance_transform`].
pub(crate) fn squared_distance_transform(mask: &SemanticMask) -> Grid<u64> {
    let (w, h) = mask.dims();
    // Pad by one background pixel on every side.
    let (pw, ph) = (w + 2, h + 2);
    let mut f = vec![INF; pw * ph];
    for y in 0..ph {
        for x in 0..pw {
            let inside = x >= 1 && y >= 1 && x <= w && y <= h && *mask.get(x - 1, y - 1);
            if !inside {
                f[y * pw + x] = 0;
            }
        }
    }

    let n = pw.max(ph);
    let mut column = vec![0i64; n];
    let mut out = vec![0i64; n];
    let mut v = vec![0usize; n];
    let mut z = vec![0f64; n + 1];

    for x in 0..pw {
        for y in 0..ph {
            column[y] = f[y * pw + x];
        }
        envelope(&column[..ph], &mut out[..ph], &mut v, &mut z);
        for y in 0..ph {
            f[y * pw + x] = out[y];
        }
    }
    for y in 0..ph {
        let row = &mut f[y * pw..(y + 1) * pw];
        column[..pw].copy_from_slice(row);
        envelope(&column[..pw], &mut out[..pw], &mut v, &mut z);
        row.copy_from_slice(&out[..pw]);
    }

    let mut data = Vec::with_capacity(w * h);
    for y in 1..=h {
        data.extend(f[y * pw + 1..y * pw + 1 + w].iter().map(|&d| d as u64));
    }
    Grid {
        width: w,
        height: h,
        data,
    }
}

/// 1-D squared distance transform of a sampled function `f` (INF = no site).
fn envelope(f: &[i64], d: &mut [i64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    let first = match f.iter().position(|&x| x < INF) {
        Some(i) => i,
        None => {
            d.fill(INF);
            return;
        }
    };
    v[0] = first;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in first + 1..n {
        if f[q] >= INF {
            continue;
        }
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as i64) - (f[p] + (p * p) as i64)) as f64
                / (2.0 * (q as f64 - p as f64));
            if s <= z[k] {
                // k > 0 here: z[0] is -inf.
                k -= 1;
                continue;
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
            break;
        }
    }
    k = 0;
    for (q, out) in d.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let dq = q as i64 - p as i64;
        *out = dq * dq + f[p];
    }
}
