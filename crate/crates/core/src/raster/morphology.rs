use super::{Grid, SemanticMask};

/// Lattice offsets `(dx, dy)` with `dx² + dy² ≤ radius²`, in raster order.
pub fn disk_offsets(radius: usize) -> Vec<(i32, i32)> {
    let r = radius as i32;
    let r2 = r * r;
    let mut out = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dx * dx + dy * dy <= r2 {
                out.push((dx, dy));
            }
        }
    }
    out
}

/// Horizontal half-width of the disk on each row offset `dy ∈ [-r, r]`.
fn disk_half_widths(radius: usize) -> Vec<usize> {
    let r2 = (radius * radius) as i64;
    (-(radius as i64)..=radius as i64)
        .map(|dy| {
            let rem = r2 - dy * dy;
            let mut w = (rem as f64).sqrt() as i64;
            while (w + 1) * (w + 1) <= rem {
                w += 1;
            }
            while w * w > rem {
                w -= 1;
            }
            w as usize
        })
        .collect()
}

/// Per-row prefix counts of foreground pixels, `w + 1` entries per row.
fn row_prefix(mask: &SemanticMask) -> Vec<u32> {
    let (w, _) = mask.dims();
    let mut out = Vec::with_capacity(mask.len() + mask.height());
    for row in mask.rows() {
        let mut acc = 0u32;
        out.push(0);
        for &b in row {
            acc += b as u32;
            out.push(acc);
        }
    }
    debug_assert_eq!(out.len(), (w + 1) * mask.height());
    out
}

/// Binary dilation by a Euclidean disk of `radius` pixels.
///
/// `dilate(m, 0) == m`. Pixels outside the image are background.
pub fn dilate(mask: &SemanticMask, radius: usize) -> SemanticMask {
    if radius == 0 {
        return mask.clone();
    }
    let (w, h) = mask.dims();
    let prefix = row_prefix(mask);
    let half = disk_half_widths(radius);
    let mut out: SemanticMask = Grid::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let hit = half.iter().enumerate().any(|(k, &hw)| {
                let sy = y as i64 + k as i64 - radius as i64;
                if sy < 0 || sy >= h as i64 {
                    return false;
                }
                let lo = x.saturating_sub(hw);
                let hi = (x + hw + 1).min(w);
                let row = sy as usize * (w + 1);
                prefix[row + hi] > prefix[row + lo]
            });
            if hit {
                out.set(x, y, true);
            }
        }
    }
    out
}

/// Binary erosion by a Euclidean disk of `radius` pixels.
///
/// A pixel survives only if the whole disk around it lies inside the image
/// and on foreground.
pub fn erode(mask: &SemanticMask, radius: usize) -> SemanticMask {
    if radius == 0 {
        return mask.clone();
    }
    let (w, h) = mask.dims();
    let prefix = row_prefix(mask);
    let half = disk_half_widths(radius);
    let mut out: SemanticMask = Grid::new(w, h);
    for y in 0..h {
        for x in 0..w {
            if !*mask.get(x, y) {
                continue;
            }
            let keep = half.iter().enumerate().all(|(k, &hw)| {
                let sy = y as i64 + k as i64 - radius as i64;
                if sy < 0 || sy >= h as i64 || x < hw || x + hw >= w {
                    return false;
                }
                let row = sy as usize * (w + 1);
                (prefix[row + x + hw + 1] - prefix[row + x - hw]) as usize == 2 * hw + 1
            });
            if keep {
                out.set(x, y, true);
            }
        }
    }
    out
}
