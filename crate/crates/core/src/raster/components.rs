use super::{Connectivity, Grid, InstanceLabelMap, SemanticMask};

/// Labels the connected foreground components of `mask`.
///
/// Two-pass union-find. Labels are `1..=count`, assigned in raster order of
/// each component's first pixel. Returns the label map and the component
/// count.
pub fn connected_components(
    mask: &SemanticMask,
    connectivity: Connectivity,
) -> (InstanceLabelMap, u32) {
    let (w, h) = mask.dims();
    let bits = mask.as_slice();
    let mut provisional = vec![0u32; w * h];
    // parent[0] is unused so provisional labels index directly.
    let mut parent: Vec<u32> = vec![0];

    // Already-visited neighbours only.
    let back: &[(i32, i32)] = match connectivity {
        Connectivity::Four => &[(0, -1), (-1, 0)],
        Connectivity::Eight => &[(-1, -1), (0, -1), (1, -1), (-1, 0)],
    };

    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if !bits[i] {
                continue;
            }
            let mut current = 0u32;
            for &(dx, dy) in back {
                let nx = x as i64 + dx as i64;
                let ny = y as i64 + dy as i64;
                if nx < 0 || ny < 0 || nx >= w as i64 {
                    continue;
                }
                let l = provisional[ny as usize * w + nx as usize];
                if l == 0 {
                    continue;
                }
                if current == 0 {
                    current = find(&mut parent, l);
                } else {
                    current = union(&mut parent, current, l);
                }
            }
            if current == 0 {
                current = parent.len() as u32;
                parent.push(current);
            }
            provisional[i] = current;
        }
    }

    // Compact roots to 1..=count in order of first appearance.
    let mut compact = vec![0u32; parent.len()];
    let mut count = 0u32;
    for l in provisional.iter_mut() {
        if *l == 0 {
            continue;
        }
        let root = find(&mut parent, *l) as usize;
        if compact[root] == 0 {
            count += 1;
            compact[root] = count;
        }
        *l = compact[root];
    }
    (
        Grid {
            width: w,
            height: h,
            data: provisional,
        },
        count,
    )
}

fn find(parent: &mut [u32], mut l: u32) -> u32 {
    while parent[l as usize] != l {
        let grand = parent[parent[l as usize] as usize];
        parent[l as usize] = grand;
        l = grand;
    }
    l
}

fn union(parent: &mut [u32], a: u32, b: u32) -> u32 {
    let ra = find(parent, a);
    let rb = find(parent, b);
    let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
    parent[hi as usize] = lo;
    lo
}
