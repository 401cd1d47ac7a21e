//! Hard (binary) skeletonization and skeleton graph extraction.
//!
//! Thinning alternates two directional sub-iterations in the style of
//! Zhang–Suen, but only removes simple points (Yokoi 8-connectivity number
//! equal to one), re-checked against the live raster. Sequential
//! removal of simple points cannot split, merge or erase a component, so the
//! skeleton of a connected mask stays connected and non-empty.

use serde::{Deserialize, Serialize};

use super::components::{label_components, Labeling, NEIGHBORS8};
use crate::mask::Mask;

/// Radius (pixels) within which junction pixels are merged into one cluster.
pub const JUNCTION_CLUSTER_RADIUS: f64 = 2.0;

#[derive(Debug, Clone)]
pub struct SkeletonGraph {
    pub skeleton: Mask,
    /// Skeleton pixels with at least three skeleton neighbours.
    pub junction_pixels: Vec<(usize, usize)>,
    /// Centroids of merged junction clusters.
    pub junctions: Vec<Junction>,
    /// Skeleton pixels with exactly one skeleton neighbour.
    pub endpoints: Vec<(usize, usize)>,
    pub components: Labeling,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Junction {
    pub row: f64,
    pub col: f64,
}

impl Junction {
    pub fn distance(&self, other: &Junction) -> f64 {
        ((self.row - other.row).powi(2) + (self.col - other.col).powi(2)).sqrt()
    }
}

impl SkeletonGraph {
    pub fn is_empty(&self) -> bool {
        !self.skeleton.any()
    }
}

/// Neighbour ring in Yokoi order: E, NE, N, NW, W, SW, S, SE.
const RING: [(isize, isize); 8] = [
    (0, 1),
    (-1, 1),
    (-1, 0),
    (-1, -1),
    (0, -1),
    (1, -1),
    (1, 0),
    (1, 1),
];

fn ring(m: &Mask, r: usize, c: usize) -> [bool; 8] {
    let (r, c) = (r as isize, c as isize);
    let mut out = [false; 8];
    for (k, (dr, dc)) in RING.iter().enumerate() {
        out[k] = m.get_i(r + dr, c + dc);
    }
    out
}

/// Yokoi connectivity number for 8-connected foreground.
fn connectivity_number(x: &[bool; 8]) -> u8 {
    let xb = |k: usize| u8::from(!x[k % 8]);
    [0usize, 2, 4, 6]
        .iter()
        .map(|&k| xb(k) - xb(k) * xb(k + 1) * xb(k + 2))
        .sum()
}

/// Removes simple points until the mask is one pixel wide.
///
/// Each sub-iteration selects candidates on a snapshot (directional border,
/// 2..=6 neighbours) so only one layer is peeled per pass, then deletes them
/// in raster order while re-checking simplicity on the live raster.
pub fn thin(mask: &Mask) -> Mask {
    let mut m = mask.clone();
    let (h, w) = m.dims();
    let mut candidates = Vec::new();
    loop {
        let mut changed = false;
        for sub in 0..2 {
            candidates.clear();
            for r in 0..h {
                for c in 0..w {
                    if !m.get(r, c) {
                        continue;
                    }
                    let x = ring(&m, r, c);
                    let n = x.iter().filter(|&&v| v).count();
                    if !(2..=6).contains(&n) {
                        continue;
                    }
                    let (e, nn, wv, s) = (x[0], x[2], x[4], x[6]);
                    let directional = if sub == 0 {
                        !(nn && e && s) && !(e && s && wv)
                    } else {
                        !(nn && e && wv) && !(nn && s && wv)
                    };
                    if directional && connectivity_number(&x) == 1 {
                        candidates.push((r, c));
                    }
                }
            }
            for &(r, c) in &candidates {
                let x = ring(&m, r, c);
                let n = x.iter().filter(|&&v| v).count();
                if n >= 2 && connectivity_number(&x) == 1 {
                    m.set(r, c, false);
                    changed = true;
                }
            }
        }
        if !changed {
            return m;
        }
    }
}

fn neighbor_count(m: &Mask, r: usize, c: usize) -> usize {
    let (r, c) = (r as isize, c as isize);
    NEIGHBORS8
        .iter()
        .filter(|&&(dr, dc)| m.get_i(r + dr, c + dc))
        .count()
}

/// Single-linkage clustering of points within `radius`; returns centroids in
/// order of each cluster's first member.
pub fn cluster_points(points: &[(usize, usize)], radius: f64) -> Vec<Junction> {
    let n = points.len();
    let mut cluster = vec![usize::MAX; n];
    let mut out = Vec::new();
    let r2 = radius * radius;
    for start in 0..n {
        if cluster[start] != usize::MAX {
            continue;
        }
        let id = out.len();
        cluster[start] = id;
        let mut stack = vec![start];
        let (mut sr, mut sc, mut cnt) = (0.0, 0.0, 0.0);
        while let Some(i) = stack.pop() {
            sr += points[i].0 as f64;
            sc += points[i].1 as f64;
            cnt += 1.0;
            for j in 0..n {
                if cluster[j] == usize::MAX {
                    let dr = points[i].0 as f64 - points[j].0 as f64;
                    let dc = points[i].1 as f64 - points[j].1 as f64;
                    if dr * dr + dc * dc <= r2 {
                        cluster[j] = id;
                        stack.push(j);
                    }
                }
            }
        }
        out.push(Junction {
            row: sr / cnt,
            col: sc / cnt,
        });
    }
    out
}

/// Thins `mask` and extracts junction clusters, endpoints and components.
pub fn hard_skeletonize(mask: &Mask) -> SkeletonGraph {
    let skeleton = thin(mask);
    let mut junction_pixels = Vec::new();
    let mut endpoints = Vec::new();
    for (r, c) in skeleton.pixels() {
        match neighbor_count(&skeleton, r, c) {
            1 => endpoints.push((r, c)),
            n if n >= 3 => junction_pixels.push((r, c)),
            _ => {}
        }
    }
    let junctions = cluster_points(&junction_pixels, JUNCTION_CLUSTER_RADIUS);
    let components = label_components(&skeleton);
    SkeletonGraph {
        skeleton,
        junction_pixels,
        junctions,
        endpoints,
        components,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::components::component_count;

    fn bar(h: usize, w: usize, r0: usize, r1: usize, c0: usize, c1: usize) -> Mask {
        Mask::from_fn(h, w, |r, c| (r0..r1).contains(&r) && (c0..c1).contains(&c))
    }

    #[test]
    fn three_px_bar_becomes_a_single_path() {
        let m = bar(7, 26, 2, 5, 3, 23);
        let g = hard_skeletonize(&m);
        assert_eq!(g.endpoints.len(), 2, "{:?}", g.skeleton);
        assert!(g.junctions.is_empty(), "{:?}", g.skeleton);
        assert_eq!(g.components.count, 1);
        // one pixel per column at most
        for c in 0..26 {
            let col: usize = (0..7).filter(|&r| g.skeleton.get(r, c)).count();
            assert!(col <= 1);
        }
    }

    #[test]
    fn plus_sign_has_one_junction_and_four_endpoints() {
        for width in [1usize, 3] {
            let (n, mid) = (21, 10);
            let half = width / 2;
            let m = Mask::from_fn(n, n, |r, c| {
                (r.abs_diff(mid) <= half && (2..19).contains(&c))
                    || (c.abs_diff(mid) <= half && (2..19).contains(&r))
            });
            let g = hard_skeletonize(&m);
            assert_eq!(g.junctions.len(), 1, "width {width}\n{:?}", g.skeleton);
            assert_eq!(g.endpoints.len(), 4, "width {width}\n{:?}", g.skeleton);
        }
    }

    #[test]
    fn empty_mask_gives_empty_skeleton() {
        let g = hard_skeletonize(&Mask::empty(8, 8));
        assert!(g.is_empty());
        assert!(g.junctions.is_empty() && g.endpoints.is_empty());
    }

    #[test]
    fn small_blobs_never_vanish() {
        let m = Mask::from_ascii(&["......", ".##...", ".##...", "......", "....##", "....##"]);
        let s = thin(&m);
        assert_eq!(component_count(&s), 2);
        assert!(s.and_not(&m).unwrap().count() == 0);
    }

    #[test]
    fn thick_disc_keeps_topology() {
        let m = Mask::from_fn(21, 21, |r, c| {
            let (dr, dc) = (r as f64 - 10.0, c as f64 - 10.0);
            dr * dr + dc * dc <= 64.0
        });
        let s = thin(&m);
        assert_eq!(component_count(&s), 1);
        // no holes introduced: background stays one 4-connected region
        let bg = Mask::from_fn(21, 21, |r, c| !s.get(r, c));
        assert_eq!(crate::metrics::components::component_count(&bg), 1);
    }
}
