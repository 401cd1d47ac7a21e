//! Stress inputs: cut short windows out of vessel masks along their centrelines.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::metrics::components::{component_count, NEIGHBORS8};
use crate::metrics::skeleton::thin;
use crate::metrics::squared_distance_to;

#[derive(Debug, Clone, PartialEq)]
pub struct Fragmented {
    pub mask: Mask,
    /// Centre pixel of every accepted break, in acceptance order.
    pub breaks: Vec<(usize, usize)>,
}

fn skel_neighbors(s: &Mask, (r, c): (usize, usize)) -> Vec<(usize, usize)> {
    NEIGHBORS8
        .iter()
        .filter_map(|&(dr, dc)| {
            let (nr, nc) = (r as isize + dr, c as isize + dc);
            s.get_i(nr, nc).then_some((nr as usize, nc as usize))
        })
        .collect()
}

/// Follows a degree-2 path from `start` away from `prev` for `steps` pixels.
fn walk(s: &Mask, prev: (usize, usize), start: (usize, usize), steps: usize) -> Option<Vec<(usize, usize)>> {
    let mut out = vec![start];
    let (mut from, mut at) = (prev, start);
    while out.len() < steps {
        let nb = skel_neighbors(s, at);
        if nb.len() != 2 {
            return None;
        }
        let next = if nb[0] == from { nb[1] } else { nb[0] };
        if next == from || out.contains(&next) {
            return None;
        }
        out.push(next);
        from = at;
        at = next;
    }
    (skel_neighbors(s, at).len() == 2).then_some(out)
}

struct Candidate {
    centre: (usize, usize),
    window: Vec<(usize, usize)>,
}

/// For every mask pixel, the index of its nearest skeleton pixel (ties to the
/// lowest index), or `usize::MAX` off the mask.
fn owners(mask: &Mask, skel: &Mask) -> Vec<usize> {
    let (h, w) = mask.dims();
    let d2 = squared_distance_to(skel);
    let reach = mask
        .pixels()
        .map(|(r, c)| d2[r * w + c])
        .fold(0.0f64, f64::max)
        .sqrt()
        .ceil() as isize;
    let mut out = vec![usize::MAX; h * w];
    for (r, c) in mask.pixels() {
        let mut best = (i64::MAX, usize::MAX);
        for dr in -reach..=reach {
            for dc in -reach..=reach {
                let (sr, sc) = (r as isize + dr, c as isize + dc);
                if skel.get_i(sr, sc) {
                    let idx = sr as usize * w + sc as usize;
                    let d = (dr * dr + dc * dc) as i64;
                    if (d, idx) < best {
                        best = (d, idx);
                    }
                }
            }
        }
        out[r * w + c] = best.1;
    }
    out
}

/// Erases up to `n_breaks` windows of `gap` centreline pixels. Each window
/// takes with it the mask pixels closest to it, and a window is kept only if
/// it splits a component. Windows sit on plain path stretches away from
/// junctions and ends and are spread at least `2·gap` apart. Candidates are
/// visited in one seeded order, so for a fixed seed the breaks for `n` are a
/// prefix of the breaks for `n + 1`.
pub fn fragment_mask_detailed(mask: &Mask, n_breaks: usize, gap: usize, rng: &mut impl Rng) -> Result<Fragmented> {
    if gap == 0 {
        return Err(Error::InvalidArgument("gap must be at least 1".into()));
    }
    if n_breaks == 0 {
        return Ok(Fragmented {
            mask: mask.clone(),
            breaks: Vec::new(),
        });
    }
    if !mask.any() {
        return Err(Error::InvalidArgument("cannot fragment an empty mask".into()));
    }
    let skel = thin(mask);
    let w = mask.width();
    let reach = (gap + 1) / 2 + 2;
    let mut candidates = Vec::new();
    for p in skel.pixels() {
        let nb = skel_neighbors(&skel, p);
        if nb.len() != 2 {
            continue;
        }
        let (Some(a), Some(b)) = (walk(&skel, p, nb[0], reach), walk(&skel, p, nb[1], reach)) else {
            continue;
        };
        if a.iter().any(|q| b.contains(q)) {
            continue;
        }
        let mut window = vec![p];
        let mut k = 0;
        while window.len() < gap {
            let side = if k % 2 == 0 { &a } else { &b };
            window.push(side[k / 2]);
            k += 1;
        }
        candidates.push(Candidate { centre: p, window });
    }
    candidates.shuffle(rng);

    let owner = owners(mask, &skel);
    let min_sep = (2 * gap).max(2) as f64 + 2.0;
    let mut out = mask.clone();
    let mut count = component_count(&out);
    let mut breaks: Vec<(usize, usize)> = Vec::new();
    for cand in &candidates {
        if breaks.len() == n_breaks {
            break;
        }
        let far = breaks.iter().all(|&(r, c)| {
            let (dr, dc) = (r as f64 - cand.centre.0 as f64, c as f64 - cand.centre.1 as f64);
            (dr * dr + dc * dc).sqrt() >= min_sep
        });
        if !far {
            continue;
        }
        let ids: Vec<usize> = cand.window.iter().map(|&(r, c)| r * w + c).collect();
        let mut trial = out.clone();
        for (r, c) in out.pixels() {
            if ids.contains(&owner[r * w + c]) {
                trial.set(r, c, false);
            }
        }
        let n = component_count(&trial);
        if n == count + 1 {
            out = trial;
            count = n;
            breaks.push(cand.centre);
        }
    }
    Ok(Fragmented { mask: out, breaks })
}

pub fn fragment_mask(mask: &Mask, n_breaks: usize, gap: usize, rng: &mut impl Rng) -> Result<Mask> {
    fragment_mask_detailed(mask, n_breaks, gap, rng).map(|f| f.mask)
}
