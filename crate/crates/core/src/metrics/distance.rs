//! Exact Euclidean distance transform and boundary-based Hausdorff distance.

use crate::error::{Error, Result};
use crate::mask::Mask;

const INF: f64 = f64::INFINITY;

/// 1-D squared distance transform of a sampled function (lower envelope of parabolas).
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    if n == 0 {
        return;
    }
    let mut k = 0usize;
    // skip leading infinities so the envelope starts on a finite sample
    let Some(first) = f.iter().position(|x| x.is_finite()) else {
        out.fill(INF);
        return;
    };
    v[0] = first;
    z[0] = -INF;
    z[1] = INF;
    for q in first + 1..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= z[k] {
                if k == 0 {
                    v[0] = q;
                    z[1] = INF;
                    break;
                }
                k -= 1;
                continue;
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = INF;
            break;
        }
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Squared Euclidean distance from every pixel to the nearest foreground
/// pixel of `features`; `+inf` everywhere when `features` is empty.
pub fn squared_distance_to(features: &Mask) -> Vec<f64> {
    let (h, w) = features.dims();
    let mut grid: Vec<f64> = features
        .data()
        .iter()
        .map(|&v| if v != 0 { 0.0 } else { INF })
        .collect();
    let n = h.max(w);
    let mut f = vec![0.0; n];
    let mut out = vec![0.0; n];
    let mut v = vec![0usize; n];
    let mut z = vec![0.0; n + 1];
    for c in 0..w {
        for r in 0..h {
            f[r] = grid[r * w + c];
        }
        edt_1d(&f[..h], &mut out[..h], &mut v, &mut z);
        for r in 0..h {
            grid[r * w + c] = out[r];
        }
    }
    for r in 0..h {
        f[..w].copy_from_slice(&grid[r * w..(r + 1) * w]);
        edt_1d(&f[..w], &mut out[..w], &mut v, &mut z);
        grid[r * w..(r + 1) * w].copy_from_slice(&out[..w]);
    }
    grid
}

/// Foreground pixels with a 4-neighbour in the background or on the image border.
pub fn boundary(mask: &Mask) -> Mask {
    let (h, w) = mask.dims();
    Mask::from_fn(h, w, |r, c| {
        if !mask.get(r, c) {
            return false;
        }
        let (r, c) = (r as isize, c as isize);
        [(-1, 0), (1, 0), (0, -1), (0, 1)]
            .iter()
            .any(|&(dr, dc)| !mask.get_i(r + dr, c + dc))
    })
}

/// Linear-interpolated percentile (the NumPy default), `q` in `[0,100]`.
pub fn percentile(values: &mut [f64], q: f64) -> f64 {
    assert!(!values.is_empty());
    values.sort_by(|a, b| a.total_cmp(b));
    let pos = q / 100.0 * (values.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    values[lo] + (values[hi] - values[lo]) * (pos - lo as f64)
}

/// Distances from each boundary pixel of `from` to the boundary of `to`.
pub fn directed_boundary_distances(from: &Mask, to: &Mask) -> Vec<f64> {
    let target = squared_distance_to(&boundary(to));
    let w = from.width();
    boundary(from)
        .pixels()
        .map(|(r, c)| target[r * w + c].sqrt())
        .collect()
}

/// 95th-percentile symmetric Hausdorff distance between mask boundaries, in
/// pixels: the larger of the two directed 95th percentiles.
///
/// Both empty gives 0; exactly one empty gives the image diagonal.
pub fn hd95(pred: &Mask, gt: &Mask) -> Result<f64> {
    hausdorff_percentile(pred, gt, 95.0)
}

pub fn hausdorff_percentile(pred: &Mask, gt: &Mask, q: f64) -> Result<f64> {
    if pred.dims() != gt.dims() {
        return Err(Error::Shape(format!(
            "hd95: {:?} vs {:?}",
            pred.dims(),
            gt.dims()
        )));
    }
    match (pred.any(), gt.any()) {
        (false, false) => return Ok(0.0),
        (true, true) => {}
        _ => {
            let (h, w) = pred.dims();
            return Ok(((h * h + w * w) as f64).sqrt());
        }
    }
    let mut ab = directed_boundary_distances(pred, gt);
    let mut ba = directed_boundary_distances(gt, pred);
    Ok(percentile(&mut ab, q).max(percentile(&mut ba, q)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn edt_matches_brute_force() {
        let m = Mask::from_ascii(&["#.......", "........", "....#...", "........", ".......#"]);
        let d = squared_distance_to(&m);
        let pts: Vec<_> = m.pixels().collect();
        for r in 0..m.height() {
            for c in 0..m.width() {
                let best = pts
                    .iter()
                    .map(|&(pr, pc)| {
                        let (dr, dc) = (pr as f64 - r as f64, pc as f64 - c as f64);
                        dr * dr + dc * dc
                    })
                    .fold(INF, f64::min);
                assert_eq!(d[r * m.width() + c], best, "at {r},{c}");
            }
        }
    }

    #[test]
    fn single_pixels_three_four_five() {
        let mut a = Mask::empty(6, 6);
        a.set(0, 0, true);
        let mut b = Mask::empty(6, 6);
        b.set(3, 4, true);
        assert_eq!(hd95(&a, &b).unwrap(), 5.0);
    }

    #[test]
    fn identical_and_empty_conventions() {
        let a = Mask::from_ascii(&[".##.", ".##.", "...."]);
        assert_eq!(hd95(&a, &a).unwrap(), 0.0);
        let e = Mask::empty(3, 4);
        assert_eq!(hd95(&e, &e).unwrap(), 0.0);
        assert_eq!(hd95(&a, &e).unwrap(), 5.0);
        assert!(hd95(&a, &Mask::empty(4, 4)).is_err());
    }

    #[test]
    fn percentile_interpolates() {
        let mut v = vec![4.0, 1.0, 3.0, 2.0];
        assert_eq!(percentile(&mut v, 50.0), 2.5);
        assert_eq!(percentile(&mut v, 100.0), 4.0);
    }
}
