//! 8-connected component labelling.

use crate::mask::Mask;

pub(crate) const NEIGHBORS8: [(isize, isize); 8] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, -1),
    (0, 1),
    (1, -1),
    (1, 0),
    (1, 1),
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Labeling {
    /// 0 for background, `1..=count` for components, in raster order of first pixel.
    pub labels: Vec<u32>,
    pub count: usize,
    pub width: usize,
}

impl Labeling {
    pub fn label(&self, r: usize, c: usize) -> u32 {
        self.labels[r * self.width + c]
    }

    /// Pixel count of every component, indexed by `label - 1`.
    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.count];
        for &l in &self.labels {
            if l > 0 {
                sizes[l as usize - 1] += 1;
            }
        }
        sizes
    }
}

pub fn label_components(mask: &Mask) -> Labeling {
    let (h, w) = mask.dims();
    let mut labels = vec![0u32; h * w];
    let mut count = 0u32;
    let mut stack = Vec::new();
    for start in 0..h * w {
        if mask.data()[start] == 0 || labels[start] != 0 {
            continue;
        }
        count += 1;
        labels[start] = count;
        stack.push(start);
        while let Some(i) = stack.pop() {
            let (r, c) = ((i / w) as isize, (i % w) as isize);
            for (dr, dc) in NEIGHBORS8 {
                let (nr, nc) = (r + dr, c + dc);
                if mask.get_i(nr, nc) {
                    let j = nr as usize * w + nc as usize;
                    if labels[j] == 0 {
                        labels[j] = count;
                        stack.push(j);
                    }
                }
            }
        }
    }
    Labeling {
        labels,
        count: count as usize,
        width: w,
    }
}

/// Number of 8-connected foreground components (Betti-0).
pub fn component_count(mask: &Mask) -> usize {
    label_components(mask).count
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_touch_is_connected() {
        let m = Mask::from_ascii(&["#..", ".#.", "..#"]);
        assert_eq!(component_count(&m), 1);
    }

    #[test]
    fn three_blobs() {
        let m = Mask::from_ascii(&["##...#", "##....", "......", "...###"]);
        let l = label_components(&m);
        assert_eq!(l.count, 3);
        assert_eq!(l.sizes(), vec![4, 1, 3]);
    }

    #[test]
    fn empty_mask_has_no_components() {
        assert_eq!(component_count(&Mask::empty(5, 7)), 0);
    }
}
