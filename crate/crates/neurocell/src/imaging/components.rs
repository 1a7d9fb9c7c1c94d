//! Two-pass union-find connected-component labeling at 8-connectivity.

use super::BinaryRaster;

/// Component labels per pixel: 0 is background, foreground labels are
/// exactly 1..=count, contiguous, ordered by first pixel in row-major scan.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u32>,
    pub count: usize,
}

impl LabelMap {
    #[inline]
    pub fn get(&self, r: usize, c: usize) -> u32 {
        self.labels[r * self.width + c]
    }
}

/// One labeled component with its size, centroid and bounding box.
#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    pub label: u32,
    pub pixel_count: usize,
    /// Arithmetic mean of member pixel coordinates, (row, col).
    pub centroid: (f64, f64),
    /// (min_row, min_col, max_row, max_col), inclusive.
    pub bounding_box: (usize, usize, usize, usize),
}

struct UnionFind {
    parent: Vec<u32>,
}

impl UnionFind {
    fn new() -> Self {
        UnionFind { parent: vec![0] } // label 0 = background sentinel
    }

    fn make(&mut self) -> u32 {
        let id = self.parent.len() as u32;
        self.parent.push(id);
        id
    }

    fn find(&mut self, mut x: u32) -> u32 {
        while self.parent[x as usize] != x {
            let gp = self.parent[self.parent[x as usize] as usize];
            self.parent[x as usize] = gp;
            x = gp;
        }
        x
    }

    fn union(&mut self, a: u32, b: u32) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            // keep the smaller root so provisional order follows the scan
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi as usize] = lo;
        }
    }
}

/// Labels 8-connected foreground components and derives their statistics.
pub fn connected_components(binary: &BinaryRaster) -> (LabelMap, Vec<Component>) {
    let (h, w) = (binary.height, binary.width);
    let mut provisional = vec![0u32; h * w];
    let mut uf = UnionFind::new();

    // pass 1: assign provisional labels, merging with the four already
    // visited neighbors (W, NW, N, NE)
    for r in 0..h {
        for c in 0..w {
            if !binary.data[r * w + c] {
                continue;
            }
            let mut neighbors = [0u32; 4];
            let mut n = 0;
            if c > 0 && provisional[r * w + c - 1] != 0 {
                neighbors[n] = provisional[r * w + c - 1];
                n += 1;
            }
            if r > 0 {
                let up = (r - 1) * w;
                if c > 0 && provisional[up + c - 1] != 0 {
                    neighbors[n] = provisional[up + c - 1];
                    n += 1;
                }
                if provisional[up + c] != 0 {
                    neighbors[n] = provisional[up + c];
                    n += 1;
                }
                if c + 1 < w && provisional[up + c + 1] != 0 {
                    neighbors[n] = provisional[up + c + 1];
                    n += 1;
                }
            }
            let label = if n == 0 {
                uf.make()
            } else {
                for &other in &neighbors[1..n] {
                    uf.union(neighbors[0], other);
                }
                neighbors[0]
            };
            provisional[r * w + c] = label;
        }
    }

    // pass 2: resolve roots, relabel contiguously by first-pixel order
    let mut remap = vec![0u32; uf.parent.len()];
    let mut count = 0u32;
    let mut labels = vec![0u32; h * w];
    for i in 0..h * w {
        let p = provisional[i];
        if p == 0 {
            continue;
        }
        let root = uf.find(p);
        if remap[root as usize] == 0 {
            count += 1;
            remap[root as usize] = count;
        }
        labels[i] = remap[root as usize];
    }

    let mut comps: Vec<Component> = (1..=count)
        .map(|label| Component {
            label,
            pixel_count: 0,
            centroid: (0.0, 0.0),
            bounding_box: (usize::MAX, usize::MAX, 0, 0),
        })
        .collect();
    for r in 0..h {
        for c in 0..w {
            let l = labels[r * w + c];
            if l == 0 {
                continue;
            }
            let comp = &mut comps[(l - 1) as usize];
            comp.pixel_count += 1;
            comp.centroid.0 += r as f64;
            comp.centroid.1 += c as f64;
            let bb = &mut comp.bounding_box;
            bb.0 = bb.0.min(r);
            bb.1 = bb.1.min(c);
            bb.2 = bb.2.max(r);
            bb.3 = bb.3.max(c);
        }
    }
    for comp in &mut comps {
        comp.centroid.0 /= comp.pixel_count as f64;
        comp.centroid.1 /= comp.pixel_count as f64;
    }
    (LabelMap { height: h, width: w, labels, count: count as usize }, comps)
}

/// Drops components smaller than `min_size` pixels and relabels the
/// survivors contiguously, preserving order.
pub fn filter_components_by_size(
    map: &LabelMap,
    comps: &[Component],
    min_size: usize,
) -> (LabelMap, Vec<Component>) {
    let mut remap = vec![0u32; comps.len() + 1];
    let mut kept = Vec::new();
    let mut next = 0u32;
    for comp in comps {
        if comp.pixel_count >= min_size {
            next += 1;
            remap[comp.label as usize] = next;
            let mut c = comp.clone();
            c.label = next;
            kept.push(c);
        }
    }
    let labels = map.labels.iter().map(|&l| remap[l as usize]).collect();
    (
        LabelMap { height: map.height, width: map.width, labels, count: next as usize },
        kept,
    )
}
