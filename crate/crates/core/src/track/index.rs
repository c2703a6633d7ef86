//! Uniform grid over centerline chords for radius-limited nearest queries.

use crate::geom::Vec2;

const CELL_SIZE: f64 = 8.0;

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct SegmentGrid {
    origin: Vec2,
    nx: usize,
    ny: usize,
    /// CSR layout: chords of cell `c` are `items[starts[c]..starts[c + 1]]`.
    starts: Vec<u32>,
    items: Vec<u32>,
}

/// Nearest chord hit: chord index, parameter along it, squared distance.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ChordHit {
    pub chord: usize,
    pub t: f64,
    pub dist_sq: f64,
}

impl SegmentGrid {
    /// Chord `k` runs from `points[k]` to `points[(k + 1) % n]`.
    pub fn build(points: &[Vec2], n_chords: usize) -> Self {
        let (mut lo, mut hi) = (points[0], points[0]);
        for p in points {
            lo = Vec2::new(lo.x.min(p.x), lo.y.min(p.y));
            hi = Vec2::new(hi.x.max(p.x), hi.y.max(p.y));
        }
        let origin = lo - Vec2::new(CELL_SIZE, CELL_SIZE);
        let nx = ((hi.x - origin.x) / CELL_SIZE).ceil() as usize + 2;
        let ny = ((hi.y - origin.y) / CELL_SIZE).ceil() as usize + 2;

        let mut buckets: Vec<Vec<u32>> = vec![Vec::new(); nx * ny];
        let n = points.len();
        for k in 0..n_chords {
            let a = points[k];
            let b = points[(k + 1) % n];
            let cx0 = ((a.x.min(b.x) - origin.x) / CELL_SIZE) as usize;
            let cx1 = ((a.x.max(b.x) - origin.x) / CELL_SIZE) as usize;
            let cy0 = ((a.y.min(b.y) - origin.y) / CELL_SIZE) as usize;
            let cy1 = ((a.y.max(b.y) - origin.y) / CELL_SIZE) as usize;
            for cy in cy0..=cy1 {
                for cx in cx0..=cx1 {
                    buckets[cy * nx + cx].push(k as u32);
                }
            }
        }
        let mut starts = Vec::with_capacity(nx * ny + 1);
        let mut items = Vec::new();
        starts.push(0);
        for b in buckets {
            items.extend(b);
            starts.push(items.len() as u32);
        }
        SegmentGrid {
            origin,
            nx,
            ny,
            starts,
            items,
        }
    }

    /// Closest chord whose distance to `p` is at most `radius`.
    pub fn nearest_within(&self, points: &[Vec2], p: Vec2, radius: f64) -> Option<ChordHit> {
        let rel = p - self.origin;
        let to_cell = |v: f64, n: usize| -> Option<usize> {
            let c = (v / CELL_SIZE).floor();
            if c < 0.0 {
                Some(0)
            } else if c as usize >= n {
                Some(n - 1)
            } else {
                Some(c as usize)
            }
        };
        // reject whole query boxes that miss the grid
        if rel.x + radius < 0.0
            || rel.y + radius < 0.0
            || rel.x - radius > self.nx as f64 * CELL_SIZE
            || rel.y - radius > self.ny as f64 * CELL_SIZE
        {
            return None;
        }
        let cx0 = to_cell(rel.x - radius, self.nx)?;
        let cx1 = to_cell(rel.x + radius, self.nx)?;
        let cy0 = to_cell(rel.y - radius, self.ny)?;
        let cy1 = to_cell(rel.y + radius, self.ny)?;

        let n = points.len();
        let limit = radius * radius;
        let mut best: Option<ChordHit> = None;
        for cy in cy0..=cy1 {
            for cx in cx0..=cx1 {
                let c = cy * self.nx + cx;
                for &k in &self.items[self.starts[c] as usize..self.starts[c + 1] as usize] {
                    let k = k as usize;
                    let a = points[k];
                    let ab = points[(k + 1) % n] - a;
                    let t = ((p - a).dot(ab) / ab.norm_sq()).clamp(0.0, 1.0);
                    let dist_sq = (a + ab * t - p).norm_sq();
                    if dist_sq > limit {
                        continue;
                    }
                    let better = match best {
                        None => true,
                        Some(b) => dist_sq < b.dist_sq || (dist_sq == b.dist_sq && k < b.chord),
                    };
                    if better {
                        best = Some(ChordHit { chord: k, t, dist_sq });
                    }
                }
            }
        }
        best
    }
}
