//! Uniform horizontal bucket grid used for fixed-radius and nearest-neighbour
//! queries in the plane.

pub(crate) struct HorizontalGrid {
    origin: [f64; 2],
    cell: f64,
    nx: usize,
    ny: usize,
    starts: Vec<usize>,
    items: Vec<usize>,
}

impl HorizontalGrid {
    /// Buckets the points `ids` (positions given by `xy`) into square cells of
    /// side `cell`.
    pub fn build(xy: &[[f64; 2]], ids: &[usize], cell: f64) -> Self {
        debug_assert!(cell > 0.0);
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for &id in ids {
            let p = xy[id];
            for a in 0..2 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        if ids.is_empty() {
            lo = [0.0; 2];
            hi = [0.0; 2];
        }
        let nx = (((hi[0] - lo[0]) / cell).floor() as usize) + 1;
        let ny = (((hi[1] - lo[1]) / cell).floor() as usize) + 1;
        let mut grid = HorizontalGrid {
            origin: lo,
            cell,
            nx,
            ny,
            starts: vec![0; nx * ny + 1],
            items: vec![0; ids.len()],
        };
        let cells: Vec<usize> = ids
            .iter()
            .map(|&id| {
                let (ix, iy) = grid.clamped_cell(xy[id]);
                iy * nx + ix
            })
            .collect();
        for &c in &cells {
            grid.starts[c + 1] += 1;
        }
        for c in 0..nx * ny {
            grid.starts[c + 1] += grid.starts[c];
        }
        let mut fill = grid.starts.clone();
        // ids are visited in order, so each bucket lists ids ascending when
        // the caller passes ascending ids.
        for (&id, &c) in ids.iter().zip(&cells) {
            grid.items[fill[c]] = id;
            fill[c] += 1;
        }
        grid
    }

    fn raw_cell(&self, p: [f64; 2]) -> (isize, isize) {
        (
            ((p[0] - self.origin[0]) / self.cell).floor() as isize,
            ((p[1] - self.origin[1]) / self.cell).floor() as isize,
        )
    }

    fn clamped_cell(&self, p: [f64; 2]) -> (usize, usize) {
        let (ix, iy) = self.raw_cell(p);
        (
            ix.clamp(0, self.nx as isize - 1) as usize,
            iy.clamp(0, self.ny as isize - 1) as usize,
        )
    }

    fn bucket(&self, ix: isize, iy: isize) -> &[usize] {
        if ix < 0 || iy < 0 || ix >= self.nx as isize || iy >= self.ny as isize {
            return &[];
        }
        let c = iy as usize * self.nx + ix as usize;
        &self.items[self.starts[c]..self.starts[c + 1]]
    }

    /// Calls `visit` for every bucketed id whose cell could hold a point
    /// within `radius` of `p`. The caller does the exact distance test.
    pub fn for_each_candidate(&self, p: [f64; 2], radius: f64, mut visit: impl FnMut(usize)) {
        let (cx, cy) = self.raw_cell(p);
        let reach = (radius / self.cell).ceil() as isize;
        for iy in cy - reach..=cy + reach {
            for ix in cx - reach..=cx + reach {
                for &id in self.bucket(ix, iy) {
                    visit(id);
                }
            }
        }
    }

    /// Nearest bucketed id to `query` under the squared distance `dist2`,
    /// whose horizontal part must be a lower bound of the full distance.
    /// Ties resolve to the lowest id.
    pub fn nearest(&self, query: [f64; 2], dist2: impl Fn(usize) -> f64) -> Option<usize> {
        if self.items.is_empty() {
            return None;
        }
        let (cx, cy) = self.raw_cell(query);
        // Start from the ring that first touches the grid when the query lies
        // outside of it.
        let outside = [
            -cx,
            cx - (self.nx as isize - 1),
            -cy,
            cy - (self.ny as isize - 1),
        ]
        .into_iter()
        .max()
        .unwrap_or(0)
        .max(0);
        let max_ring = outside + self.nx.max(self.ny) as isize;
        let mut best: Option<(f64, usize)> = None;
        let visit = |id: usize, best: &mut Option<(f64, usize)>| {
            let d = dist2(id);
            match *best {
                Some((bd, bid)) if d > bd || (d == bd && id > bid) => {}
                _ => *best = Some((d, id)),
            }
        };
        for ring in 0..=max_ring {
            if let Some((bd, _)) = best {
                // Every unvisited point is at least (ring - 1) cells away.
                let gap = (ring - 1).max(0) as f64 * self.cell;
                if gap * gap > bd {
                    break;
                }
            }
            if ring == 0 {
                for &id in self.bucket(cx, cy) {
                    visit(id, &mut best);
                }
                continue;
            }
            for ix in cx - ring..=cx + ring {
                for &id in self.bucket(ix, cy - ring) {
                    visit(id, &mut best);
                }
                for &id in self.bucket(ix, cy + ring) {
                    visit(id, &mut best);
                }
            }
            for iy in cy - ring + 1..cy + ring {
                for &id in self.bucket(cx - ring, iy) {
                    visit(id, &mut best);
                }
                for &id in self.bucket(cx + ring, iy) {
                    visit(id, &mut best);
                }
            }
        }
        best.map(|(_, id)| id)
    }
}
