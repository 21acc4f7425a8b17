use super::Splat;

/// Per-tile contributor lists, each sorted front to back.
#[derive(Debug, Clone, PartialEq)]
pub struct TileIndex {
    pub tile_size: usize,
    pub tiles_x: usize,
    pub tiles_y: usize,
    /// Splat indices per tile, row-major over tiles.
    pub lists: Vec<Vec<u32>>,
}

impl TileIndex {
    pub fn build(splats: &[Splat], width: usize, height: usize, tile_size: usize) -> Self {
        let tile_size = tile_size.max(1);
        let tiles_x = width.div_ceil(tile_size);
        let tiles_y = height.div_ceil(tile_size);
        let mut lists = vec![Vec::new(); tiles_x * tiles_y];
        for (i, s) in splats.iter().enumerate() {
            if !s.visible {
                continue;
            }
            let Some((x0, x1, y0, y1)) = pixel_span(s, width, height) else {
                continue;
            };
            for ty in y0 / tile_size..=y1 / tile_size {
                for tx in x0 / tile_size..=x1 / tile_size {
                    lists[ty * tiles_x + tx].push(i as u32);
                }
            }
        }
        // stable: equal depths keep storage order
        for list in &mut lists {
            list.sort_by(|a, b| splats[*a as usize].depth.total_cmp(&splats[*b as usize].depth));
        }
        Self { tile_size, tiles_x, tiles_y, lists }
    }

    pub fn tile_count(&self) -> usize {
        self.lists.len()
    }

    /// Pixel rectangle `(x0, x1, y0, y1)` (exclusive ends) covered by tile `t`.
    pub fn tile_rect(&self, t: usize, width: usize, height: usize) -> (usize, usize, usize, usize) {
        let tx = t % self.tiles_x;
        let ty = t / self.tiles_x;
        let x0 = tx * self.tile_size;
        let y0 = ty * self.tile_size;
        (x0, (x0 + self.tile_size).min(width), y0, (y0 + self.tile_size).min(height))
    }
}

/// Inclusive range of pixel indices whose centers lie within the splat's
/// square footprint, clamped to the image.
pub(crate) fn pixel_span(s: &Splat, width: usize, height: usize) -> Option<(usize, usize, usize, usize)> {
    let r = s.radius;
    let lo_x = (s.mean.x - r - 0.5).ceil().max(0.0);
    let hi_x = (s.mean.x + r - 0.5).floor().min(width as f64 - 1.0);
    let lo_y = (s.mean.y - r - 0.5).ceil().max(0.0);
    let hi_y = (s.mean.y + r - 0.5).floor().min(height as f64 - 1.0);
    if !(lo_x <= hi_x && lo_y <= hi_y) {
        return None;
    }
    Some((lo_x as usize, hi_x as usize, lo_y as usize, hi_y as usize))
}
