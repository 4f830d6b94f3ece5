//! Coarse-to-fine dataset pyramid and initialisation transfer.
//!
//! Each level halves the resolution by 2×2 box averaging over in-mask
//! pixels; a coarse pixel joins the mask when at least two of its fine
//! children are in-mask. Coarse results seed the next finer level by
//! nearest-parent replication.

use std::collections::VecDeque;

use crate::error::{PsError, Result};
use crate::types::{Dataset, GrayImage, Mask, ParamMap};

/// Multiscale stack; level 0 is the original dataset.
#[derive(Debug, Clone)]
pub struct Pyramid {
    levels: Vec<Dataset>,
    /// full_support[ℓ] is true when every in-mask pixel of level ℓ+1 was
    /// averaged from a complete in-mask 2×2 block of level ℓ.
    full_support: Vec<bool>,
}

impl Pyramid {
    pub fn levels(&self) -> &[Dataset] {
        &self.levels
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    /// Per-level noise std-dev: a full-support 2×2 average of IID samples
    /// halves σ; transitions with partial support keep it unchanged, which
    /// errs on the side of a larger stopping level.
    pub fn level_sigma(&self, base_sigma: f64, level: usize) -> f64 {
        let mut sigma = base_sigma;
        for &full in self.full_support.iter().take(level) {
            if full {
                sigma /= 2.0;
            }
        }
        sigma
    }
}

/// Builds up to `num_levels` levels. Construction stops early when the next
/// level's mask would be empty; levels with fewer than 4×4 in-mask pixels
/// are kept but flagged with a warning.
pub fn build_pyramid(ds: &Dataset, num_levels: usize) -> Result<Pyramid> {
    if num_levels == 0 {
        return Err(PsError::Validation("num_levels must be >= 1".into()));
    }
    let mut levels = vec![ds.clone()];
    let mut full_support = Vec::new();
    while levels.len() < num_levels {
        let current = levels.last().expect("at least one level");
        let (images, mask, full) = downsample(current);
        let in_mask = mask.count_set();
        if in_mask == 0 {
            log::warn!(
                "pyramid truncated at {} levels: next level has an empty mask",
                levels.len()
            );
            break;
        }
        if in_mask < 16 {
            log::warn!(
                "pyramid level {} has only {in_mask} in-mask pixels",
                levels.len()
            );
        }
        let coarse = Dataset::new(
            images,
            mask,
            current.lighting.clone(),
            current.projection.halved(),
        )?;
        levels.push(coarse);
        full_support.push(full);
    }
    Ok(Pyramid {
        levels,
        full_support,
    })
}

/// 2×2 downsample of images and mask. Returns the coarse images, the coarse
/// mask, and whether every coarse in-mask pixel had four in-mask children.
fn downsample(ds: &Dataset) -> (Vec<GrayImage>, Mask, bool) {
    let (w, h) = (ds.width(), ds.height());
    let cw = w.div_ceil(2);
    let ch = h.div_ceil(2);
    let mut mask = Mask::filled(cw, ch, false);
    let mut images = vec![GrayImage::zeros(cw, ch); ds.num_images()];
    let mut full = true;
    for row in 0..ch {
        for col in 0..cw {
            let mut children = Vec::with_capacity(4);
            for dr in 0..2 {
                for dc in 0..2 {
                    let (r, c) = (2 * row + dr, 2 * col + dc);
                    if r < h && c < w && ds.mask.get(r, c) {
                        children.push((r, c));
                    }
                }
            }
            if children.len() >= 2 {
                mask.set(row, col, true);
                if children.len() < 4 {
                    full = false;
                }
                let inv = 1.0 / children.len() as f64;
                for (k, img) in images.iter_mut().enumerate() {
                    let sum: f64 = children.iter().map(|&(r, c)| ds.images[k].get(r, c)).sum();
                    img.set(row, col, sum * inv);
                }
            }
        }
    }
    (images, mask, full)
}

/// Seeds a fine level from a coarse parameter field by nearest-parent
/// replication. Fine pixels whose 2×2 parent is outside the coarse field
/// copy the nearest defined parent, found breadth-first over the coarse
/// grid in a fixed neighbour order.
pub fn upsample_init(coarse: &ParamMap, fine_mask: &Mask) -> Result<ParamMap> {
    let (cw, ch) = (coarse.width(), coarse.height());
    let mut nearest: Vec<Option<usize>> = vec![None; cw * ch];
    let mut queue = VecDeque::new();
    for (i, cell) in coarse.data.iter().enumerate() {
        if cell.is_some() {
            nearest[i] = Some(i);
            queue.push_back(i);
        }
    }
    if queue.is_empty() {
        return Err(PsError::EmptyMask);
    }
    while let Some(i) = queue.pop_front() {
        let (r, c) = (i / cw, i % cw);
        let mut visit = |rr: usize, cc: usize| {
            let j = rr * cw + cc;
            if nearest[j].is_none() {
                nearest[j] = nearest[i];
                queue.push_back(j);
            }
        };
        if r > 0 {
            visit(r - 1, c);
        }
        if r + 1 < ch {
            visit(r + 1, c);
        }
        if c > 0 {
            visit(r, c - 1);
        }
        if c + 1 < cw {
            visit(r, c + 1);
        }
    }

    let mut fine = ParamMap::empty(fine_mask.width(), fine_mask.height());
    for (row, col) in fine_mask.iter_set() {
        let parent = (row / 2) * cw + col / 2;
        let source = nearest[parent].expect("BFS reaches every cell");
        fine.set(row, col, coarse.data[source].expect("source is defined"));
    }
    Ok(fine)
}
