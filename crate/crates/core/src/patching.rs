//! Image to patch decomposition, kept/held-out sampling, and the cross-image
//! patch pool used by the relevance pretext task.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng;

use crate::image::Image;
use crate::math::round_half_even;
use crate::{bail, Result};

/// Non-overlapping square patches of one image in row-major order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchGrid {
    pub image_id: String,
    pub patch_size: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub channels: usize,
    /// Each block is `patch_size x patch_size x channels`, row-major.
    pub patches: Vec<Vec<u8>>,
}

impl PatchGrid {
    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    /// Flattened patch dimension.
    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn reassemble(&self) -> Image {
        let p = self.patch_size;
        let c = self.channels;
        let mut img = Image::new(self.grid_rows * p, self.grid_cols * p, c);
        for (i, block) in self.patches.iter().enumerate() {
            let (gr, gc) = (i / self.grid_cols, i % self.grid_cols);
            for y in 0..p {
                let dst = ((gr * p + y) * img.width + gc * p) * c;
                img.pixels[dst..dst + p * c].copy_from_slice(&block[y * p * c..(y + 1) * p * c]);
            }
        }
        img
    }
}

pub fn split_patches(image_id: &str, image: &Image, patch_size: usize) -> Result<PatchGrid> {
    if patch_size == 0 || image.height % patch_size != 0 || image.width % patch_size != 0 {
        bail!(
            Shape,
            "image {}x{} is not divisible by patch size {patch_size}",
            image.height,
            image.width
        );
    }
    let p = patch_size;
    let c = image.channels;
    let (gr, gc) = (image.height / p, image.width / p);
    let mut patches = Vec::with_capacity(gr * gc);
    for r in 0..gr {
        for col in 0..gc {
            let mut block = Vec::with_capacity(p * p * c);
            for y in 0..p {
                let src = ((r * p + y) * image.width + col * p) * c;
                block.extend_from_slice(&image.pixels[src..src + p * c]);
            }
            patches.push(block);
        }
    }
    Ok(PatchGrid {
        image_id: image_id.to_string(),
        patch_size,
        grid_rows: gr,
        grid_cols: gc,
        channels: c,
        patches,
    })
}

/// Partition of patch indices into the encoder-visible subset and the
/// held-out remainder that goes to the pool. Both lists are sorted.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSplit {
    pub kept: Vec<usize>,
    pub held_out: Vec<usize>,
    pub ratio: f64,
}

/// `round(ratio * n)` with ties to even.
pub fn kept_count(n: usize, ratio: f64) -> usize {
    round_half_even(ratio * n as f64) as usize
}

/// Uniform sampling without replacement of `round(ratio * n)` kept indices.
pub fn sample_split<R: Rng + ?Sized>(n_patches: usize, ratio: f64, rng: &mut R) -> Result<PatchSplit> {
    if !(ratio > 0.0 && ratio < 1.0) {
        bail!(Config, "sampling ratio {ratio} outside (0, 1)");
    }
    let k = kept_count(n_patches, ratio);
    let mut kept = rand::seq::index::sample(rng, n_patches, k).into_vec();
    kept.sort_unstable();
    let mut held_out = Vec::with_capacity(n_patches - k);
    let mut it = kept.iter().peekable();
    for i in 0..n_patches {
        if it.peek() == Some(&&i) {
            it.next();
        } else {
            held_out.push(i);
        }
    }
    Ok(PatchSplit {
        kept,
        held_out,
        ratio,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchPoolEntry {
    pub image_id: String,
    pub patch_index: usize,
    pub pixels: Vec<u8>,
}

/// Which entries a draw may return.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolFilter<'a> {
    Any,
    Exclude(&'a str),
    Only(&'a str),
}

/// Cross-image pool of held-out patches, rebuilt every epoch.
///
/// Single writer: inserts take `&mut self`; draws take `&self` plus a caller
/// owned generator, so concurrent readers need their own generators.
#[derive(Debug, Clone, Default)]
pub struct PatchPool {
    entries: Vec<PatchPoolEntry>,
    keys: BTreeSet<(String, usize)>,
    /// Contiguous entry ranges per image, in insertion order.
    ranges: BTreeMap<String, Vec<(usize, usize)>>,
}

impl PatchPool {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[PatchPoolEntry] {
        &self.entries
    }

    pub fn entry(&self, i: usize) -> &PatchPoolEntry {
        &self.entries[i]
    }

    pub fn clear(&mut self) {
        self.entries.clear();
        self.keys.clear();
        self.ranges.clear();
    }

    /// Add every held-out patch of `grid`.
    pub fn insert(&mut self, grid: &PatchGrid, split: &PatchSplit) -> Result<()> {
        for &i in &split.held_out {
            if i >= grid.len() {
                bail!(Invalid, "held-out index {i} outside grid of {}", grid.len());
            }
            if self.keys.contains(&(grid.image_id.clone(), i)) {
                bail!(Invalid, "pool already holds ({}, {i})", grid.image_id);
            }
        }
        let start = self.entries.len();
        for &i in &split.held_out {
            self.keys.insert((grid.image_id.clone(), i));
            self.entries.push(PatchPoolEntry {
                image_id: grid.image_id.clone(),
                patch_index: i,
                pixels: grid.patches[i].clone(),
            });
        }
        let end = self.entries.len();
        if end > start {
            self.ranges
                .entry(grid.image_id.clone())
                .or_default()
                .push((start, end));
        }
        Ok(())
    }

    pub fn count_for(&self, image_id: &str) -> usize {
        self.ranges
            .get(image_id)
            .map_or(0, |r| r.iter().map(|(a, b)| b - a).sum())
    }

    pub fn eligible(&self, filter: PoolFilter<'_>) -> usize {
        match filter {
            PoolFilter::Any => self.len(),
            PoolFilter::Only(id) => self.count_for(id),
            PoolFilter::Exclude(id) => self.len() - self.count_for(id),
        }
    }

    /// Uniform draw of `k` distinct entry indices, without replacement.
    pub fn draw_indices<R: Rng + ?Sized>(
        &self,
        k: usize,
        filter: PoolFilter<'_>,
        rng: &mut R,
    ) -> Result<Vec<usize>> {
        let eligible = self.eligible(filter);
        if k > eligible {
            bail!(
                Insufficient,
                "requested {k} entries but only {eligible} are eligible"
            );
        }
        let picks = rand::seq::index::sample(rng, eligible, k).into_vec();
        let empty = Vec::new();
        Ok(match filter {
            PoolFilter::Any => picks,
            PoolFilter::Only(id) => {
                let ranges = self.ranges.get(id).unwrap_or(&empty);
                picks.into_iter().map(|p| nth_in_ranges(ranges, p)).collect()
            }
            PoolFilter::Exclude(id) => {
                let ranges = self.ranges.get(id).unwrap_or(&empty);
                picks.into_iter().map(|p| skip_ranges(ranges, p)).collect()
            }
        })
    }

    pub fn draw<R: Rng + ?Sized>(
        &self,
        k: usize,
        exclude_image: Option<&str>,
        rng: &mut R,
    ) -> Result<Vec<&PatchPoolEntry>> {
        let filter = exclude_image.map_or(PoolFilter::Any, PoolFilter::Exclude);
        Ok(self
            .draw_indices(k, filter, rng)?
            .into_iter()
            .map(|i| &self.entries[i])
            .collect())
    }
}

fn nth_in_ranges(ranges: &[(usize, usize)], mut p: usize) -> usize {
    for &(a, b) in ranges {
        if p < b - a {
            return a + p;
        }
        p -= b - a;
    }
    unreachable!("pick beyond eligible entries")
}

/// Map the `p`-th index of the complement of `ranges` back to an entry index.
fn skip_ranges(ranges: &[(usize, usize)], p: usize) -> usize {
    let mut sorted: Vec<(usize, usize)> = ranges.to_vec();
    sorted.sort_unstable();
    let mut idx = p;
    for (a, b) in sorted {
        if idx >= a {
            idx += b - a;
        } else {
            break;
        }
    }
    idx
}
