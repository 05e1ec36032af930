//! Procedural micro-feature dataset.
//!
//! Every image shows the same coarse body silhouette over a cluttered
//! background. The only thing that depends on the class is a small glyph,
//! no larger than one patch, drawn centred inside a single patch on the body.
//! Each image also gets its own background texture, tone and body shade, so
//! held-out patches can be matched back to the image they came from.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{ImageRef, Level, Manifest, TaxonomicRecord, MANIFEST_VERSION};
use crate::image::Image;
use crate::math::{cos, sin, sqrt};
use crate::rng::derive;
use crate::{bail, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n_classes: usize,
    pub n_per_class: usize,
    pub image_size: usize,
    pub patch_size: usize,
    pub glyph_size: usize,
    pub background_clutter: f64,
    pub rng_seed: u64,
    #[serde(default = "one")]
    pub channels: usize,
}

fn one() -> usize {
    1
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_classes: 20,
            n_per_class: 50,
            image_size: 64,
            patch_size: 8,
            glyph_size: 3,
            background_clutter: 0.5,
            rng_seed: 7,
            channels: 1,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes == 0 || self.n_per_class == 0 {
            bail!(Config, "n_classes and n_per_class must be at least 1");
        }
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            bail!(
                Config,
                "image_size {} is not divisible by patch_size {}",
                self.image_size,
                self.patch_size
            );
        }
        if self.glyph_size == 0 || self.glyph_size > self.patch_size {
            bail!(
                Config,
                "glyph_size {} must be in 1..={}",
                self.glyph_size,
                self.patch_size
            );
        }
        if !(0.0..=1.0).contains(&self.background_clutter) {
            bail!(Config, "background_clutter {} outside [0, 1]", self.background_clutter);
        }
        if self.channels != 1 && self.channels != 3 {
            bail!(Config, "channels must be 1 or 3, got {}", self.channels);
        }
        let alphabet = glyph_alphabet(self.glyph_size);
        if self.n_classes > alphabet.len() {
            bail!(
                Config,
                "{} classes requested but only {} distinct glyphs exist at size {}",
                self.n_classes,
                alphabet.len(),
                self.glyph_size
            );
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }
}

/// A named glyph shape rendered at a fixed size.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Glyph {
    pub name: &'static str,
    pub epithet: &'static str,
    pub size: usize,
    pub mask: Vec<bool>,
}

type ShapeFn = fn(i64, i64, i64) -> bool;

// (name, species epithet, membership test over (x, y, size-1)).
const SHAPES: [(&str, &str, ShapeFn); 28] = [
    ("cross", "crucis", |x, y, m| x == m / 2 || y == m / 2),
    ("ring", "annulata", |x, y, m| x == 0 || y == 0 || x == m || y == m),
    ("dot", "punctata", |x, y, m| x == m / 2 && y == m / 2),
    ("bar", "vittata", |x, _, m| x == m / 2),
    ("band", "fasciata", |_, y, m| y == m / 2),
    ("slash", "obliqua", |x, y, m| x + y == m),
    ("backslash", "declivis", |x, y, _| x == y),
    ("saltire", "decussata", |x, y, m| x == y || x + y == m),
    ("block", "quadrata", |_, _, _| true),
    ("corner", "angulata", |x, y, _| x == 0 || y == 0),
    ("hook", "uncinata", |x, y, m| x == m || y == m),
    ("tee", "tau", |x, y, m| y == 0 || x == m / 2),
    ("checker", "tessellata", |x, y, _| (x + y) % 2 == 0),
    ("rails", "bilineata", |x, _, m| x == 0 || x == m),
    ("rungs", "scalaris", |_, y, m| y == 0 || y == m),
    ("notch", "excisa", |x, y, m| !(x == m / 2 && y == m / 2)),
    ("cap", "galeata", |_, y, m| y < (m + 1) / 2),
    ("boot", "calceata", |_, y, m| y > m / 2),
    ("flank", "lateralis", |x, _, m| x < (m + 1) / 2),
    ("wing", "alata", |x, _, m| x > m / 2),
    ("diamond", "rhombica", |x, y, m| (x - m / 2).abs() + (y - m / 2).abs() == m / 2),
    ("eye", "ocellata", |x, y, m| x == 0 || y == 0 || x == m || y == m || (x == m / 2 && y == m / 2)),
    ("spur", "calcarata", |x, y, _| x == 0 && y == 0),
    ("heel", "talaria", |x, y, m| x == m && y == m),
    ("gate", "portalis", |x, y, m| y == 0 || x == 0 || x == m),
    ("cup", "cyathina", |x, y, m| y == m || x == 0 || x == m),
    ("arrow", "sagittata", |x, y, m| y == x || y == m - x || x == m / 2),
    ("step", "gradata", |x, y, _| y >= x),
];

/// Distinct glyphs at `size`, in a fixed order. Shapes that coincide at a
/// given size keep only their first occurrence.
pub fn glyph_alphabet(size: usize) -> Vec<Glyph> {
    let m = size as i64 - 1;
    let mut out: Vec<Glyph> = Vec::new();
    for (name, epithet, f) in SHAPES {
        let mut mask = Vec::with_capacity(size * size);
        for y in 0..size as i64 {
            for x in 0..size as i64 {
                mask.push(f(x, y, m));
            }
        }
        if !mask.iter().any(|&b| b) || out.iter().any(|g| g.mask == mask) {
            continue;
        }
        out.push(Glyph {
            name,
            epithet,
            size,
            mask,
        });
    }
    out
}

const ORDERS: [&str; 6] = [
    "Coleoptera",
    "Lepidoptera",
    "Hymenoptera",
    "Diptera",
    "Hemiptera",
    "Odonata",
];
const FAMILIES: [&str; 8] = [
    "Carabidae",
    "Nymphalidae",
    "Formicidae",
    "Syrphidae",
    "Pentatomidae",
    "Libellulidae",
    "Cerambycidae",
    "Pieridae",
];
const GENERA: [&str; 14] = [
    "Aphis", "Bombus", "Carabus", "Danaus", "Elater", "Formica", "Gryllus", "Hister", "Ischnura",
    "Julodis", "Lucanus", "Meloe", "Nepa", "Osmia",
];

/// Taxonomy chain of a synthetic class, subphylum to species.
pub fn class_taxonomy(class: usize, glyph: &Glyph) -> [String; 6] {
    let genus = GENERA[(class / 2) % GENERA.len()];
    [
        "Hexapoda".into(),
        "Insecta".into(),
        ORDERS[(class / 8) % ORDERS.len()].into(),
        FAMILIES[(class / 4) % FAMILIES.len()].into(),
        genus.into(),
        format!("{genus} {}", glyph.epithet),
    ]
}

pub fn class_descriptions(class: usize, glyph: &Glyph) -> BTreeMap<Level, String> {
    let t = class_taxonomy(class, glyph);
    let texts = [
        "Hexapoda are arthropods with six legs.".to_string(),
        "Insecta have a body in three parts.".to_string(),
        format!("The order {} shares one body outline.", t[2]),
        format!("The family {} groups related genera.", t[3]),
        format!("The genus {} holds two species.", t[4]),
        format!("{} bears a {} marking on its body.", t[5], glyph.name),
    ];
    Level::ALL.into_iter().zip(texts).collect()
}

/// Per-image rendering parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleLayout {
    pub background: f64,
    pub stripe_angle: f64,
    pub stripe_freq: f64,
    pub stripe_phase: f64,
    pub noise_seed: u64,
    pub body_cy: f64,
    pub body_cx: f64,
    pub body_ry: f64,
    pub body_rx: f64,
    pub body_level: f64,
    pub tint: [f64; 3],
    /// Row-major index of the patch holding the glyph.
    pub glyph_patch: usize,
}

/// Patches whose centre lies inside the body ellipse.
pub fn body_patches(cfg: &SyntheticConfig, l: &SampleLayout) -> Vec<usize> {
    let g = cfg.grid();
    let p = cfg.patch_size as f64;
    (0..g * g)
        .filter(|i| {
            let cy = (i / g) as f64 * p + p / 2.0;
            let cx = (i % g) as f64 * p + p / 2.0;
            let dy = (cy - l.body_cy) / l.body_ry;
            let dx = (cx - l.body_cx) / l.body_rx;
            dy * dy + dx * dx <= 1.0
        })
        .collect()
}

pub fn sample_layout<R: Rng + ?Sized>(cfg: &SyntheticConfig, rng: &mut R) -> SampleLayout {
    let s = cfg.image_size as f64;
    let mut l = SampleLayout {
        background: rng.gen_range(20.0..90.0),
        stripe_angle: rng.gen_range(0.0..core::f64::consts::PI),
        stripe_freq: rng.gen_range(0.15..0.6),
        stripe_phase: rng.gen_range(0.0..core::f64::consts::TAU),
        noise_seed: rng.gen(),
        body_cy: s / 2.0 + rng.gen_range(-0.06..0.06) * s,
        body_cx: s / 2.0 + rng.gen_range(-0.06..0.06) * s,
        body_ry: s * rng.gen_range(0.36..0.42),
        body_rx: s * rng.gen_range(0.22..0.28),
        body_level: rng.gen_range(110.0..170.0),
        tint: [rng.gen_range(0.7..1.0), rng.gen_range(0.7..1.0), rng.gen_range(0.7..1.0)],
        glyph_patch: 0,
    };
    let candidates = body_patches(cfg, &l);
    l.glyph_patch = if candidates.is_empty() {
        rng.gen_range(0..cfg.grid() * cfg.grid())
    } else {
        candidates[rng.gen_range(0..candidates.len())]
    };
    l
}

/// Top-left pixel of the glyph inside the image.
pub fn glyph_origin(cfg: &SyntheticConfig, glyph_patch: usize) -> (usize, usize) {
    let g = cfg.grid();
    let off = (cfg.patch_size - cfg.glyph_size) / 2;
    (
        (glyph_patch / g) * cfg.patch_size + off,
        (glyph_patch % g) * cfg.patch_size + off,
    )
}

/// Render one image. Pixels outside the glyph depend only on the layout.
pub fn render(cfg: &SyntheticConfig, glyph: &Glyph, layout: &SampleLayout) -> Image {
    let n = cfg.image_size;
    let c = cfg.channels;
    let mut img = Image::new(n, n, c);
    let mut noise = derive(layout.noise_seed, 0x6e6f_6973);
    let clutter = cfg.background_clutter;
    let (sa, ca) = (sin(layout.stripe_angle), cos(layout.stripe_angle));
    for y in 0..n {
        for x in 0..n {
            let (fy, fx) = (y as f64 + 0.5, x as f64 + 0.5);
            let dy = (fy - layout.body_cy) / layout.body_ry;
            let dx = (fx - layout.body_cx) / layout.body_rx;
            let r = sqrt(dy * dy + dx * dx);
            let u = fx * ca + fy * sa;
            let stripe = sin(u * layout.stripe_freq + layout.stripe_phase);
            let jitter: f64 = noise.gen_range(-1.0..1.0);
            let base = if r <= 1.0 {
                // shaded body with a darker rim
                layout.body_level * (1.0 - 0.25 * r * r) + 8.0 * clutter * jitter
            } else {
                layout.background + 35.0 * clutter * stripe + 25.0 * clutter * jitter
            };
            for ch in 0..c {
                let t = if c == 1 { 1.0 } else { layout.tint[ch] };
                img.set(y, x, ch, (base * t).clamp(0.0, 235.0) as u8);
            }
        }
    }
    // bright marks on a dark tile
    let (oy, ox) = glyph_origin(cfg, layout.glyph_patch);
    for gy in 0..glyph.size {
        for gx in 0..glyph.size {
            let v = if glyph.mask[gy * glyph.size + gx] { 255 } else { 0 };
            for ch in 0..c {
                img.set(oy + gy, ox + gx, ch, v);
            }
        }
    }
    img
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub manifest: Manifest,
    pub images: Vec<Image>,
    pub layouts: Vec<SampleLayout>,
    pub classes: Vec<usize>,
}

pub fn image_id(class: usize, index: usize) -> String {
    format!("c{class:02}_i{index:03}")
}

pub fn image_extension(channels: usize) -> &'static str {
    if channels == 1 {
        "pgm"
    } else {
        "ppm"
    }
}

/// Generate `n_classes * n_per_class` images with their manifest. The same
/// configuration always yields bit-identical output.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<SyntheticDataset> {
    cfg.validate()?;
    let alphabet = glyph_alphabet(cfg.glyph_size);
    let mut records = Vec::new();
    let mut images = Vec::new();
    let mut layouts = Vec::new();
    let mut classes = Vec::new();
    for class in 0..cfg.n_classes {
        let glyph = &alphabet[class];
        let chain = class_taxonomy(class, glyph);
        let descriptions = class_descriptions(class, glyph);
        for i in 0..cfg.n_per_class {
            let mut rng = derive(cfg.rng_seed, (class * cfg.n_per_class + i) as u64);
            let layout = sample_layout(cfg, &mut rng);
            let id = image_id(class, i);
            images.push(render(cfg, glyph, &layout));
            records.push(TaxonomicRecord {
                image_ref: ImageRef::Path(format!("images/{id}.{}", image_extension(cfg.channels))),
                image_id: id,
                labels: Level::ALL.into_iter().zip(chain.iter().cloned()).collect(),
                descriptions: descriptions.clone(),
            });
            layouts.push(layout);
            classes.push(class);
        }
    }
    let manifest = Manifest::new(MANIFEST_VERSION.into(), Some(cfg.rng_seed), records)
        .map_err(|e| crate::Error::Invalid(format!("{e}")))?;
    Ok(SyntheticDataset {
        manifest,
        images,
        layouts,
        classes,
    })
}

/// The `glyph_size x glyph_size` window where the glyph is drawn.
pub fn glyph_window(cfg: &SyntheticConfig, img: &Image, glyph_patch: usize) -> Vec<u8> {
    let (oy, ox) = glyph_origin(cfg, glyph_patch);
    let mut out = Vec::new();
    for y in 0..cfg.glyph_size {
        for x in 0..cfg.glyph_size {
            for c in 0..img.channels {
                out.push(img.get(oy + y, ox + x, c));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::patching::split_patches;

    fn small() -> SyntheticConfig {
        SyntheticConfig {
            n_classes: 2,
            n_per_class: 3,
            image_size: 64,
            patch_size: 8,
            glyph_size: 3,
            background_clutter: 0.5,
            rng_seed: 7,
            channels: 1,
        }
    }

    #[test]
    fn alphabet_is_large_enough_and_distinct() {
        let a = glyph_alphabet(3);
        assert!(a.len() >= 20, "{}", a.len());
        for (i, g) in a.iter().enumerate() {
            for h in &a[i + 1..] {
                assert_ne!(g.mask, h.mask);
                assert_ne!(g.epithet, h.epithet);
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_synthetic(&small()).unwrap();
        let b = generate_synthetic(&small()).unwrap();
        assert_eq!(a.images, b.images);
        assert_eq!(a.manifest, b.manifest);
        assert_eq!(a.images.len(), 6);
        assert_eq!(a.manifest.species().len(), 2);
    }

    #[test]
    fn too_many_classes_is_an_error() {
        let cfg = SyntheticConfig {
            n_classes: 200,
            ..small()
        };
        assert!(matches!(generate_synthetic(&cfg), Err(crate::Error::Config(_))));
        let cfg = SyntheticConfig {
            glyph_size: 9,
            ..small()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn glyph_fits_in_one_patch() {
        let cfg = small();
        let alphabet = glyph_alphabet(cfg.glyph_size);
        let data = generate_synthetic(&cfg).unwrap();
        for (layout, class) in data.layouts.iter().zip(&data.classes) {
            let (oy, ox) = glyph_origin(&cfg, layout.glyph_patch);
            let glyph = &alphabet[*class];
            let mut patches = alloc::collections::BTreeSet::new();
            for gy in 0..cfg.glyph_size {
                for gx in 0..cfg.glyph_size {
                    if glyph.mask[gy * cfg.glyph_size + gx] {
                        let (y, x) = (oy + gy, ox + gx);
                        patches.insert((y / cfg.patch_size) * cfg.grid() + x / cfg.patch_size);
                    }
                }
            }
            assert_eq!(patches.len(), 1);
            assert!(patches.contains(&layout.glyph_patch));
        }
    }

    #[test]
    fn classes_differ_only_in_glyph_patches() {
        // Brute force: render the same layout under different classes and
        // count differing patches.
        let cfg = SyntheticConfig {
            n_classes: 20,
            ..small()
        };
        let alphabet = glyph_alphabet(cfg.glyph_size);
        let margin = 1;
        let ratio = cfg.glyph_size as f64 / cfg.patch_size as f64;
        let k = crate::math::ceil(ratio * ratio) as usize + margin;
        for seed in 0..20u64 {
            let la = sample_layout(&cfg, &mut derive(seed, 1));
            let mut lb = la.clone();
            lb.glyph_patch = sample_layout(&cfg, &mut derive(seed, 2)).glyph_patch;
            for (ca, cb) in [(0usize, 1usize), (3, 17), (5, 6)] {
                for other in [&la, &lb] {
                    let a = split_patches("a", &render(&cfg, &alphabet[ca], &la), 8).unwrap();
                    let b = split_patches("b", &render(&cfg, &alphabet[cb], other), 8).unwrap();
                    let diff = a
                        .patches
                        .iter()
                        .zip(&b.patches)
                        .filter(|(x, y)| x != y)
                        .count();
                    assert!(diff >= 1 && diff <= k, "diff {diff} > {k}");
                }
            }
        }
    }

    #[test]
    fn nearest_neighbour_on_glyph_window_is_perfect() {
        let cfg = SyntheticConfig {
            n_classes: 20,
            n_per_class: 6,
            ..small()
        };
        let data = generate_synthetic(&cfg).unwrap();
        let windows: Vec<Vec<u8>> = data
            .images
            .iter()
            .zip(&data.layouts)
            .map(|(img, l)| glyph_window(&cfg, img, l.glyph_patch))
            .collect();
        // leave-one-out 1-NN on squared pixel distance
        for i in 0..windows.len() {
            let mut best = (u64::MAX, 0);
            for j in 0..windows.len() {
                if i == j {
                    continue;
                }
                let d: u64 = windows[i]
                    .iter()
                    .zip(&windows[j])
                    .map(|(&a, &b)| {
                        let t = a as i64 - b as i64;
                        (t * t) as u64
                    })
                    .sum();
                if d < best.0 {
                    best = (d, j);
                }
            }
            assert_eq!(data.classes[i], data.classes[best.1], "image {i}");
        }
    }

    #[test]
    fn three_channel_mode() {
        let cfg = SyntheticConfig {
            channels: 3,
            ..small()
        };
        let data = generate_synthetic(&cfg).unwrap();
        assert_eq!(data.images[0].channels, 3);
        assert!(matches!(&data.manifest.records()[0].image_ref, ImageRef::Path(p) if p.ends_with(".ppm")));
    }
}
