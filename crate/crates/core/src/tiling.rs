//! Grid tiling of slide images, per-patch statistics, and bag selection.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::record::{read_jsonl, relative_path, write_jsonl, PatchEntry, PatchPixels, PatchRecord, SlideEntry, SlideRecord};

pub const DEFAULT_PATCH_SIZE: usize = 256;
pub const DEFAULT_BAG_SIZE: usize = 36;

/// An RGB slide at working resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct SlideImage {
    pub slide_id: String,
    pub width: usize,
    pub height: usize,
    /// Row-major RGB, 3 bytes per pixel.
    pub pixels: Vec<u8>,
}

impl SlideImage {
    pub fn new(slide_id: impl Into<String>, width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width * height * 3 {
            return Err(Error::Shape(format!(
                "slide {width}x{height} needs {} bytes, got {}",
                width * height * 3,
                pixels.len()
            )));
        }
        Ok(SlideImage {
            slide_id: slide_id.into(),
            width,
            height,
            pixels,
        })
    }

    /// Reads a PNG or TIFF slide; the id is the file stem.
    pub fn open(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| Error::image(path, e))?
            .to_rgb8();
        let id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let (w, h) = (img.width() as usize, img.height() as usize);
        SlideImage::new(id, w, h, img.into_raw())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        image::RgbImage::from_raw(self.width as u32, self.height as u32, self.pixels.clone())
            .expect("length validated on construction")
            .save(path)
            .map_err(|e| Error::image(path, e))
    }

    /// Box-filter integer downsample (e.g. 10X -> 5X with factor 2).
    pub fn downsample(&self, factor: usize) -> Result<SlideImage> {
        if factor == 0 {
            return Err(Error::Parameter("downsample factor must be >= 1".into()));
        }
        if factor == 1 {
            return Ok(self.clone());
        }
        let (w, h) = (self.width / factor, self.height / factor);
        if w == 0 || h == 0 {
            return Err(Error::EmptySlide(self.slide_id.clone()));
        }
        let mut out = vec![0u8; w * h * 3];
        let area = (factor * factor) as u32;
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    let mut acc = 0u32;
                    for dy in 0..factor {
                        let row = (y * factor + dy) * self.width;
                        for dx in 0..factor {
                            acc += self.pixels[(row + x * factor + dx) * 3 + c] as u32;
                        }
                    }
                    out[(y * w + x) * 3 + c] = ((acc + area / 2) / area) as u8;
                }
            }
        }
        SlideImage::new(self.slide_id.clone(), w, h, out)
    }
}

/// Saturation/value thresholds of the background test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TissueThresholds {
    /// A pixel needs HSV saturation strictly above this to count as tissue.
    pub min_saturation: f64,
    /// ... and HSV value strictly below this.
    pub max_value: f64,
}

impl Default for TissueThresholds {
    fn default() -> Self {
        TissueThresholds {
            min_saturation: 0.07,
            max_value: 0.95,
        }
    }
}

impl TissueThresholds {
    pub fn is_tissue(&self, rgb: [u8; 3]) -> bool {
        let max = rgb.iter().copied().max().unwrap_or(0) as f64;
        let min = rgb.iter().copied().min().unwrap_or(0) as f64;
        if max == 0.0 {
            return false;
        }
        let saturation = (max - min) / max;
        let value = max / 255.0;
        saturation > self.min_saturation && value < self.max_value
    }
}

/// Mean over all pixels and channels, in `[0, 255]`.
pub fn mean_intensity(pixels: &PatchPixels) -> f64 {
    let data = pixels.data();
    let sum: u64 = data.iter().map(|&v| v as u64).sum();
    sum as f64 / data.len() as f64
}

/// Fraction of pixels passing the tissue test.
pub fn tissue_fraction(pixels: &PatchPixels, thresholds: &TissueThresholds) -> f64 {
    let data = pixels.data();
    let n = data.len() / 3;
    let tissue = data
        .chunks_exact(3)
        .filter(|px| thresholds.is_tissue([px[0], px[1], px[2]]))
        .count();
    tissue as f64 / n as f64
}

/// Builds a patch record with freshly computed statistics.
pub fn make_patch(
    slide_id: &str,
    index: usize,
    x: u32,
    y: u32,
    pixels: PatchPixels,
    thresholds: &TissueThresholds,
) -> PatchRecord {
    PatchRecord {
        slide_id: slide_id.to_string(),
        index,
        x,
        y,
        tissue_fraction: tissue_fraction(&pixels, thresholds),
        mean_intensity: mean_intensity(&pixels),
        pixels,
        pseudo_label: None,
        pseudo_confidence: None,
    }
}

/// Recomputes cached statistics after pixels changed.
pub fn refresh_stats(patch: &mut PatchRecord, thresholds: &TissueThresholds) {
    patch.tissue_fraction = tissue_fraction(&patch.pixels, thresholds);
    patch.mean_intensity = mean_intensity(&patch.pixels);
}

/// Cuts a slide into non-overlapping `patch_size` tiles in row-major order,
/// padding the right and bottom remainder with white.
pub fn extract_patches(
    slide: &SlideImage,
    patch_size: usize,
    thresholds: &TissueThresholds,
) -> Result<Vec<PatchRecord>> {
    if slide.width == 0 || slide.height == 0 || slide.pixels.is_empty() {
        return Err(Error::EmptySlide(slide.slide_id.clone()));
    }
    if patch_size == 0 {
        return Err(Error::Parameter("patch size must be >= 1".into()));
    }
    let cols = slide.width.div_ceil(patch_size);
    let rows = slide.height.div_ceil(patch_size);
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let (x0, y0) = (c * patch_size, r * patch_size);
            let mut data = vec![255u8; patch_size * patch_size * 3];
            let w = patch_size.min(slide.width - x0);
            let h = patch_size.min(slide.height - y0);
            for dy in 0..h {
                let src = ((y0 + dy) * slide.width + x0) * 3;
                let dst = dy * patch_size * 3;
                data[dst..dst + w * 3].copy_from_slice(&slide.pixels[src..src + w * 3]);
            }
            let pixels = PatchPixels::new(patch_size, data)?;
            out.push(make_patch(
                &slide.slide_id,
                r * cols + c,
                x0 as u32,
                y0 as u32,
                pixels,
                thresholds,
            ));
        }
    }
    Ok(out)
}

/// Saves every patch of `slide` as `patches/<slide_id>/<index>.png` under
/// `dir` and returns manifest entries with paths relative to `dir`.
pub fn write_patches(dir: &Path, slide: &SlideRecord) -> Result<Vec<PatchEntry>> {
    slide
        .patches
        .iter()
        .map(|p| {
            let rel = Path::new("patches")
                .join(&slide.slide_id)
                .join(format!("{:04}.png", p.index));
            p.pixels.save_png(&dir.join(&rel))?;
            Ok(PatchEntry {
                index: p.index,
                path: rel,
                x: p.x,
                y: p.y,
                tissue_fraction: p.tissue_fraction,
                mean_intensity: p.mean_intensity,
                pseudo_label: p.pseudo_label,
                pseudo_confidence: p.pseudo_confidence,
            })
        })
        .collect()
}

pub const TILES_MANIFEST: &str = "tiles.jsonl";

/// Tiles every slide listed in the label manifest `input`, writing patch PNGs
/// and a `tiles.jsonl` manifest (with the chosen bag of each slide) under
/// `out_dir`. Returns the new manifest path.
pub fn tile_manifest(
    input: &Path,
    out_dir: &Path,
    patch_size: usize,
    bag_size: usize,
    thresholds: &TissueThresholds,
) -> Result<PathBuf> {
    let base = input.parent().unwrap_or_else(|| Path::new("."));
    let mut entries = Vec::new();
    for entry in read_jsonl::<SlideEntry>(input)? {
        let rel = entry.image.as_ref().ok_or_else(|| {
            Error::Parameter(format!("slide {} has no image path in {}", entry.slide_id, input.display()))
        })?;
        let mut image = SlideImage::open(&base.join(rel))?;
        image.slide_id = entry.slide_id.clone();
        if (entry.width, entry.height) != (0, 0) && (entry.width as usize, entry.height as usize) != (image.width, image.height) {
            return Err(Error::Shape(format!(
                "slide {} is {}x{}, manifest says {}x{}",
                entry.slide_id, image.width, image.height, entry.width, entry.height
            )));
        }
        let patches = extract_patches(&image, patch_size, thresholds)?;
        let record = SlideRecord::new(entry.slide_id.clone(), entry.primary_gg, entry.secondary_gg, patches)?;
        let bag = select_bag_indices(&record.patches, bag_size)?;
        let patch_entries = write_patches(out_dir, &record)?;
        let rebase = |p: &PathBuf| relative_path(&base.join(p), out_dir);
        entries.push(SlideEntry {
            image: Some(rebase(rel)),
            mask: entry.mask.as_ref().map(rebase),
            width: image.width as u32,
            height: image.height as u32,
            patches: patch_entries,
            bag: bag.iter().map(|&i| record.patches[i].index).collect(),
            isup: record.isup,
            ..entry
        });
    }
    let manifest = out_dir.join(TILES_MANIFEST);
    write_jsonl(&manifest, &entries)?;
    Ok(manifest)
}

/// Pastes patches back into a `width` x `height` canvas (white where uncovered).
pub fn reassemble(patches: &[PatchRecord], width: usize, height: usize) -> Vec<u8> {
    let mut out = vec![255u8; width * height * 3];
    for p in patches {
        let side = p.pixels.side();
        let (x0, y0) = (p.x as usize, p.y as usize);
        if x0 >= width || y0 >= height {
            continue;
        }
        let w = side.min(width - x0);
        let h = side.min(height - y0);
        for dy in 0..h {
            let dst = ((y0 + dy) * width + x0) * 3;
            let src = dy * side * 3;
            out[dst..dst + w * 3].copy_from_slice(&p.pixels.data()[src..src + w * 3]);
        }
    }
    out
}

/// Picks the `n` darkest patches in ascending mean intensity, breaking ties by
/// patch index. Short slides are padded by cycling the sorted list.
pub fn select_bag(patches: &[PatchRecord], n: usize) -> Result<Vec<PatchRecord>> {
    Ok(select_bag_indices(patches, n)?
        .into_iter()
        .map(|i| patches[i].clone())
        .collect())
}

/// Positions (into `patches`) of the bag chosen by [`select_bag`].
pub fn select_bag_indices(patches: &[PatchRecord], n: usize) -> Result<Vec<usize>> {
    if patches.is_empty() {
        return Err(Error::EmptySlide("no patches to build a bag from".into()));
    }
    if n == 0 {
        return Err(Error::Parameter("bag size must be >= 1".into()));
    }
    let mut order: Vec<usize> = (0..patches.len()).collect();
    order.sort_by(|&a, &b| {
        patches[a]
            .mean_intensity
            .total_cmp(&patches[b].mean_intensity)
            .then(patches[a].index.cmp(&patches[b].index))
    });
    Ok(order.iter().copied().cycle().take(n).collect())
}

/// Splits a bag with repeats into its distinct patch positions (ascending)
/// and, for every bag slot, the index of its patch within that list.
pub fn dedup_bag(picks: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut unique = picks.to_vec();
    unique.sort_unstable();
    unique.dedup();
    let rows = picks
        .iter()
        .map(|p| unique.binary_search(p).expect("present"))
        .collect();
    (unique, rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const STAIN: [u8; 3] = [150, 60, 160];

    fn slide_from_fn(w: usize, h: usize, f: impl Fn(usize, usize) -> [u8; 3]) -> SlideImage {
        let mut px = Vec::with_capacity(w * h * 3);
        for y in 0..h {
            for x in 0..w {
                px.extend_from_slice(&f(x, y));
            }
        }
        SlideImage::new("s", w, h, px).unwrap()
    }

    #[test]
    fn grid_counts() {
        let t = TissueThresholds::default();
        let s = slide_from_fn(512, 512, |_, _| [255; 3]);
        assert_eq!(extract_patches(&s, 256, &t).unwrap().len(), 4);
        let s = slide_from_fn(300, 300, |_, _| STAIN);
        let p = extract_patches(&s, 256, &t).unwrap();
        assert_eq!(p.len(), 4);
        // padded remainder is white
        assert_eq!(p[3].pixels.pixel(255, 255), [255; 3]);
        assert_eq!(p[3].pixels.pixel(0, 0), STAIN);
        assert_eq!((p[1].x, p[1].y, p[2].x, p[2].y), (256, 0, 0, 256));
    }

    #[test]
    fn empty_slide_is_an_error() {
        let s = SlideImage::new("e", 0, 0, vec![]).unwrap();
        assert!(matches!(
            extract_patches(&s, 256, &TissueThresholds::default()),
            Err(Error::EmptySlide(_))
        ));
    }

    #[test]
    fn tissue_fraction_matches_pixel_count_oracle() {
        // random lesion mask; oracle counts stained pixels inside each tile directly
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (w, h) = (512, 384);
        let mask: Vec<bool> = (0..w * h).map(|_| rng.random_bool(0.3)).collect();
        let s = slide_from_fn(w, h, |x, y| if mask[y * w + x] { STAIN } else { [255; 3] });
        let patches = extract_patches(&s, 256, &TissueThresholds::default()).unwrap();
        for p in &patches {
            let mut count = 0usize;
            for dy in 0..256 {
                for dx in 0..256 {
                    let (x, y) = (p.x as usize + dx, p.y as usize + dy);
                    if x < w && y < h && mask[y * w + x] {
                        count += 1;
                    }
                }
            }
            let oracle = count as f64 / (256.0 * 256.0);
            assert!((p.tissue_fraction - oracle).abs() <= 1e-6);
        }
    }

    #[test]
    fn intensity_and_tissue_examples() {
        let t = TissueThresholds::default();
        let white = PatchPixels::filled(256, [255; 3]);
        let black = PatchPixels::filled(256, [0; 3]);
        assert_eq!(mean_intensity(&white), 255.0);
        assert_eq!(mean_intensity(&black), 0.0);
        let mut half = vec![255u8; 256 * 256 * 3];
        half[..256 * 128 * 3].fill(0);
        assert_eq!(mean_intensity(&PatchPixels::new(256, half).unwrap()), 127.5);

        assert_eq!(tissue_fraction(&white, &t), 0.0);
        assert_eq!(tissue_fraction(&PatchPixels::filled(256, STAIN), &t), 1.0);
        let mut quarter = vec![255u8; 256 * 256 * 3];
        for px in quarter.chunks_exact_mut(3).step_by(4) {
            px.copy_from_slice(&STAIN);
        }
        let q = tissue_fraction(&PatchPixels::new(256, quarter).unwrap(), &t);
        assert!((q - 0.25).abs() < 1e-6);
    }

    fn patch_with_intensity(index: usize, v: u8) -> PatchRecord {
        make_patch("s", index, 0, 0, PatchPixels::filled(4, [v; 3]), &TissueThresholds::default())
    }

    #[test]
    fn select_darkest_ascending() {
        let patches: Vec<_> = (0..100).map(|i| patch_with_intensity(i, (i * 7 % 101) as u8 + 100)).collect();
        let bag = select_bag(&patches, 36).unwrap();
        assert_eq!(bag.len(), 36);
        assert!(bag.windows(2).all(|w| w[0].mean_intensity <= w[1].mean_intensity));
        let cutoff = bag.last().unwrap().mean_intensity;
        let darker = patches.iter().filter(|p| p.mean_intensity < cutoff).count();
        assert!(darker < 36);
    }

    #[test]
    fn short_slides_cycle() {
        let patches: Vec<_> = (0..10).map(|i| patch_with_intensity(i, 200 - i as u8)).collect();
        let bag = select_bag(&patches, 36).unwrap();
        assert_eq!(bag.len(), 36);
        for (i, p) in bag.iter().enumerate() {
            assert_eq!(p.index, 9 - (i % 10));
        }
    }

    #[test]
    fn ties_broken_by_index() {
        let patches: Vec<_> = [5, 2, 8, 1].iter().map(|&i| patch_with_intensity(i, 100)).collect();
        let idx: Vec<_> = select_bag(&patches, 4).unwrap().iter().map(|p| p.index).collect();
        assert_eq!(idx, vec![1, 2, 5, 8]);
        assert!(select_bag(&[], 3).is_err());
    }

    #[test]
    fn downsample_box_filter() {
        let s = slide_from_fn(4, 4, |x, _| if x % 2 == 0 { [0; 3] } else { [255; 3] });
        let d = s.downsample(2).unwrap();
        assert_eq!((d.width, d.height), (2, 2));
        assert!(d.pixels.iter().all(|&v| v == 128));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn bag_is_shuffle_stable(values in proptest::collection::vec(0u8..8, 1..40), n in 1usize..50, seed in 0u64..1000) {
            let patches: Vec<_> = values.iter().enumerate().map(|(i, &v)| patch_with_intensity(i, v)).collect();
            let mut shuffled = patches.clone();
            shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let a: Vec<_> = select_bag(&patches, n).unwrap().iter().map(|p| p.index).collect();
            let b: Vec<_> = select_bag(&shuffled, n).unwrap().iter().map(|p| p.index).collect();
            prop_assert_eq!(a.len(), n);
            prop_assert_eq!(a, b);
        }

        #[test]
        fn reassembly_reproduces_pixels(w in 1usize..70, h in 1usize..70, side in 8usize..33, seed in 0u64..100) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let px: Vec<u8> = (0..w * h * 3).map(|_| rng.random()).collect();
            let s = SlideImage::new("r", w, h, px.clone()).unwrap();
            let patches = extract_patches(&s, side, &TissueThresholds::default()).unwrap();
            prop_assert_eq!(reassemble(&patches, w, h), px);
        }

        #[test]
        fn stats_invariant_under_duplication(v in proptest::collection::vec(any::<u8>(), 48)) {
            let t = TissueThresholds::default();
            let p = PatchPixels::new(4, v.clone()).unwrap();
            // 8x8 patch made of four copies of the 4x4 one
            let mut big = vec![0u8; 8 * 8 * 3];
            for y in 0..8 {
                for x in 0..8 {
                    let src = ((y % 4) * 4 + (x % 4)) * 3;
                    big[(y * 8 + x) * 3..(y * 8 + x) * 3 + 3].copy_from_slice(&v[src..src + 3]);
                }
            }
            let q = PatchPixels::new(8, big).unwrap();
            prop_assert!((mean_intensity(&p) - mean_intensity(&q)).abs() < 1e-9);
            prop_assert!((tissue_fraction(&p, &t) - tissue_fraction(&q, &t)).abs() < 1e-12);
        }
    }
}
