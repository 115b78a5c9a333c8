//! Dataset plumbing: PNG image I/O, tiling of large bi-temporal pairs,
//! seeded split management, and the on-disk layout
//! `root/{train,val,test}/{A,B,label}/<id>.png`.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::synth::SynthSpec;
use crate::tensor::Tensor;
use crate::types::{BiTemporalSample, Mask};

// ---------------------------------------------------------------------------
// images
// ---------------------------------------------------------------------------

/// Interleaved 8-bit RGB image.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    pub w: usize,
    pub h: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(w: usize, h: usize) -> RgbImage {
        RgbImage { w, h, data: vec![0; 3 * w * h] }
    }

    pub fn put(&mut self, x: usize, y: usize, px: [u8; 3]) {
        let i = 3 * (y * self.w + x);
        self.data[i..i + 3].copy_from_slice(&px);
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.w + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn crop(&self, x0: usize, y0: usize, size: usize) -> RgbImage {
        assert!(x0 + size <= self.w && y0 + size <= self.h);
        let mut out = RgbImage::new(size, size);
        for y in 0..size {
            let src = 3 * ((y0 + y) * self.w + x0);
            let dst = 3 * y * size;
            out.data[dst..dst + 3 * size].copy_from_slice(&self.data[src..src + 3 * size]);
        }
        out
    }

    /// `[3,h,w]` tensor with values in [0,1].
    pub fn to_tensor(&self) -> Tensor {
        let plane = self.w * self.h;
        let mut data = vec![0.0; 3 * plane];
        for p in 0..plane {
            for ch in 0..3 {
                data[ch * plane + p] = self.data[3 * p + ch] as f64 / 255.0;
            }
        }
        Tensor::new(&[3, self.h, self.w], data)
    }
}

/// Single-channel 8-bit image.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    pub w: usize,
    pub h: usize,
    pub data: Vec<u8>,
}

impl GrayImage {
    pub fn new(w: usize, h: usize) -> GrayImage {
        GrayImage { w, h, data: vec![0; w * h] }
    }

    pub fn crop(&self, x0: usize, y0: usize, size: usize) -> GrayImage {
        assert!(x0 + size <= self.w && y0 + size <= self.h);
        let mut out = GrayImage::new(size, size);
        for y in 0..size {
            let src = (y0 + y) * self.w + x0;
            out.data[y * size..(y + 1) * size].copy_from_slice(&self.data[src..src + size]);
        }
        out
    }

    /// Interpret a {0,255} label image as a binary mask.
    pub fn to_mask(&self) -> Result<Mask> {
        let data = self
            .data
            .iter()
            .map(|&v| match v {
                0 => Ok(0u8),
                255 => Ok(1u8),
                other => Err(Error::Data(format!("label value {other} is neither 0 nor 255"))),
            })
            .collect::<Result<Vec<u8>>>()?;
        Mask::new(self.h, self.w, data)
    }

    pub fn from_mask(mask: &Mask) -> GrayImage {
        GrayImage {
            w: mask.w,
            h: mask.h,
            data: mask.data.iter().map(|&v| v * 255).collect(),
        }
    }
}

pub fn write_rgb_png(path: &Path, img: &RgbImage) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), img.w as u32, img.h as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| Error::Io(e.to_string()))?;
    writer.write_image_data(&img.data).map_err(|e| Error::Io(e.to_string()))?;
    Ok(())
}

pub fn write_gray_png(path: &Path, img: &GrayImage) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), img.w as u32, img.h as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| Error::Io(e.to_string()))?;
    writer.write_image_data(&img.data).map_err(|e| Error::Io(e.to_string()))?;
    Ok(())
}

fn decode_png(path: &Path) -> Result<(png::OutputInfo, Vec<u8>)> {
    let file = File::open(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = decoder.read_info().map_err(|e| Error::Data(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::Data(e.to_string()))?;
    buf.truncate(info.buffer_size());
    Ok((info, buf))
}

pub fn read_rgb_png(path: &Path) -> Result<RgbImage> {
    let (info, buf) = decode_png(path)?;
    let (w, h) = (info.width as usize, info.height as usize);
    let data = match info.color_type {
        png::ColorType::Rgb => buf,
        png::ColorType::Rgba => buf.chunks(4).flat_map(|px| [px[0], px[1], px[2]]).collect(),
        png::ColorType::Grayscale => buf.iter().flat_map(|&v| [v, v, v]).collect(),
        png::ColorType::GrayscaleAlpha => buf.chunks(2).flat_map(|px| [px[0], px[0], px[0]]).collect(),
        other => return Err(Error::Data(format!("{}: unsupported color type {other:?}", path.display()))),
    };
    Ok(RgbImage { w, h, data })
}

pub fn read_gray_png(path: &Path) -> Result<GrayImage> {
    let (info, buf) = decode_png(path)?;
    let (w, h) = (info.width as usize, info.height as usize);
    let data = match info.color_type {
        png::ColorType::Grayscale => buf,
        png::ColorType::GrayscaleAlpha => buf.chunks(2).map(|px| px[0]).collect(),
        png::ColorType::Rgb => buf.chunks(3).map(|px| px[0]).collect(),
        png::ColorType::Rgba => buf.chunks(4).map(|px| px[0]).collect(),
        other => return Err(Error::Data(format!("{}: unsupported color type {other:?}", path.display()))),
    };
    Ok(GrayImage { w, h, data })
}

// ---------------------------------------------------------------------------
// tiling
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TileMode {
    /// Non-overlapping row-major tiles.
    Grid,
    /// Seeded random crop windows (possibly overlapping).
    Random,
}

/// One cropped tile of an A/B/label triple.
#[derive(Clone, Debug)]
pub struct TilePair {
    pub a: RgbImage,
    pub b: RgbImage,
    pub label: GrayImage,
    pub id: String,
}

impl TilePair {
    pub fn to_sample(&self) -> Result<BiTemporalSample> {
        let sample = BiTemporalSample {
            image_t1: self.a.to_tensor(),
            image_t2: self.b.to_tensor(),
            mask: self.label.to_mask()?,
            id: self.id.clone(),
        };
        sample.validate()?;
        Ok(sample)
    }
}

/// Cut a large co-registered A/B/label triple into `size`×`size` tiles.
/// The same crop window is applied to all three images.
pub fn tile_images(
    a: &RgbImage,
    b: &RgbImage,
    label: &GrayImage,
    size: usize,
    mode: TileMode,
    count: usize,
    seed: u64,
    base_id: &str,
) -> Result<Vec<TilePair>> {
    if a.w != b.w || a.h != b.h || a.w != label.w || a.h != label.h {
        return Err(Error::Shape(format!(
            "A ({}x{}), B ({}x{}), label ({}x{}) dimensions differ",
            a.w, a.h, b.w, b.h, label.w, label.h
        )));
    }
    if size == 0 || a.w < size || a.h < size {
        return Err(Error::Shape(format!(
            "input {}x{} smaller than tile size {size}",
            a.w, a.h
        )));
    }
    let mut windows: Vec<(usize, usize, String)> = Vec::new();
    match mode {
        TileMode::Grid => {
            for row in 0..a.h / size {
                for col in 0..a.w / size {
                    windows.push((col * size, row * size, format!("{base_id}_{row:03}_{col:03}")));
                }
            }
        }
        TileMode::Random => {
            let mut rng = Rng::new(seed);
            for k in 0..count {
                let x = rng.range_usize(0, a.w - size + 1);
                let y = rng.range_usize(0, a.h - size + 1);
                windows.push((x, y, format!("{base_id}_r{k:04}")));
            }
        }
    }
    Ok(windows
        .into_iter()
        .map(|(x, y, id)| TilePair {
            a: a.crop(x, y, size),
            b: b.crop(x, y, size),
            label: label.crop(x, y, size),
            id,
        })
        .collect())
}

/// Tile directly into in-memory samples.
pub fn tile(
    a: &RgbImage,
    b: &RgbImage,
    label: &GrayImage,
    size: usize,
    mode: TileMode,
    count: usize,
    seed: u64,
    base_id: &str,
) -> Result<Vec<BiTemporalSample>> {
    tile_images(a, b, label, size, mode, count, seed, base_id)?
        .iter()
        .map(TilePair::to_sample)
        .collect()
}

// ---------------------------------------------------------------------------
// splits and manifests
// ---------------------------------------------------------------------------

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitLists {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl SplitLists {
    pub fn get(&self, split: &str) -> Result<&[String]> {
        match split {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            other => Err(Error::Data(format!("unknown split '{other}'"))),
        }
    }
}

/// Seeded shuffle then contiguous partition proportional to `ratios`
/// (train:val:test) with largest-remainder rounding.
pub fn split(ids: &[String], ratios: [usize; 3], seed: u64) -> Result<SplitLists> {
    if ids.is_empty() {
        return Err(Error::Data("cannot split an empty id list".into()));
    }
    if ratios.iter().any(|&r| r == 0) {
        return Err(Error::Data(format!("split ratios must be positive, got {ratios:?}")));
    }
    let mut shuffled: Vec<String> = ids.to_vec();
    let mut rng = Rng::new(seed);
    rng.shuffle(&mut shuffled);

    let n = shuffled.len();
    let total: usize = ratios.iter().sum();
    let mut sizes = [0usize; 3];
    let mut fracs = [(0usize, 0.0f64); 3];
    let mut assigned = 0;
    for i in 0..3 {
        let exact = n as f64 * ratios[i] as f64 / total as f64;
        sizes[i] = exact.floor() as usize;
        fracs[i] = (i, exact - exact.floor());
        assigned += sizes[i];
    }
    // hand out the remainder to the largest fractional parts; ties go to
    // the earlier split so the result is deterministic
    fracs.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    for k in 0..n - assigned {
        sizes[fracs[k % 3].0] += 1;
    }
    let train: Vec<String> = shuffled[..sizes[0]].to_vec();
    let val: Vec<String> = shuffled[sizes[0]..sizes[0] + sizes[1]].to_vec();
    let test: Vec<String> = shuffled[sizes[0] + sizes[1]..].to_vec();
    Ok(SplitLists { train, val, test })
}

/// On-disk dataset description: split membership plus provenance.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub root: String,
    pub tile_size: usize,
    pub seed: u64,
    pub ratios: [usize; 3],
    pub splits: SplitLists,
    /// Present when the dataset was synthesized.
    pub synth_spec: Option<SynthSpec>,
}

impl DatasetManifest {
    pub fn manifest_path(root: &Path) -> PathBuf {
        root.join("manifest.json")
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        let s = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(Self::manifest_path(root), s)?;
        Ok(())
    }

    pub fn load(root: &Path) -> Result<DatasetManifest> {
        let path = Self::manifest_path(root);
        let s = std::fs::read_to_string(&path)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&s).map_err(|e| Error::Data(format!("bad manifest: {e}")))
    }

    pub fn ids(&self, split: &str) -> Result<&[String]> {
        self.splits.get(split)
    }

    fn file_paths(root: &Path, split: &str, id: &str) -> [PathBuf; 3] {
        [
            root.join(split).join("A").join(format!("{id}.png")),
            root.join(split).join("B").join(format!("{id}.png")),
            root.join(split).join("label").join(format!("{id}.png")),
        ]
    }

    /// Split lists must be disjoint and every id's three files present.
    pub fn validate(&self, root: &Path) -> Result<()> {
        let mut seen: HashSet<&str> = HashSet::new();
        for split in SPLITS {
            for id in self.splits.get(split)? {
                if !seen.insert(id.as_str()) {
                    return Err(Error::Data(format!("id '{id}' appears in more than one split")));
                }
                for path in Self::file_paths(root, split, id) {
                    if !path.exists() {
                        return Err(Error::Data(format!("missing file {}", path.display())));
                    }
                }
            }
        }
        Ok(())
    }

    /// Load one sample by id.
    pub fn load_sample(&self, root: &Path, split: &str, id: &str) -> Result<BiTemporalSample> {
        let [pa, pb, pl] = Self::file_paths(root, split, id);
        for p in [&pa, &pb, &pl] {
            if !p.exists() {
                return Err(Error::Data(format!("sample '{id}': missing file {}", p.display())));
            }
        }
        let a = read_rgb_png(&pa)?;
        let b = read_rgb_png(&pb)?;
        let label = read_gray_png(&pl)?;
        let sample = BiTemporalSample {
            image_t1: a.to_tensor(),
            image_t2: b.to_tensor(),
            mask: label.to_mask()?,
            id: id.to_string(),
        };
        sample.validate()?;
        Ok(sample)
    }

    /// Load every sample of a split, in manifest order.
    pub fn load_split(&self, root: &Path, split: &str) -> Result<Vec<BiTemporalSample>> {
        let ids = self.ids(split)?;
        let mut missing = Vec::new();
        for id in ids {
            for p in Self::file_paths(root, split, id) {
                if !p.exists() {
                    missing.push(id.clone());
                    break;
                }
            }
        }
        if !missing.is_empty() {
            return Err(Error::Data(format!(
                "split '{split}' is missing files for ids: {}",
                missing.join(", ")
            )));
        }
        ids.iter().map(|id| self.load_sample(root, split, id)).collect()
    }
}

/// Write one tile triple into the split layout, creating directories.
pub fn save_tile(root: &Path, split: &str, tile: &TilePair) -> Result<()> {
    for sub in ["A", "B", "label"] {
        std::fs::create_dir_all(root.join(split).join(sub))?;
    }
    write_rgb_png(&root.join(split).join("A").join(format!("{}.png", tile.id)), &tile.a)?;
    write_rgb_png(&root.join(split).join("B").join(format!("{}.png", tile.id)), &tile.b)?;
    write_gray_png(&root.join(split).join("label").join(format!("{}.png", tile.id)), &tile.label)?;
    Ok(())
}

/// Red/green disagreement overlay: hits white, misses green, spurious
/// predictions red, correct negatives black.
pub fn overlay_image(pred: &Mask, gt: &Mask) -> Result<RgbImage> {
    if pred.h != gt.h || pred.w != gt.w {
        return Err(Error::Shape(format!(
            "overlay masks differ: {}x{} vs {}x{}",
            pred.h, pred.w, gt.h, gt.w
        )));
    }
    let mut img = RgbImage::new(pred.w, pred.h);
    for y in 0..pred.h {
        for x in 0..pred.w {
            let i = y * pred.w + x;
            let px = match (pred.data[i], gt.data[i]) {
                (1, 1) => [255, 255, 255],
                (0, 1) => [0, 200, 0],
                (1, 0) => [220, 0, 0],
                _ => [0, 0, 0],
            };
            img.put(x, y, px);
        }
    }
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn watermark_images(side: usize) -> (RgbImage, RgbImage, GrayImage) {
        let mut a = RgbImage::new(side, side);
        let mut b = RgbImage::new(side, side);
        let mut label = GrayImage::new(side, side);
        for y in 0..side {
            for x in 0..side {
                // encode absolute coordinates in the pixel values
                let px = [(x % 256) as u8, (y % 256) as u8, ((x / 256) * 16 + y / 256) as u8];
                a.put(x, y, px);
                b.put(x, y, [px[0].wrapping_add(1), px[1], px[2]]);
                label.data[y * side + x] = if (x + y) % 2 == 0 { 255 } else { 0 };
            }
        }
        (a, b, label)
    }

    #[test]
    fn grid_tiling_counts() {
        let (a, b, label) = watermark_images(1024);
        let tiles = tile_images(&a, &b, &label, 256, TileMode::Grid, 0, 0, "t").unwrap();
        assert_eq!(tiles.len(), 16);
    }

    #[test]
    fn random_tiling_deterministic() {
        let (a, b, label) = watermark_images(512);
        let t1 = tile_images(&a, &b, &label, 64, TileMode::Random, 10, 7, "t").unwrap();
        let t2 = tile_images(&a, &b, &label, 64, TileMode::Random, 10, 7, "t").unwrap();
        for (x, y) in t1.iter().zip(&t2) {
            assert_eq!(x.a, y.a);
            assert_eq!(x.b, y.b);
            assert_eq!(x.label, y.label);
        }
    }

    /// Watermark oracle: every tile's A/B/label crops come from the same
    /// window.
    #[test]
    fn tiles_share_crop_windows() {
        let (a, b, label) = watermark_images(512);
        for mode in [TileMode::Grid, TileMode::Random] {
            let tiles = tile_images(&a, &b, &label, 128, mode, 6, 3, "t").unwrap();
            for t in &tiles {
                // recover the window origin from the watermark
                let [px0, py0, pz0] = t.a.get(0, 0);
                let x0 = px0 as usize + 256 * (pz0 as usize / 16);
                let y0 = py0 as usize + 256 * (pz0 as usize % 16);
                for (x, y) in [(0usize, 0usize), (127, 0), (0, 127), (63, 91)] {
                    let want_a = a.get(x0 + x, y0 + y);
                    assert_eq!(t.a.get(x, y), want_a);
                    assert_eq!(t.b.get(x, y), b.get(x0 + x, y0 + y));
                    assert_eq!(t.label.data[y * 128 + x], label.data[(y0 + y) * 512 + x0 + x]);
                }
            }
        }
    }

    #[test]
    fn undersized_input_rejected() {
        let (a, b, label) = watermark_images(100);
        assert!(tile_images(&a, &b, &label, 256, TileMode::Grid, 0, 0, "t").is_err());
    }

    #[test]
    fn split_sizes_match_ratios() {
        let ids: Vec<String> = (0..100).map(|i| format!("id{i}")).collect();
        let s = split(&ids, [7, 2, 1], 42).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (70, 20, 10));
        let ids10: Vec<String> = (0..10).map(|i| format!("id{i}")).collect();
        let s = split(&ids10, [8, 1, 1], 42).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (8, 1, 1));
    }

    #[test]
    fn split_deterministic_and_exhaustive() {
        let ids: Vec<String> = (0..37).map(|i| format!("id{i}")).collect();
        let s1 = split(&ids, [7, 2, 1], 9).unwrap();
        let s2 = split(&ids, [7, 2, 1], 9).unwrap();
        assert_eq!(s1, s2);
        let mut all: Vec<&String> = s1.train.iter().chain(&s1.val).chain(&s1.test).collect();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 37);
    }

    #[test]
    fn split_rejects_bad_input() {
        assert!(split(&[], [7, 2, 1], 0).is_err());
        let ids = vec!["a".to_string()];
        assert!(split(&ids, [7, 0, 1], 0).is_err());
    }

    proptest! {
        /// Partition is disjoint and exhaustive for any size and seed.
        #[test]
        fn split_partitions(n in 1usize..300, seed in 0u64..1000) {
            let ids: Vec<String> = (0..n).map(|i| format!("id{i}")).collect();
            let s = split(&ids, [7, 2, 1], seed).unwrap();
            let total = s.train.len() + s.val.len() + s.test.len();
            prop_assert_eq!(total, n);
            let mut set: HashSet<&String> = HashSet::new();
            for id in s.train.iter().chain(&s.val).chain(&s.test) {
                prop_assert!(set.insert(id));
            }
        }
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (a, _, label) = watermark_images(64);
        let pa = dir.path().join("a.png");
        let pl = dir.path().join("l.png");
        write_rgb_png(&pa, &a).unwrap();
        write_gray_png(&pl, &label).unwrap();
        assert_eq!(read_rgb_png(&pa).unwrap(), a);
        assert_eq!(read_gray_png(&pl).unwrap(), label);
    }

    #[test]
    fn tensor_conversion_preserves_bytes() {
        let (a, _, _) = watermark_images(16);
        let t = a.to_tensor();
        for y in 0..16 {
            for x in 0..16 {
                let px = a.get(x, y);
                for ch in 0..3 {
                    let v = t.data()[ch * 256 + y * 16 + x];
                    assert_eq!((v * 255.0).round() as u8, px[ch]);
                }
            }
        }
    }

    #[test]
    fn overlay_colors() {
        let pred = Mask::new(1, 4, vec![1, 0, 1, 0]).unwrap();
        let gt = Mask::new(1, 4, vec![1, 1, 0, 0]).unwrap();
        let img = overlay_image(&pred, &gt).unwrap();
        assert_eq!(img.get(0, 0), [255, 255, 255]);
        assert_eq!(img.get(1, 0), [0, 200, 0]);
        assert_eq!(img.get(2, 0), [220, 0, 0]);
        assert_eq!(img.get(3, 0), [0, 0, 0]);
    }
}
