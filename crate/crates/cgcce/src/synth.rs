//! Deterministic synthetic bi-temporal dataset generator.
//!
//! Each sample shares a textured background between the two time points;
//! axis-aligned rectangular (occasionally L-shaped) buildings appear or
//! disappear between them, and those changed footprints define the mask.
//! A configurable fraction of changed buildings uses a rare "special"
//! palette (deep purple, bright white). The second image additionally
//! receives a global photometric jitter that must never leak into the
//! mask — the classic pseudo-change distractor.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{save_tile, split, DatasetManifest, GrayImage, RgbImage, TilePair};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::types::Mask;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_samples: usize,
    pub tile_size: usize,
    pub buildings_min: usize,
    pub buildings_max: usize,
    pub common_palette: Vec<[f64; 3]>,
    pub special_palette: Vec<[f64; 3]>,
    /// Fraction of *changed* buildings drawn from the special palette.
    pub special_ratio: f64,
    /// Photometric jitter amplitude applied globally to image B.
    pub jitter: f64,
    pub seed: u64,
    /// train:val:test proportions.
    pub ratios: [usize; 3],
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_samples: 64,
            tile_size: 256,
            buildings_min: 2,
            buildings_max: 5,
            common_palette: vec![
                [0.55, 0.55, 0.58],
                [0.62, 0.48, 0.42],
                [0.70, 0.66, 0.60],
                [0.45, 0.42, 0.40],
            ],
            special_palette: vec![[0.35, 0.10, 0.45], [0.97, 0.97, 0.95]],
            special_ratio: 0.3,
            jitter: 0.08,
            seed: 0,
            ratios: [7, 2, 1],
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::Config("n_samples must be positive".into()));
        }
        if self.tile_size < 16 {
            return Err(Error::Config(format!("tile_size {} too small", self.tile_size)));
        }
        if self.buildings_min == 0 || self.buildings_min > self.buildings_max {
            return Err(Error::Config(format!(
                "bad building count range {}..{}",
                self.buildings_min, self.buildings_max
            )));
        }
        if !(0.0..=1.0).contains(&self.special_ratio) {
            return Err(Error::Config(format!("special_ratio {} outside [0,1]", self.special_ratio)));
        }
        if self.common_palette.is_empty() || self.special_palette.is_empty() {
            return Err(Error::Config("palettes must be non-empty".into()));
        }
        for c in &self.common_palette {
            for s in &self.special_palette {
                let d2: f64 = c.iter().zip(s).map(|(a, b)| (a - b) * (a - b)).sum();
                if d2.sqrt() < 0.05 {
                    return Err(Error::Config(format!(
                        "palettes not disjoint: common {c:?} too close to special {s:?}"
                    )));
                }
            }
        }
        if !(0.0..=0.5).contains(&self.jitter) {
            return Err(Error::Config(format!("jitter {} outside [0,0.5]", self.jitter)));
        }
        Ok(())
    }
}

/// One placed building: a union of axis-aligned rectangles
/// `[x, y, w, h]` (one rectangle, or two for an L-shape).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BuildingRecord {
    pub rects: Vec<[usize; 4]>,
    pub changed: bool,
    /// For changed buildings: present only in B (appeared) or only in A.
    pub appears_in_b: bool,
    pub special: bool,
    pub color: [f64; 3],
}

/// Everything needed to replay one sample's geometry exactly.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PlacementRecord {
    pub id: String,
    pub buildings: Vec<BuildingRecord>,
    pub jitter_brightness: f64,
    pub jitter_tint: [f64; 3],
}

impl PlacementRecord {
    /// Rasterize the union of changed-building footprints.
    pub fn rasterize_mask(&self, tile: usize) -> Mask {
        let mut data = vec![0u8; tile * tile];
        for b in self.buildings.iter().filter(|b| b.changed) {
            for &[x, y, w, h] in &b.rects {
                for yy in y..y + h {
                    for xx in x..x + w {
                        data[yy * tile + xx] = 1;
                    }
                }
            }
        }
        Mask { h: tile, w: tile, data }
    }
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn bbox_overlaps(a: &[usize; 4], b: &[usize; 4], margin: usize) -> bool {
    let (ax0, ay0) = (a[0].saturating_sub(margin), a[1].saturating_sub(margin));
    let (ax1, ay1) = (a[0] + a[2] + margin, a[1] + a[3] + margin);
    ax0 < b[0] + b[2] && b[0] < ax1 && ay0 < b[1] + b[3] && b[1] < ay1
}

struct RenderedSample {
    tile: TilePair,
    record: PlacementRecord,
}

fn render_sample(spec: &SynthSpec, index: usize) -> Result<RenderedSample> {
    let n = spec.tile_size;
    let id = format!("s{index:05}");
    let mut rng = Rng::from_seed_index(spec.seed, index as u64);

    // shared textured background: smooth gradients plus value noise
    let base = [
        rng.range_f64(0.26, 0.40),
        rng.range_f64(0.32, 0.46),
        rng.range_f64(0.20, 0.32),
    ];
    let gx: [f64; 3] = std::array::from_fn(|_| rng.range_f64(-0.08, 0.08));
    let gy: [f64; 3] = std::array::from_fn(|_| rng.range_f64(-0.08, 0.08));
    let mut background = vec![[0.0f64; 3]; n * n];
    for y in 0..n {
        for x in 0..n {
            let (fx, fy) = (x as f64 / n as f64, y as f64 / n as f64);
            let noise = rng.range_f64(-0.03, 0.03);
            for ch in 0..3 {
                background[y * n + x][ch] = base[ch] + gx[ch] * fx + gy[ch] * fy + noise;
            }
        }
    }

    // place buildings without overlap (bounding boxes, 2px margin)
    let count = rng.range_usize(spec.buildings_min, spec.buildings_max + 1);
    let mut placed: Vec<[usize; 4]> = Vec::new();
    let mut buildings: Vec<BuildingRecord> = Vec::new();
    let (side_min, side_max) = ((n / 5).max(6), (n / 3).max(10));
    for k in 0..count {
        let mut attempt = 0;
        let bbox = loop {
            attempt += 1;
            if attempt > 50 {
                return Err(Error::Data(format!(
                    "sample {id}: could not place building {k} after 50 attempts"
                )));
            }
            let w = rng.range_usize(side_min, side_max + 1);
            let h = rng.range_usize(side_min, side_max + 1);
            let x = rng.range_usize(1, n - w);
            let y = rng.range_usize(1, n - h);
            let cand = [x, y, w, h];
            if !placed.iter().any(|p| bbox_overlaps(p, &cand, 2)) {
                break cand;
            }
        };
        placed.push(bbox);
        let [x, y, w, h] = bbox;
        // 30% chance of an L-shape: two strips sharing the corner
        let rects = if rng.chance(0.2) && w >= 6 && h >= 6 {
            vec![[x, y, w, h / 2], [x, y, w / 2, h]]
        } else {
            vec![bbox]
        };
        let changed = rng.chance(0.5);
        let appears_in_b = changed && rng.chance(0.5);
        let special = changed && rng.chance(spec.special_ratio);
        let color = if special {
            *rng.choose(&spec.special_palette)
        } else {
            *rng.choose(&spec.common_palette)
        };
        buildings.push(BuildingRecord { rects, changed, appears_in_b, special, color });
    }

    // jitter parameters for image B
    let jitter_brightness = rng.range_f64(-spec.jitter, spec.jitter);
    let jitter_tint: [f64; 3] = std::array::from_fn(|_| rng.range_f64(-spec.jitter / 2.0, spec.jitter / 2.0));

    // rasterize A and B
    let mut a = RgbImage::new(n, n);
    let mut b = RgbImage::new(n, n);
    let mut af = background.clone();
    let mut bf = background;
    for building in &buildings {
        let in_a = !building.changed || !building.appears_in_b;
        let in_b = !building.changed || building.appears_in_b;
        for &[x, y, w, h] in &building.rects {
            for yy in y..y + h {
                for xx in x..x + w {
                    if in_a {
                        af[yy * n + xx] = building.color;
                    }
                    if in_b {
                        bf[yy * n + xx] = building.color;
                    }
                }
            }
        }
    }
    for p in 0..n * n {
        let (x, y) = (p % n, p / n);
        a.put(x, y, std::array::from_fn(|ch| to_byte(af[p][ch])));
        b.put(
            x,
            y,
            std::array::from_fn(|ch| to_byte(bf[p][ch] + jitter_brightness + jitter_tint[ch])),
        );
    }

    let record = PlacementRecord { id: id.clone(), buildings, jitter_brightness, jitter_tint };
    let label = GrayImage::from_mask(&record.rasterize_mask(n));
    Ok(RenderedSample { tile: TilePair { a, b, label, id }, record })
}

/// Generate a dataset on disk: split layout, manifest, placement log.
pub fn synth_generate(root: &Path, spec: &SynthSpec) -> Result<(DatasetManifest, Vec<PlacementRecord>)> {
    spec.validate()?;
    std::fs::create_dir_all(root)?;

    let mut ids = Vec::with_capacity(spec.n_samples);
    let mut rendered = Vec::with_capacity(spec.n_samples);
    for i in 0..spec.n_samples {
        let s = render_sample(spec, i)?;
        ids.push(s.tile.id.clone());
        rendered.push(s);
    }

    let lists = split(&ids, spec.ratios, spec.seed)?;
    let split_of = |id: &str| -> &'static str {
        if lists.train.iter().any(|x| x == id) {
            "train"
        } else if lists.val.iter().any(|x| x == id) {
            "val"
        } else {
            "test"
        }
    };
    for s in &rendered {
        save_tile(root, split_of(&s.tile.id), &s.tile)?;
    }

    let manifest = DatasetManifest {
        root: root.display().to_string(),
        tile_size: spec.tile_size,
        seed: spec.seed,
        ratios: spec.ratios,
        splits: lists,
        synth_spec: Some(spec.clone()),
    };
    manifest.save(root)?;
    let records: Vec<PlacementRecord> = rendered.into_iter().map(|s| s.record).collect();
    let log = serde_json::to_string_pretty(&records).expect("log serializes");
    std::fs::write(root.join("placement_log.json"), log)?;
    manifest.validate(root)?;
    Ok((manifest, records))
}

/// Read back a placement log written by [`synth_generate`].
pub fn load_placement_log(root: &Path) -> Result<Vec<PlacementRecord>> {
    let path = root.join("placement_log.json");
    let s = std::fs::read_to_string(&path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&s).map_err(|e| Error::Data(format!("bad placement log: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::read_gray_png;

    fn small_spec(seed: u64) -> SynthSpec {
        SynthSpec { n_samples: 12, tile_size: 64, seed, ..SynthSpec::default() }
    }

    fn dir_bytes(root: &Path) -> Vec<(String, Vec<u8>)> {
        let mut files = Vec::new();
        let mut stack = vec![root.to_path_buf()];
        while let Some(d) = stack.pop() {
            for entry in std::fs::read_dir(&d).unwrap() {
                let p = entry.unwrap().path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    let rel = p.strip_prefix(root).unwrap().display().to_string();
                    files.push((rel, std::fs::read(&p).unwrap()));
                }
            }
        }
        files.sort();
        files
    }

    #[test]
    fn generation_bit_reproducible() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let spec = small_spec(9);
        synth_generate(d1.path(), &spec).unwrap();
        synth_generate(d2.path(), &spec).unwrap();
        let f1 = dir_bytes(d1.path());
        let f2 = dir_bytes(d2.path());
        assert_eq!(f1.len(), f2.len());
        for ((n1, b1), (n2, b2)) in f1.iter().zip(&f2) {
            assert_eq!(n1, n2);
            let same = root_insensitive_eq(n1, b1, b2);
            assert!(same, "file {n1} differs between runs");
        }
    }

    // manifest.json embeds the root path; compare it with roots stripped
    fn root_insensitive_eq(name: &str, b1: &[u8], b2: &[u8]) -> bool {
        if name == "manifest.json" {
            let strip = |b: &[u8]| {
                let mut v: serde_json::Value = serde_json::from_slice(b).unwrap();
                v.as_object_mut().unwrap().remove("root");
                v.to_string()
            };
            strip(b1) == strip(b2)
        } else {
            b1 == b2
        }
    }

    /// Labels equal an independent rasterization of the placement log.
    #[test]
    fn mask_matches_rasterization_oracle() {
        let dir = tempfile::tempdir().unwrap();
        let spec = small_spec(10);
        let (manifest, records) = synth_generate(dir.path(), &spec).unwrap();
        for record in &records {
            let split = ["train", "val", "test"]
                .into_iter()
                .find(|s| manifest.splits.get(s).unwrap().contains(&record.id))
                .unwrap();
            let label = read_gray_png(
                &dir.path().join(split).join("label").join(format!("{}.png", record.id)),
            )
            .unwrap();
            let want = record.rasterize_mask(spec.tile_size);
            assert_eq!(label.to_mask().unwrap(), want, "sample {}", record.id);
        }
    }

    /// Jitter creates pixel differences outside the mask, but the mask
    /// stays the exact union of changed footprints.
    #[test]
    fn pseudo_change_outside_mask() {
        let dir = tempfile::tempdir().unwrap();
        let mut spec = small_spec(11);
        spec.jitter = 0.1;
        let (manifest, records) = synth_generate(dir.path(), &spec).unwrap();
        let record = &records[0];
        let split = ["train", "val", "test"]
            .into_iter()
            .find(|s| manifest.splits.get(s).unwrap().contains(&record.id))
            .unwrap();
        let a = crate::data::read_rgb_png(&dir.path().join(split).join("A").join(format!("{}.png", record.id))).unwrap();
        let b = crate::data::read_rgb_png(&dir.path().join(split).join("B").join(format!("{}.png", record.id))).unwrap();
        let mask = record.rasterize_mask(spec.tile_size);
        let mut differing_outside = 0usize;
        for y in 0..spec.tile_size {
            for x in 0..spec.tile_size {
                if mask.data[y * spec.tile_size + x] == 0 && a.get(x, y) != b.get(x, y) {
                    differing_outside += 1;
                }
            }
        }
        assert!(
            differing_outside > spec.tile_size * spec.tile_size / 4,
            "jitter should perturb most unchanged pixels ({differing_outside} differ)"
        );
    }

    /// Realized special fraction tracks the configured ratio.
    #[test]
    fn special_fraction_near_target() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec { n_samples: 150, tile_size: 64, seed: 12, ..SynthSpec::default() };
        let (_, records) = synth_generate(dir.path(), &spec).unwrap();
        let changed: Vec<&BuildingRecord> =
            records.iter().flat_map(|r| &r.buildings).filter(|b| b.changed).collect();
        assert!(changed.len() >= 100, "want >= 100 changed buildings, got {}", changed.len());
        let special = changed.iter().filter(|b| b.special).count();
        let frac = special as f64 / changed.len() as f64;
        assert!((frac - 0.3).abs() <= 0.05, "special fraction {frac}");
    }

    #[test]
    fn manifest_valid_and_disjoint() {
        let dir = tempfile::tempdir().unwrap();
        let (manifest, _) = synth_generate(dir.path(), &small_spec(13)).unwrap();
        manifest.validate(dir.path()).unwrap();
        let total = manifest.splits.train.len() + manifest.splits.val.len() + manifest.splits.test.len();
        assert_eq!(total, 12);
    }

    #[test]
    fn bad_specs_rejected() {
        let mut s = SynthSpec::default();
        s.special_ratio = 1.5;
        assert!(s.validate().is_err());
        let mut s = SynthSpec::default();
        s.common_palette = vec![[0.97, 0.97, 0.95]]; // collides with special white
        assert!(s.validate().is_err());
        let mut s = SynthSpec::default();
        s.buildings_min = 0;
        assert!(s.validate().is_err());
    }
}
