//! Dataset manifests, subject-disjoint splitting, image-directory ingestion
//! and the synthetic two-class texture generator.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::colorspace::{rgb_to_ycbcr_px, ycbcr_to_rgb_px, ColorSpace, ImageTensor};
use crate::error::{Error, Result};
use crate::metrics::Label;

pub const MANIFEST_HEADER: [&str; 4] = ["path", "label", "split", "group"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "valid" | "val" | "validation" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::Data(format!("unknown split '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    /// Relative to the manifest root.
    pub path: String,
    pub label: Label,
    /// `None` until the entry has been assigned by [`make_splits`].
    pub split: Option<Split>,
    pub group: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn count(&self, split: Split) -> usize {
        self.entries.iter().filter(|e| e.split == Some(split)).count()
    }

    pub fn groups(&self) -> BTreeSet<&str> {
        self.entries.iter().map(|e| e.group.as_str()).collect()
    }

    /// Fails if any group appears in more than one split.
    pub fn check_disjoint(&self) -> Result<()> {
        let mut seen: BTreeMap<&str, Split> = BTreeMap::new();
        for e in &self.entries {
            let Some(split) = e.split else { continue };
            match seen.insert(&e.group, split) {
                Some(prev) if prev != split => {
                    return Err(Error::Data(format!(
                        "group '{}' appears in both {prev} and {split}",
                        e.group
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut wtr = csv::Writer::from_path(path)?;
        wtr.write_record(MANIFEST_HEADER)?;
        for e in &self.entries {
            let split = e.split.map(|s| s.to_string()).unwrap_or_default();
            wtr.write_record([e.path.as_str(), &e.label.to_string(), &split, &e.group])?;
        }
        wtr.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// Reads and validates a manifest CSV. Paths resolve against the manifest's directory.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let err = |msg: String| Error::Manifest {
        path: path.to_path_buf(),
        msg,
    };
    if !path.is_file() {
        return Err(err("file not found".into()));
    }
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut rdr = csv::Reader::from_path(path)?;
    let header: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    if header != MANIFEST_HEADER {
        return Err(err(format!("expected header {}", MANIFEST_HEADER.join(","))));
    }
    let mut entries = Vec::new();
    for (line, record) in rdr.records().enumerate() {
        let record = record?;
        let row = line + 2;
        let rel = record[0].trim().to_string();
        let label = record[1]
            .parse()
            .map_err(|e| err(format!("row {row}: {e}")))?;
        let split = match record[2].trim() {
            "" => None,
            s => Some(s.parse().map_err(|e| err(format!("row {row}: {e}")))?),
        };
        if !root.join(&rel).is_file() {
            return Err(err(format!("row {row}: missing file {rel}")));
        }
        entries.push(ManifestEntry {
            path: rel,
            label,
            split,
            group: record[3].trim().to_string(),
        });
    }
    let manifest = DatasetManifest { root, entries };
    manifest.check_disjoint().map_err(|e| err(e.to_string()))?;
    Ok(manifest)
}

/// Builds a manifest from `root/<label>/<file>`; every file is its own group
/// and no split is assigned.
pub fn scan_directory(root: &Path) -> Result<DatasetManifest> {
    let mut entries = Vec::new();
    for label in [Label::Bonafide, Label::Attack] {
        let dir = root.join(label.to_string());
        if !dir.is_dir() {
            continue;
        }
        let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                matches!(
                    p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref(),
                    Some("png" | "ppm" | "pnm")
                )
            })
            .collect();
        files.sort();
        for file in files {
            let name = file.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
            let stem = file.file_stem().and_then(|n| n.to_str()).unwrap_or_default();
            entries.push(ManifestEntry {
                path: format!("{label}/{name}"),
                label,
                split: None,
                group: format!("{label}/{stem}"),
            });
        }
    }
    if entries.is_empty() {
        return Err(Error::Data(format!("no images under {}", root.display())));
    }
    Ok(DatasetManifest {
        root: root.to_path_buf(),
        entries,
    })
}

/// Train/valid/test proportions, e.g. `3:1:1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitRatio(pub [u32; 3]);

impl Default for SplitRatio {
    fn default() -> Self {
        SplitRatio([3, 1, 1])
    }
}

impl FromStr for SplitRatio {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<u32> = s
            .split(':')
            .map(|p| p.trim().parse::<u32>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Config(format!("bad split ratio '{s}'")))?;
        match parts.as_slice() {
            &[a, b, c] if a > 0 && a + b + c > 0 => Ok(SplitRatio([a, b, c])),
            _ => Err(Error::Config(format!("split ratio must be train:valid:test with train > 0, got '{s}'"))),
        }
    }
}

impl SplitRatio {
    fn min_groups(&self) -> usize {
        fn gcd(a: u32, b: u32) -> u32 {
            if b == 0 {
                a
            } else {
                gcd(b, a % b)
            }
        }
        let g = self.0.iter().copied().fold(0, gcd).max(1);
        (self.0.iter().sum::<u32>() / g) as usize
    }

    /// Largest-remainder apportionment of `n` items; ties go to the earlier split.
    pub fn apportion(&self, n: usize) -> [usize; 3] {
        let total: u64 = self.0.iter().map(|&p| p as u64).sum();
        let mut counts = [0usize; 3];
        let mut rems = [0u64; 3];
        for i in 0..3 {
            let num = n as u64 * self.0[i] as u64;
            counts[i] = (num / total) as usize;
            rems[i] = num % total;
        }
        let mut left = n - counts.iter().sum::<usize>();
        let mut order = [0usize, 1, 2];
        order.sort_by(|&a, &b| rems[b].cmp(&rems[a]).then(a.cmp(&b)));
        for &i in order.iter().cycle() {
            if left == 0 {
                break;
            }
            counts[i] += 1;
            left -= 1;
        }
        counts
    }
}

/// How groups are mapped to splits.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitStrategy {
    /// Groups sorted by seeded hash, then cut at exact apportioned counts.
    #[default]
    Apportioned,
    /// Each group's split is a function of its own seeded hash only, so
    /// adding groups never moves existing ones; counts match the ratio only
    /// in expectation.
    HashBucket,
}

/// FNV-1a over the seed and group name, finished with a splitmix64 mix.
pub fn group_hash(seed: u64, group: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in seed.to_le_bytes().iter().chain(group.as_bytes()) {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^ (h >> 31)
}

/// Assigns every entry a split at group level.
pub fn make_splits(
    entries: Vec<ManifestEntry>,
    ratio: SplitRatio,
    seed: u64,
    strategy: SplitStrategy,
) -> Result<Vec<ManifestEntry>> {
    let groups: BTreeSet<String> = entries.iter().map(|e| e.group.clone()).collect();
    let need = ratio.min_groups();
    if groups.len() < need {
        return Err(Error::TooFewGroups {
            need,
            got: groups.len(),
        });
    }
    let mut assignment: BTreeMap<String, Split> = BTreeMap::new();
    match strategy {
        SplitStrategy::Apportioned => {
            let mut order: Vec<(u64, String)> = groups.into_iter().map(|g| (group_hash(seed, &g), g)).collect();
            order.sort();
            let counts = ratio.apportion(order.len());
            let mut it = order.into_iter();
            for (split, n) in Split::ALL.into_iter().zip(counts) {
                for (_, g) in it.by_ref().take(n) {
                    assignment.insert(g, split);
                }
            }
        }
        SplitStrategy::HashBucket => {
            let total: u64 = ratio.0.iter().map(|&p| p as u64).sum();
            for g in groups {
                let bucket = ((group_hash(seed, &g) as u128 * total as u128) >> 64) as u64;
                let split = if bucket < ratio.0[0] as u64 {
                    Split::Train
                } else if bucket < (ratio.0[0] + ratio.0[1]) as u64 {
                    Split::Valid
                } else {
                    Split::Test
                };
                assignment.insert(g, split);
            }
        }
    }
    Ok(entries
        .into_iter()
        .map(|mut e| {
            e.split = Some(assignment[&e.group]);
            e
        })
        .collect())
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub label: Label,
    pub split: Option<Split>,
    pub group: String,
    pub image: ImageTensor,
}

/// Decoded images in manifest order.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<&Sample> {
        self.samples.iter().filter(|s| s.split == Some(split)).collect()
    }

    pub fn has_split(&self, split: Split) -> bool {
        self.samples.iter().any(|s| s.split == Some(split))
    }
}

/// Decodes every manifest image, resizing to `input_size` when needed.
pub fn load_dataset(manifest: &DatasetManifest, input_size: usize) -> Result<Dataset> {
    let samples = manifest
        .entries
        .par_iter()
        .map(|e| {
            let path = manifest.root.join(&e.path);
            let mut image = ImageTensor::load(&path)?;
            if image.height() != input_size || image.width() != input_size {
                let resized = image::imageops::resize(
                    &image.to_rgb8(),
                    input_size as u32,
                    input_size as u32,
                    image::imageops::FilterType::Triangle,
                );
                image = ImageTensor::from_rgb8(&resized);
            }
            Ok(Sample {
                id: e.path.clone(),
                label: e.label,
                split: e.split,
                group: e.group.clone(),
                image,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { samples })
}

/// Parameters of the synthetic skin-texture generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_per_class: usize,
    pub size: usize,
    /// Images sharing one texture family (and hence one group id).
    pub family_size: usize,
    /// Distance between the class chroma centers in the (Cb, Cr) plane.
    pub chroma_delta: f64,
    /// Std of the per-family chroma offset around its class center.
    pub family_chroma_std: f64,
    /// Std of the per-pixel luminance noise.
    pub texture_std: f64,
    /// Box-blur radius applied to attack-class noise.
    pub attack_blur_radius: usize,
    /// Range of the per-image mean luminance.
    pub luma_range: (f64, f64),
    pub ratio: SplitRatio,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_per_class: 200,
            size: 32,
            family_size: 2,
            chroma_delta: 0.04,
            family_chroma_std: 0.015,
            texture_std: 0.06,
            attack_blur_radius: 1,
            luma_range: (0.3, 0.75),
            ratio: SplitRatio::default(),
        }
    }
}

const BONAFIDE_CHROMA: (f64, f64) = (0.44, 0.58);

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size < 16 {
            return Err(Error::Config(format!("synthetic size must be >= 16, got {}", self.size)));
        }
        if self.n_per_class == 0 || self.family_size == 0 {
            return Err(Error::Config("n_per_class and family_size must be positive".into()));
        }
        if !(self.chroma_delta >= 0.0) || !(self.family_chroma_std >= 0.0) || !(self.texture_std >= 0.0) {
            return Err(Error::Config("synthetic std/delta parameters must be >= 0".into()));
        }
        Ok(())
    }

    /// Class chroma center; the attack class is shifted toward blue and away from red.
    pub fn chroma_center(&self, label: Label) -> (f64, f64) {
        let (cb, cr) = BONAFIDE_CHROMA;
        match label {
            Label::Bonafide => (cb, cr),
            Label::Attack => {
                let d = self.chroma_delta / std::f64::consts::SQRT_2;
                (cb + d, cr - d)
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthImage {
    pub label: Label,
    pub group: String,
    pub name: String,
    pub image: ImageTensor,
}

fn box_blur(plane: &[f64], size: usize, radius: usize) -> Vec<f64> {
    if radius == 0 {
        return plane.to_vec();
    }
    let r = radius as isize;
    let n = size as isize;
    let mut out = vec![0.0; plane.len()];
    for y in 0..n {
        for x in 0..n {
            let mut acc = 0.0;
            let mut cnt = 0.0;
            for dy in -r..=r {
                for dx in -r..=r {
                    // Wrap around so the blurred field stays stationary.
                    let sy = (y + dy).rem_euclid(n);
                    let sx = (x + dx).rem_euclid(n);
                    acc += plane[(sy * n + sx) as usize];
                    cnt += 1.0;
                }
            }
            out[(y * n + x) as usize] = acc / cnt;
        }
    }
    out
}

fn standardize(v: &mut [f64]) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt().max(1e-12);
    v.iter_mut().for_each(|x| *x = (*x - mean) / sd);
}

/// Generates the synthetic images in memory, bona fide first.
///
/// Each texture family draws a chroma offset around its class center and a
/// base luminance; every image in the family adds a random illumination
/// gradient and a unit-variance noise field scaled by `texture_std`. The
/// bona fide noise is white; the attack noise is box-blurred before
/// re-standardizing, so it carries the same power at lower frequencies.
pub fn synthesize(config: &SynthConfig) -> Result<Vec<SynthImage>> {
    config.validate()?;
    let size = config.size;
    let families = config.n_per_class.div_ceil(config.family_size);
    let fam_normal = Normal::new(0.0, config.family_chroma_std.max(0.0)).expect("valid std");
    let std_normal = Normal::new(0.0, 1.0).expect("valid std");
    let mut out = Vec::with_capacity(2 * config.n_per_class);
    for (ci, label) in [Label::Bonafide, Label::Attack].into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(ci as u64 + 1);
        let center = config.chroma_center(label);
        let mut offsets: Vec<(f64, f64)> = (0..families)
            .map(|_| (fam_normal.sample(&mut rng), fam_normal.sample(&mut rng)))
            .collect();
        // Center the family offsets so each class mean sits on its center.
        let mean_b = offsets.iter().map(|o| o.0).sum::<f64>() / families as f64;
        let mean_r = offsets.iter().map(|o| o.1).sum::<f64>() / families as f64;
        offsets.iter_mut().for_each(|o| *o = (o.0 - mean_b, o.1 - mean_r));
        let mut produced = 0;
        for (fi, off) in offsets.into_iter().enumerate() {
            let base_luma = rng.gen_range(config.luma_range.0..config.luma_range.1);
            for member in 0..config.family_size {
                if produced == config.n_per_class {
                    break;
                }
                produced += 1;
                let mut noise: Vec<f64> = (0..size * size).map(|_| std_normal.sample(&mut rng)).collect();
                if label == Label::Attack {
                    noise = box_blur(&noise, size, config.attack_blur_radius);
                }
                standardize(&mut noise);
                let mut chroma_noise: Vec<f64> = (0..size * size).map(|_| std_normal.sample(&mut rng)).collect();
                chroma_noise = box_blur(&chroma_noise, size, 2);
                standardize(&mut chroma_noise);
                let gx = rng.gen_range(-0.1..0.1);
                let gy = rng.gen_range(-0.1..0.1);
                let luma_shift = rng.gen_range(-0.05..0.05);
                let cb = center.0 + off.0;
                let cr = center.1 + off.1;
                let image = ImageTensor::from_fn(ColorSpace::Rgb, size, size, |y, x| {
                    let i = y * size + x;
                    let u = x as f64 / (size - 1) as f64 - 0.5;
                    let v = y as f64 / (size - 1) as f64 - 0.5;
                    let luma = base_luma + luma_shift + gx * u + gy * v + config.texture_std * noise[i];
                    let tint = 0.005 * chroma_noise[i];
                    ycbcr_to_rgb_px([luma, cb + tint, cr - tint])
                })?;
                out.push(SynthImage {
                    label,
                    group: format!("{label}-{fi:04}"),
                    name: format!("{label}_{fi:04}_{member}.png"),
                    image,
                });
            }
        }
    }
    Ok(out)
}

/// Mean (Cb, Cr) of each class, bona fide first.
pub fn class_chroma_means<'a>(images: impl IntoIterator<Item = (Label, &'a ImageTensor)>) -> [(f64, f64); 2] {
    let mut acc = [(0.0, 0.0, 0usize); 2];
    for (label, img) in images {
        let slot = &mut acc[label.class_index()];
        for y in 0..img.height() {
            for x in 0..img.width() {
                let ycc = rgb_to_ycbcr_px(img.pixel(y, x));
                slot.0 += ycc[1];
                slot.1 += ycc[2];
                slot.2 += 1;
            }
        }
    }
    acc.map(|(b, r, n)| (b / n.max(1) as f64, r / n.max(1) as f64))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthReport {
    pub config: SynthConfig,
    pub manifest: PathBuf,
    pub files: usize,
    pub bonafide_chroma_mean: (f64, f64),
    pub attack_chroma_mean: (f64, f64),
    pub chroma_separation: f64,
}

/// Writes `out_dir/<label>/<file>.png`, `manifest.csv` (split 3:1:1 by
/// family) and `synth_params.json`.
pub fn generate_synthetic(config: &SynthConfig, out_dir: &Path) -> Result<SynthReport> {
    let images = synthesize(config)?;
    for label in [Label::Bonafide, Label::Attack] {
        let dir = out_dir.join(label.to_string());
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    images
        .par_iter()
        .map(|img| img.image.save(&out_dir.join(img.label.to_string()).join(&img.name)))
        .collect::<Result<Vec<_>>>()?;
    let entries = images
        .iter()
        .map(|img| ManifestEntry {
            path: format!("{}/{}", img.label, img.name),
            label: img.label,
            split: None,
            group: img.group.clone(),
        })
        .collect();
    let entries = make_splits(entries, config.ratio, config.seed, SplitStrategy::Apportioned)?;
    let manifest = DatasetManifest {
        root: out_dir.to_path_buf(),
        entries,
    };
    let manifest_path = out_dir.join("manifest.csv");
    manifest.write(&manifest_path)?;

    // Statistics of what was actually written (after 8-bit quantization).
    let decoded: Vec<(Label, ImageTensor)> = images
        .iter()
        .map(|img| Ok((img.label, ImageTensor::from_rgb8(&img.image.to_rgb8()))))
        .collect::<Result<_>>()?;
    let [bona, attack] = class_chroma_means(decoded.iter().map(|(l, i)| (*l, i)));
    let report = SynthReport {
        config: config.clone(),
        manifest: manifest_path,
        files: images.len(),
        bonafide_chroma_mean: bona,
        attack_chroma_mean: attack,
        chroma_separation: ((bona.0 - attack.0).powi(2) + (bona.1 - attack.1).powi(2)).sqrt(),
    };
    log::info!(
        "synthetic dataset: {} files, chroma separation {:.4}",
        report.files,
        report.chroma_separation
    );
    let params_path = out_dir.join("synth_params.json");
    std::fs::write(&params_path, serde_json::to_string_pretty(&report)?).map_err(|e| Error::io(&params_path, e))?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn entries(groups: usize) -> Vec<ManifestEntry> {
        (0..groups)
            .flat_map(|g| {
                (0..2).map(move |i| ManifestEntry {
                    path: format!("x/{g}_{i}.png"),
                    label: if g % 2 == 0 { Label::Bonafide } else { Label::Attack },
                    split: None,
                    group: format!("g{g}"),
                })
            })
            .collect()
    }

    fn write_toy(dir: &Path, rows: &[(&str, &str, &str, &str)]) -> PathBuf {
        let img = ImageTensor::from_fn(ColorSpace::Rgb, 4, 4, |_, _| [0.5, 0.2, 0.1]).unwrap();
        let mut csv = String::from("path,label,split,group\n");
        for (p, l, s, g) in rows {
            let full = dir.join(p);
            std::fs::create_dir_all(full.parent().unwrap()).unwrap();
            img.save(&full).unwrap();
            csv.push_str(&format!("{p},{l},{s},{g}\n"));
        }
        let path = dir.join("manifest.csv");
        std::fs::write(&path, csv).unwrap();
        path
    }

    #[test]
    fn toy_manifest_loads() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_toy(
            dir.path(),
            &[
                ("bonafide/a.png", "bonafide", "train", "s1"),
                ("attack/b.png", "attack", "train", "s2"),
                ("bonafide/c.png", "bonafide", "valid", "s3"),
                ("attack/d.png", "attack", "test", "s4"),
            ],
        );
        let m = load_manifest(&path).unwrap();
        assert_eq!(m.entries.len(), 4);
        assert_eq!(m.count(Split::Train), 2);
        let ds = load_dataset(&m, 8).unwrap();
        assert_eq!(ds.samples[0].image.height(), 8);
    }

    #[test]
    fn manifest_rejections() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_toy(
            dir.path(),
            &[
                ("bonafide/a.png", "bonafide", "train", "s1"),
                ("bonafide/b.png", "bonafide", "test", "s1"),
            ],
        );
        assert!(load_manifest(&path).is_err());

        let path = write_toy(dir.path(), &[("bonafide/a.png", "human", "train", "s1")]);
        assert!(load_manifest(&path).is_err());

        std::fs::write(&path, "path,label,split,group\nnope.png,attack,train,g\n").unwrap();
        let e = load_manifest(&path).unwrap_err();
        assert!(e.to_string().contains("missing file"));
        assert!(load_manifest(&dir.path().join("absent.csv")).is_err());
    }

    #[test]
    fn five_groups_split_three_one_one() {
        let out = make_splits(entries(5), SplitRatio::default(), 7, SplitStrategy::Apportioned).unwrap();
        let m = DatasetManifest { root: PathBuf::new(), entries: out };
        assert_eq!([m.count(Split::Train), m.count(Split::Valid), m.count(Split::Test)], [6, 2, 2]);
        m.check_disjoint().unwrap();
        assert!(matches!(
            make_splits(entries(4), SplitRatio::default(), 7, SplitStrategy::Apportioned),
            Err(Error::TooFewGroups { need: 5, got: 4 })
        ));
    }

    #[test]
    fn apportionment_of_745_groups() {
        // Independent recomputation: 745 * 3/5 = 447 and 745/5 = 149 exactly.
        assert_eq!(SplitRatio::default().apportion(745), [447, 149, 149]);
        assert_eq!(SplitRatio::default().apportion(7), [4, 2, 1]);
        let out = make_splits(
            (0..745)
                .map(|g| ManifestEntry {
                    path: format!("{g}.png"),
                    label: Label::Bonafide,
                    split: None,
                    group: format!("subject{g}"),
                })
                .collect(),
            SplitRatio::default(),
            1,
            SplitStrategy::Apportioned,
        )
        .unwrap();
        let count = |s| out.iter().filter(|e| e.split == Some(s)).count();
        assert_eq!([count(Split::Train), count(Split::Valid), count(Split::Test)], [447, 149, 149]);
    }

    #[test]
    fn split_is_deterministic_per_seed() {
        let a = make_splits(entries(20), SplitRatio::default(), 3, SplitStrategy::Apportioned).unwrap();
        let b = make_splits(entries(20), SplitRatio::default(), 3, SplitStrategy::Apportioned).unwrap();
        let c = make_splits(entries(20), SplitRatio::default(), 4, SplitStrategy::Apportioned).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn ratio_parsing() {
        assert_eq!("3:1:1".parse::<SplitRatio>().unwrap(), SplitRatio([3, 1, 1]));
        assert!("3:1".parse::<SplitRatio>().is_err());
        assert!("a:b:c".parse::<SplitRatio>().is_err());
        assert_eq!("60:20:20".parse::<SplitRatio>().unwrap().min_groups(), 5);
    }

    #[test]
    fn synthetic_generation() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            seed: 5,
            n_per_class: 10,
            size: 16,
            ..Default::default()
        };
        let report = generate_synthetic(&cfg, dir.path()).unwrap();
        assert_eq!(report.files, 20);
        let m = load_manifest(&report.manifest).unwrap();
        assert_eq!(m.entries.len(), 20);
        // 10 families: 6/2/2 groups of two images.
        assert_eq!([m.count(Split::Train), m.count(Split::Valid), m.count(Split::Test)], [12, 4, 4]);
        assert!(dir.path().join("synth_params.json").is_file());

        // Recompute the chroma statistics from the decoded files.
        let ds = load_dataset(&m, 16).unwrap();
        let [b, a] = class_chroma_means(ds.samples.iter().map(|s| (s.label, &s.image)));
        let sep = ((b.0 - a.0).powi(2) + (b.1 - a.1).powi(2)).sqrt();
        assert!(sep >= 0.98 * cfg.chroma_delta, "separation {sep}");
        assert!((sep - report.chroma_separation).abs() < 1e-12);

        // PNG re-encode is lossless.
        for s in &ds.samples {
            let p = dir.path().join("re.png");
            s.image.save(&p).unwrap();
            assert_eq!(ImageTensor::load(&p).unwrap(), s.image);
        }

        let again = synthesize(&cfg).unwrap();
        let first = synthesize(&cfg).unwrap();
        for (x, y) in again.iter().zip(&first) {
            assert_eq!(x.image, y.image);
        }
        assert!(synthesize(&SynthConfig { size: 8, ..cfg }).is_err());
    }

    #[test]
    fn directory_scan() {
        let dir = tempfile::tempdir().unwrap();
        write_toy(
            dir.path(),
            &[
                ("bonafide/a.png", "bonafide", "", "x"),
                ("attack/b.ppm", "attack", "", "y"),
            ],
        );
        let m = scan_directory(dir.path()).unwrap();
        assert_eq!(m.entries.len(), 2);
        assert_eq!(m.entries[1].label, Label::Attack);
        assert!(m.entries.iter().all(|e| e.split.is_none()));
        assert!(scan_directory(&dir.path().join("bonafide")).is_err());
    }

    proptest! {
        #[test]
        fn hash_bucket_is_stable_under_additions(seed in 0u64..1000, n in 5usize..40, extra in 1usize..10) {
            let base = make_splits(entries(n), SplitRatio::default(), seed, SplitStrategy::HashBucket).unwrap();
            let grown = make_splits(entries(n + extra), SplitRatio::default(), seed, SplitStrategy::HashBucket).unwrap();
            for e in &base {
                let same = grown.iter().find(|g| g.path == e.path).unwrap();
                prop_assert_eq!(same.split, e.split);
            }
        }

        #[test]
        fn splits_are_group_disjoint(seed in 0u64..1000, n in 5usize..60) {
            for strategy in [SplitStrategy::Apportioned, SplitStrategy::HashBucket] {
                let out = make_splits(entries(n), SplitRatio::default(), seed, strategy).unwrap();
                let m = DatasetManifest { root: PathBuf::new(), entries: out };
                prop_assert!(m.check_disjoint().is_ok());
                prop_assert!(m.entries.iter().all(|e| e.split.is_some()));
            }
        }
    }
}
