//! Paired RGB / depth / ground-truth loading, preprocessing and batching.
//!
//! A dataset root holds three parallel directories, by default
//! `rgb/`, `depth/` and `gt/`, whose files are matched by stem.

use std::collections::BTreeMap;
use std::fmt;
use std::io::BufRead;
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use image::DynamicImage;
use ndarray::{Array2, Array3, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::resize::resize_plane;

const RGB_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];
const MAP_EXTENSIONS: [&str; 1] = ["png"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub rgb_dir: String,
    pub depth_dir: String,
    pub gt_dir: String,
}

impl Default for Layout {
    fn default() -> Self {
        Layout {
            rgb_dir: "rgb".into(),
            depth_dir: "depth".into(),
            gt_dir: "gt".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    #[default]
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub rgb: PathBuf,
    pub depth: PathBuf,
    pub gt: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub split: Split,
    /// Flip normalised depth so that near and far swap brightness.
    pub invert_depth: bool,
    pub entries: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IssueKind {
    MissingRgb,
    MissingDepth,
    MissingGt,
    DuplicateId,
    Unreadable,
}

/// A file set that was left out of the manifest, and why.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestIssue {
    pub id: String,
    pub kind: IssueKind,
    pub detail: String,
}

/// One JSONL record of an exported manifest.
#[derive(Serialize, Deserialize)]
struct ManifestLine {
    dataset: String,
    split: Split,
    invert_depth: bool,
    #[serde(flatten)]
    entry: ManifestEntry,
}

fn list_by_stem(
    dir: &Path,
    extensions: &[&str],
    issues: &mut Vec<ManifestIssue>,
) -> Result<BTreeMap<String, PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::MissingDir(dir.to_path_buf()));
    }
    let mut paths = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ok = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| extensions.contains(&e.to_ascii_lowercase().as_str()));
        if ok && path.is_file() {
            paths.push(path);
        }
    }
    paths.sort();
    let mut out: BTreeMap<String, PathBuf> = BTreeMap::new();
    for path in paths {
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()).map(str::to_string) else {
            continue;
        };
        if let Some(first) = out.get(&stem) {
            issues.push(ManifestIssue {
                id: stem.clone(),
                kind: IssueKind::DuplicateId,
                detail: format!("{} shadowed by {}", path.display(), first.display()),
            });
            continue;
        }
        out.insert(stem, path);
    }
    Ok(out)
}

fn decode(path: &Path) -> Result<DynamicImage> {
    let img = image::open(path).map_err(|e| Error::image(path, e))?;
    if img.width() == 0 || img.height() == 0 {
        return Err(Error::Shape(format!("{} decodes to an empty image", path.display())));
    }
    Ok(img)
}

/// Scans `root` for complete triples. Incomplete, duplicated or undecodable
/// triples are returned as issues instead of being dropped silently.
pub fn load_manifest(root: &Path, layout: &Layout) -> Result<(DatasetManifest, Vec<ManifestIssue>)> {
    if !root.is_dir() {
        return Err(Error::MissingDir(root.to_path_buf()));
    }
    let mut issues = Vec::new();
    let rgb = list_by_stem(&root.join(&layout.rgb_dir), &RGB_EXTENSIONS, &mut issues)?;
    let depth = list_by_stem(&root.join(&layout.depth_dir), &MAP_EXTENSIONS, &mut issues)?;
    let gt = list_by_stem(&root.join(&layout.gt_dir), &MAP_EXTENSIONS, &mut issues)?;

    let mut ids: Vec<&String> = rgb.keys().chain(depth.keys()).chain(gt.keys()).collect();
    ids.sort();
    ids.dedup();

    let mut candidates = Vec::new();
    for id in ids {
        let missing = [
            (rgb.get(id), IssueKind::MissingRgb, "rgb"),
            (depth.get(id), IssueKind::MissingDepth, "depth"),
            (gt.get(id), IssueKind::MissingGt, "ground truth"),
        ];
        let mut complete = true;
        for (found, kind, what) in missing {
            if found.is_none() {
                complete = false;
                issues.push(ManifestIssue {
                    id: id.clone(),
                    kind,
                    detail: format!("no {what} file"),
                });
            }
        }
        if complete {
            candidates.push(ManifestEntry {
                id: id.clone(),
                rgb: rgb[id].clone(),
                depth: depth[id].clone(),
                gt: gt[id].clone(),
            });
        }
    }

    let checked: Vec<std::result::Result<ManifestEntry, ManifestIssue>> = candidates
        .into_par_iter()
        .map(|e| {
            for p in [&e.rgb, &e.depth, &e.gt] {
                if let Err(err) = decode(p) {
                    return Err(ManifestIssue {
                        id: e.id.clone(),
                        kind: IssueKind::Unreadable,
                        detail: err.to_string(),
                    });
                }
            }
            Ok(e)
        })
        .collect();
    let mut entries = Vec::new();
    for c in checked {
        match c {
            Ok(e) => entries.push(e),
            Err(i) => issues.push(i),
        }
    }
    for issue in &issues {
        log::warn!("{}: {:?} ({})", issue.id, issue.kind, issue.detail);
    }
    if entries.is_empty() {
        return Err(Error::NoSamples(root.to_path_buf()));
    }
    let name = root
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or("dataset")
        .to_string();
    Ok((
        DatasetManifest {
            name,
            split: Split::Train,
            invert_depth: false,
            entries,
        },
        issues,
    ))
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.id.as_str()).collect()
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.entries {
            let line = ManifestLine {
                dataset: self.name.clone(),
                split: self.split,
                invert_depth: self.invert_depth,
                entry: e.clone(),
            };
            out.push_str(&serde_json::to_string(&line)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        crate::config::write_atomic(path, self.to_jsonl()?.as_bytes())
    }

    /// Reads an exported manifest. Dataset-level fields come from the first line.
    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut manifest: Option<DatasetManifest> = None;
        for line in std::io::BufReader::new(file).lines() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: ManifestLine = serde_json::from_str(&line)?;
            let m = manifest.get_or_insert_with(|| DatasetManifest {
                name: rec.dataset.clone(),
                split: rec.split,
                invert_depth: rec.invert_depth,
                entries: Vec::new(),
            });
            if m.entries.iter().any(|e| e.id == rec.entry.id) {
                return Err(Error::InvalidConfig(format!("duplicate id {} in {}", rec.entry.id, path.display())));
            }
            m.entries.push(rec.entry);
        }
        manifest.ok_or_else(|| Error::NoSamples(path.to_path_buf()))
    }

    /// Deterministic partition: `round(len * test_fraction)` entries, chosen
    /// by a seeded shuffle, go to the test side. Both sides keep manifest order.
    pub fn split(&self, test_fraction: f64, seed: u64) -> Result<(DatasetManifest, DatasetManifest)> {
        if !(0.0..=1.0).contains(&test_fraction) {
            return Err(Error::InvalidConfig(format!("test fraction {test_fraction} outside [0, 1]")));
        }
        let n_test = (self.len() as f64 * test_fraction).round() as usize;
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut is_test = vec![false; self.len()];
        for &i in &idx[..n_test] {
            is_test[i] = true;
        }
        let pick = |want: bool, split: Split| DatasetManifest {
            name: self.name.clone(),
            split,
            invert_depth: self.invert_depth,
            entries: self
                .entries
                .iter()
                .zip(&is_test)
                .filter(|(_, &t)| t == want)
                .map(|(e, _)| e.clone())
                .collect(),
        };
        Ok((pick(false, Split::Train), pick(true, Split::Test)))
    }
}

/// One preprocessed sample. Arrays are channel-first to match the network
/// input layout: `rgb` is `(3, H, W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbdSample {
    pub id: String,
    pub rgb: Array3<f32>,
    pub depth: Array2<f32>,
    /// Values are exactly 0 or 1.
    pub gt: Array2<f32>,
    /// `(height, width)` of the source RGB image.
    pub original_size: (usize, usize),
    /// Set when the raw depth map was constant and replaced by 0.5.
    pub depth_flat: bool,
}

fn plane_of(w: u32, h: u32, data: Vec<f32>) -> Array2<f32> {
    Array2::from_shape_vec((h as usize, w as usize), data).expect("decoded buffer matches its dimensions")
}

/// Resizes and normalises raw images to `target = (height, width)`.
pub fn preprocess(
    id: &str,
    raw_rgb: &DynamicImage,
    raw_depth: &DynamicImage,
    raw_gt: &DynamicImage,
    target: (usize, usize),
    invert_depth: bool,
) -> Result<RgbdSample> {
    let (th, tw) = target;
    if th == 0 || tw == 0 {
        return Err(Error::Shape(format!("target size {target:?} is empty")));
    }
    for (img, what) in [(raw_rgb, "rgb"), (raw_depth, "depth"), (raw_gt, "ground truth")] {
        if img.width() == 0 || img.height() == 0 {
            return Err(Error::Shape(format!("{id}: {what} image is empty")));
        }
    }

    let rgb32 = raw_rgb.to_rgb32f();
    let (w, h) = rgb32.dimensions();
    let interleaved = plane_of(w * 3, h, rgb32.into_raw());
    let mut rgb = Array3::<f32>::zeros((3, th, tw));
    for c in 0..3 {
        let plane = interleaved.slice(ndarray::s![.., c..;3]);
        let resized = resize_plane(plane, th, tw);
        rgb.index_axis_mut(Axis(0), c)
            .assign(&resized.mapv(|v| v.clamp(0.0, 1.0)));
    }

    let d = raw_depth.to_luma32f();
    let (dw, dh) = d.dimensions();
    let mut depth = plane_of(dw, dh, d.into_raw());
    let (lo, hi) = depth.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let depth_flat = hi - lo <= 0.0;
    let depth = if depth_flat {
        log::warn!("{id}: constant depth map replaced by 0.5");
        Array2::from_elem((th, tw), 0.5)
    } else {
        let range = hi - lo;
        depth.mapv_inplace(|v| (v - lo) / range);
        if invert_depth {
            depth.mapv_inplace(|v| 1.0 - v);
        }
        resize_plane(depth.view(), th, tw).mapv(|v| v.clamp(0.0, 1.0))
    };

    let g = raw_gt.to_luma32f();
    let (gw, gh) = g.dimensions();
    let gt = resize_plane(plane_of(gw, gh, g.into_raw()).view(), th, tw).mapv(|v| if v >= 0.5 { 1.0 } else { 0.0 });

    Ok(RgbdSample {
        id: id.to_string(),
        rgb,
        depth,
        gt,
        original_size: (h as usize, w as usize),
        depth_flat,
    })
}

pub fn load_sample(entry: &ManifestEntry, target: (usize, usize), invert_depth: bool) -> Result<RgbdSample> {
    preprocess(
        &entry.id,
        &decode(&entry.rgb)?,
        &decode(&entry.depth)?,
        &decode(&entry.gt)?,
        target,
        invert_depth,
    )
}

/// Visit order for one epoch: identity when `shuffle` is off, otherwise a
/// permutation that depends only on `(seed, epoch)`.
pub fn epoch_order(len: usize, seed: u64, epoch: usize, shuffle: bool) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    if shuffle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
    }
    order
}

#[derive(Debug, Clone)]
pub struct SampleBatch {
    pub samples: Vec<RgbdSample>,
}

impl SampleBatch {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn ids(&self) -> Vec<&str> {
        self.samples.iter().map(|s| s.id.as_str()).collect()
    }

    /// `(rgb [B,3,H,W], depth [B,1,H,W], gt [B,1,H,W])`.
    pub fn to_tensors(&self, device: &Device) -> Result<(Tensor, Tensor, Tensor)> {
        let first = self
            .samples
            .first()
            .ok_or_else(|| Error::Shape("empty batch".into()))?;
        let (h, w) = first.gt.dim();
        let b = self.samples.len();
        let mut rgb: Vec<f32> = Vec::with_capacity(b * 3 * h * w);
        let mut depth: Vec<f32> = Vec::with_capacity(b * h * w);
        let mut gt: Vec<f32> = Vec::with_capacity(b * h * w);
        for s in &self.samples {
            if s.gt.dim() != (h, w) || s.depth.dim() != (h, w) || s.rgb.dim() != (3, h, w) {
                return Err(Error::Shape(format!("sample {} does not match batch size {h}x{w}", s.id)));
            }
            rgb.extend(s.rgb.iter());
            depth.extend(s.depth.iter());
            gt.extend(s.gt.iter());
        }
        Ok((
            Tensor::from_vec(rgb, (b, 3, h, w), device)?,
            Tensor::from_vec(depth, (b, 1, h, w), device)?,
            Tensor::from_vec(gt, (b, 1, h, w), device)?,
        ))
    }
}

/// Epoch-wise batching over a manifest. Samples are decoded in parallel,
/// or once up front after [`Batcher::preload`].
#[derive(Debug, Clone)]
pub struct Batcher {
    manifest: DatasetManifest,
    batch_size: usize,
    seed: u64,
    shuffle: bool,
    target: (usize, usize),
    cache: Option<Vec<RgbdSample>>,
}

pub fn batch_iterator(
    manifest: DatasetManifest,
    batch_size: usize,
    seed: u64,
    shuffle: bool,
    target: (usize, usize),
) -> Result<Batcher> {
    if batch_size == 0 {
        return Err(Error::InvalidConfig("batch size must be at least 1".into()));
    }
    if manifest.is_empty() {
        return Err(Error::NoSamples(PathBuf::from(&manifest.name)));
    }
    if batch_size > manifest.len() {
        log::warn!(
            "batch size {batch_size} exceeds dataset size {}; each epoch is a single batch",
            manifest.len()
        );
    }
    Ok(Batcher {
        manifest,
        batch_size,
        seed,
        shuffle,
        target,
        cache: None,
    })
}

impl Batcher {
    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.manifest.len().div_ceil(self.batch_size)
    }

    /// Decodes every sample once and serves later batches from memory.
    pub fn preload(mut self) -> Result<Self> {
        let invert = self.manifest.invert_depth;
        let target = self.target;
        let samples = self
            .manifest
            .entries
            .par_iter()
            .map(|e| load_sample(e, target, invert))
            .collect::<Result<Vec<_>>>()?;
        self.cache = Some(samples);
        Ok(self)
    }

    /// Index groups for `epoch`; the last group keeps the remainder.
    pub fn plan(&self, epoch: usize) -> Vec<Vec<usize>> {
        epoch_order(self.manifest.len(), self.seed, epoch, self.shuffle)
            .chunks(self.batch_size)
            .map(<[usize]>::to_vec)
            .collect()
    }

    pub fn load(&self, indices: &[usize]) -> Result<SampleBatch> {
        let samples = match &self.cache {
            Some(c) => indices.iter().map(|&i| c[i].clone()).collect(),
            None => indices
                .par_iter()
                .map(|&i| load_sample(&self.manifest.entries[i], self.target, self.manifest.invert_depth))
                .collect::<Result<Vec<_>>>()?,
        };
        Ok(SampleBatch { samples })
    }

    pub fn epoch(&self, epoch: usize) -> impl Iterator<Item = Result<SampleBatch>> + '_ {
        self.plan(epoch).into_iter().map(move |idx| self.load(&idx))
    }
}

/// Writes an 8-bit grayscale PNG atomically.
pub(crate) fn write_gray_png(path: &Path, map: &Array2<u8>) -> Result<()> {
    let (h, w) = map.dim();
    let img = image::GrayImage::from_raw(w as u32, h as u32, map.iter().copied().collect())
        .expect("buffer matches dimensions");
    let mut bytes = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
        .map_err(|e| Error::image(path, e))?;
    crate::config::write_atomic(path, &bytes)
}
