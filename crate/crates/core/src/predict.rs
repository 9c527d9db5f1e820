//! Inference: final saliency maps written as 8-bit PNGs at the source resolution.

use std::path::{Path, PathBuf};

use ndarray::{Array2, Axis};

use crate::config::ModelConfig;
use crate::data::{batch_iterator, write_gray_png, DatasetManifest, SampleBatch};
use crate::error::{Error, Result};
use crate::model::Msirn;
use crate::resize::resize_plane;

/// Batch size used for inference.
pub const PREDICT_BATCH: usize = 4;

/// `round(s * 255)` per pixel.
pub fn quantize(map: &Array2<f32>) -> Array2<u8> {
    map.mapv(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
}

/// Final maps (eval mode) at network resolution, one per sample.
pub fn predict_batch(model: &Msirn, batch: &SampleBatch) -> Result<Vec<Array2<f32>>> {
    let device = model.params().device().clone();
    let (rgb, depth, _) = batch.to_tensors(&device)?;
    let pred = model.forward(&rgb, &depth, false)?;
    let (b, _, h, w) = pred.final_map().dims4()?;
    let flat: Vec<f32> = pred.final_map().flatten_all()?.to_vec1()?;
    let all = ndarray::Array3::from_shape_vec((b, h, w), flat).map_err(|e| Error::Shape(e.to_string()))?;
    Ok(all.axis_iter(Axis(0)).map(|m| m.to_owned()).collect())
}

/// Writes `<id>.png` for every manifest entry, resized to the entry's
/// original size. Returns the written paths in manifest order.
pub fn predict_manifest(model: &Msirn, manifest: &DatasetManifest, out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let [h, w] = model.config().input_size;
    let batcher = batch_iterator(manifest.clone(), PREDICT_BATCH.min(manifest.len()), 0, false, (h, w))?;
    let mut written = Vec::with_capacity(manifest.len());
    for batch in batcher.epoch(0) {
        let batch = batch?;
        for (sample, map) in batch.samples.iter().zip(predict_batch(model, &batch)?) {
            let (oh, ow) = sample.original_size;
            let full = resize_plane(map.view(), oh, ow);
            let path = out_dir.join(format!("{}.png", sample.id));
            write_gray_png(&path, &quantize(&full))?;
            written.push(path);
        }
    }
    Ok(written)
}

/// Loads the checkpoint in `checkpoint` (failing on a config mismatch with
/// `expected`) and predicts every manifest entry.
pub fn predict(
    checkpoint: &Path,
    expected: Option<&ModelConfig>,
    manifest: &DatasetManifest,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    let model = Msirn::load(checkpoint, expected)?;
    predict_manifest(&model, manifest, out_dir)
}
