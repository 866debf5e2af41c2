//! Inference with a trained restorer, attention dumps and paired evaluation.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::losses::IdentityNet;
use crate::metrics::{stack, MetricReport};
use crate::model::Restorer;
use crate::tensor::{resize_bilinear, ParamStore, Params, Tape, Tensor};

use super::checkpoint::{self, load_matching};
use super::config::StageConfig;
use super::image_io::{read_image, write_gray_map, write_image};

/// Restorer with every parameter taken from a stage-2 checkpoint.
pub fn load_restorer(cfg: &StageConfig, path: &Path) -> Result<(Restorer, ParamStore)> {
    let restorer = Restorer::new(cfg.model.clone())?;
    let mut store = ParamStore::new();
    restorer.init(&mut store, cfg.seed)?;
    let copied = load_matching(&mut store, &checkpoint::load(path)?)?;
    if copied.len() != store.len() {
        return Err(Error::Checkpoint(format!(
            "{} provides {} of {} restorer tensors",
            path.display(),
            copied.len(),
            store.len()
        )));
    }
    Ok((restorer, store))
}

/// Restored images and both attention tensors `(B, N_h, L, L)`.
#[derive(Clone, Debug)]
pub struct Restored {
    pub images: Tensor,
    pub attention: [Tensor; 2],
}

/// Runs a `(B, H, W, 3)` batch through the restorer without recording
/// gradients.
pub fn restore_batch(restorer: &Restorer, store: &ParamStore, batch: &Tensor) -> Result<Restored> {
    let mut tape = Tape::new();
    let x = tape.constant(batch.clone());
    let out = restorer.forward(&mut tape, Params::frozen(store), x)?;
    Ok(Restored {
        images: tape.value(out.restored).clone(),
        attention: out.attention.map(|a| tape.value(a).clone()),
    })
}

/// Checks an input against the configured size, resizing only on request.
pub fn prepare_input(img: &Tensor, size: usize, resize: bool) -> Result<Tensor> {
    if img.shape() == [size, size, 3] {
        return Ok(img.clone());
    }
    if !resize {
        return Err(Error::invalid(
            "restore",
            format!("input is {:?} but the model expects {size}x{size}x3 (pass --resize)", img.shape()),
        ));
    }
    resize_bilinear(img, size, size)
}

fn unstack(batch: &Tensor) -> Vec<Tensor> {
    let per = batch.numel() / batch.shape()[0];
    batch
        .data()
        .chunks_exact(per)
        .map(|c| Tensor::new(batch.shape()[1..].to_vec(), c.to_vec()).expect("slice of batch"))
        .collect()
}

fn stem(path: &Path) -> String {
    path.file_stem().map_or_else(|| "image".into(), |s| s.to_string_lossy().into_owned())
}

/// Writes `<stem>_mhca<k>_head<h>.ppm` for both blocks and every head: the
/// attention each key position receives, averaged over queries, shown at
/// image resolution.
pub fn dump_attention(dir: &Path, name: &str, attention: &[Tensor; 2], index: usize, image_size: usize) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for (k, att) in attention.iter().enumerate() {
        let [_, heads, lq, lk] = match *att.shape() {
            [b, h, q, k] => [b, h, q, k],
            ref s => return Err(Error::invalid("dump_attention", format!("unexpected weights shape {s:?}"))),
        };
        let side = (lk as f64).sqrt().round() as usize;
        if side * side != lk {
            return Err(Error::invalid("dump_attention", format!("{lk} keys do not form a square map")));
        }
        let scale = (image_size / side).max(1);
        for h in 0..heads {
            let base = (index * heads + h) * lq * lk;
            let block = &att.data()[base..base + lq * lk];
            let received: Vec<f64> = (0..lk).map(|j| (0..lq).map(|i| block[i * lk + j]).sum::<f64>() / lq as f64).collect();
            let big: Vec<f64> = (0..side * scale)
                .flat_map(|y| (0..side * scale).map(move |x| (y / scale) * side + x / scale))
                .map(|j| received[j])
                .collect();
            let path = dir.join(format!("{name}_mhca{}_head{h}.ppm", k + 1));
            write_gray_map(&path, side * scale, side * scale, &big)?;
            written.push(path);
        }
    }
    Ok(written)
}

/// Restores each input file into `out_dir` as `<stem>_restored.ppm`.
pub fn restore_files(
    cfg: &StageConfig,
    checkpoint: &Path,
    inputs: &[PathBuf],
    out_dir: &Path,
    resize: bool,
    attention: bool,
) -> Result<Vec<PathBuf>> {
    let (restorer, store) = load_restorer(cfg, checkpoint)?;
    let size = cfg.model.image_size;
    let mut written = Vec::new();
    for chunk in inputs.chunks(cfg.batch_size.max(1)) {
        let imgs: Vec<Tensor> = chunk.iter().map(|p| read_image(p).and_then(|t| prepare_input(&t, size, resize))).collect::<Result<_>>()?;
        let out = restore_batch(&restorer, &store, &stack(&imgs.iter().collect::<Vec<_>>())?)?;
        for (i, (path, img)) in chunk.iter().zip(unstack(&out.images)).enumerate() {
            let name = stem(path);
            let dst = out_dir.join(format!("{name}_restored.ppm"));
            write_image(&dst, &img)?;
            written.push(dst);
            if attention {
                written.extend(dump_attention(out_dir, &name, &out.attention, i, size)?);
            }
        }
    }
    Ok(written)
}

/// Pairs every `*.ppm`/`*.png` reference with the prediction named either
/// identically or with a `_restored` suffix, sorted by reference name.
pub fn pair_files(pred_dir: &Path, gt_dir: &Path) -> Result<Vec<(String, PathBuf, PathBuf)>> {
    let mut refs: Vec<PathBuf> = std::fs::read_dir(gt_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "ppm" || e == "png"))
        .collect();
    refs.sort();
    let mut pairs = Vec::new();
    for r in refs {
        let name = stem(&r);
        let ext = r.extension().map(|e| e.to_string_lossy().into_owned()).unwrap_or_default();
        let candidates = [pred_dir.join(format!("{name}_restored.{ext}")), pred_dir.join(format!("{name}.{ext}"))];
        let Some(pred) = candidates.into_iter().find(|c| c.exists()) else {
            return Err(Error::invalid("eval", format!("no prediction for {} in {}", r.display(), pred_dir.display())));
        };
        pairs.push((name, pred, r));
    }
    if pairs.is_empty() {
        return Err(Error::invalid("eval", format!("no reference images in {}", gt_dir.display())));
    }
    Ok(pairs)
}

pub fn evaluate_dirs(pred_dir: &Path, gt_dir: &Path) -> Result<MetricReport> {
    let pairs = pair_files(pred_dir, gt_dir)?;
    let names = pairs.iter().map(|p| p.0.clone()).collect();
    let preds: Vec<Tensor> = pairs.iter().map(|p| read_image(&p.1)).collect::<Result<_>>()?;
    let refs: Vec<Tensor> = pairs.iter().map(|p| read_image(&p.2)).collect::<Result<_>>()?;
    MetricReport::compute(names, &preds, &refs, &IdentityNet::new())
}
