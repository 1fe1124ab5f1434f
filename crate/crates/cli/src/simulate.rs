use std::path::Path;

use rayon::prelude::*;

use tgcca::simgen::{fold_stream_id, SimModel, SimSpec};

use crate::dataset::{create_dir, save_fold, write_json, CpRecord, DatasetManifest, FoldStream, MANIFEST, TOOL_VERSION};
use crate::error::Result;

/// Draws every fold of `spec` and writes tensors plus `manifest.json` under `out`.
pub fn cmd_simulate(spec: &SimSpec, out: &Path) -> Result<DatasetManifest> {
    let model = SimModel::build(spec)?;
    create_dir(out)?;
    let folds = (0..spec.folds)
        .into_par_iter()
        .map(|f| {
            let bs = model.sample_fold(f)?;
            save_fold(out, f, &bs)
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = DatasetManifest {
        tool_version: TOOL_VERSION.to_string(),
        spec: spec.clone(),
        block_names: spec
            .blocks
            .iter()
            .enumerate()
            .map(|(l, b)| b.name.clone().unwrap_or_else(|| format!("block{l}")))
            .collect(),
        block_dims: model.truths.iter().map(|t| t.dims()).collect(),
        fold_streams: (0..spec.folds)
            .map(|f| FoldStream {
                fold: f,
                seed: spec.seed,
                stream: fold_stream_id(f),
            })
            .collect(),
        folds,
        truths: model.truths.iter().map(CpRecord::from_cp).collect(),
    };
    write_json(&out.join(MANIFEST), &manifest)?;
    log::info!("wrote {} folds of {} blocks to {}", spec.folds, spec.blocks.len(), out.display());
    Ok(manifest)
}
