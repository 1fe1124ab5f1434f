//! Fits every configured model on every fold of a dataset and scores the
//! canonical vectors against the ground truth.

use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use tgcca::deflation::{cosine_alignment, extract_components};
use tgcca::model::{BlockSet, DesignMatrix, Scheme, SolverOptions};
use tgcca::pipeline::{prepare, Regularization};
use tgcca::solver::StartOutcome;

use crate::dataset::{create_dir, sha256_file, write_json, CpRecord, DatasetManifest, MANIFEST, TOOL_VERSION};
use crate::error::{CliError, Result};
use crate::report::{summarize, write_csv, AlignmentRow, SummaryRow, ALIGNMENT_CSV, SUMMARY_CSV};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub name: String,
    #[serde(default)]
    pub options: SolverOptions,
    #[serde(default)]
    pub regularization: Regularization,
    /// Number of deflation stages.
    #[serde(default = "one")]
    pub components: usize,
}

fn one() -> usize {
    1
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    pub models: Vec<ModelConfig>,
    #[serde(default)]
    pub scheme: Scheme,
    /// Row-major connection matrix; complete design when absent.
    #[serde(default)]
    pub design: Option<Vec<Vec<f64>>>,
    /// Dataset blocks to use, in order; all when absent.
    #[serde(default)]
    pub blocks: Option<Vec<usize>>,
    /// Folds to fit; all when absent.
    #[serde(default)]
    pub folds: Option<Vec<usize>>,
    /// When false every duration is written as 0 so outputs are byte-stable.
    #[serde(default = "yes")]
    pub record_timing: bool,
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.models.is_empty() {
            return Err(CliError::Config("no models configured".into()));
        }
        let mut names: Vec<&str> = self.models.iter().map(|m| m.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != self.models.len() {
            return Err(CliError::Config("model names must be unique".into()));
        }
        for m in &self.models {
            if m.name.is_empty() || m.name.contains(['/', '\\', ',']) {
                return Err(CliError::Config(format!("bad model name {:?}", m.name)));
            }
            if m.components == 0 {
                return Err(CliError::Config(format!("model {}: components must be positive", m.name)));
            }
        }
        Ok(())
    }

    /// Overrides the solver seed of every model.
    pub fn with_seed(mut self, seed: u64) -> Self {
        for m in &mut self.models {
            m.options.seed = seed;
        }
        self
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct StageRecord {
    pub component: usize,
    pub criterion: f64,
    pub iterations: usize,
    pub converged: bool,
    pub best_start: usize,
    pub warnings: usize,
    pub suppressed_warnings: usize,
    pub starts: Vec<StartOutcome>,
    /// Canonical vectors in the preprocessed variables.
    pub vectors: Vec<CpRecord>,
}

#[derive(Debug, Clone, Serialize)]
pub struct FitRecord {
    pub model: String,
    pub fold: usize,
    pub blocks: Vec<String>,
    pub seconds: f64,
    /// `None` for stages skipped once the signal was exhausted.
    pub stages: Vec<Option<StageRecord>>,
}

#[derive(Debug, Clone, Serialize)]
pub struct JobSummary {
    pub model: String,
    pub fold: usize,
    pub path: String,
    pub criteria: Vec<Option<f64>>,
}

#[derive(Debug, Clone, Serialize)]
pub struct DatasetRef {
    pub path: String,
    pub manifest_sha256: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    pub config: FitConfig,
    pub dataset: DatasetRef,
    pub jobs: Vec<JobSummary>,
    pub artifacts: Vec<String>,
    pub total_seconds: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct FitOutput {
    pub rows: Vec<AlignmentRow>,
    pub summary: Vec<SummaryRow>,
    pub records: Vec<FitRecord>,
    pub manifest: RunManifest,
}

fn design_for(config: &FitConfig, l: usize) -> Result<DesignMatrix> {
    match &config.design {
        None => Ok(DesignMatrix::complete(l)?),
        Some(rows) => {
            if rows.len() != l || rows.iter().any(|r| r.len() != l) {
                return Err(CliError::Config(format!("design must be {l}x{l}")));
            }
            Ok(DesignMatrix::new(DMatrix::from_fn(l, l, |i, j| rows[i][j]))?)
        }
    }
}

fn select_blocks(bs: BlockSet, pick: &[usize]) -> Result<BlockSet> {
    let blocks = bs.into_blocks();
    Ok(BlockSet::new(pick.iter().map(|&l| blocks[l].clone()).collect())?)
}

fn fit_job(
    config: &FitConfig,
    model: &ModelConfig,
    data: &BlockSet,
    names: &[String],
    truths: &[tgcca::tensor::CpVector],
    fold: usize,
) -> Result<(FitRecord, Vec<AlignmentRow>)> {
    let clock = Instant::now();
    let design = design_for(config, data.num_blocks())?;
    let prepared = prepare(data, design, config.scheme, &model.options, model.regularization)?;
    let stack = extract_components(&prepared, &model.options, model.components)?;
    let seconds = if config.record_timing { clock.elapsed().as_secs_f64() } else { 0.0 };

    let mut rows = Vec::new();
    let mut stages = Vec::with_capacity(stack.stages.len());
    for (k, stage) in stack.stages.iter().enumerate() {
        let Some(st) = stage else {
            stages.push(None);
            continue;
        };
        let criterion = st.fit.criterion();
        for (l, name) in names.iter().enumerate() {
            let cosine = cosine_alignment(&st.vectors[l].reconstruct(), &truths[l].reconstruct())?;
            rows.push(AlignmentRow {
                model: model.name.clone(),
                block: name.clone(),
                fold,
                component: k + 1,
                cosine,
                criterion,
                seconds,
            });
        }
        stages.push(Some(StageRecord {
            component: k + 1,
            criterion,
            iterations: st.fit.iterations,
            converged: st.fit.converged,
            best_start: st.best_start,
            warnings: st.fit.warnings.len(),
            suppressed_warnings: st.fit.suppressed_warnings,
            starts: st.starts.clone(),
            vectors: st.vectors.iter().map(CpRecord::from_cp).collect(),
        }));
    }
    let record = FitRecord {
        model: model.name.clone(),
        fold,
        blocks: names.to_vec(),
        seconds,
        stages,
    };
    Ok((record, rows))
}

fn fit_path(model: &str, fold: usize) -> PathBuf {
    PathBuf::from("fits").join(model).join(format!("fold{fold:02}.json"))
}

/// Runs every (model, fold) job, in parallel, and writes
/// `alignment.csv`, `summary.csv`, one JSON per job and `manifest.json`.
pub fn cmd_fit(config: &FitConfig, data_dir: &Path, out: &Path) -> Result<FitOutput> {
    let clock = Instant::now();
    config.validate()?;
    let dataset = DatasetManifest::load(data_dir)?;
    let pick: Vec<usize> = config
        .blocks
        .clone()
        .unwrap_or_else(|| (0..dataset.block_dims.len()).collect());
    if pick.len() < 2 || pick.iter().any(|&l| l >= dataset.block_dims.len()) {
        return Err(CliError::Config(format!("block selection {pick:?} is invalid for this dataset")));
    }
    let folds: Vec<usize> = config.folds.clone().unwrap_or_else(|| (0..dataset.num_folds()).collect());
    let names: Vec<String> = pick.iter().map(|&l| dataset.block_names[l].clone()).collect();
    let truths = pick.iter().map(|&l| dataset.truth(l)).collect::<Result<Vec<_>>>()?;

    let data = folds
        .par_iter()
        .map(|&f| dataset.load_fold(data_dir, f).and_then(|bs| select_blocks(bs, &pick)))
        .collect::<Result<Vec<_>>>()?;

    let jobs: Vec<(usize, usize)> = (0..config.models.len())
        .flat_map(|m| (0..folds.len()).map(move |i| (m, i)))
        .collect();
    let results = jobs
        .par_iter()
        .map(|&(m, i)| {
            let model = &config.models[m];
            fit_job(config, model, &data[i], &names, &truths, folds[i]).map_err(|e| {
                log::error!("model {} fold {}: {e}", model.name, folds[i]);
                e
            })
        })
        .collect::<Result<Vec<_>>>()?;

    create_dir(out)?;
    let mut rows = Vec::new();
    let mut records = Vec::new();
    let mut job_summaries = Vec::new();
    let mut artifacts = vec![ALIGNMENT_CSV.to_string(), SUMMARY_CSV.to_string()];
    for (record, job_rows) in results {
        let rel = fit_path(&record.model, record.fold);
        let path = out.join(&rel);
        create_dir(path.parent().expect("fit path has a parent"))?;
        write_json(&path, &record)?;
        let rel = rel.to_string_lossy().into_owned();
        artifacts.push(rel.clone());
        job_summaries.push(JobSummary {
            model: record.model.clone(),
            fold: record.fold,
            path: rel,
            criteria: record.stages.iter().map(|s| s.as_ref().map(|s| s.criterion)).collect(),
        });
        rows.extend(job_rows);
        records.push(record);
    }
    let summary = summarize(&rows);
    write_csv(&out.join(ALIGNMENT_CSV), &rows)?;
    write_csv(&out.join(SUMMARY_CSV), &summary)?;

    let manifest = RunManifest {
        tool_version: TOOL_VERSION.to_string(),
        command: "fit".into(),
        config: config.clone(),
        dataset: DatasetRef {
            path: data_dir.to_string_lossy().into_owned(),
            manifest_sha256: sha256_file(&data_dir.join(MANIFEST))?,
        },
        jobs: job_summaries,
        artifacts,
        total_seconds: config.record_timing.then(|| clock.elapsed().as_secs_f64()),
    };
    write_json(&out.join(MANIFEST), &manifest)?;
    Ok(FitOutput {
        rows,
        summary,
        records,
        manifest,
    })
}
