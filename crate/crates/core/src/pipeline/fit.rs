use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::dataset::Dataset;
use super::{io_err, write_json, Manifest, PipelineConfig, PipelineError};
use crate::eval::{check_lineage, score_by_day, EvalReport, ModelScore, WalkForwardNote};
use crate::export::write_tensor;
use crate::labeler::{log_returns, Standardizer};
use crate::models::{
    conditional_variances, garch_fit, horizon_forecast, load_checkpoint, naive_predict, predict_all, save_checkpoint,
    train, CheckpointMeta, Cnn, Dims, GarchParams, Mlp, ModelData, ModelKind, Network, ParamStore, LATENT,
};

pub const TRAIN_KIND: &str = "models";
pub const EVAL_KIND: &str = "eval";

/// A checkpoint ready for inference.
pub struct LoadedModel {
    pub meta: CheckpointMeta,
    net: Option<Box<dyn Network>>,
}

impl std::fmt::Debug for LoadedModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LoadedModel").field("meta", &self.meta).finish_non_exhaustive()
    }
}

pub fn load_model(path: &Path) -> Result<LoadedModel, PipelineError> {
    let (store, meta) = load_checkpoint(path)?;
    let dims = meta.image_dims.map(|[c, h, w]| Dims { c, h, w });
    let net: Option<Box<dyn Network>> = match meta.model {
        ModelKind::Naive | ModelKind::Garch => None,
        ModelKind::Mlp => Some(Box::new(Mlp::from_store(store))),
        ModelKind::NaiveCnn | ModelKind::CnnAggr => {
            let dims = dims.ok_or_else(|| PipelineError::BadFile {
                path: path.to_path_buf(),
                reason: "image model without image dimensions".into(),
            })?;
            Some(Box::new(Cnn::from_store(store, dims)))
        }
    };
    Ok(LoadedModel { meta, net })
}

/// Images and raw features loaded once and lent to each model in turn.
#[derive(Default)]
struct Inputs {
    images: Option<(Dims, Vec<f32>)>,
    features: Option<Vec<f64>>,
}

impl Inputs {
    fn load(ds: &Dataset, kinds: impl IntoIterator<Item = ModelKind>) -> Result<Self, PipelineError> {
        let kinds: Vec<ModelKind> = kinds.into_iter().collect();
        let mut out = Inputs::default();
        if kinds.iter().any(|k| k.uses_images()) {
            out.images = Some(ds.images()?);
        }
        if kinds.iter().any(|k| k.uses_features()) {
            out.features = Some(ds.features()?);
        }
        Ok(out)
    }

    /// Moves the images into a [`ModelData`]; [`Inputs::restore`] takes them back.
    fn lend(&mut self, ds: &Dataset, kind: ModelKind, st: Option<&Standardizer>) -> ModelData {
        let mut data = ModelData { labels: ds.labels(), ..Default::default() };
        if kind.uses_images() {
            if let Some((dims, values)) = self.images.as_mut() {
                data.image_dims = Some(*dims);
                data.images = std::mem::take(values);
            }
        }
        if let (true, Some(f), Some(st)) = (kind.uses_features(), &self.features, st) {
            data.feat_dim = ds.feature_dim;
            data.features = f.chunks(ds.feature_dim).flat_map(|row| st.apply(row)).collect();
        }
        data
    }

    fn restore(&mut self, data: ModelData) {
        if let Some((_, values)) = self.images.as_mut() {
            if values.is_empty() && !data.images.is_empty() {
                *values = data.images;
            }
        }
    }
}

/// Training-span log returns: per-second vwap returns of every second up
/// to the end of the last training label, never across day boundaries.
fn train_returns(ds: &Dataset) -> Result<Vec<f64>, PipelineError> {
    let end = ds
        .split
        .train
        .iter()
        .map(|&i| ds.samples[i].window_start_s + ds.window_s() + ds.horizon_s())
        .max()
        .unwrap_or(i64::MIN);
    let mut out = Vec::new();
    for (_, points) in ds.prices()? {
        let span: Vec<(i64, f64)> = points.into_iter().filter(|(ts, _)| *ts < end).collect();
        out.extend(log_returns(&span)?);
    }
    Ok(out)
}

fn sample_variance(r: &[f64]) -> f64 {
    let n = r.len().max(1) as f64;
    let m = r.iter().sum::<f64>() / n;
    r.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n
}

/// GARCH forecasts of the label's realized volatility. The variance
/// recursion runs from the day start through the window end; the label's
/// `h - 1` returns start two steps ahead.
fn garch_predictions(
    ds: &Dataset,
    params: &GarchParams,
    initial: f64,
    idx: &[usize],
) -> Result<Vec<f64>, PipelineError> {
    let prices: BTreeMap<String, Vec<(i64, f64)>> = ds.prices()?.into_iter().collect();
    let mut variances: BTreeMap<&str, (i64, Vec<f64>)> = BTreeMap::new();
    for (id, points) in &prices {
        let r = log_returns(points)?;
        variances.insert(id, (points.first().map_or(0, |p| p.0), conditional_variances(params, &r, initial)));
    }
    let steps = (ds.horizon_s() - 1).max(0) as usize;
    idx.iter()
        .map(|&i| {
            let s = &ds.samples[i];
            let (start, v) = variances
                .get(s.day_id.as_str())
                .ok_or_else(|| PipelineError::Invariant(format!("no prices for day {}", s.day_id)))?;
            let e = (s.window_start_s - start + ds.window_s() - 1) as usize;
            let one_step = *v.get(e).ok_or_else(|| PipelineError::Invariant("window beyond price series".into()))?;
            let two_step = params.omega + params.persistence() * one_step;
            Ok(horizon_forecast(params, two_step, steps))
        })
        .collect()
}

impl LoadedModel {
    fn predict(&self, ds: &Dataset, inputs: &mut Inputs, idx: &[usize]) -> Result<Vec<f64>, PipelineError> {
        match self.meta.model {
            ModelKind::Naive => Ok(idx.iter().map(|&i| naive_predict(&ds.samples[i].label())).collect()),
            ModelKind::Garch => {
                let params = self
                    .meta
                    .garch
                    .ok_or_else(|| PipelineError::Invariant("GARCH checkpoint without parameters".into()))?;
                let initial = self.meta.metrics.get("initial_variance").copied().unwrap_or(params.omega);
                garch_predictions(ds, &params, initial, idx)
            }
            kind => {
                let net = self
                    .net
                    .as_ref()
                    .ok_or_else(|| PipelineError::Invariant("network checkpoint without weights".into()))?;
                let data = inputs.lend(ds, kind, self.meta.standardizer.as_ref());
                if kind.uses_images() && data.image_dims != self.meta.image_dims.map(|[c, h, w]| Dims { c, h, w }) {
                    inputs.restore(data);
                    return Err(PipelineError::Model(crate::models::ModelError::ShapeMismatch {
                        expected: format!("{:?}", self.meta.image_dims),
                        got: format!("{:?}", ds.image_dims),
                    }));
                }
                if kind.uses_features() && data.feat_dim != self.meta.feat_dim {
                    inputs.restore(data);
                    return Err(PipelineError::Model(crate::models::ModelError::ShapeMismatch {
                        expected: format!("{} features", self.meta.feat_dim),
                        got: format!("{} features", ds.feature_dim),
                    }));
                }
                let preds = predict_all(net.as_ref(), &data, idx);
                inputs.restore(data);
                Ok(preds)
            }
        }
    }
}

fn meta_for(ds: &Dataset, config: &PipelineConfig, kind: ModelKind) -> CheckpointMeta {
    CheckpointMeta {
        model: kind,
        config_hash: config.hash(),
        catalog_version: ds.catalog_version.clone(),
        train_split_hash: ds.train_split_hash.clone(),
        image_dims: if kind.uses_images() { ds.image_dims.map(|d| [d.c, d.h, d.w]) } else { None },
        feat_dim: if kind.uses_features() { ds.feature_dim } else { 0 },
        standardizer: None,
        garch: None,
        metrics: BTreeMap::new(),
        train_report: None,
    }
}

pub fn checkpoint_path(dir: &Path, kind: ModelKind) -> PathBuf {
    dir.join(format!("{kind}.ckpt"))
}

/// Trains each requested model on the dataset's training split, using the
/// validation split for early stopping, and writes `<model>.ckpt` with its
/// sidecar plus `<model>.predictions.csv` over every sample into `out`.
/// CNN-Aggr starts from the trained Naive-CNN with zero feature weights.
pub fn train_models(
    ds: &Dataset,
    out: &Path,
    kinds: &[ModelKind],
    config: &PipelineConfig,
) -> Result<Vec<PathBuf>, PipelineError> {
    config.validate()?;
    let mut needed: Vec<ModelKind> = kinds.to_vec();
    if needed.contains(&ModelKind::CnnAggr) && !needed.contains(&ModelKind::NaiveCnn) {
        needed.push(ModelKind::NaiveCnn);
    }
    needed.sort();
    needed.dedup();
    let mut inputs = Inputs::load(ds, needed.iter().copied())?;
    let standardizer = inputs.features.as_ref().map(|f| ds.fit_standardizer(f));
    let target_scale = ModelData { labels: ds.labels(), ..Default::default() }.target_scale(&ds.split.train);
    let (tr, va) = (&ds.split.train, &ds.split.validation);
    let seed = config.train.seed;
    let mut naive_cnn: Option<Cnn> = None;
    let mut written = Vec::new();
    let all: Vec<usize> = (0..ds.len()).collect();

    for kind in needed {
        let mut meta = meta_for(ds, config, kind);
        let store: ParamStore = match kind {
            ModelKind::Naive => ParamStore::default(),
            ModelKind::Garch => {
                let returns = train_returns(ds)?;
                let fit = garch_fit(&returns, None)?;
                meta.garch = Some(fit.params);
                meta.metrics.insert("log_likelihood".into(), fit.log_likelihood);
                meta.metrics.insert("initial_variance".into(), sample_variance(&returns));
                meta.metrics.insert("iterations".into(), fit.iterations as f64);
                ParamStore::default()
            }
            ModelKind::Mlp => {
                let data = inputs.lend(ds, kind, standardizer.as_ref());
                let mut net = Mlp::new(data.feat_dim, seed, target_scale);
                let report = train(&mut net, &data, tr, va, &config.train);
                inputs.restore(data);
                meta.train_report = Some(report?);
                meta.standardizer = standardizer.clone();
                net.store
            }
            ModelKind::NaiveCnn => {
                let data = inputs.lend(ds, kind, None);
                let mut net = Cnn::new(data.image_dims.expect("image model has images"), 0, seed, target_scale);
                let report = train(&mut net, &data, tr, va, &config.train);
                inputs.restore(data);
                meta.train_report = Some(report?);
                naive_cnn = Some(net.clone());
                net.store
            }
            ModelKind::CnnAggr => {
                let data = inputs.lend(ds, kind, standardizer.as_ref());
                let base = naive_cnn.as_ref().expect("Naive-CNN is trained first");
                let mut net = Cnn::aggr_from(base, data.feat_dim);
                let report = train(&mut net, &data, tr, va, &config.train);
                inputs.restore(data);
                meta.train_report = Some(report?);
                meta.standardizer = standardizer.clone();
                net.store
            }
        };
        if let Some(r) = &meta.train_report {
            meta.metrics.insert("best_val_rmspe".into(), r.best_val_rmspe);
        }
        if !kinds.contains(&kind) {
            continue;
        }
        let path = checkpoint_path(out, kind);
        save_checkpoint(&path, &store, &meta)?;
        let model = load_model(&path)?;
        let preds = model.predict(ds, &mut inputs, &all)?;
        write_predictions(&out.join(format!("{kind}.predictions.csv")), ds, &all, &preds)?;
        log::info!("trained {kind}");
        written.push(path);
    }
    let mut manifest = Manifest::new(TRAIN_KIND, &config.hash());
    manifest.inputs.insert("dataset".into(), Manifest::file_hash(&ds.path)?);
    manifest.inputs.insert("models".into(), model_list(kinds));
    let mut names = Vec::new();
    for p in &written {
        let name = p.file_name().expect("file name").to_string_lossy().to_string();
        let kind = name.trim_end_matches(".ckpt").to_string();
        names.push(format!("{name}.json"));
        names.push(format!("{kind}.predictions.csv"));
        names.push(name);
    }
    manifest.record_outputs(out, &names)?;
    manifest.details = serde_json::json!({ "models": kinds, "train_split_hash": ds.train_split_hash });
    manifest.write(out)?;
    Ok(written)
}

/// Comma-separated model names, as recorded in training manifests.
pub fn model_list(kinds: &[ModelKind]) -> String {
    kinds.iter().map(|k| k.as_str()).collect::<Vec<_>>().join(",")
}

/// One row of a predictions file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub index: usize,
    pub day_id: String,
    pub window_start_s: i64,
    pub prediction: f64,
    pub target: f64,
}

fn write_predictions(path: &Path, ds: &Dataset, idx: &[usize], preds: &[f64]) -> Result<(), PipelineError> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| PipelineError::BadFile { path: path.to_path_buf(), reason: e.to_string() })?;
    for (&i, &p) in idx.iter().zip(preds) {
        let s = &ds.samples[i];
        w.serialize(PredictionRow {
            index: i,
            day_id: s.day_id.clone(),
            window_start_s: s.window_start_s,
            prediction: p,
            target: s.rv,
        })
        .map_err(|e| PipelineError::BadFile { path: path.to_path_buf(), reason: e.to_string() })?;
    }
    w.flush().map_err(io_err(path))
}

/// Writes predictions of a checkpoint over `idx` (every sample when `None`).
pub fn predict_checkpoint(
    ckpt: &Path,
    ds: &Dataset,
    out: &Path,
    idx: Option<&[usize]>,
) -> Result<usize, PipelineError> {
    let model = load_model(ckpt)?;
    let all: Vec<usize> = (0..ds.len()).collect();
    let idx = idx.unwrap_or(&all);
    let mut inputs = Inputs::load(ds, [model.meta.model])?;
    let preds = model.predict(ds, &mut inputs, idx)?;
    write_predictions(out, ds, idx, &preds)?;
    Ok(idx.len())
}

/// Scores each checkpoint on the validation and test splits. Every
/// checkpoint must come from this dataset's training split.
pub fn evaluate_checkpoints(
    ds: &Dataset,
    ckpts: &[PathBuf],
    config: &PipelineConfig,
) -> Result<EvalReport, PipelineError> {
    let models = ckpts.iter().map(|p| load_model(p)).collect::<Result<Vec<_>, _>>()?;
    for m in &models {
        check_lineage(&m.meta.train_split_hash, &ds.train_split_hash)?;
    }
    let mut inputs = Inputs::load(ds, models.iter().map(|m| m.meta.model))?;
    let val_days = ds.day_ids(&ds.split.validation);
    let test_days = ds.day_ids(&ds.split.test);
    let labels = ds.labels();
    let pick = |idx: &[usize]| -> Vec<f64> { idx.iter().map(|&i| labels[i]).collect() };
    let mut scores = Vec::with_capacity(models.len());
    for m in &models {
        let vp = m.predict(ds, &mut inputs, &ds.split.validation)?;
        let tp = m.predict(ds, &mut inputs, &ds.split.test)?;
        scores.push(ModelScore {
            model: m.meta.model,
            validation: score_by_day(&vp, &pick(&ds.split.validation), &val_days)?,
            test: score_by_day(&tp, &pick(&ds.split.test), &test_days)?,
        });
    }
    let plan =
        crate::window::WalkForward { window_s: ds.window_s(), stride_s: stride_of(ds), horizon_s: ds.horizon_s() };
    Ok(EvalReport {
        config_hash: config.hash(),
        dataset_hash: Manifest::file_hash(&ds.path)?,
        walk_forward: WalkForwardNote::full_day(&plan),
        models: scores,
    })
}

fn stride_of(ds: &Dataset) -> i64 {
    ds.manifest.details["walk_forward"]["stride_s"].as_i64().unwrap_or(1)
}

/// Writes `report.json`, `report.txt` and the manifest into `out`.
pub fn write_report(out: &Path, report: &EvalReport, inputs: BTreeMap<String, String>) -> Result<(), PipelineError> {
    write_json(&out.join("report.json"), report)?;
    let txt = out.join("report.txt");
    std::fs::write(&txt, report.text_table()).map_err(io_err(&txt))?;
    let mut manifest = Manifest::new(EVAL_KIND, &report.config_hash);
    manifest.inputs = inputs;
    manifest.record_outputs(out, &["report.json".to_string(), "report.txt".to_string()])?;
    manifest.write(out)
}

/// Exports evaluation-mode CNN latents of every sample as a `[n, 128]` tensor.
pub fn export_embeddings(ckpt: &Path, ds: &Dataset, out: &Path) -> Result<usize, PipelineError> {
    let (store, meta) = load_checkpoint(ckpt)?;
    if !matches!(meta.model, ModelKind::NaiveCnn | ModelKind::CnnAggr) {
        return Err(PipelineError::Config(format!("{} has no image latent", meta.model)));
    }
    let model = load_model(ckpt)?;
    let mut inputs = Inputs::load(ds, [meta.model])?;
    let data = inputs.lend(ds, meta.model, model.meta.standardizer.as_ref());
    let dims = data.image_dims.ok_or_else(|| PipelineError::Config("dataset was built without images".into()))?;
    let net = Cnn::from_store(store, dims);
    net.check_input(&data)?;
    let idx: Vec<usize> = (0..ds.len()).collect();
    let latent: Vec<f32> = idx.chunks(64).flat_map(|c| net.latent(&data, c)).map(|v| v as f32).collect();
    write_tensor(out, &[ds.len() as u64, LATENT as u64], &latent)?;
    Ok(ds.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncodingParams;
    use crate::pipeline::{build_dataset_dir, synth, SynthSettings};

    fn tiny_config() -> PipelineConfig {
        PipelineConfig {
            seed: 5,
            horizon_s: 20,
            encoding: EncodingParams {
                n: 8,
                m: 8,
                t_unit_s: 5,
                v_unit: 4.0,
                epsilon_s: 20,
                ..EncodingParams::default()
            },
            train: crate::models::TrainConfig { epochs: 2, ..Default::default() },
            synth: SynthSettings { days: 2, duration_s: 600, ..SynthSettings::regime_switching(2, 600) },
            ..PipelineConfig::default()
        }
    }

    #[test]
    fn train_eval_round_trip() {
        let tmp = tempfile::tempdir().unwrap();
        let (raw_dir, ds_dir, m_dir) = (tmp.path().join("raw"), tmp.path().join("ds"), tmp.path().join("m"));
        for d in [&raw_dir, &ds_dir, &m_dir] {
            std::fs::create_dir(d).unwrap();
        }
        let cfg = tiny_config();
        let raw = synth(&raw_dir, &cfg).unwrap();
        build_dataset_dir(&raw, &ds_dir, &cfg, None).unwrap();
        let ds = Dataset::open(&ds_dir).unwrap();
        assert_eq!(ds.len(), 2 * ((600 - 40 - 20) / 20 + 1));
        let ckpts = train_models(&ds, &m_dir, &ModelKind::ALL, &cfg).unwrap();
        assert_eq!(ckpts.len(), 5);
        let report = evaluate_checkpoints(&ds, &ckpts, &cfg).unwrap();
        assert_eq!(report.models.len(), 5);
        for m in &report.models {
            assert!(m.test.rmspe_mean.is_finite() && m.test.rmspe_std >= 0.0, "{m:?}");
        }
        let emb = tmp.path().join("emb.fimg");
        assert_eq!(export_embeddings(&checkpoint_path(&m_dir, ModelKind::CnnAggr), &ds, &emb).unwrap(), ds.len());
        let (shape, _) = crate::export::read_tensor(&emb).unwrap();
        assert_eq!(shape, vec![ds.len() as u64, LATENT as u64]);
    }

    #[test]
    fn garch_forecast_has_no_lookahead() {
        let tmp = tempfile::tempdir().unwrap();
        let (raw_dir, ds_dir) = (tmp.path().join("raw"), tmp.path().join("ds"));
        std::fs::create_dir(&raw_dir).unwrap();
        std::fs::create_dir(&ds_dir).unwrap();
        let cfg = PipelineConfig { images: false, ..tiny_config() };
        let raw = synth(&raw_dir, &cfg).unwrap();
        build_dataset_dir(&raw, &ds_dir, &cfg, None).unwrap();
        let ds = Dataset::open(&ds_dir).unwrap();
        let p = GarchParams { omega: 1e-9, alpha: 0.1, beta: 0.8 };
        let base = garch_predictions(&ds, &p, 1e-8, &[3]).unwrap();
        let prices = ds.prices().unwrap();
        let s = &ds.samples[3];
        let (_, points) = prices.iter().find(|(id, _)| *id == s.day_id).unwrap();
        let start = points[0].0;
        let end = (s.window_start_s - start + ds.window_s()) as usize;
        let r = log_returns(&points[..end]).unwrap();
        let v = conditional_variances(&p, &r, 1e-8);
        let expect = horizon_forecast(&p, p.omega + p.persistence() * v[end - 1], (ds.horizon_s() - 1) as usize);
        assert_eq!(base[0], expect);
    }
}
