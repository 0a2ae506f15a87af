use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::raw::RawDir;
use super::{io_err, read_json, sha256_file, sha256_hex, write_json, Manifest, PipelineConfig, PipelineError};
use crate::encoder::{write_png, FlowImage};
use crate::eval::WalkForwardNote;
use crate::export::{read_tensor, TensorWriter};
use crate::features::{read_features_csv, FeatureCsvWriter, FeatureManifest};
use crate::labeler::{
    audit_labels, build_dataset, split_time_ordered, BuildOptions, DatasetSplit, RVLabel, Sample, Standardizer,
};
use crate::models::{Dims, ModelData};

/// Day id and its per-second `(ts_s, vwap)` series.
pub type DayPrices = (String, Vec<(i64, f64)>);

pub const DATASET_KIND: &str = "dataset";
pub const DATASET_FILES: [&str; 6] =
    ["images.fimg", "features.csv", "features.json", "samples.csv", "prices.csv", "splits.json"];
const IMAGES: &str = "images.fimg";
const FEATURES: &str = "features.csv";
const FEATURES_JSON: &str = "features.json";
const SAMPLES: &str = "samples.csv";
const PRICES: &str = "prices.csv";
const SPLITS: &str = "splits.json";

/// One row of `samples.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRow {
    pub index: usize,
    pub day_id: String,
    pub window_start_s: i64,
    pub horizon_s: i64,
    pub rv: f64,
    pub naive_rv: f64,
}

impl SampleRow {
    pub fn label(&self) -> RVLabel {
        RVLabel { window_start_s: self.window_start_s, horizon_s: self.horizon_s, rv: self.rv, naive_rv: self.naive_rv }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PriceRow {
    day_id: String,
    ts_s: i64,
    vwap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SplitFile {
    train_split_hash: String,
    split: DatasetSplit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct DatasetDetails {
    samples: usize,
    days: Vec<(String, usize)>,
    image_shape: Option<[usize; 3]>,
    feature_dim: usize,
    catalog_version: String,
    window_s: i64,
    horizon_s: i64,
    split_sizes: (usize, usize, usize),
    train_split_hash: String,
    walk_forward: WalkForwardNote,
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> PipelineError + '_ {
    move |e| PipelineError::BadFile { path: path.to_path_buf(), reason: e.to_string() }
}

fn create(path: &Path) -> Result<BufWriter<File>, PipelineError> {
    Ok(BufWriter::new(File::create(path).map_err(io_err(path))?))
}

fn write_png_file(dir: &Path, index: usize, image: &FlowImage) -> Result<(), PipelineError> {
    let path = dir.join(format!("{index:06}.png"));
    write_png(image, create(&path)?).map_err(|e| PipelineError::BadFile { path, reason: e.to_string() })
}

fn total_windows(raw: &RawDir, config: &PipelineConfig) -> Result<usize, PipelineError> {
    let plan = config.encoding.walk_forward(config.horizon_s);
    let mut total = 0;
    for d in &raw.days {
        total += plan.count(d.len_s)?;
    }
    Ok(total)
}

/// Builds the full sample store in `out`: images, features, labels,
/// per-second prices, the chronological split and the manifest.
pub fn build_dataset_dir(
    raw: &RawDir,
    out: &Path,
    config: &PipelineConfig,
    png_dir: Option<&Path>,
) -> Result<Manifest, PipelineError> {
    config.validate()?;
    let catalog = config.catalog()?;
    let params = &config.encoding;
    let window_s = params.window_s() as i64;
    let total = total_windows(raw, config)?;
    let mut images = if config.images {
        Some(TensorWriter::create(out.join(IMAGES), &[total as u64, 3, params.m as u64, params.n as u64])?)
    } else {
        None
    };
    let fpath = out.join(FEATURES);
    let mut features = FeatureCsvWriter::new(create(&fpath)?, &catalog)?;
    let spath = out.join(SAMPLES);
    let mut samples_csv = csv::Writer::from_writer(create(&spath)?);
    let ppath = out.join(PRICES);
    let mut prices_csv = csv::Writer::from_writer(create(&ppath)?);
    let opts = BuildOptions { parallel: true, encode_images: config.images || png_dir.is_some() };

    let mut samples: Vec<Sample> = Vec::with_capacity(total);
    let mut per_day = Vec::with_capacity(raw.days.len());
    for raw_day in &raw.days {
        let day = raw.load(raw_day)?;
        let mut labels = Vec::new();
        let n = build_dataset(&day, params, &catalog, config.horizon_s, opts, |s| -> Result<(), PipelineError> {
            let index = samples.len();
            if let Some(img) = &s.image {
                if let Some(w) = images.as_mut() {
                    w.write_values(&img.tensor())?;
                }
                if let Some(dir) = png_dir {
                    write_png_file(dir, index, img)?;
                }
            }
            features.write(&s.features)?;
            samples_csv
                .serialize(SampleRow {
                    index,
                    day_id: day.id.clone(),
                    window_start_s: s.label.window_start_s,
                    horizon_s: s.label.horizon_s,
                    rv: s.label.rv,
                    naive_rv: s.label.naive_rv,
                })
                .map_err(csv_err(&spath))?;
            labels.push(s.label);
            samples.push(Sample { index, day_id: day.id.clone(), label: s.label });
            Ok(())
        })?;
        audit_labels(&day, &labels, window_s)?;
        for r in &day.records {
            prices_csv
                .serialize(PriceRow { day_id: day.id.clone(), ts_s: r.ts_s, vwap: r.vwap })
                .map_err(csv_err(&ppath))?;
        }
        per_day.push((day.id.clone(), n));
        log::info!("day {}: {n} samples", day.id);
    }
    if let Some(w) = images {
        w.finish()?;
    }
    features.finish()?.into_inner().map_err(|e| io_err(&fpath)(e.into_error()))?.sync_all().map_err(io_err(&fpath))?;
    samples_csv.flush().map_err(io_err(&spath))?;
    prices_csv.flush().map_err(io_err(&ppath))?;
    drop((samples_csv, prices_csv));
    write_json(&out.join(FEATURES_JSON), &FeatureManifest::for_catalog(&catalog))?;

    let split = split_time_ordered(&samples)?;
    let train_split_hash =
        sha256_hex(format!("{}:{}:{:?}", config.hash(), sha256_file(&spath)?, split.train).as_bytes());
    write_json(&out.join(SPLITS), &SplitFile { train_split_hash: train_split_hash.clone(), split: split.clone() })?;

    let mut manifest = Manifest::new(DATASET_KIND, &config.hash());
    manifest.inputs.insert("raw".into(), Manifest::file_hash(&raw.path)?);
    let mut names: Vec<String> = DATASET_FILES.iter().map(|s| s.to_string()).collect();
    if !config.images {
        names.retain(|n| n != IMAGES);
    }
    manifest.record_outputs(out, &names)?;
    let details = DatasetDetails {
        samples: samples.len(),
        days: per_day,
        image_shape: config.images.then_some([3, params.m, params.n]),
        feature_dim: catalog.len(),
        catalog_version: catalog.version.clone(),
        window_s,
        horizon_s: config.horizon_s,
        split_sizes: split.sizes(),
        train_split_hash,
        walk_forward: WalkForwardNote::full_day(&params.walk_forward(config.horizon_s)),
    };
    manifest.details = serde_json::to_value(&details).map_err(|e| PipelineError::Invariant(e.to_string()))?;
    manifest.write(out)?;
    Ok(manifest)
}

/// Writes only the image tensor of every walk-forward window.
pub fn encode_dir(
    raw: &RawDir,
    out: &Path,
    config: &PipelineConfig,
    png_dir: Option<&Path>,
) -> Result<Manifest, PipelineError> {
    config.validate()?;
    let params = &config.encoding;
    let total = total_windows(raw, config)?;
    let mut writer = TensorWriter::create(out.join(IMAGES), &[total as u64, 3, params.m as u64, params.n as u64])?;
    let mut index = 0usize;
    for raw_day in &raw.days {
        let day = raw.load(raw_day)?;
        crate::window::walk_windows(
            &day,
            &params.walk_forward(config.horizon_s),
            true,
            |w| crate::encoder::encode_window(w, params).map_err(PipelineError::from),
            |img| {
                writer.write_values(&img.tensor())?;
                if let Some(dir) = png_dir {
                    write_png_file(dir, index, &img)?;
                }
                index += 1;
                Ok(())
            },
        )?;
    }
    writer.finish()?;
    let mut manifest = Manifest::new("images", &config.hash());
    manifest.inputs.insert("raw".into(), Manifest::file_hash(&raw.path)?);
    manifest.record_outputs(out, &[IMAGES.to_string()])?;
    manifest.details = serde_json::json!({ "samples": total, "image_shape": [3, params.m, params.n] });
    manifest.write(out)?;
    Ok(manifest)
}

/// Writes only the feature table of every walk-forward window.
pub fn featurize_dir(raw: &RawDir, out: &Path, config: &PipelineConfig) -> Result<Manifest, PipelineError> {
    config.validate()?;
    let catalog = config.catalog()?;
    let fpath = out.join(FEATURES);
    let mut writer = FeatureCsvWriter::new(create(&fpath)?, &catalog)?;
    let mut total = 0usize;
    for raw_day in &raw.days {
        let day = raw.load(raw_day)?;
        total += crate::window::walk_windows(
            &day,
            &config.encoding.walk_forward(config.horizon_s),
            true,
            |w| crate::features::compute_features(w, &catalog).map_err(PipelineError::from),
            |v| Ok(writer.write(&v)?),
        )?;
    }
    writer.finish()?.into_inner().map_err(|e| io_err(&fpath)(e.into_error()))?;
    write_json(&out.join(FEATURES_JSON), &FeatureManifest::for_catalog(&catalog))?;
    let mut manifest = Manifest::new("features", &config.hash());
    manifest.inputs.insert("raw".into(), Manifest::file_hash(&raw.path)?);
    manifest.record_outputs(out, &[FEATURES.to_string(), FEATURES_JSON.to_string()])?;
    manifest.details =
        serde_json::json!({ "samples": total, "feature_dim": catalog.len(), "catalog_version": catalog.version });
    manifest.write(out)?;
    Ok(manifest)
}

/// A sample store opened for training and scoring.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub path: PathBuf,
    pub manifest: Manifest,
    pub samples: Vec<SampleRow>,
    pub split: DatasetSplit,
    pub train_split_hash: String,
    pub image_dims: Option<Dims>,
    pub catalog_version: String,
    pub feature_dim: usize,
}

impl Dataset {
    pub fn open(path: &Path) -> Result<Self, PipelineError> {
        let manifest = Manifest::read(path)?;
        let bad = |reason: String| PipelineError::BadFile { path: path.join(super::MANIFEST), reason };
        if manifest.kind != DATASET_KIND {
            return Err(bad(format!("expected a {DATASET_KIND} manifest, found {}", manifest.kind)));
        }
        let details: DatasetDetails =
            serde_json::from_value(manifest.details.clone()).map_err(|e| bad(e.to_string()))?;
        let spath = path.join(SAMPLES);
        let mut rd = csv::Reader::from_path(&spath).map_err(csv_err(&spath))?;
        let samples: Vec<SampleRow> = rd.deserialize().collect::<Result<_, _>>().map_err(csv_err(&spath))?;
        let split: SplitFile = read_json(&path.join(SPLITS))?;
        if samples.len() != details.samples || split.train_split_hash != details.train_split_hash {
            return Err(bad("samples or splits do not match the manifest".into()));
        }
        Ok(Self {
            path: path.to_path_buf(),
            image_dims: details.image_shape.map(|[c, h, w]| Dims { c, h, w }),
            catalog_version: details.catalog_version,
            feature_dim: details.feature_dim,
            manifest,
            samples,
            split: split.split,
            train_split_hash: split.train_split_hash,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.rv).collect()
    }

    pub fn day_ids(&self, idx: &[usize]) -> Vec<String> {
        idx.iter().map(|&i| self.samples[i].day_id.clone()).collect()
    }

    /// Raw feature rows, `[n, feature_dim]`.
    pub fn features(&self) -> Result<Vec<f64>, PipelineError> {
        let fpath = self.path.join(FEATURES);
        let rows = read_features_csv(File::open(&fpath).map_err(io_err(&fpath))?, &self.catalog_version)?;
        if rows.len() != self.len() {
            return Err(PipelineError::BadFile {
                path: fpath,
                reason: format!("{} rows for {} samples", rows.len(), self.len()),
            });
        }
        Ok(rows.into_iter().flat_map(|r| r.values).collect())
    }

    /// Fits the feature standardizer on the training rows.
    pub fn fit_standardizer(&self, features: &[f64]) -> Standardizer {
        let f = self.feature_dim;
        Standardizer::fit(self.split.train.iter().map(|&i| &features[i * f..(i + 1) * f]))
    }

    pub fn images(&self) -> Result<(Dims, Vec<f32>), PipelineError> {
        let dims = self.image_dims.ok_or_else(|| PipelineError::Config("dataset was built without images".into()))?;
        let (shape, values) = read_tensor(self.path.join(IMAGES))?;
        if shape != [self.len() as u64, dims.c as u64, dims.h as u64, dims.w as u64] {
            return Err(PipelineError::BadFile {
                path: self.path.join(IMAGES),
                reason: format!("unexpected shape {shape:?}"),
            });
        }
        Ok((dims, values))
    }

    /// In-memory model inputs; features are standardized when a
    /// standardizer is given.
    pub fn model_data(&self, images: bool, standardizer: Option<&Standardizer>) -> Result<ModelData, PipelineError> {
        let mut data = ModelData { labels: self.labels(), ..Default::default() };
        if images {
            let (dims, values) = self.images()?;
            data.image_dims = Some(dims);
            data.images = values;
        }
        if let Some(st) = standardizer {
            let f = self.feature_dim;
            data.feat_dim = f;
            data.features = self.features()?.chunks(f).flat_map(|row| st.apply(row)).collect();
        }
        Ok(data)
    }

    /// Per-day vwap series in time order.
    pub fn prices(&self) -> Result<Vec<DayPrices>, PipelineError> {
        let ppath = self.path.join(PRICES);
        let mut rd = csv::Reader::from_path(&ppath).map_err(csv_err(&ppath))?;
        let mut out: Vec<DayPrices> = Vec::new();
        for row in rd.deserialize::<PriceRow>() {
            let row = row.map_err(csv_err(&ppath))?;
            match out.last_mut() {
                Some((id, v)) if *id == row.day_id => v.push((row.ts_s, row.vwap)),
                _ => out.push((row.day_id, vec![(row.ts_s, row.vwap)])),
            }
        }
        Ok(out)
    }

    pub fn window_s(&self) -> i64 {
        self.manifest.details["window_s"].as_i64().unwrap_or(0)
    }

    pub fn horizon_s(&self) -> i64 {
        self.manifest.details["horizon_s"].as_i64().unwrap_or(0)
    }
}

/// Writes PNGs of the stored images `range` into `dir`, mapping each
/// channel value in [0, 1] to 8 bits.
pub fn dump_pngs(ds: &Dataset, dir: &Path, range: std::ops::Range<usize>) -> Result<usize, PipelineError> {
    let (dims, values) = ds.images()?;
    let plane = dims.h * dims.w;
    let mut written = 0;
    for i in range.start..range.end.min(ds.len()) {
        let img = &values[i * dims.len()..(i + 1) * dims.len()];
        let to_u8 = |c: usize| -> Vec<u8> {
            img[c * plane..(c + 1) * plane].iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
        };
        let image = FlowImage {
            window_start_s: ds.samples[i].window_start_s,
            v0: 0.0,
            m: dims.h,
            n: dims.w,
            red: Vec::new(),
            green: Vec::new(),
            blue: Vec::new(),
            red_clip: None,
            green_clip: None,
            norm_red: to_u8(0),
            norm_green: to_u8(1),
            norm_blue: to_u8(2),
        };
        write_png_file(dir, i, &image)?;
        written += 1;
    }
    Ok(written)
}
