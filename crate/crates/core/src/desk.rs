//! Desk-scale benchmark on synthetic scenes: generate a dataset, train a
//! small network, then compare raw GRX against GRX on the reconstruction.
//!
//! Dataset layout on disk:
//!
//! ```text
//! <dir>/manifest.json
//! <dir>/train/train000.{json,raw}     anomaly-free training cubes
//! <dir>/val/val.{json,raw,pgm}        validation cube and its truth
//! <dir>/test/scene000.{json,raw,pgm}  test scenes and truths
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cube::{normalize_unit, GroundTruthMap, HsiCube};
use crate::detectors::{enhance_and_detect, grx, prepare_input, ScoreMap};
use crate::error::{Error, Result};
use crate::eval::{scene_metrics, summarize, BenchmarkSummary, SceneMetrics};
use crate::io::{load_cube, load_truth, save_cube, save_truth};
use crate::net::{NetParams, NetworkConfig};
use crate::synth::{synth_scene, SynthParams};
use crate::trainer::{derive_rng, train, TaggedCube, TrainConfig, TrainReport};

/// Dataset shape for [`build_dataset`] and [`write_dataset`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub seed: u64,
    pub train_count: usize,
    pub test_count: usize,
    /// Scene parameters for the validation and test splits. Training scenes
    /// use the same parameters with no anomalies.
    pub scene: SynthParams,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            train_count: 32,
            test_count: 10,
            scene: SynthParams::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Scene {
    pub id: String,
    pub cube: HsiCube<f64>,
    pub truth: GroundTruthMap,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Vec<TaggedCube<f64>>,
    pub val: Scene,
    pub test: Vec<Scene>,
}

const SPLIT_TRAIN: u64 = 1;
const SPLIT_VAL: u64 = 2;
const SPLIT_TEST: u64 = 3;

/// Seed of scene `index` of a split, derived from the dataset seed.
pub fn scene_seed(seed: u64, split: u64, index: usize) -> u64 {
    derive_rng(seed, split, index as u64).random()
}

pub fn train_id(i: usize) -> String {
    format!("train{i:03}")
}

pub fn test_id(i: usize) -> String {
    format!("scene{i:03}")
}

pub fn build_dataset(cfg: &DatasetConfig) -> Result<Dataset> {
    if cfg.train_count == 0 || cfg.test_count == 0 {
        return Err(Error::InvalidParameter("train_count and test_count must be positive".into()));
    }
    if cfg.scene.anomaly_count == 0 {
        return Err(Error::InvalidParameter(
            "validation and test scenes need anomalies (scene.anomaly_count > 0)".into(),
        ));
    }
    let clean = SynthParams {
        anomaly_count: 0,
        ..cfg.scene.clone()
    };
    let train = (0..cfg.train_count)
        .map(|i| {
            let (cube, _) = synth_scene(&clean, scene_seed(cfg.seed, SPLIT_TRAIN, i))?;
            // Each synthetic scene stands for its own acquisition.
            Ok(TaggedCube::new(cube, train_id(i)))
        })
        .collect::<Result<Vec<_>>>()?;
    let scene = |split: u64, i: usize, id: String| -> Result<Scene> {
        let (cube, truth) = synth_scene(&cfg.scene, scene_seed(cfg.seed, split, i))?;
        Ok(Scene { id, cube, truth })
    };
    let val = scene(SPLIT_VAL, 0, "val".into())?;
    let test = (0..cfg.test_count)
        .map(|i| scene(SPLIT_TEST, i, test_id(i)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { train, val, test })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub config: DatasetConfig,
    pub train: Vec<String>,
    pub val: String,
    pub test: Vec<String>,
}

/// Writes the dataset and its manifest under `dir`.
pub fn write_dataset(data: &Dataset, cfg: &DatasetConfig, dir: &Path) -> Result<()> {
    for sub in ["train", "val", "test"] {
        fs::create_dir_all(dir.join(sub))?;
    }
    for t in &data.train {
        save_cube(&t.cube, &dir.join("train").join(&t.tag))?;
    }
    save_cube(&data.val.cube, &dir.join("val").join("val"))?;
    save_truth(&data.val.truth, &dir.join("val").join("val.pgm"))?;
    for s in &data.test {
        save_cube(&s.cube, &dir.join("test").join(&s.id))?;
        save_truth(&s.truth, &dir.join("test").join(format!("{}.pgm", s.id)))?;
    }
    let manifest = DatasetManifest {
        config: cfg.clone(),
        train: data.train.iter().map(|t| format!("train/{}", t.tag)).collect(),
        val: "val/val".into(),
        test: data.test.iter().map(|s| format!("test/{}", s.id)).collect(),
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

fn stem_name(p: &Path) -> String {
    p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Reads a dataset written by [`write_dataset`]. Stored values are `f32`, so
/// the loaded cubes equal the generated ones only up to that rounding.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join("manifest.json");
    if !path.is_file() {
        return Err(Error::MissingFile(path));
    }
    let manifest: DatasetManifest =
        serde_json::from_str(&fs::read_to_string(&path)?).map_err(|e| Error::MalformedHeader {
            path: path.clone(),
            reason: e.to_string(),
        })?;
    let scene = |rel: &str| -> Result<Scene> {
        let p = dir.join(rel);
        let mut pgm = p.clone().into_os_string();
        pgm.push(".pgm");
        Ok(Scene {
            id: stem_name(&p),
            cube: load_cube(&p)?,
            truth: load_truth(&PathBuf::from(pgm))?,
        })
    };
    let train = manifest
        .train
        .iter()
        .map(|rel| {
            let p = dir.join(rel);
            Ok(TaggedCube::new(load_cube(&p)?, stem_name(&p)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        train,
        val: scene(&manifest.val)?,
        test: manifest.test.iter().map(|r| scene(r)).collect::<Result<Vec<_>>>()?,
    })
}

/// Raw GRX on the `[0, 1]` scaled cube, with wall-clock seconds.
pub fn timed_raw_grx(cube: &HsiCube<f64>) -> Result<(ScoreMap<f64>, f64)> {
    let t = Instant::now();
    let map = grx(&normalize_unit(cube).0)?;
    Ok((map, t.elapsed().as_secs_f64()))
}

/// Network enhancement followed by GRX, with wall-clock seconds.
pub fn timed_enhanced_grx(
    cube: &HsiCube<f64>,
    params: &NetParams<f64>,
    cfg: &NetworkConfig,
) -> Result<(ScoreMap<f64>, f64)> {
    let t = Instant::now();
    let map = enhance_and_detect(cube, params, cfg)?;
    Ok((map, t.elapsed().as_secs_f64()))
}

pub fn evaluate_raw(scenes: &[Scene]) -> Result<BenchmarkSummary> {
    let rows = scenes
        .iter()
        .map(|s| {
            let (map, secs) = timed_raw_grx(&s.cube)?;
            scene_metrics(&s.id, &map, &s.truth, secs)
        })
        .collect::<Result<Vec<SceneMetrics>>>()?;
    summarize(&rows)
}

pub fn evaluate_enhanced(scenes: &[Scene], params: &NetParams<f64>, cfg: &NetworkConfig) -> Result<BenchmarkSummary> {
    let rows = scenes
        .iter()
        .map(|s| {
            let (map, secs) = timed_enhanced_grx(&s.cube, params, cfg)?;
            scene_metrics(&s.id, &map, &s.truth, secs)
        })
        .collect::<Result<Vec<SceneMetrics>>>()?;
    summarize(&rows)
}

/// Full benchmark settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeskConfig {
    pub dataset: DatasetConfig,
    pub channels: usize,
    pub zero_residual_start: bool,
    pub train: TrainConfig,
}

impl Default for DeskConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetConfig::default(),
            channels: 16,
            zero_residual_start: true,
            train: TrainConfig {
                max_epochs: 50,
                ..TrainConfig::default()
            },
        }
    }
}

impl DeskConfig {
    pub fn network(&self) -> NetworkConfig {
        let (h, w, b) = self.dataset.scene.size;
        NetworkConfig {
            channels: self.channels,
            zero_residual_start: self.zero_residual_start,
            ..NetworkConfig::for_input(h, w, b)
        }
    }
}

#[derive(Debug, Clone)]
pub struct DeskResult {
    pub net_cfg: NetworkConfig,
    pub params: NetParams<f64>,
    pub report: TrainReport,
    pub train_seconds: f64,
    pub raw: BenchmarkSummary,
    pub enhanced: BenchmarkSummary,
    pub raw_seconds: f64,
    pub enhanced_seconds: f64,
}

/// Trains on `data` and evaluates both pipelines on its test split.
pub fn run_desk(cfg: &DeskConfig, data: &Dataset) -> Result<DeskResult> {
    let net_cfg = cfg.network();
    let t = Instant::now();
    let val = prepare_input(&data.val.cube, &net_cfg)?;
    let (params, report) = train(&data.train, &val, &net_cfg, &cfg.train)?;
    let train_seconds = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let raw = evaluate_raw(&data.test)?;
    let raw_seconds = t.elapsed().as_secs_f64();
    let t = Instant::now();
    let enhanced = evaluate_enhanced(&data.test, &params, &net_cfg)?;
    let enhanced_seconds = t.elapsed().as_secs_f64();
    Ok(DeskResult {
        net_cfg,
        params,
        report,
        train_seconds,
        raw,
        enhanced,
        raw_seconds,
        enhanced_seconds,
    })
}

pub const COMPARISON_HEADER: &str =
    "scene_id,raw_auc,enhanced_auc,raw_asnpr_db,enhanced_asnpr_db,raw_seconds,enhanced_seconds";

/// Raw and enhanced metrics side by side, with a `MEAN` row.
pub fn comparison_csv(raw: &BenchmarkSummary, enhanced: &BenchmarkSummary) -> Result<String> {
    if raw.scenes.len() != enhanced.scenes.len() {
        return Err(Error::InvalidParameter("summaries cover different scene sets".into()));
    }
    let mut out = String::from(COMPARISON_HEADER);
    out.push('\n');
    for (r, e) in raw.scenes.iter().zip(&enhanced.scenes) {
        if r.scene_id != e.scene_id {
            return Err(Error::InvalidParameter(format!(
                "scene order differs: {} vs {}",
                r.scene_id, e.scene_id
            )));
        }
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.scene_id, r.auc, e.auc, r.asnpr_db, e.asnpr_db, r.seconds, e.seconds
        );
    }
    let _ = writeln!(
        out,
        "MEAN,{},{},{},{},{},{}",
        raw.mauc, enhanced.mauc, raw.masnpr_db, enhanced.masnpr_db, raw.mean_seconds, enhanced.mean_seconds
    );
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DatasetConfig {
        DatasetConfig {
            seed: 4,
            train_count: 2,
            test_count: 2,
            scene: SynthParams {
                size: (16, 16, 5),
                anomaly_area_range: (2, 4),
                ..SynthParams::default()
            },
        }
    }

    #[test]
    fn dataset_round_trip() {
        let cfg = small();
        let data = build_dataset(&cfg).unwrap();
        assert!(data.train.iter().all(|t| t.cube.dims() == (16, 16, 5)));
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&data, &cfg, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.test.len(), 2);
        assert_eq!(back.test[1].id, "scene001");
        assert_eq!(back.val.truth, data.val.truth);
        assert_eq!(back.train[0].cube, data.train[0].cube.cast::<f32>().cast::<f64>());
    }

    #[test]
    fn comparison_has_mean_row() {
        let data = build_dataset(&small()).unwrap();
        let raw = evaluate_raw(&data.test).unwrap();
        let csv = comparison_csv(&raw, &raw).unwrap();
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.lines().last().unwrap().starts_with("MEAN,"));
    }
}
