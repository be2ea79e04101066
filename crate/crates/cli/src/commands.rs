use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, ensure, Context, Result};
use hsiad::cube::{normalize_unit, select_bands};
use hsiad::desk::{build_dataset, comparison_csv, load_dataset, write_dataset};
use hsiad::detectors::{
    enhance_and_detect, grx, load_score_map, lrx, prepare_input, residual_map, save_score_map, ScoreMap,
};
use hsiad::eval::{metrics_csv, scene_metrics, summarize, BenchmarkSummary};
use hsiad::io::{load_cube, load_truth, save_cube, write_pgm};
use hsiad::maskgen::generate_mask_map;
use hsiad::net::checkpoint::{load_checkpoint, save_checkpoint};
use hsiad::net::{NetParams, NetworkConfig};
use hsiad::trainer::{derive_rng, train, write_epoch_log, TaggedCube};
use hsiad::HsiCube;
use log::info;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{DetectJob, DetectorKind, EvalJob, MaskPreviewJob, SynthJob, TrainJob};

/// Derivation slot for mask previews, so they never share a stream with
/// training draws of the same seed.
const PREVIEW_EPOCH: u64 = 0xFFFF_0000;

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn required<'a>(value: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    value.as_deref().with_context(|| format!("missing {what}: set it in the config or pass the flag"))
}

pub fn synth(job: &SynthJob, out: &Path) -> Result<()> {
    let data = build_dataset(job)?;
    write_dataset(&data, job, out)?;
    info!(
        "wrote {} training cubes, 1 validation cube and {} test scenes",
        data.train.len(),
        data.test.len()
    );
    Ok(())
}

pub fn train_cmd(job: &TrainJob, out: &Path) -> Result<()> {
    let data = load_dataset(required(&job.data, "dataset directory (--data)")?)?;
    let first = &data.train[0].cube;
    let cfg = job.network.resolve(first.height(), first.width(), first.bands());
    cfg.validate()?;
    let bands = cfg.input_size.2;
    let cubes = data
        .train
        .iter()
        .map(|t| Ok(TaggedCube::new(select_bands(&t.cube, bands)?, t.tag.clone())))
        .collect::<Result<Vec<_>>>()?;
    let val_raw = match &job.val {
        Some(p) => load_cube(p)?,
        None => data.val.cube,
    };
    let val = prepare_input(&val_raw, &cfg)?;

    let started = Instant::now();
    let (params, report) = train(&cubes, &val, &cfg, &job.train)?;
    info!(
        "trained {} epochs in {:.1}s; selected epoch {} (metric {:.4e})",
        report.stop_epoch,
        started.elapsed().as_secs_f64(),
        report.best_epoch,
        report.best_metric
    );
    save_checkpoint(&params, &cfg, &out.join("model"))?;
    write_epoch_log(&report, &out.join("epochs.csv"))?;
    write_json(job, &out.join("job.json"))?;
    Ok(())
}

/// Cube stems under `input`: the stem itself, or every `<stem>.json` with a
/// matching `<stem>.raw` in a directory, sorted.
fn cube_stems(input: &Path) -> Result<Vec<PathBuf>> {
    if !input.is_dir() {
        return Ok(vec![input.with_extension("")]);
    }
    let mut stems = Vec::new();
    for entry in fs::read_dir(input)? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "json") && path.with_extension("raw").is_file() {
            stems.push(path.with_extension(""));
        }
    }
    stems.sort();
    ensure!(!stems.is_empty(), "no cubes found in {}", input.display());
    Ok(stems)
}

fn stem_id(stem: &Path) -> String {
    stem.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

type Model = (NetworkConfig, NetParams<f64>);

fn detect_one(cube: &HsiCube<f64>, job: &DetectJob, model: Option<&Model>) -> Result<ScoreMap<f64>> {
    Ok(match job.detector {
        DetectorKind::Grx => grx(&normalize_unit(cube).0)?,
        DetectorKind::Lrx => lrx(&normalize_unit(cube).0, job.window)?.scores,
        DetectorKind::Enhanced => {
            let (cfg, params) = model.expect("model loaded for enhanced detection");
            enhance_and_detect(cube, params, cfg)?
        }
    })
}

pub fn detect(job: &DetectJob, out: &Path) -> Result<()> {
    let stems = cube_stems(required(&job.input, "input (--input)")?)?;
    let model = match job.detector {
        DetectorKind::Enhanced => {
            let ckpt = required(&job.checkpoint, "checkpoint (--checkpoint) for enhanced detection")?;
            Some(load_checkpoint::<f64>(ckpt).with_context(|| format!("loading checkpoint {}", ckpt.display()))?)
        }
        _ => None,
    };
    if job.emit_residual {
        ensure!(model.is_some(), "--emit-residual needs the enhanced detector");
        fs::create_dir_all(out.join("residual"))?;
    }
    if job.detector == DetectorKind::Lrx {
        job.window.validate()?;
    }
    let timings = stems
        .par_iter()
        .map(|stem| {
            let id = stem_id(stem);
            let cube: HsiCube<f64> = load_cube(stem)?;
            let started = Instant::now();
            let map = detect_one(&cube, job, model.as_ref()).with_context(|| format!("scene {id}"))?;
            let seconds = started.elapsed().as_secs_f64();
            save_score_map(&map, &out.join(&id))?;
            if let Some((cfg, params)) = model.as_ref().filter(|_| job.emit_residual) {
                save_cube(&residual_map(&cube, params, cfg)?, &out.join("residual").join(&id))?;
            }
            info!("{id}: {seconds:.3}s");
            Ok((id, seconds))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut csv = String::from("scene_id,seconds\n");
    for (id, s) in &timings {
        let _ = writeln!(csv, "{id},{s}");
    }
    fs::write(out.join("timing.csv"), csv)?;
    Ok(())
}

fn read_timings(dir: &Path) -> Result<BTreeMap<String, f64>> {
    let path = dir.join("timing.csv");
    let mut out = BTreeMap::new();
    if !path.is_file() {
        return Ok(out);
    }
    for (i, line) in fs::read_to_string(&path)?.lines().enumerate().skip(1) {
        let (id, s) = line
            .split_once(',')
            .with_context(|| format!("{}:{}: expected scene_id,seconds", path.display(), i + 1))?;
        out.insert(id.to_string(), s.trim().parse()?);
    }
    Ok(out)
}

fn evaluate_dir(scores: &Path, truth: &Path) -> Result<BenchmarkSummary> {
    let timings = read_timings(scores)?;
    let rows = cube_stems(scores)?
        .iter()
        .map(|stem| {
            let id = stem_id(stem);
            let truth_path = truth.join(format!("{id}.pgm"));
            if !truth_path.is_file() {
                bail!("no ground truth for scene {id} (expected {})", truth_path.display());
            }
            let map: ScoreMap<f64> = load_score_map(stem)?;
            let gt = load_truth(&truth_path)?;
            let seconds = timings.get(&id).copied().unwrap_or(0.0);
            scene_metrics(&id, &map, &gt, seconds).with_context(|| format!("scene {id}"))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(summarize(&rows)?)
}

pub fn eval(job: &EvalJob, out: &Path) -> Result<()> {
    let scores = required(&job.scores, "score directory (--scores)")?;
    let truth = required(&job.truth, "truth directory (--truth)")?;
    let summary = evaluate_dir(scores, truth)?;
    fs::write(out.join("metrics.csv"), metrics_csv(&summary))?;
    info!("mAUC {:.4}, mASNPR {:.2} dB", summary.mauc, summary.masnpr_db);
    if let Some(base) = &job.baseline {
        let baseline = evaluate_dir(base, truth)?;
        fs::write(out.join("comparison.csv"), comparison_csv(&baseline, &summary)?)?;
        info!("baseline mAUC {:.4}", baseline.mauc);
    }
    Ok(())
}

#[derive(Serialize)]
struct PreviewStats {
    file: String,
    regions: usize,
    areas: Vec<usize>,
    masked_fraction: f64,
}

pub fn mask_preview(job: &MaskPreviewJob, out: &Path) -> Result<()> {
    job.mask.validate()?;
    let stats = (0..job.count)
        .map(|i| {
            let mut rng = derive_rng(job.seed, PREVIEW_EPOCH, i as u64);
            let map = generate_mask_map(job.height, job.width, &job.mask, &mut rng)?;
            let file = format!("mask{i:03}.pgm");
            write_pgm(&out.join(&file), job.height, job.width, &map.to_gray())?;
            Ok(PreviewStats {
                file,
                regions: map.regions().len(),
                areas: map.regions().iter().map(Vec::len).collect(),
                masked_fraction: map.masked_fraction(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    write_json(&stats, &out.join("masks.json"))
}
