use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use super::config::{required, RunConfig};
use super::emit;
use crate::datapipe::{
    clip_dir_name, clip_dirs, filter_clips, generate_clip, load_clip, load_dataset, load_frames, read_json, read_pfm,
    read_rgb_png, save_clip, write_depth_png16, write_json, write_pfm, Clip, SegmentReport,
};
use crate::denoiser::Denoiser;
use crate::eval::{aggregate, evaluate, Aggregate};
use crate::infer::Predictor;
use crate::metrics::MetricRecord;
use crate::numerics::rng::derive_seed;
use crate::numerics::Tensor;
use crate::train::{train, Variant};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub path: PathBuf,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

impl ManifestEntry {
    fn of(clip: &Clip, path: PathBuf) -> Self {
        Self {
            id: clip.id.clone(),
            path,
            frames: clip.len(),
            height: clip.height(),
            width: clip.width(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Manifest {
    pub clips: Vec<ManifestEntry>,
}

/// `prediction.json` next to each predicted clip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionMeta {
    pub id: String,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// The percentiles that map the model's normalized output to the stored
    /// depth; outputs are defined up to scale and shift.
    pub d2: f64,
    pub d98: f64,
    pub steps: usize,
    pub ensemble: usize,
    pub seed: u64,
    pub max_frames_per_pass: usize,
    pub keyframe_interpolation: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub clips: Vec<MetricRecord>,
    pub aggregate: Option<Aggregate>,
    /// Ids present on only one side.
    pub unpaired: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FilterManifest {
    pub segments: Vec<ManifestEntry>,
}

fn prepare_out(out: &Path, cfg: &RunConfig) -> anyhow::Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_json(&out.join("config.json"), cfg)?;
    Ok(())
}

pub fn cmd_generate(cfg: &RunConfig, out: &Path) -> anyhow::Result<()> {
    let g = &cfg.generate;
    g.validate()?;
    prepare_out(out, cfg)?;
    let mut manifest = Manifest::default();
    for i in 0..g.count {
        let scene = crate::datapipe::SceneConfig {
            camera_motion: g.motions[i % g.motions.len()],
            ..g.scene.clone()
        };
        let mut clip = generate_clip(&scene, derive_seed(g.seed, i as u64))?;
        clip.id = format!("{i:05}");
        let dir = save_clip(out, &clip)?;
        manifest.clips.push(ManifestEntry::of(&clip, dir));
    }
    write_json(&out.join("manifest.json"), &manifest)?;
    emit("info", "generated", serde_json::json!({ "clips": manifest.clips.len() }));
    Ok(())
}

pub fn cmd_train(cfg: &RunConfig, out: &Path) -> anyhow::Result<()> {
    let t = &cfg.train;
    t.config.validate()?;
    let data = required(&t.data, "train.data")?;
    let (variant, init) = if t.interp {
        let base = required(&t.base_checkpoint, "train.base_checkpoint")?;
        let model = Denoiser::load(base).with_context(|| format!("loading base checkpoint {}", base.display()))?;
        (Variant::Interp, Some(model))
    } else {
        let init = match &t.base_checkpoint {
            Some(p) => Some(Denoiser::load(p).with_context(|| format!("loading {}", p.display()))?),
            None => None,
        };
        (Variant::Base, init)
    };
    let clips = load_dataset(data).with_context(|| format!("loading dataset {}", data.display()))?;
    prepare_out(out, cfg)?;
    let log_path = out.join("train_log.jsonl");
    let mut log = BufWriter::new(File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?);
    let mut write_err = None;
    let every = (t.config.steps / 20).max(1);
    let outcome = train(&clips, &t.config, variant, init.as_ref(), |e| {
        if write_err.is_none() {
            let line = serde_json::to_string(e).expect("log entries serialize");
            write_err = writeln!(log, "{line}").err();
        }
        if e.step % every == 0 {
            emit("info", "step", serde_json::to_value(e).expect("log entries serialize"));
        }
    })?;
    if let Some(e) = write_err {
        return Err(e).with_context(|| format!("writing {}", log_path.display()));
    }
    log.flush().with_context(|| format!("writing {}", log_path.display()))?;
    for (id, reason) in &outcome.rejected {
        emit("warn", "clip_rejected", serde_json::json!({ "clip": id, "reason": reason }));
    }
    outcome.final_model.save(&out.join("final.ckpt"))?;
    outcome.best_model.save(&out.join("best.ckpt"))?;
    emit(
        "info",
        "trained",
        serde_json::json!({ "steps": outcome.log.len(), "best_smoothed_loss": outcome.best_smoothed_loss }),
    );
    Ok(())
}

/// `(id, frames)` for every input: an image, a clip directory or a dataset.
fn infer_inputs(input: &Path) -> anyhow::Result<Vec<(String, Tensor)>> {
    let stem = |p: &Path| p.file_stem().and_then(|s| s.to_str()).unwrap_or("input").to_string();
    if input.is_file() {
        let frame = read_rgb_png(input)?;
        let s = frame.shape().to_vec();
        return Ok(vec![(stem(input), frame.reshape(&[1, s[0], s[1], s[2]])?)]);
    }
    let one = |dir: &Path| -> anyhow::Result<(String, Tensor)> {
        let id = read_json::<crate::datapipe::ClipMeta>(&dir.join("meta.json"))
            .map(|m| m.id)
            .unwrap_or_else(|_| stem(dir).trim_start_matches("clip_").to_string());
        Ok((id, load_frames(dir)?))
    };
    if input.join("frames").is_dir() {
        return Ok(vec![one(input)?]);
    }
    let dirs = clip_dirs(input).with_context(|| format!("reading {}", input.display()))?;
    if dirs.is_empty() {
        bail!("{} is not an image, a clip directory or a dataset", input.display());
    }
    dirs.iter().map(|d| one(d)).collect()
}

pub fn cmd_infer(cfg: &RunConfig, out: &Path) -> anyhow::Result<()> {
    let i = &cfg.infer;
    i.config.validate()?;
    let ckpt = required(&i.checkpoint, "infer.checkpoint")?;
    let input = required(&i.input, "infer.input")?;
    let base = Denoiser::load(ckpt).with_context(|| format!("loading checkpoint {}", ckpt.display()))?;
    let interp = match &i.interp_checkpoint {
        Some(p) => Some(Denoiser::load(p).with_context(|| format!("loading {}", p.display()))?),
        None => None,
    };
    let predictor = Predictor::new(base, interp, i.config)?;
    let inputs = infer_inputs(input)?;
    prepare_out(out, cfg)?;
    for (id, frames) in inputs {
        let pred = predictor.predict(&frames).with_context(|| format!("predicting {id}"))?;
        let s = pred.depth.shape().to_vec();
        let dir = out.join(clip_dir_name(&id));
        let (depth_dir, vis_dir) = (dir.join("depth"), dir.join("vis"));
        for d in [&depth_dir, &vis_dir] {
            fs::create_dir_all(d).with_context(|| format!("creating {}", d.display()))?;
        }
        for k in 0..s[0] {
            let map = pred.depth.narrow(0, k, 1)?.reshape(&[s[2], s[3]])?;
            write_pfm(&depth_dir.join(format!("{k:05}.pfm")), &map)?;
            write_depth_png16(&vis_dir.join(format!("{k:05}.png")), &map)?;
        }
        let meta = PredictionMeta {
            id: id.clone(),
            frames: s[0],
            height: s[2],
            width: s[3],
            d2: pred.params.d2,
            d98: pred.params.d98,
            steps: i.config.steps,
            ensemble: i.config.ensemble,
            seed: i.config.seed,
            max_frames_per_pass: i.config.max_frames_per_pass,
            keyframe_interpolation: s[0] > i.config.max_frames_per_pass,
        };
        write_json(&dir.join("prediction.json"), &meta)?;
        emit("info", "predicted", serde_json::json!({ "clip": id, "frames": s[0] }));
    }
    Ok(())
}

fn load_prediction(dir: &Path) -> anyhow::Result<Tensor> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir.join("depth"))
        .with_context(|| format!("reading {}", dir.join("depth").display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "pfm"))
        .collect();
    files.sort();
    let maps = files
        .iter()
        .map(|p| {
            let m = read_pfm(p)?;
            let s = m.shape().to_vec();
            m.reshape(&[1, 1, s[0], s[1]])
        })
        .collect::<crate::Result<Vec<_>>>()?;
    if maps.is_empty() {
        bail!("{} holds no depth maps", dir.display());
    }
    Ok(Tensor::concat(&maps.iter().collect::<Vec<_>>(), 0)?)
}

pub fn cmd_eval(cfg: &RunConfig, out: &Path) -> anyhow::Result<EvalReport> {
    let e = &cfg.eval;
    let pred_root = required(&e.predictions, "eval.predictions")?;
    let gt_root = required(&e.ground_truth, "eval.ground_truth")?;
    let gt_dirs = clip_dirs(gt_root).with_context(|| format!("reading {}", gt_root.display()))?;
    let pred_dirs = clip_dirs(pred_root).with_context(|| format!("reading {}", pred_root.display()))?;
    prepare_out(out, cfg)?;
    let mut report = EvalReport {
        clips: Vec::new(),
        aggregate: None,
        unpaired: Vec::new(),
    };
    let mut matched = Vec::new();
    for dir in &gt_dirs {
        let clip = load_clip(dir)?;
        let pdir = pred_root.join(clip_dir_name(&clip.id));
        if !pdir.is_dir() {
            emit("warn", "unpaired", serde_json::json!({ "clip": clip.id, "missing": "prediction" }));
            report.unpaired.push(clip.id.clone());
            continue;
        }
        matched.push(pdir.clone());
        let pred = load_prediction(&pdir)?;
        let record = evaluate(&pred, &clip).with_context(|| format!("evaluating {}", clip.id))?;
        report.clips.push(record);
    }
    for p in pred_dirs.iter().filter(|p| !matched.contains(p)) {
        let id = p.file_name().and_then(|n| n.to_str()).unwrap_or_default().trim_start_matches("clip_").to_string();
        emit("warn", "unpaired", serde_json::json!({ "clip": id, "missing": "ground_truth" }));
        report.unpaired.push(id);
    }
    if !report.clips.is_empty() {
        report.aggregate = Some(aggregate(&report.clips)?);
    }
    write_json(&out.join("metrics.json"), &report)?;
    if report.clips.is_empty() {
        bail!("no prediction could be paired with ground truth ({} unpaired)", report.unpaired.len());
    }
    Ok(report)
}

pub fn cmd_filter(cfg: &RunConfig, out: &Path) -> anyhow::Result<()> {
    let f = &cfg.filter;
    f.thresholds.validate()?;
    let data = required(&f.data, "filter.data")?;
    let ckpt = required(&f.checkpoint, "filter.checkpoint")?;
    let base = Denoiser::load(ckpt).with_context(|| format!("loading checkpoint {}", ckpt.display()))?;
    let infer = crate::infer::InferConfig {
        steps: f.steps,
        seed: f.seed,
        ..Default::default()
    };
    let predictor = Predictor::new(base, None, infer)?;
    let clips = load_dataset(data).with_context(|| format!("loading dataset {}", data.display()))?;
    prepare_out(out, cfg)?;
    let outcome = filter_clips(&clips, &predictor, &f.thresholds, f.seed)?;
    for (segment, frame, message) in &outcome.skipped {
        emit("warn", "frame_skipped", serde_json::json!({ "segment": segment, "frame": frame, "message": message }));
    }
    let manifest = |segments: &[Clip]| FilterManifest {
        segments: segments.iter().map(|c| ManifestEntry::of(c, data.to_path_buf())).collect(),
    };
    write_json(&out.join("kept.json"), &manifest(&outcome.kept))?;
    write_json(&out.join("removed.json"), &manifest(&outcome.removed))?;
    #[derive(Serialize)]
    struct Report<'a> {
        segments: &'a [SegmentReport],
        skipped: &'a [(String, usize, String)],
    }
    write_json(
        &out.join("filter_report.json"),
        &Report {
            segments: &outcome.report,
            skipped: &outcome.skipped,
        },
    )?;
    emit(
        "info",
        "filtered",
        serde_json::json!({ "kept": outcome.kept.len(), "removed": outcome.removed.len() }),
    );
    Ok(())
}
