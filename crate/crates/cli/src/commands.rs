use std::fs;
use std::path::{Path, PathBuf};

use ata_core::alignment::{align_clip, dealign_clip, FeatureVolume};
use ata_core::bench::{bench_solvers, BenchReport};
use ata_core::infotheory::{alignment_mi_report, AdjacentInfo};
use ata_core::model::{train_with, Dataset, EpochMetrics, Example};
use ata_core::synthdata::{gen_motion_dataset, gen_shifted, gen_static, MOTION_CLASSES};
use clap::ValueEnum;
use serde::{Deserialize, Serialize};

use crate::docs::{encode_checkpoint, write_bytes, Manifest, PlanDoc, RunConfig};
use crate::error::{CliError, CliResult};
use crate::fvol::{self, Dtype};

pub const EXACT_SLOPE_RANGE: (f64, f64) = (2.0, 3.6);
/// `mi --check` requires at least this share of clips not to lose information.
pub const MI_CHECK_SHARE: f64 = 0.95;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum GenKind {
    Static,
    Shift,
    Motion,
    ShuffledMotion,
}

impl GenKind {
    fn name(self) -> &'static str {
        match self {
            GenKind::Static => "static",
            GenKind::Shift => "shift",
            GenKind::Motion => "motion",
            GenKind::ShuffledMotion => "shuffled-motion",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenArgs {
    pub kind: GenKind,
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub seed: u64,
    pub out: PathBuf,
    pub dx: i64,
    pub dy: i64,
    pub clips: usize,
    pub dtype: Dtype,
}

pub const CLIP_FILE: &str = "clip.fvol";
pub const TRUTH_FILE: &str = "truth.json";
pub const LABELS_FILE: &str = "labels.csv";
pub const CLIP_DIR: &str = "clips";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelRow {
    pub file: String,
    pub label: usize,
    pub split: String,
}

fn ensure_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

/// Writes the requested clips, their sidecars and a hashed manifest into `args.out`.
pub fn gen(args: &GenArgs) -> CliResult<Manifest> {
    ensure_dir(&args.out)?;
    let mut manifest = Manifest {
        kind: args.kind.name().to_string(),
        seed: args.seed,
        files: Vec::new(),
    };
    match args.kind {
        GenKind::Static | GenKind::Shift => {
            let clip = if args.kind == GenKind::Static {
                gen_static(args.t, args.h, args.w, args.c, args.seed)?
            } else {
                gen_shifted(args.t, args.h, args.w, args.c, args.dx, args.dy, args.seed)?
            };
            let bytes = fvol::write(&args.out.join(CLIP_FILE), &clip.volume, args.dtype)?;
            manifest.add(CLIP_FILE, &bytes);
            if args.kind == GenKind::Shift {
                let truth = clip.truth_perms.as_deref().expect("shifted clips carry truths");
                let text = PlanDoc::from_perms(args.h, args.w, truth).to_json();
                write_bytes(&args.out.join(TRUTH_FILE), text.as_bytes())?;
                manifest.add(TRUTH_FILE, text.as_bytes());
            }
        }
        GenKind::Motion | GenKind::ShuffledMotion => {
            let shuffled = args.kind == GenKind::ShuffledMotion;
            let data = gen_motion_dataset(args.clips, args.t, args.h, args.w, args.c, MOTION_CLASSES, shuffled, args.seed)?;
            ensure_dir(&args.out.join(CLIP_DIR))?;
            let mut labels = csv::Writer::from_writer(Vec::new());
            let splits = [("train", &data.train), ("val", &data.val)];
            let mut index = 0;
            for (split, clips) in splits {
                for clip in clips.iter() {
                    let rel = format!("{CLIP_DIR}/{index:05}.fvol");
                    let bytes = fvol::write(&args.out.join(&rel), &clip.volume, args.dtype)?;
                    manifest.add(rel.clone(), &bytes);
                    labels
                        .serialize(LabelRow {
                            file: rel,
                            label: clip.label.expect("motion clips are labelled"),
                            split: split.to_string(),
                        })
                        .map_err(|e| CliError::data(e.to_string()))?;
                    index += 1;
                }
            }
            let bytes = labels.into_inner().map_err(|e| CliError::data(e.to_string()))?;
            write_bytes(&args.out.join(LABELS_FILE), &bytes)?;
            manifest.add(LABELS_FILE, &bytes);
        }
    }
    manifest.clone().write(&args.out)?;
    Ok(manifest)
}

/// Aligns `input` into `output` and writes the plan document.
pub fn align(input: &Path, output: &Path, plan_out: &Path) -> CliResult<PlanDoc> {
    let (x, dtype) = fvol::read(input)?;
    let (aligned, plan) = align_clip(&x)?;
    fvol::write(output, &aligned, dtype)?;
    let doc = PlanDoc::from_plan(x.h(), x.w(), &plan);
    write_bytes(plan_out, doc.to_json().as_bytes())?;
    Ok(doc)
}

/// Restores the original layout of an aligned volume.
pub fn dealign(input: &Path, output: &Path, plan: &Path) -> CliResult<()> {
    let (x, dtype) = fvol::read(input)?;
    let doc = PlanDoc::read(plan)?;
    if (doc.t, doc.h, doc.w) != (x.t_len(), x.h(), x.w()) {
        return Err(CliError::data(format!(
            "plan grid {}x{}x{} does not match volume {}x{}x{}",
            doc.t,
            doc.h,
            doc.w,
            x.t_len(),
            x.h(),
            x.w()
        )));
    }
    let restored = dealign_clip(&x, &doc.to_plan()?)?;
    fvol::write(output, &restored, dtype)?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MiRow {
    pub clip_id: String,
    /// `identity` pairs patches by position; `aligned` pairs them after alignment.
    pub pairing: String,
    pub mi: f64,
    pub h_prev: f64,
    pub h_curr: f64,
    pub h_cond: f64,
}

fn mi_row(clip_id: &str, pairing: &str, a: &AdjacentInfo) -> MiRow {
    MiRow {
        clip_id: clip_id.to_string(),
        pairing: pairing.to_string(),
        mi: a.mi,
        h_prev: a.h_prev,
        h_curr: a.h_curr,
        h_cond: a.h_cond,
    }
}

fn clip_id(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

/// Two rows per clip: MI before and after alignment.
pub fn mi(inputs: &[PathBuf], k: usize, seed: u64) -> CliResult<Vec<MiRow>> {
    let mut rows = Vec::with_capacity(2 * inputs.len());
    for path in inputs {
        let (x, _) = fvol::read(path)?;
        if x.t_len() < 2 {
            return Err(CliError::data(format!("{}: MI needs at least two frames", path.display())));
        }
        let report = alignment_mi_report(&x, k, seed).map_err(|e| CliError::from(e).context(path))?;
        let id = clip_id(path);
        rows.push(mi_row(&id, "identity", &report.before));
        rows.push(mi_row(&id, "aligned", &report.after));
    }
    Ok(rows)
}

/// Fails unless the mean MI change is positive and most clips do not lose MI.
pub fn check_mi(rows: &[MiRow]) -> CliResult<()> {
    let gains: Vec<f64> = rows.chunks(2).map(|p| p[1].mi - p[0].mi).collect();
    if gains.is_empty() {
        return Err(CliError::check("no clips measured"));
    }
    let kept = gains.iter().filter(|&&g| g >= 0.0).count() as f64 / gains.len() as f64;
    let mean = gains.iter().sum::<f64>() / gains.len() as f64;
    if kept < MI_CHECK_SHARE || mean <= 0.0 {
        return Err(CliError::check(format!(
            "MI did not increase: {:.1}% of clips non-decreasing, mean change {mean:.4}",
            100.0 * kept
        )));
    }
    Ok(())
}

pub fn write_csv<T: Serialize>(rows: &[T]) -> CliResult<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| CliError::data(e.to_string()))?;
    }
    w.into_inner().map_err(|e| CliError::data(e.to_string()))
}

pub fn bench(sizes: &[usize], reps: usize, seed: u64) -> CliResult<BenchReport> {
    Ok(bench_solvers(sizes, reps, seed)?)
}

pub fn check_bench(r: &BenchReport) -> CliResult<()> {
    let (lo, hi) = EXACT_SLOPE_RANGE;
    if !(lo..=hi).contains(&r.exact_slope) {
        return Err(CliError::check(format!(
            "exact solver slope {:.3} outside [{lo}, {hi}]",
            r.exact_slope
        )));
    }
    if r.greedy_slope >= r.exact_slope {
        return Err(CliError::check(format!(
            "greedy slope {:.3} is not below exact slope {:.3}",
            r.greedy_slope, r.exact_slope
        )));
    }
    Ok(())
}

/// Reads a generated motion directory into train and validation examples.
pub fn load_dataset(dir: &Path) -> CliResult<Dataset> {
    let labels_path = dir.join(LABELS_FILE);
    if !labels_path.is_file() {
        return Err(CliError::data(format!("dataset missing: {} not found", labels_path.display())));
    }
    let mut reader = csv::Reader::from_path(&labels_path).map_err(|e| CliError::data(e.to_string()))?;
    let mut data = Dataset::default();
    for row in reader.deserialize::<LabelRow>() {
        let row = row.map_err(|e| CliError::data(format!("{}: {e}", labels_path.display())))?;
        let (clip, _) = fvol::read(&dir.join(&row.file))?;
        let ex = Example { clip, label: row.label };
        match row.split.as_str() {
            "train" => data.train.push(ex),
            "val" => data.val.push(ex),
            other => return Err(CliError::data(format!("unknown split {other:?} for {}", row.file))),
        }
    }
    Ok(data)
}

fn check_grid(cfg: &RunConfig, clip: &FeatureVolume) -> CliResult<()> {
    let m = &cfg.model;
    if clip.dims() != [m.t_len, m.h, m.w, m.c_in] {
        return Err(CliError::data(format!(
            "clip shape {:?} does not match model grid {:?}",
            clip.dims(),
            [m.t_len, m.h, m.w, m.c_in]
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub loss: f64,
    pub train_acc: f64,
    pub val_acc: Option<f64>,
}

impl From<&EpochMetrics> for MetricsRow {
    fn from(m: &EpochMetrics) -> Self {
        Self {
            epoch: m.epoch,
            loss: m.loss,
            train_acc: m.train_acc,
            val_acc: m.val_acc,
        }
    }
}

/// Trains per `cfg`, writing the metrics CSV and the final checkpoint.
pub fn train(cfg: &RunConfig, mut progress: impl FnMut(&EpochMetrics)) -> CliResult<Vec<MetricsRow>> {
    let data = load_dataset(&cfg.data.dir)?;
    for ex in data.train.iter().chain(&data.val) {
        check_grid(cfg, &ex.clip)?;
    }
    let outcome = train_with(&data, &cfg.model, &cfg.train, |m| progress(m))?;
    let rows: Vec<MetricsRow> = outcome.metrics.iter().map(MetricsRow::from).collect();
    write_bytes(&cfg.output.metrics, &write_csv(&rows)?)?;
    write_bytes(&cfg.output.checkpoint, &encode_checkpoint(&cfg.model, &outcome.params))?;
    Ok(rows)
}

pub fn check_train(rows: &[MetricsRow], min_val_acc: f64) -> CliResult<()> {
    match rows.last().and_then(|r| r.val_acc) {
        Some(acc) if acc >= min_val_acc => Ok(()),
        Some(acc) => Err(CliError::check(format!(
            "final validation accuracy {acc:.3} below {min_val_acc:.3}"
        ))),
        None => Err(CliError::check("no validation accuracy to check")),
    }
}
