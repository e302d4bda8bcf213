//! Batch commands over datasets: recognize, eval, train, prune, segment.
//!
//! Each command reads a [`RunConfig`], writes its reports under the
//! configured output directory and returns the same figures in memory.
//! Report files other than timing are byte-identical across reruns.

mod config;
mod dataset;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

pub use config::{parse_method, parse_windows_on, RunConfig};
pub use dataset::{ingest, sidecar, sidecar_k, DatasetEntry, DatasetIndex, DatasetMode};

use crate::decision::{decide, format_record, gather_evidence, DecisionSet, Method, RecognizeConfig, SegmentEvidence};
use crate::error::{Error, Result};
use crate::evaluation::{
    aggregate, class_metrics, confusion, low_f1_classes, parse_class_mapping, set_metrics, subset_mean_recall, Aggregate,
    ClassMetricsReport, SetMetrics,
};
use crate::localization::{draw_boxes, locate_boxes};
use crate::numerics::RasterImage;
use crate::pruning::{prune_loop, PruneConfig, PruneData, PruneLog};
use crate::refnet::{argmax, load_model, save_model, train, ModelSpec, TrainReport, BACKGROUND};
use crate::segmentation::{segment_image, Segment};

/// Top-n values swept by `eval`.
pub const SWEEP: [usize; 4] = [1, 2, 3, 5];

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Maps `f` over `items` on up to `workers` threads, keeping input order.
fn par_map<T: Sync, R: Send>(items: &[T], workers: usize, f: impl Fn(&T) -> Result<R> + Sync) -> Result<Vec<R>> {
    if workers <= 1 || items.len() < 2 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(workers);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| s.spawn(|| c.iter().map(&f).collect::<Result<Vec<R>>>()))
            .collect();
        let mut out = Vec::with_capacity(items.len());
        for h in handles {
            out.extend(h.join().expect("worker panicked")?);
        }
        Ok(out)
    })
}

fn display_path(path: &Path, root: &Path) -> String {
    path.strip_prefix(root).unwrap_or(path).display().to_string()
}

fn load(cfg: &RunConfig) -> Result<ModelSpec> {
    load_model(cfg.require(&cfg.model, "model")?)
}

fn multi_index(cfg: &RunConfig, m: &ModelSpec) -> Result<(PathBuf, DatasetIndex)> {
    let root = cfg.require(&cfg.dataset, "dataset")?;
    let mode = cfg.mode.unwrap_or(DatasetMode::MultiLabel);
    Ok((root.to_path_buf(), ingest(root, mode, Some(&m.class_names))?))
}

/// Recognition config for one image: a `.k` sidecar overrides K.
fn image_config(base: &RecognizeConfig, image: &Path) -> Result<RecognizeConfig> {
    let mut c = base.clone();
    if let Some(k) = sidecar_k(image)? {
        c.segmentation.k = k;
    }
    Ok(c)
}

fn evidence_for(m: &ModelSpec, cfg: &RunConfig, e: &DatasetEntry) -> Result<Vec<SegmentEvidence>> {
    let img = RasterImage::read(&e.path)?;
    gather_evidence(m, &img, &image_config(&cfg.recognize, &e.path)?)
}

fn labels_of(set: &DecisionSet) -> Vec<&str> {
    set.iter().map(|p| p.label.as_str()).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecognizeReport {
    /// One `<path>\t<label:score;...>` line per image.
    pub records: Vec<String>,
    pub per_image: Vec<SetMetrics>,
    pub aggregate: Option<Aggregate>,
}

/// Recognizes every dataset image with the configured method.
///
/// Writes `results.tsv`, `per_image.csv` and `set_metrics.csv`.
pub fn cmd_recognize(cfg: &RunConfig) -> Result<RecognizeReport> {
    let m = load(cfg)?;
    let (root, index) = multi_index(cfg, &m)?;
    let top_n = cfg.recognize.decision.top_n;
    let sets = par_map(&index.entries, cfg.workers, |e| Ok(decide(&evidence_for(&m, cfg, e)?, cfg.method, top_n)))?;

    let mut records = Vec::new();
    let mut per_image = Vec::new();
    let mut csv = String::from("image,precision,recall,f1\n");
    for (e, set) in index.entries.iter().zip(&sets) {
        let name = display_path(&e.path, &root);
        records.push(format_record(&name, set));
        let sm = set_metrics(&labels_of(set), &e.labels);
        writeln!(csv, "{name},{:.6},{:.6},{:.6}", sm.precision, sm.recall, sm.f1).unwrap();
        per_image.push(sm);
    }
    let agg = (!per_image.is_empty()).then(|| aggregate(&per_image)).transpose()?;
    let mut results = records.join("\n");
    if !results.is_empty() {
        results.push('\n');
    }
    write_file(&cfg.output.join("results.tsv"), &results)?;
    write_file(&cfg.output.join("per_image.csv"), &csv)?;
    if let Some(a) = &agg {
        write_file(&cfg.output.join("set_metrics.csv"), &a.to_csv())?;
    }
    Ok(RecognizeReport {
        records,
        per_image,
        aggregate: agg,
    })
}

/// One row of the top-n sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub method: Method,
    /// Only meaningful for Algorithm 2.
    pub top_n: usize,
    pub aggregate: Aggregate,
}

fn method_name(m: Method) -> &'static str {
    match m {
        Method::Baseline => "baseline",
        Method::Algorithm1 => "algorithm1",
        Method::Algorithm2 => "algorithm2",
    }
}

/// Aggregated set metrics for baseline, Algorithm 1 and Algorithm 2 at
/// each swept n, computed from shared per-image evidence.
pub fn sweep(evidence: &[Vec<SegmentEvidence>], truth: &[Vec<String>]) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    let mut run = |method: Method, n: usize| -> Result<()> {
        let per: Vec<SetMetrics> = evidence
            .iter()
            .zip(truth)
            .map(|(ev, t)| set_metrics(&labels_of(&decide(ev, method, n)), t))
            .collect();
        rows.push(SweepRow {
            method,
            top_n: n,
            aggregate: aggregate(&per)?,
        });
        Ok(())
    };
    run(Method::Baseline, 1)?;
    run(Method::Algorithm1, 1)?;
    for n in SWEEP {
        run(Method::Algorithm2, n)?;
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("method,n,avg_precision,avg_recall,avg_f1,median_precision,median_recall,median_f1\n");
    for r in rows {
        let (a, m) = (r.aggregate.average, r.aggregate.median);
        writeln!(
            s,
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            method_name(r.method),
            r.top_n,
            a.precision,
            a.recall,
            a.f1,
            m.precision,
            m.recall,
            m.f1
        )
        .unwrap();
    }
    s
}

#[derive(Clone, Debug, PartialEq)]
pub enum EvalReport {
    /// Multi-label datasets: the top-n sweep.
    Sweep(Vec<SweepRow>),
    /// Single-label datasets: whole-image classification metrics.
    Classification {
        report: ClassMetricsReport,
        subset_mean_recall: Option<f64>,
    },
}

fn classification_report(cfg: &RunConfig, m: &ModelSpec, index: &DatasetIndex) -> Result<ClassMetricsReport> {
    let preds = par_map(&index.entries, cfg.workers, |e| {
        let img = RasterImage::read(&e.path)?;
        let p = m.predict(&[&img])?.pop().expect("one image");
        Ok(m.class_names[argmax(&p)].clone())
    })?;
    let pairs: Vec<(&str, &str)> = index
        .entries
        .iter()
        .zip(&preds)
        .map(|(e, p)| (e.labels[0].as_str(), p.as_str()))
        .collect();
    let cm = confusion(&pairs, &m.class_names)?;
    write_file(&cfg.output.join("confusion.csv"), &cm.to_csv())?;
    let report = class_metrics(&cm)?;
    write_file(&cfg.output.join("class_metrics.csv"), &report.to_csv())?;
    Ok(report)
}

/// Multi-label: writes `topn_sweep.csv`. Single-label: writes
/// `class_metrics.csv`, `confusion.csv`, `low_f1.csv` and, given a class
/// mapping, `subset_recall.csv`.
pub fn cmd_eval(cfg: &RunConfig) -> Result<EvalReport> {
    let m = load(cfg)?;
    let (_, index) = multi_index(cfg, &m)?;
    match index.mode {
        DatasetMode::MultiLabel => {
            let evidence = par_map(&index.entries, cfg.workers, |e| evidence_for(&m, cfg, e))?;
            let truth: Vec<Vec<String>> = index.entries.iter().map(|e| e.labels.clone()).collect();
            let rows = sweep(&evidence, &truth)?;
            write_file(&cfg.output.join("topn_sweep.csv"), &sweep_csv(&rows))?;
            Ok(EvalReport::Sweep(rows))
        }
        DatasetMode::SingleLabel => {
            let report = classification_report(cfg, &m, &index)?;
            let mut low = String::from("class,precision,recall,f1\n");
            for c in low_f1_classes(&report, cfg.low_f1_threshold) {
                writeln!(low, "{},{:.6},{:.6},{:.6}", c.class, c.precision, c.recall, c.f1).unwrap();
            }
            write_file(&cfg.output.join("low_f1.csv"), &low)?;
            let subset = match &cfg.class_mapping {
                Some(_) => {
                    let path = cfg.require(&cfg.class_mapping, "eval.class_mapping")?;
                    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                    let local: Vec<String> = parse_class_mapping(&text)?.into_iter().map(|(l, _)| l).collect();
                    let r = subset_mean_recall(&report, &local)?;
                    write_file(
                        &cfg.output.join("subset_recall.csv"),
                        &format!("classes,mean_recall\n{},{r:.6}\n", local.len()),
                    )?;
                    Some(r)
                }
                None => None,
            };
            Ok(EvalReport::Classification {
                report,
                subset_mean_recall: subset,
            })
        }
    }
}

fn single_index(cfg: &RunConfig, path: &Option<PathBuf>, key: &str, classes: Option<&[String]>) -> Result<DatasetIndex> {
    let root = cfg.require(path, key)?;
    let index = ingest(root, DatasetMode::SingleLabel, classes)?;
    if index.is_empty() {
        return Err(Error::Dataset {
            path: root.to_path_buf(),
            msg: "no images".into(),
        });
    }
    Ok(index)
}

/// Class list for a fresh model: the dataset's classes plus background.
fn dataset_classes(index: &DatasetIndex) -> Vec<String> {
    let mut names: Vec<String> = index.entries.iter().map(|e| e.labels[0].clone()).collect();
    names.push(BACKGROUND.to_string());
    names.sort();
    names.dedup();
    names
}

/// Trains (or fine-tunes, when `model` exists) on a single-label dataset.
///
/// Writes `model/`, `train_log.csv` and `class_metrics.csv` (on the
/// validation set when configured, else on the training set).
pub fn cmd_train(cfg: &RunConfig) -> Result<(TrainReport, ClassMetricsReport)> {
    let m = match &cfg.model {
        Some(p) if p.join(crate::refnet::MANIFEST).exists() => load_model(p)?,
        _ => {
            let index = single_index(cfg, &cfg.dataset, "dataset", None)?;
            ModelSpec::reference(dataset_classes(&index), cfg.seed)?
        }
    };
    let index = single_index(cfg, &cfg.dataset, "dataset", Some(&m.class_names))?;
    let (m, log) = train(m, &index.samples()?, &cfg.train)?;
    save_model(&m, cfg.output.join("model"))?;

    let mut csv = String::from("epoch,loss\n");
    writeln!(csv, "initial,{:.6}", log.initial_loss).unwrap();
    for (i, l) in log.epoch_losses.iter().enumerate() {
        writeln!(csv, "{},{l:.6}", i + 1).unwrap();
    }
    writeln!(csv, "final,{:.6}", log.final_loss).unwrap();
    write_file(&cfg.output.join("train_log.csv"), &csv)?;

    let eval_index = match &cfg.val_dataset {
        Some(_) => single_index(cfg, &cfg.val_dataset, "val_dataset", Some(&m.class_names))?,
        None => index,
    };
    let report = classification_report(cfg, &m, &eval_index)?;
    Ok((log, report))
}

/// Prunes the model with fine-tuning on `dataset` and validation on
/// `val_dataset` (the training set when unset).
///
/// Writes `model/`, `prune_log.csv` and `prune_summary.txt`.
pub fn cmd_prune(cfg: &RunConfig) -> Result<PruneLog> {
    let m = load(cfg)?;
    let train_set = single_index(cfg, &cfg.dataset, "dataset", Some(&m.class_names))?.samples()?;
    let val_set = match &cfg.val_dataset {
        Some(_) => single_index(cfg, &cfg.val_dataset, "val_dataset", Some(&m.class_names))?.samples()?,
        None => train_set.clone(),
    };
    let probe = match &cfg.prune_probe {
        Some(_) => Some(RasterImage::read(cfg.require(&cfg.prune_probe, "prune.probe")?)?),
        None => None,
    };
    let pc = PruneConfig {
        threshold: cfg.prune_threshold,
        max_rounds: cfg.prune_max_rounds,
        finetune: cfg.prune_finetune.clone(),
        probe,
    };
    let data = PruneData {
        train: &train_set,
        val: &val_set,
    };
    let (pruned, log) = prune_loop(m, &pc, &data)?;
    save_model(&pruned, cfg.output.join("model"))?;
    write_file(&cfg.output.join("prune_log.csv"), &log.to_csv())?;
    let summary = format!(
        "initial_params {}\ninitial_flops {}\nrounds {}\nblocks {}\nstop {}\n",
        log.initial_params,
        log.initial_flops,
        log.rounds.len(),
        pruned.blocks.len(),
        log.stop
    );
    write_file(&cfg.output.join("prune_summary.txt"), &summary)?;
    Ok(log)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentTiming {
    pub image: String,
    pub k: usize,
    pub segments: usize,
    pub mean_seconds: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentReport {
    pub images: Vec<SegmentTiming>,
    /// Mean over images of the per-image mean time.
    pub mean_seconds: f64,
}

const PALETTE: [[u8; 3]; 8] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
];

/// Each segment's pixels painted in a distinct color.
pub fn mask_visualization(height: usize, width: usize, segments: &[Segment]) -> RasterImage {
    let mut out = RasterImage::filled(height, width, [0, 0, 0]);
    for (i, s) in segments.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        for (px, &on) in out.pixels_mut().iter_mut().zip(s.mask.bits()) {
            if on {
                *px = color;
            }
        }
    }
    out
}

fn image_list(cfg: &RunConfig) -> Result<(PathBuf, Vec<PathBuf>)> {
    let root = cfg.require(&cfg.dataset, "dataset")?;
    let paths = match cfg.mode {
        Some(mode) => ingest(root, mode, None)?.entries.into_iter().map(|e| e.path).collect(),
        None => {
            let mut v: Vec<PathBuf> = fs::read_dir(root)
                .map_err(|e| Error::io(root, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| {
                    p.is_file()
                        && p.extension()
                            .and_then(|e| e.to_str())
                            .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "ppm"))
                })
                .collect();
            v.sort();
            v
        }
    };
    Ok((root.to_path_buf(), paths))
}

/// Segments every image `timing.repetitions` times and reports the mean
/// wall time per image.
///
/// Writes `segments/<image>_mask.png`, `segments/<image>_boxes.png` and
/// `segment_timing.csv`. Images run one at a time so timings do not
/// interfere.
pub fn cmd_segment(cfg: &RunConfig) -> Result<SegmentReport> {
    let m = load(cfg)?;
    let (root, paths) = image_list(cfg)?;
    let mut images = Vec::with_capacity(paths.len());
    let mut csv = String::from("image,k,segments,mean_seconds\n");
    for path in &paths {
        let img = RasterImage::read(path)?;
        let rc = image_config(&cfg.recognize, path)?;
        let mut total = 0.0;
        let mut segments = Vec::new();
        for _ in 0..cfg.timing_repetitions {
            let t = Instant::now();
            segments = segment_image(&m, &img, &rc.segmentation)?;
            total += t.elapsed().as_secs_f64();
        }
        let name = display_path(path, &root);
        let stem = name.replace(['/', '\\'], "_");
        let out_dir = cfg.output.join("segments");
        fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
        mask_visualization(img.height(), img.width(), &segments).write(out_dir.join(format!("{stem}_mask.png")))?;
        let mut boxes = Vec::new();
        for s in &segments {
            boxes.extend(locate_boxes(&s.mask, &rc.locate)?);
        }
        draw_boxes(&img, &boxes).write(out_dir.join(format!("{stem}_boxes.png")))?;

        let timing = SegmentTiming {
            image: name,
            k: rc.segmentation.k,
            segments: segments.len(),
            mean_seconds: total / cfg.timing_repetitions as f64,
        };
        writeln!(csv, "{},{},{},{:.6}", timing.image, timing.k, timing.segments, timing.mean_seconds).unwrap();
        images.push(timing);
    }
    let mean_seconds = if images.is_empty() {
        0.0
    } else {
        images.iter().map(|t| t.mean_seconds).sum::<f64>() / images.len() as f64
    };
    writeln!(csv, "mean,,,{mean_seconds:.6}").unwrap();
    write_file(&cfg.output.join("segment_timing.csv"), &csv)?;
    Ok(SegmentReport { images, mean_seconds })
}
