//! Subcommand implementations.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;
use srus_core::clutterfilt::ClutterFilter;
use srus_core::evalkit::{score_point_sets, MetricsReport, SetReport, Tally};
use srus_core::fieldsim::{
    build_dataset, label_path, stack_path, truth_path, DatasetManifest, DatasetSplit, GridSpec, MANIFEST_NAME,
};
use srus_core::formats::{read_iqf, read_json, write_iqf, write_json, PointSet};
use srus_core::network::{load_checkpoint, save_checkpoint};
use srus_core::registry::StrategySpec;
use srus_core::srusform::{form_srus, read_png16, write_srus_outputs, FormConfig, SrusSidecar};
use srus_core::training::{load_samples, train};
use srus_core::{Result, SrusError};

use crate::config::PipelineConfig;
use crate::render::{render_image, RenderOptions};
use crate::{Cli, Command, ConfigSource};

pub fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Simulate(a) => simulate(cli, a),
        Command::Filter(a) => filter(cli, a),
        Command::Train(a) => train_cmd(cli, a),
        Command::Infer(a) => infer(cli, a),
        Command::Eval(a) => eval(cli, a),
        Command::Render(a) => render(a),
        Command::Config(a) => {
            let cfg = resolve(&a.cfg, cli.seed)?;
            let text = serde_json::to_string_pretty(&cfg).expect("config serializes");
            match &a.out {
                Some(p) => write_json(p, &cfg),
                None => {
                    println!("{text}");
                    Ok(())
                }
            }
        }
    }
}

fn resolve(src: &ConfigSource, seed: Option<u64>) -> Result<PipelineConfig> {
    let mut cfg = PipelineConfig::load_or_default(src.config.as_deref())?;
    if let Some(s) = seed {
        cfg.master_seed = s;
    }
    Ok(cfg)
}

fn required(arg: &Option<PathBuf>, fallback: &Option<PathBuf>, flag: &str) -> Result<PathBuf> {
    arg.clone()
        .or_else(|| fallback.clone())
        .ok_or_else(|| SrusError::config(format!("{flag} is required (or set it under `paths` in the config)")))
}

fn prepare_dir(dir: &Path, overwrite: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir).map_err(|e| SrusError::io(dir, e))?.next().is_some();
        if non_empty && !overwrite {
            return Err(SrusError::input(format!(
                "output directory {} is not empty (pass --overwrite to replace)",
                dir.display()
            )));
        }
    }
    fs::create_dir_all(dir).map_err(|e| SrusError::io(dir, e))
}

fn create_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => fs::create_dir_all(p).map_err(|e| SrusError::io(p, e)),
        _ => Ok(()),
    }
}

fn simulate(cli: &Cli, a: &crate::SimulateArgs) -> Result<()> {
    let cfg = resolve(&a.cfg, cli.seed)?;
    let out = required(&a.out, &cfg.paths.dataset, "--out")?;
    let split = a.test_set.map_or(DatasetSplit::Train, |set| DatasetSplit::Test { set });
    let mut dc = cfg.dataset_config(split);
    if let Some(c) = a.count {
        dc.count = c;
    }
    let m = build_dataset(&dc, &out, a.overwrite)?;
    let labels: usize = m.stacks.iter().map(|s| s.label_count).sum();
    println!(
        "simulated {} stacks of {} frames ({}x{} px, K={}) into {}",
        m.count,
        m.frames_per_stack,
        m.grid().height_px,
        m.grid().width_px,
        m.grid().upsample_k,
        out.display()
    );
    for (snr, n) in dc.snr_levels.iter().zip(&m.per_level_counts) {
        println!("  SNR {snr} dB: {n} stacks");
    }
    println!("  labelled microbubbles: {labels}");
    Ok(())
}

#[derive(Serialize)]
struct FilterEcho<'a> {
    source: &'a Path,
    rule: &'a str,
    blocks_per_stack: usize,
    config: serde_json::Value,
}

fn filter(cli: &Cli, a: &crate::FilterArgs) -> Result<()> {
    let cfg = resolve(&a.cfg, cli.seed)?;
    let src = required(&a.dataset, &cfg.paths.dataset, "--dataset")?;
    let manifest = DatasetManifest::load(&src)?;
    if manifest.clutter_filtered {
        return Err(SrusError::input(format!("{} is already clutter-filtered", src.display())));
    }
    prepare_dir(&a.out, a.overwrite)?;
    let filt = ClutterFilter::from_config(&cfg.filter)?;
    let grid = manifest.grid();
    let blocks = manifest
        .stacks
        .par_iter()
        .map(|rec| {
            let i = rec.index;
            let stack = read_iqf(&stack_path(&src, i), &grid)?;
            let (filtered, reports) = filt
                .apply(&stack)
                .map_err(|e| SrusError::Frame { frame: i, source: Box::new(e) })?;
            write_iqf(&stack_path(&a.out, i), &filtered)?;
            for p in [label_path, truth_path] {
                fs::copy(p(&src, i), p(&a.out, i)).map_err(|e| SrusError::io(p(&src, i), e))?;
            }
            Ok(reports.len())
        })
        .collect::<Result<Vec<_>>>()?;
    let out_manifest = DatasetManifest {
        clutter_filtered: true,
        ..manifest
    };
    out_manifest.save(&a.out)?;
    write_json(
        &a.out.join("filter.json"),
        &FilterEcho {
            source: &src,
            rule: filt.rule_name(),
            blocks_per_stack: blocks.first().copied().unwrap_or(0),
            config: cfg.to_json(),
        },
    )?;
    println!(
        "filtered {} stacks ({} blocks each, lower cutoff `{}`) into {}",
        out_manifest.count,
        blocks.first().copied().unwrap_or(0),
        filt.rule_name(),
        a.out.display()
    );
    Ok(())
}

fn train_cmd(cli: &Cli, a: &crate::TrainArgs) -> Result<()> {
    let mut cfg = resolve(&a.cfg, cli.seed)?;
    if let Some(e) = a.epochs {
        cfg.optim.epochs = e;
    }
    cfg.validate()?;
    let dataset = required(&a.dataset, &cfg.paths.dataset, "--dataset")?;
    let out = required(&a.out, &cfg.paths.checkpoint, "--out")?;
    let manifest = DatasetManifest::load(&dataset)?;
    check_grid(&manifest.grid(), &cfg.grid)?;
    if cfg.net.m > manifest.frames_per_stack {
        return Err(SrusError::config(format!(
            "config net.m={} but the dataset has {} frames per stack",
            cfg.net.m, manifest.frames_per_stack
        )));
    }
    let (_, samples) = load_samples(&dataset, cfg.net.m, &cfg.filter)?;
    let log_path = a.log.clone().unwrap_or_else(|| out.with_extension("log.jsonl"));
    create_parent(&out)?;
    create_parent(&log_path)?;
    let file = fs::File::create(&log_path).map_err(|e| SrusError::io(&log_path, e))?;
    let mut log = std::io::BufWriter::new(file);
    let (params, records) = train(&samples, &cfg.net, &cfg.train_config(), &mut log)?;
    {
        use std::io::Write;
        writeln!(log, "{}", serde_json::json!({ "config": cfg.to_json() }))
            .and_then(|_| log.flush())
            .map_err(|e| SrusError::io(&log_path, e))?;
    }
    save_checkpoint(&out, &params)?;
    let (first, last) = (records.first().expect("epochs >= 1"), records.last().expect("epochs >= 1"));
    println!(
        "trained {} epochs on {} samples: loss {:.5} -> {:.5} (detection {:.5} -> {:.5})",
        records.len(),
        samples.len(),
        first.loss,
        last.loss,
        first.loss_detect,
        last.loss_detect
    );
    println!("checkpoint: {}", out.display());
    println!("log: {}", log_path.display());
    Ok(())
}

fn check_grid(dataset: &GridSpec, config: &GridSpec) -> Result<()> {
    if dataset != config {
        let show = |g: &GridSpec| {
            format!(
                "{}x{} px, pitch {} um, K={}",
                g.height_px, g.width_px, g.pitch_um, g.upsample_k
            )
        };
        return Err(SrusError::config(format!(
            "dataset grid ({}) differs from config grid ({})",
            show(dataset),
            show(config)
        )));
    }
    Ok(())
}

/// Grid and filtering state for a stack file: its dataset manifest when the
/// stack sits in a dataset directory, otherwise the config.
fn stack_context(stack: &Path, cfg: &PipelineConfig) -> Result<(GridSpec, bool)> {
    let dir = stack.parent().unwrap_or(Path::new("."));
    if dir.join(MANIFEST_NAME).exists() {
        let m = DatasetManifest::load(dir)?;
        Ok((m.grid(), m.clutter_filtered))
    } else {
        Ok((cfg.grid, false))
    }
}

fn infer(cli: &Cli, a: &crate::InferArgs) -> Result<()> {
    let cfg = resolve(&a.cfg, cli.seed)?;
    let ckpt = required(&a.checkpoint, &cfg.paths.checkpoint, "--checkpoint")?;
    let params = load_checkpoint(&ckpt)?;
    let mut form = cfg.form_config();
    if let Some(t) = a.threshold {
        if !(0.0..=1.0).contains(&t) {
            return Err(SrusError::config(format!("threshold must be in [0, 1], got {t}")));
        }
        form.threshold = t;
    }
    let echo = cfg.to_json();
    let mut jobs: Vec<(PathBuf, PathBuf, GridSpec, bool)> = Vec::new();
    if let Some(stack) = &a.stack {
        let (grid, filtered) = stack_context(stack, &cfg)?;
        create_parent(&a.out)?;
        jobs.push((stack.clone(), a.out.clone(), grid, filtered));
    } else if let Some(dir) = &a.dataset {
        let m = DatasetManifest::load(dir)?;
        fs::create_dir_all(&a.out).map_err(|e| SrusError::io(&a.out, e))?;
        for rec in &m.stacks {
            let out = a.out.join(format!("stack_{:06}.png", rec.index));
            jobs.push((stack_path(dir, rec.index), out, m.grid(), m.clutter_filtered));
        }
    }
    let mut ms = Vec::with_capacity(jobs.len());
    let mut total_counts = 0.0;
    for (stack_file, out, grid, filtered) in &jobs {
        let stack = read_iqf(stack_file, grid)?;
        let job_form = FormConfig {
            apply_filter: !filtered,
            ..form.clone()
        };
        let res = form_srus(&stack, &params, &job_form)?;
        let side = write_srus_outputs(out, &res, &job_form, Some(&ckpt), echo.clone())?;
        ms.push(side.ms_per_frame);
        total_counts += side.total_counts;
        if jobs.len() == 1 {
            println!(
                "{}: {} windows, {} localizations, {}x{} image",
                out.display(),
                side.windows.len(),
                side.total_counts,
                side.image_height,
                side.image_width
            );
        }
    }
    let mean_ms = ms.iter().sum::<f64>() / ms.len().max(1) as f64;
    if jobs.len() > 1 {
        println!(
            "formed {} images into {} ({} localizations)",
            jobs.len(),
            a.out.display(),
            total_counts
        );
    }
    println!("inference: {mean_ms:.3} ms/frame (network and decoding, this machine)");
    Ok(())
}

/// Predictions or truth keyed by stack index (directories) or unkeyed (files).
fn load_points(path: &Path, truth: bool) -> Result<Vec<(Option<usize>, PointSet)>> {
    if path.is_dir() {
        if truth {
            let m = DatasetManifest::load(path)?;
            return m
                .stacks
                .iter()
                .map(|r| Ok((Some(r.index), read_json(&truth_path(path, r.index))?)))
                .collect();
        }
        let mut out = Vec::new();
        for entry in fs::read_dir(path).map_err(|e| SrusError::io(path, e))? {
            let p = entry.map_err(|e| SrusError::io(path, e))?.path();
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or_default();
            let idx = name
                .strip_prefix("stack_")
                .and_then(|r| r.strip_suffix(".json"))
                .and_then(|r| r.parse::<usize>().ok());
            if let Some(i) = idx {
                out.push((Some(i), read_prediction_file(&p)?));
            }
        }
        out.sort_by_key(|e| e.0);
        if out.is_empty() {
            return Err(SrusError::input(format!("no stack_NNNNNN.json sidecars in {}", path.display())));
        }
        return Ok(out);
    }
    Ok(vec![(None, read_prediction_file(path)?)])
}

/// A sidecar's predictions, or a bare point set.
fn read_prediction_file(path: &Path) -> Result<PointSet> {
    let v: serde_json::Value = read_json(path)?;
    let v = match v.get("predictions") {
        Some(p) => p.clone(),
        None => v,
    };
    serde_json::from_value(v).map_err(|e| SrusError::json(path, e))
}

fn score_pair(pred: &Path, truth: &Path, radius: f64) -> Result<(Tally, usize)> {
    let preds = load_points(pred, false)?;
    let truths = load_points(truth, true)?;
    let mut tally = Tally::default();
    let mut frames = 0;
    for (key, p) in &preds {
        let t = match key {
            None if truths.len() == 1 && truths[0].0.is_none() => &truths[0].1,
            Some(i) => truths
                .iter()
                .find(|t| t.0 == Some(*i))
                .map(|t| &t.1)
                .ok_or_else(|| SrusError::input(format!("no ground truth for stack {i} in {}", truth.display())))?,
            None => {
                return Err(SrusError::config(
                    "pair a prediction file with a truth file, or a prediction directory with a dataset",
                ))
            }
        };
        let (t_stack, f) = score_point_sets(p, t, radius)?;
        tally.tp += t_stack.tp;
        tally.fp += t_stack.fp;
        tally.fn_ += t_stack.fn_;
        tally.distances.extend(t_stack.distances);
        frames += f;
    }
    if frames == 0 {
        return Err(SrusError::input(format!(
            "{} and {} share no frames",
            pred.display(),
            truth.display()
        )));
    }
    Ok((tally, frames))
}

fn eval(cli: &Cli, a: &crate::EvalArgs) -> Result<()> {
    let cfg = resolve(&a.cfg, cli.seed)?;
    if a.pred.len() != a.truth.len() {
        return Err(SrusError::config(format!(
            "{} --pred but {} --truth arguments",
            a.pred.len(),
            a.truth.len()
        )));
    }
    let radius = a.radius.unwrap_or(cfg.eval.radius_um);
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(SrusError::config("radius must be positive"));
    }
    let mut sets = Vec::with_capacity(a.pred.len());
    for (p, t) in a.pred.iter().zip(&a.truth) {
        let (tally, frames) = score_pair(p, t, radius)?;
        sets.push(SetReport::new(p.display().to_string(), &tally, frames));
    }
    let echo = serde_json::json!({
        "radius_um": radius,
        "pred": a.pred,
        "truth": a.truth,
        "config": cfg.to_json(),
    });
    let report = MetricsReport::new(sets, echo)?;
    create_parent(&a.out)?;
    write_json(&a.out, &report)?;
    let loc = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.2} um"));
    for s in &report.per_set {
        println!(
            "{}: F1 {:.4} P {:.4} R {:.4} loc {} (tp {} fp {} fn {}, {} frames)",
            s.name,
            s.metrics.f1,
            s.metrics.precision,
            s.metrics.recall,
            loc(s.metrics.mean_loc_error_um),
            s.tp,
            s.fp,
            s.fn_,
            s.frames
        );
    }
    let ag = &report.aggregate;
    println!(
        "aggregate over {} sets: F1 {:.4} +/- {:.4}, loc {}",
        ag.n_sets,
        ag.f1.mean,
        ag.f1.std,
        ag.mean_loc_error_um
            .map_or("n/a".to_string(), |m| format!("{:.2} +/- {:.2} um", m.mean, m.std))
    );
    println!("report: {}", a.out.display());
    Ok(())
}

fn render(a: &crate::RenderArgs) -> Result<()> {
    let is_json = a.input.extension().is_some_and(|e| e == "json");
    let img = if is_json {
        let side: SrusSidecar = read_json(&a.input)?;
        let dir = a.input.parent().unwrap_or(Path::new("."));
        let png = if a.enhanced { &side.enhanced_png } else { &side.raw_png };
        let png = dir.join(png.file_name().ok_or_else(|| SrusError::format(&a.input, "image path is empty"))?);
        let levels = read_png16(&png)?;
        let expect = (side.k * side.grid.height_px, side.k * side.grid.width_px);
        if levels.dim() != expect {
            return Err(SrusError::format(
                &png,
                format!("image is {:?} but the sidecar grid implies {:?}", levels.dim(), expect),
            ));
        }
        let scale = if a.enhanced { 1.0 } else { side.raw_scale };
        levels.mapv(|v| v as f64 * scale)
    } else {
        if a.enhanced {
            return Err(SrusError::config("--enhanced needs a sidecar JSON input"));
        }
        read_png16(&a.input)?.mapv(f64::from)
    };
    let opts = RenderOptions {
        bits: a.bits,
        log: !a.no_log,
        colormap: StrategySpec::named(&a.colormap),
    };
    create_parent(&a.out)?;
    render_image(&img, &opts, &a.out)?;
    let (h, w) = img.dim();
    println!(
        "rendered {}x{} {}-bit {} image ({}) to {}",
        h,
        w,
        opts.bits,
        a.colormap,
        if opts.log { "log" } else { "linear" },
        a.out.display()
    );
    Ok(())
}
