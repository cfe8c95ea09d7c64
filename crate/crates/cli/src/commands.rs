use std::fs;
use std::io::Write as _;
use std::path::Path;

use editloc::checkpoint::{file_sha256, load_diffusion, load_segmentation, resolve, save_diffusion};
use editloc::dataset::{build_dataset, Manifest, Split};
use editloc::evaluation::{
    compare_baseline, evaluate_split, original_histogram, run_ablation, write_overlays, FP_THRESHOLDS,
};
use editloc::features::{build_features, extract_features, FeatureCache, Variant};
use editloc::image::{hstack_panels, Image};
use editloc::training::{data_fingerprint, train_stage1, train_stage2_finetune, LogRecord, BEST_CHECKPOINT};
use editloc::{Error, Result};

use crate::config::RunConfig;
use crate::stamp::{stamp_path, RunStamp};
use crate::{Command, Common};

pub const DIFFUSION_CHECKPOINT: &str = "diffusion.ckpt";
pub const DIFFUSION_LOG: &str = "diffusion_log.jsonl";

/// Loads the config, then applies subcommand flags on top of `--set`.
fn load_config(common: &Common, flags: Vec<String>) -> Result<RunConfig> {
    let mut overrides = common.overrides.clone();
    overrides.extend(flags);
    let mut cfg = RunConfig::load(common.config.as_deref(), &overrides)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
        cfg.resolve();
    }
    Ok(cfg)
}

fn flag<T: std::fmt::Display>(key: &str, value: Option<T>) -> Option<String> {
    value.map(|v| format!("{key}={v}"))
}

fn quoted(key: &str, value: Option<impl std::fmt::Display>) -> Option<String> {
    value.map(|v| format!("{key}=\"{v}\""))
}

fn print_record(label: &str, r: &LogRecord) {
    match r {
        LogRecord::Step {
            step, lr, total_loss, ..
        } if step % 50 == 0 => {
            eprintln!("{label}step {step:>6}  lr {lr:.2e}  loss {total_loss:.5}");
        }
        LogRecord::Step { .. } => {}
        LogRecord::Epoch {
            epoch,
            train_seg_loss,
            val_psnr,
            val_ssim,
            best,
            ..
        } => {
            let fmt = |v: &Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.4}"));
            eprintln!(
                "{label}epoch {epoch:>3}  train loss {train_seg_loss:.5}  val PSNR {}  val SSIM {}{}",
                fmt(val_psnr),
                fmt(val_ssim),
                if *best { "  (best)" } else { "" }
            );
        }
    }
}

/// Loads the dataset and feature cache, sizes the networks to the dataset
/// canvas and records both inputs.
fn open_inputs(
    stamp: &mut RunStamp,
    cfg: &mut RunConfig,
    manifest_path: &Path,
    features: &Path,
) -> Result<(Manifest, FeatureCache)> {
    let manifest = Manifest::load(manifest_path)?;
    let cache = FeatureCache::open(features)?;
    cfg.follow_dataset(&manifest);
    stamp.config = cfg.clone();
    stamp.dataset(manifest_path, &manifest);
    stamp.fingerprint("features", features, data_fingerprint(&manifest, &cache));
    Ok((manifest, cache))
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::BuildDataset {
            out,
            n_pairs,
            edited_fraction,
            size,
            common,
        } => {
            let flags = [
                flag("dataset.n_pairs", n_pairs),
                flag("dataset.edited_fraction", edited_fraction),
                flag("dataset.canvas_size", size),
            ];
            let cfg = load_config(&common, flags.into_iter().flatten().collect())?;
            let stamp = RunStamp::new("build-dataset", &cfg);
            let manifest = build_dataset(&cfg.dataset, &out)?;
            let edited = manifest.pairs.iter().filter(|p| p.is_edited).count();
            for split in [Split::Train, Split::Val, Split::Test] {
                eprintln!("{split:<5} {} pairs", manifest.pairs_in(split).len());
            }
            eprintln!(
                "{} pairs ({edited} edited) written to {}",
                manifest.pairs.len(),
                out.display()
            );
            stamp.write(&stamp_path(&out, true))
        }

        Command::TrainDiffusion {
            manifest,
            out,
            steps,
            common,
        } => {
            let mut cfg = load_config(&common, flag("diffusion.steps", steps).into_iter().collect())?;
            let manifest_path = manifest;
            let manifest = Manifest::load(&manifest_path)?;
            cfg.follow_dataset(&manifest);
            let mut stamp = RunStamp::new("train-diffusion", &cfg);
            stamp.dataset(&manifest_path, &manifest);
            let images = manifest
                .pairs_in(Split::Train)
                .iter()
                .map(|rec| Image::load_png(manifest.root.join(&rec.original), 3))
                .collect::<Result<Vec<_>>>()?;
            eprintln!("training the denoiser on {} train-split originals", images.len());
            fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            let log_path = out.join(DIFFUSION_LOG);
            let mut log = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
            let mut write_err = None;
            let (model, _) = editloc::diffusion::train_toy_diffusion(&images, &cfg.diffusion, |rec| {
                if rec.step % 50 == 0 {
                    eprintln!("step {:>6}  lr {:.2e}  loss {:.5}", rec.step, rec.lr, rec.loss);
                }
                let line = serde_json::to_string(rec).expect("record serializes");
                if let Err(e) = writeln!(log, "{line}") {
                    write_err.get_or_insert(e);
                }
            })?;
            if let Some(e) = write_err {
                return Err(Error::io(&log_path, e));
            }
            let ckpt = out.join(DIFFUSION_CHECKPOINT);
            save_diffusion(&model, &ckpt)?;
            eprintln!("wrote {}", ckpt.display());
            stamp.write(&stamp_path(&out, true))
        }

        Command::ExtractFeatures {
            manifest,
            checkpoint,
            out,
            variants,
            sides,
            splits,
            n_steps,
            common,
        } => {
            let mut cfg = load_config(&common, flag("features.n_steps", n_steps).into_iter().collect())?;
            if !variants.is_empty() {
                cfg.features.variants = parse_variants(&variants)?;
            }
            if !sides.is_empty() {
                cfg.features.sides = sides;
            }
            if !splits.is_empty() {
                cfg.features.splits = splits;
            }
            let mut stamp = RunStamp::new("extract-features", &cfg);
            let manifest_path = manifest;
            let manifest = Manifest::load(&manifest_path)?;
            stamp.dataset(&manifest_path, &manifest);
            let ckpt = resolve(&checkpoint, DIFFUSION_CHECKPOINT);
            stamp.file("diffusion", &ckpt)?;
            let model = load_diffusion(&ckpt)?;
            let sha = file_sha256(&ckpt)?;
            let cache = extract_features(&manifest, &model, &cfg.features, &sha, &out, |done, total| {
                eprint!("\rinverted {done}/{total} images");
                if done == total {
                    eprintln!();
                }
            })?;
            eprintln!("{} feature stacks in {}", cache.index.entries.len(), out.display());
            stamp.write(&stamp_path(&out, true))
        }

        Command::Train {
            manifest,
            features,
            out,
            variant,
            epochs,
            resume,
            common,
        } => {
            let flags = [quoted("train.variant", variant), flag("train.epochs", epochs)];
            let mut cfg = load_config(&common, flags.into_iter().flatten().collect())?;
            let mut stamp = RunStamp::new("train", &cfg);
            let (manifest, cache) = open_inputs(&mut stamp, &mut cfg, &manifest, &features)?;
            let outcome = train_stage1(&manifest, &cache, &cfg.model, &cfg.train, &out, resume, |r| {
                print_record("", r)
            })?;
            report_fit(&outcome.best, outcome.best_val_ssim);
            stamp.write(&stamp_path(&out, true))
        }

        Command::Finetune {
            from,
            manifest,
            features,
            out,
            epochs,
            resume,
            common,
        } => {
            let mut cfg = load_config(&common, flag("finetune.epochs", epochs).into_iter().collect())?;
            let ckpt = resolve(&from, BEST_CHECKPOINT);
            cfg.finetune.variant = load_segmentation(&ckpt)?.state.variant;
            let mut stamp = RunStamp::new("finetune", &cfg);
            stamp.file("checkpoint", &ckpt)?;
            let (manifest, cache) = open_inputs(&mut stamp, &mut cfg, &manifest, &features)?;
            let outcome = train_stage2_finetune(&ckpt, &manifest, &cache, &cfg.finetune, &out, resume, |r| {
                print_record("", r)
            })?;
            report_fit(&outcome.best, outcome.best_val_ssim);
            stamp.write(&stamp_path(&out, true))
        }

        Command::Eval {
            checkpoint,
            manifest,
            features,
            out,
            split,
            histogram,
            overlays,
            common,
        } => {
            let mut cfg = load_config(&common, quoted("eval.split", split).into_iter().collect())?;
            let split = cfg.eval.split;
            let mut stamp = RunStamp::new("eval", &cfg);
            let ckpt = resolve(&checkpoint, BEST_CHECKPOINT);
            stamp.file("checkpoint", &ckpt)?;
            let (manifest, cache) = open_inputs(&mut stamp, &mut cfg, &manifest, &features)?;
            let report = evaluate_split(&ckpt, &manifest, &cache, split)?;
            write_text(&out, &report.to_json())?;
            print!("{}", report.summary());
            if let Some(path) = &histogram {
                let hist = original_histogram(&ckpt, &manifest, &cache, split)?;
                write_text(path, &hist.to_csv())?;
                let (lo, hi) = hist.mode();
                println!("prediction mode on originals: [{lo:.2}, {hi:.2})");
                for t in FP_THRESHOLDS {
                    if let Some(rate) = hist.rate_above(t) {
                        println!("fraction of original-image pixels above {t}: {rate:.5}");
                    }
                }
            }
            if let Some(path) = &overlays {
                let rows = write_overlays(&ckpt, &manifest, &cache, split, cfg.eval.overlay_rows, path)?;
                eprintln!("wrote {rows} overlay rows to {}", path.display());
            }
            stamp.write(&stamp_path(&out, false))?;
            if !report.is_complete() {
                return Err(Error::Contract(format!(
                    "{} pairs of the {split} split have no feature stack",
                    report.missing.len()
                )));
            }
            Ok(())
        }

        Command::Predict {
            checkpoint,
            diffusion,
            image,
            out,
            variant,
            overlay,
            n_steps,
            common,
        } => {
            let cfg = load_config(&common, flag("features.n_steps", n_steps).into_iter().collect())?;
            let mut stamp = RunStamp::new("predict", &cfg);
            let ckpt = resolve(&checkpoint, BEST_CHECKPOINT);
            let diff = resolve(&diffusion, DIFFUSION_CHECKPOINT);
            stamp.file("checkpoint", &ckpt)?;
            stamp.file("diffusion", &diff)?;
            stamp.file("image", &image)?;
            let seg = load_segmentation(&ckpt)?;
            if let Some(v) = variant.filter(|&v| v != seg.state.variant) {
                return Err(Error::Config(format!(
                    "checkpoint was trained on {} but --variant is {v}",
                    seg.state.variant
                )));
            }
            let model = load_diffusion(&diff)?;
            let x = Image::load_png(&image, 3)?;
            let stack = build_features(&x, &model, seg.state.variant, cfg.features.n_steps)?;
            let mask = seg.model.forward(&stack)?;
            mask.save_png(&out)?;
            if let Some(path) = &overlay {
                hstack_panels(&[&x, &mask])?.save_png(path)?;
            }
            eprintln!(
                "mean prediction {:.4}, max {:.4}; wrote {}",
                mask.mean(),
                mask.data().iter().cloned().fold(0.0, f64::max),
                out.display()
            );
            stamp.write(&stamp_path(&out, false))
        }

        Command::Ablate {
            manifest,
            features,
            out,
            runs,
            split,
            epochs,
            baseline,
            common,
        } => {
            let flags = [quoted("eval.split", split), flag("train.epochs", epochs)];
            let mut cfg = load_config(&common, flags.into_iter().flatten().collect())?;
            let mut stamp = RunStamp::new("ablate", &cfg);
            let (manifest, cache) = open_inputs(&mut stamp, &mut cfg, &manifest, &features)?;
            let runs = runs.unwrap_or_else(|| {
                let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
                name.push(".runs");
                out.with_file_name(name)
            });
            let on_record = |label: &str, r: &LogRecord| print_record(&format!("[{label}] "), r);
            let table = if baseline {
                compare_baseline(
                    &manifest,
                    &cache,
                    &cfg.model,
                    &cfg.train,
                    cfg.eval.split,
                    &runs,
                    on_record,
                )?
            } else {
                run_ablation(
                    &manifest,
                    &cache,
                    &cfg.model,
                    &cfg.train,
                    cfg.eval.split,
                    &runs,
                    on_record,
                )?
            };
            write_text(&out, &table.to_csv())?;
            let md = table.to_markdown();
            write_text(&out.with_extension("md"), &md)?;
            print!("{md}");
            stamp.write(&stamp_path(&out, false))
        }
    }
}

fn parse_variants(names: &[String]) -> Result<Vec<Variant>> {
    if names.iter().any(|n| n == "all") {
        return Ok(Variant::ALL.to_vec());
    }
    names.iter().map(|n| n.parse()).collect()
}

fn report_fit(best: &Path, best_val_ssim: Option<f64>) {
    match best_val_ssim {
        Some(s) => eprintln!("best validation SSIM {s:.4}; checkpoint {}", best.display()),
        None => eprintln!("no validation split; checkpoint {}", best.display()),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
