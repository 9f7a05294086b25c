use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use akhcrnet_core::checkpoint::{load_checkpoint, save_checkpoint};
use akhcrnet_core::dataset::{
    filter_blank, read_index, scan_dataset, split, write_index, DatasetIndex, Split, DEFAULT_BLANK_THRESHOLD,
    DEFAULT_VAL_FRACTION,
};
use akhcrnet_core::metrics::{emit_report_csv, precision_recall_f1};
use akhcrnet_core::objective::DEFAULT_LAMBDA;
use akhcrnet_core::optim::LrSchedule;
use akhcrnet_core::preprocess::load_and_preprocess;
use akhcrnet_core::synth::synth_dataset;
use akhcrnet_core::train::{
    evaluate, model_from_checkpoint, EpochRecord, TrainConfig, Trainer, DEFAULT_BATCH_SIZE, DEFAULT_PREFETCH_DEPTH,
};
use akhcrnet_core::{Error, Result};

use crate::config::{resolve, ConfigFile, EffectiveConfig};
use crate::{DataArgs, EvalArgs, PredictArgs, SynthArgs, TrainArgs};

const DATA_KEYS: &[&str] = &[
    "data",
    "index",
    "seed",
    "val_fraction",
    "blank_threshold",
    "batch_size",
    "prefetch_depth",
];
const TRAIN_KEYS: &[&str] = &["schedule", "lambda"];

pub fn synth(a: &SynthArgs) -> Result<()> {
    let written = synth_dataset(&a.out, a.classes, a.per_class, a.seed)?;
    println!(
        "wrote {} images ({} classes x {}) to {}",
        written.len(),
        a.classes,
        a.per_class,
        a.out.display()
    );
    Ok(())
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Settings common to every command that reads a split.
struct DataSettings {
    index: DatasetIndex,
    batch_size: usize,
    prefetch_depth: usize,
    seed: u64,
}

fn load_data(a: &DataArgs, file: &ConfigFile, eff: &mut EffectiveConfig) -> Result<DataSettings> {
    let seed = resolve(a.seed, file, "seed", 0)?;
    let batch_size = resolve(a.batch_size, file, "batch_size", DEFAULT_BATCH_SIZE)?;
    let prefetch_depth = resolve(a.prefetch_depth, file, "prefetch_depth", DEFAULT_PREFETCH_DEPTH)?;
    let index_path = a.index.clone().or(file.get("index")?);
    let data_root = a.data.clone().or(file.get("data")?);
    let index = match (index_path, data_root) {
        (Some(path), _) => {
            eff.set("index", path.display());
            let index = read_index(&path)?;
            if index.entries.iter().any(|e| e.split.is_none()) {
                return Err(Error::Config(format!("index {} has unsplit entries", path.display())));
            }
            index
        }
        (None, Some(root)) => {
            let val_fraction = resolve(a.val_fraction, file, "val_fraction", DEFAULT_VAL_FRACTION)?;
            let threshold = resolve(a.blank_threshold, file, "blank_threshold", DEFAULT_BLANK_THRESHOLD)?;
            eff.set("data", root.display());
            eff.set("val_fraction", val_fraction);
            eff.set("blank_threshold", threshold);
            let scanned = scan_dataset(&root)?;
            let (filtered, removed) = filter_blank(scanned, threshold)?;
            if !removed.is_empty() {
                println!("removed {} blank or unreadable images", removed.len());
            }
            split(filtered, val_fraction, seed)?
        }
        (None, None) => return Err(Error::Usage("one of --data or --index is required".into())),
    };
    eff.set("seed", seed);
    eff.set("batch_size", batch_size);
    eff.set("prefetch_depth", prefetch_depth);
    println!(
        "{} classes, {} train / {} val images",
        index.num_classes(),
        index.count(Split::Train),
        index.count(Split::Val)
    );
    Ok(DataSettings {
        index,
        batch_size,
        prefetch_depth,
        seed,
    })
}

fn load_config(path: Option<&Path>, extra_keys: &[&str]) -> Result<ConfigFile> {
    let file = match path {
        Some(p) => ConfigFile::load(p)?,
        None => ConfigFile::default(),
    };
    let known: Vec<&str> = DATA_KEYS.iter().chain(extra_keys).copied().collect();
    file.check_keys(&known)?;
    Ok(file)
}

fn curves_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,lr,train_loss,val_loss,val_accuracy\n");
    for r in history {
        writeln!(
            out,
            "{},{},{:.6},{:.6},{:.6}",
            r.epoch, r.lr, r.train_loss, r.val_loss, r.val_accuracy
        )
        .expect("writing to a String");
    }
    out
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn phase_summary(schedule: &LrSchedule, history: &[EpochRecord]) -> String {
    let mut out = String::from("phase  epochs  lr        train_loss  val_loss  val_accuracy\n");
    let mut first = 1;
    for (i, p) in schedule.phases().iter().enumerate() {
        let last = first + p.epochs - 1;
        if let Some(r) = history.iter().rev().find(|r| r.epoch >= first && r.epoch <= last) {
            writeln!(
                out,
                "{:<6} {:<7} {:<9} {:<11.5} {:<9.5} {:.4}",
                i + 1,
                format!("{first}-{last}"),
                p.lr,
                r.train_loss,
                r.val_loss,
                r.val_accuracy
            )
            .expect("writing to a String");
        }
        first = last + 1;
    }
    out
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let file = load_config(a.data.config.as_deref(), TRAIN_KEYS)?;
    let mut eff = EffectiveConfig::default();
    let data = load_data(&a.data, &file, &mut eff)?;
    let schedule: LrSchedule = match a.schedule.as_deref() {
        Some(s) => s.parse()?,
        None => file.get("schedule")?.unwrap_or_default(),
    };
    let lambda = resolve(a.lambda, &file, "lambda", DEFAULT_LAMBDA)?;
    eff.set("out", a.out.display());
    eff.set("schedule", &schedule);
    eff.set("epochs", schedule.total_epochs());
    eff.set("lambda", lambda);
    eff.set("dropout_rate", 0.5);
    if let Some(r) = &a.resume {
        eff.set("resume", r.display());
    }

    create_dir(&a.out)?;
    eff.write(&a.out)?;
    write_index(&data.index, &a.out.join("index.tsv"))?;

    let config = TrainConfig {
        seed: data.seed,
        batch_size: data.batch_size,
        schedule: schedule.clone(),
        lambda,
        prefetch_depth: data.prefetch_depth,
    };
    let mut trainer = match &a.resume {
        Some(path) => {
            let ck = load_checkpoint(path)?;
            println!("resuming after epoch {}", ck.epoch);
            Trainer::from_checkpoint(ck, data.index, config)?
        }
        None => Trainer::new(data.index, config)?,
    };

    let total = schedule.total_epochs();
    let stop = a.stop_after.unwrap_or(total).min(total);
    let mut best = trainer.history.iter().map(|r| r.val_accuracy).fold(f64::NEG_INFINITY, f64::max);
    let mut timing = String::from("epoch,wall_seconds\n");
    write_file(&a.out.join("curves.csv"), &curves_csv(&trainer.history))?;
    while trainer.epochs_done() < stop {
        let started = Instant::now();
        let r = trainer.run_epoch()?;
        let secs = started.elapsed().as_secs_f64();
        println!(
            "epoch {}/{} lr {} train_loss {:.5} val_loss {:.5} val_accuracy {:.4} ({secs:.1}s)",
            r.epoch, total, r.lr, r.train_loss, r.val_loss, r.val_accuracy
        );
        writeln!(timing, "{},{secs:.3}", r.epoch).expect("writing to a String");
        write_file(&a.out.join("curves.csv"), &curves_csv(&trainer.history))?;
        write_file(&a.out.join("timing.csv"), &timing)?;
        if r.val_accuracy > best {
            best = r.val_accuracy;
            save_checkpoint(&a.out.join("best.ckpt"), &trainer.checkpoint())?;
        }
    }
    save_checkpoint(&a.out.join("final.ckpt"), &trainer.checkpoint())?;
    print!("{}", phase_summary(&schedule, &trainer.history));
    Ok(())
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let file = load_config(a.data.config.as_deref(), &[])?;
    let mut eff = EffectiveConfig::default();
    let data = load_data(&a.data, &file, &mut eff)?;
    eff.set("checkpoint", a.checkpoint.display());
    eff.set("out", a.out.display());
    let ck = load_checkpoint(&a.checkpoint)?;
    if ck.class_names != data.index.class_names {
        return Err(Error::Config("checkpoint classes differ from the dataset classes".into()));
    }
    let model = model_from_checkpoint(&ck)?;
    let result = evaluate(&model, &data.index, Split::Val, data.batch_size, data.prefetch_depth)?;
    let report = precision_recall_f1(&result.confusion);

    create_dir(&a.out)?;
    eff.write(&a.out)?;
    emit_report_csv(
        &report,
        &result.confusion,
        &ck.class_names,
        &a.out.join("report.csv"),
        &a.out.join("confusion.csv"),
    )?;
    let degenerate: Vec<&str> = report
        .classes
        .iter()
        .zip(&ck.class_names)
        .filter(|(m, _)| m.degenerate)
        .map(|(_, n)| n.as_str())
        .collect();
    if !degenerate.is_empty() {
        println!("degenerate classes (zero denominator): {}", degenerate.join(" "));
    }
    println!(
        "accuracy {:.6} macro precision {:.4} recall {:.4} f1 {:.4} over {} images",
        report.accuracy, report.macro_precision, report.macro_recall, report.macro_f1, report.total
    );
    Ok(())
}

pub fn predict(a: &PredictArgs) -> Result<()> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let model = model_from_checkpoint(&ck)?;
    let image = load_and_preprocess(&a.image)?;
    for (rank, (class, p)) in model.predict(image.tensor(), a.topk)?.into_iter().enumerate() {
        println!("{},{},{p:.6}", rank + 1, ck.class_names[class]);
    }
    Ok(())
}
