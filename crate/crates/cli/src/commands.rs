use std::fs;
use std::path::Path;

use log::info;
use rayon::prelude::*;

use dil::dataio::{check_dataset, load_dataset, save_image, DatasetManifest, Sample};
use dil::gradcam::{cam_file_name, export_overlay, gradcam};
use dil::masking::gen_mask;
use dil::metrics::REPORT_TABLE_FILE;
use dil::models::{ArchConfig, Model, ModelKind};
use dil::synth::{write_synth_dataset, SynthConfig};
use dil::training::{evaluate, masked_inputs, split_dataset, train, with_jobs};
use dil::{Error, Result};

use crate::config::{Settings, SplitName};
use crate::Command;

/// Settings file written beside training outputs.
const CONFIG_FILE: &str = "config.txt";

pub fn run(command: Command) -> Result<()> {
    let (flags, action): (_, fn(&Settings) -> Result<()>) = match command {
        Command::Train(f) => (f, train_cmd),
        Command::Eval(f) => (f, eval_cmd),
        Command::Inpaint(f) => (f, inpaint_cmd),
        Command::Gradcam(f) => (f, gradcam_cmd),
        Command::MaskPreview(f) => (f, mask_preview_cmd),
        Command::DatasetCheck(f) => (f, dataset_check_cmd),
        Command::Synth(f) => (f, synth_cmd),
    };
    let s = flags.resolve()?;
    for (k, v) in s.entries() {
        info!("config {k}={v}");
    }
    s.validate()?;
    action(&s)
}

fn load_samples(s: &Settings) -> Result<Vec<Sample>> {
    let root = s.require_data()?;
    let manifest = DatasetManifest::load(root)?;
    info!("loading {} samples from {}", manifest.len(), root.display());
    load_dataset(&manifest, s.size())
}

/// Indices of the chosen split, drawn exactly as training draws them.
fn selected(s: &Settings, n: usize) -> Result<Vec<usize>> {
    if s.split == SplitName::All {
        return Ok((0..n).collect());
    }
    let split = split_dataset(n, s.fractions(), s.seed)?;
    Ok(match s.split {
        SplitName::Train => split.train,
        SplitName::Val => split.val,
        _ => split.test,
    })
}

fn load_model(s: &Settings) -> Result<Model<f32>> {
    let path = s.require_checkpoint()?;
    let model = Model::<f32>::load(path)?;
    info!("loaded {} from {}", model.manifest_line(), path.display());
    Ok(model)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn train_cmd(s: &Settings) -> Result<()> {
    let samples = load_samples(s)?;
    let mut model = Model::<f32>::new(s.model, ArchConfig::default(), s.seed)?;
    info!("model {}", model.manifest_line());
    create_dir(&s.out)?;
    write_text(&s.out.join(CONFIG_FILE), &s.to_text())?;
    let outcome = train(&mut model, &samples, &s.train_config(), &s.out)?;
    println!(
        "best_epoch={} best_val_mse={:.6} steps={} checkpoint={}",
        outcome.best_epoch,
        outcome.best_val_mse,
        outcome.steps,
        outcome.best_checkpoint.display()
    );
    Ok(())
}

fn eval_cmd(s: &Settings) -> Result<()> {
    let model = load_model(s)?;
    let extractor = match &s.lpips_checkpoint {
        Some(p) => Model::<f32>::load(p)?,
        None => Model::<f32>::new(ModelKind::Baseline, ArchConfig::default(), 0)?,
    };
    let samples = load_samples(s)?;
    let idx = selected(s, samples.len())?;
    let items: Vec<_> = idx.iter().map(|&i| (i as u64, &samples[i])).collect();
    let report = evaluate(&model, &items, &s.mask_spec(), &extractor, s.jobs)?;
    create_dir(&s.out)?;
    let kv = report.write(&s.out)?;
    print!("{}", report.to_table());
    info!("wrote {} and {}", kv.display(), s.out.join(REPORT_TABLE_FILE).display());
    Ok(())
}

fn inpaint_cmd(s: &Settings) -> Result<()> {
    let model = load_model(s)?;
    let samples = load_samples(s)?;
    let idx = selected(s, samples.len())?;
    let spec = s.mask_spec();
    create_dir(&s.out)?;
    let one = |&i: &usize| -> Result<()> {
        let sample = &samples[i];
        let (mask, rgb, depth) = masked_inputs(sample, &spec, i as u64)?;
        let out = model.inpaint(&rgb, Some(&depth))?;
        mask.save_png(&s.out.join(format!("{}_mask.png", sample.id)))?;
        save_image(&rgb, &s.out.join(format!("{}_masked.png", sample.id)))?;
        save_image(&out, &s.out.join(format!("{}_inpainted.png", sample.id)))
    };
    with_jobs(s.jobs, || idx.par_iter().try_for_each(one))??;
    println!("wrote {} reconstructions to {}", idx.len(), s.out.display());
    Ok(())
}

fn gradcam_cmd(s: &Settings) -> Result<()> {
    let model = load_model(s)?;
    let samples = load_samples(s)?;
    let idx = selected(s, samples.len())?;
    let spec = s.mask_spec();
    create_dir(&s.out)?;
    let one = |&i: &usize| -> Result<()> {
        let sample = &samples[i];
        let (_, rgb, depth) = masked_inputs(sample, &spec, i as u64)?;
        let cam = gradcam(&model, &rgb, Some(&depth), &sample.rgb, s.cam_target, s.cam_layer)?;
        let path = s.out.join(cam_file_name(&sample.id, model.kind, spec.kind));
        export_overlay(&cam, &rgb, &path)
    };
    with_jobs(s.jobs, || idx.par_iter().try_for_each(one))??;
    println!("wrote {} overlays to {}", idx.len(), s.out.display());
    Ok(())
}

fn mask_preview_cmd(s: &Settings) -> Result<()> {
    let mask = gen_mask(&s.mask_spec(), s.height, s.width, s.index)?;
    mask.save_png(&s.out)?;
    println!(
        "wrote {} mask ({:.4} occluded) to {}",
        s.mask,
        mask.occluded_fraction(),
        s.out.display()
    );
    Ok(())
}

fn dataset_check_cmd(s: &Settings) -> Result<()> {
    let root = s.require_data()?;
    let report = check_dataset(root)?;
    for e in &report.errors {
        eprintln!("{e}");
    }
    if !report.is_ok() {
        return Err(Error::Invalid(format!(
            "{}: {} of {} entries failed",
            root.display(),
            report.errors.len(),
            report.entries
        )));
    }
    println!("ok: {} entries in {}", report.entries, root.display());
    Ok(())
}

fn synth_cmd(s: &Settings) -> Result<()> {
    let cfg = SynthConfig {
        count: s.count,
        height: s.height,
        width: s.width,
        seed: s.seed,
    };
    let manifest = write_synth_dataset(&s.out, &cfg, s.depth_max)?;
    println!("wrote {} samples to {}", manifest.len(), s.out.display());
    Ok(())
}
