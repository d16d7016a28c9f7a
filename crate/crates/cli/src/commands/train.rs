use std::fs::OpenOptions;
use std::path::Path;

use mitodiff::classifier::{evaluate, split_by_vertical_axis, train_classifier, Metrics};
use mitodiff::data::PatchRecord;
use mitodiff::diffusion::{DiffusionTrainer, GaussianPrior};
use mitodiff::ImagePatch;
use serde::Serialize;

use super::{io_err, load_dataset, require_file, write_json, Reporter, CLF_CHECKPOINT, CLF_LOSS, CLF_METRICS, DPM_CHECKPOINT, DPM_LOSS};
use crate::config::RunConfig;
use crate::error::{CliError, Result};

#[derive(Clone, Debug, Serialize)]
pub struct DpmReport {
    pub start_step: usize,
    pub final_step: usize,
    pub last_loss: Option<f64>,
}

/// Trains (or resumes) the conditional denoiser on a dataset directory.
/// Mean loss over each `dpm_log_every` window is appended to the loss CSV.
pub fn train_dpm(
    cfg: &RunConfig,
    data: &Path,
    out: &Path,
    resume: Option<&Path>,
    log: Reporter,
) -> Result<DpmReport> {
    let ds = load_dataset(data)?;
    if let Some(r) = resume {
        require_file(r, "checkpoint")?;
    }
    let pairs = ds.labeled_images()?;
    let mut trainer = match resume {
        Some(path) => {
            let mut t = DiffusionTrainer::load(path)?;
            t.set_total_steps(cfg.dpm_steps);
            t
        }
        None => {
            let images: Vec<ImagePatch> = pairs.iter().map(|(p, _)| p.clone()).collect();
            DiffusionTrainer::new(
                cfg.denoiser(),
                GaussianPrior::fit(&images)?,
                cfg.schedule()?,
                cfg.side,
                cfg.dpm_train(),
            )?
        }
    };
    trainer.check_data(&pairs)?;
    let start_step = trainer.step_count();
    log.say(format!(
        "training denoiser on {} patches, steps {}..{}",
        pairs.len(),
        start_step,
        cfg.dpm_steps
    ));

    let loss_path = out.join(DPM_LOSS);
    let fresh = !(resume.is_some() && loss_path.is_file());
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(!fresh)
        .truncate(fresh)
        .open(&loss_path)
        .map_err(|e| io_err(&loss_path, e))?;
    let mut csv = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    if fresh {
        csv.write_record(["step", "loss"])?;
    }

    let ckpt_path = out.join(DPM_CHECKPOINT);
    let (mut window, mut count, mut last) = (0.0, 0usize, None);
    while trainer.step_count() < cfg.dpm_steps {
        let loss = trainer.train_step(&pairs)?;
        window += loss;
        count += 1;
        let step = trainer.step_count();
        if step % cfg.dpm_log_every == 0 || step == cfg.dpm_steps {
            let mean = window / count as f64;
            csv.write_record([step.to_string(), mean.to_string()])?;
            csv.flush().map_err(|e| io_err(&loss_path, e))?;
            log.say(format!("step {step} loss {mean:.5}"));
            last = Some(mean);
            window = 0.0;
            count = 0;
        }
        if cfg.dpm_checkpoint_every > 0 && step % cfg.dpm_checkpoint_every == 0 {
            trainer.save(&ckpt_path)?;
        }
    }
    trainer.save(&ckpt_path)?;
    Ok(DpmReport { start_step, final_step: trainer.step_count(), last_loss: last })
}

#[derive(Clone, Debug, Serialize)]
pub struct ClfReport {
    pub train_patches: usize,
    pub val_patches: usize,
    pub metrics: Metrics,
}

fn pairs(records: &[PatchRecord]) -> Result<Vec<(ImagePatch, f32)>> {
    records
        .iter()
        .map(|r| {
            r.image
                .clone()
                .map(|i| (i, r.label as f32))
                .ok_or_else(|| CliError::runtime(format!("{} has no image", r.patch_id)))
        })
        .collect()
}

/// Trains the classifier ensemble with the spatial train/validation split
/// and reports validation metrics at threshold 0.5.
pub fn train_clf(cfg: &RunConfig, data: &Path, out: &Path, log: Reporter) -> Result<ClfReport> {
    let ds = load_dataset(data)?;
    let (train_recs, val_recs) = split_by_vertical_axis(&ds.records, &ds.heights(), cfg.clf_train_fraction)?;
    let (train, val) = (pairs(&train_recs)?, pairs(&val_recs)?);
    log.say(format!("training {} classifier(s) on {} / {} patches", cfg.clf_seeds.len(), train.len(), val.len()));

    let (ensemble, curves) = train_classifier(&train, &val, &cfg.classifier(), |c| {
        log.say(format!(
            "member seed {}: best step {} val loss {:.4}",
            c.seed,
            c.best_step,
            c.val_loss.iter().cloned().fold(f64::INFINITY, f64::min)
        ))
    })?;
    ensemble.save(out.join(CLF_CHECKPOINT))?;

    let loss_path = out.join(CLF_LOSS);
    let mut csv = csv::Writer::from_path(&loss_path)?;
    csv.write_record(["seed", "step", "train_loss", "val_loss"])?;
    for c in &curves {
        for ((step, tl), vl) in c.steps.iter().zip(&c.train_loss).zip(&c.val_loss) {
            csv.write_record([c.seed.to_string(), step.to_string(), tl.to_string(), vl.to_string()])?;
        }
    }
    csv.flush().map_err(|e| io_err(&loss_path, e))?;

    let metrics = evaluate(&ensemble, &val, 0.5)?;
    write_json(&out.join(CLF_METRICS), &metrics)?;
    log.say(format!("validation accuracy {:.3}, F1 {:.3}", metrics.accuracy, metrics.f1));
    Ok(ClfReport { train_patches: train.len(), val_patches: val.len(), metrics })
}
