use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use rayon::prelude::*;

use airseg_core::airmetrics::{evaluate_pair, write_metrics_csv, EvalOptions};
use airseg_core::inferpost::{largest_component, predict_volume, threshold, Connectivity};
use airseg_core::medsegnet::MedSegModel;
use airseg_core::phantom::{generate_tree, PhantomSpec};
use airseg_core::prep::{clip_normalize_window, DatasetManifest, Split};
use airseg_core::train::{
    load_checkpoint, save_checkpoint, train_loop, CurveLog, OptimizerSection, TrainData, TrainState,
};
use airseg_core::volio::{
    atomic_write, list_nifti, read_nifti, volumetric_report, write_nifti, write_report_csv, AnyVolume, IntensityKind,
    MaskVolume, Volume,
};

use crate::config::RunConfig;

const IMAGES: &str = "images";
const LABELS: &str = "labels";
const TRUTH: &str = "truth";
pub const MANIFEST: &str = "manifest.csv";
pub const CURVES: &str = "curves.csv";
pub const BEST: &str = "best.mseg";
pub const LAST: &str = "last.mseg";

fn ensure_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))
}

fn write_resolved(cfg: &RunConfig, out: &Path) -> Result<()> {
    let mut text = serde_json::to_vec_pretty(cfg)?;
    text.push(b'\n');
    atomic_write(&out.join("config.resolved.json"), &text)?;
    Ok(())
}

fn nifti_name(id: &str) -> String {
    format!("{id}.nii.gz")
}

fn read_mask(path: &Path) -> Result<MaskVolume> {
    read_nifti(path)?
        .into_mask()
        .with_context(|| format!("{} is not a binary mask", path.display()))
}

fn read_intensity(path: &Path) -> Result<Volume> {
    match read_nifti(path)? {
        AnyVolume::Intensity(v) => Ok(v),
        AnyVolume::Mask(_) => bail!("{} holds a label mask, expected intensities", path.display()),
    }
}

/// Label file of `id` in `dir`, either compression.
fn find_label(dir: &Path, id: &str) -> Option<PathBuf> {
    [format!("{id}.nii.gz"), format!("{id}.nii")]
        .into_iter()
        .map(|n| dir.join(n))
        .find(|p| p.is_file())
}

pub fn phantom(cfg: &RunConfig, count: usize) -> Result<()> {
    ensure!(count >= 1, "--count must be >= 1");
    let out = cfg.out_dir()?;
    let specs: Vec<(String, PhantomSpec)> = (0..count)
        .map(|i| {
            let spec = PhantomSpec {
                seed: cfg.seed.wrapping_add(i as u64),
                ..cfg.phantom.clone()
            };
            (format!("phantom_{i:03}"), spec)
        })
        .collect();
    let truths = specs
        .par_iter()
        .map(|(id, spec)| generate_tree(spec).with_context(|| format!("phantom {id}")))
        .collect::<Result<Vec<_>>>()?;
    for d in [IMAGES, LABELS, TRUTH] {
        ensure_dir(&out.join(d))?;
    }
    for ((id, _), t) in specs.iter().zip(&truths) {
        write_nifti(&AnyVolume::Intensity(t.volume.clone()), &out.join(IMAGES).join(nifti_name(id)))?;
        write_nifti(&AnyVolume::Mask(t.mask.clone()), &out.join(LABELS).join(nifti_name(id)))?;
        t.write_json(&out.join(TRUTH).join(format!("{id}.json")))?;
    }
    write_resolved(cfg, out)?;
    let branches = truths[0].record.branches.len();
    println!(
        "phantom: wrote {count} phantom(s) of depth {} ({branches} branches each) to {}",
        cfg.phantom.depth,
        out.display()
    );
    Ok(())
}

pub fn prep(cfg: &RunConfig) -> Result<()> {
    let data = cfg.data_dir()?;
    let out = cfg.out_dir()?;
    if let (Ok(a), Ok(b)) = (data.canonicalize(), out.canonicalize()) {
        ensure!(a != b, "output directory must differ from the data directory");
    }
    let images = data.join(IMAGES);
    let labels = data.join(LABELS);
    let scans = list_nifti(&images).with_context(|| format!("listing {}", images.display()))?;
    ensure!(!scans.is_empty(), "no volumes in {}", images.display());
    let mut pairs = Vec::with_capacity(scans.len());
    for (id, path) in &scans {
        let label = find_label(&labels, id)
            .with_context(|| format!("missing mask for scan `{id}` in {}", labels.display()))?;
        pairs.push((id.clone(), path.clone(), label));
    }

    let loaded = pairs
        .par_iter()
        .map(|(id, vpath, mpath)| {
            let v = read_intensity(vpath)?;
            ensure!(
                v.kind() == IntensityKind::Hounsfield,
                "{} is already {:?}, expected Hounsfield units",
                vpath.display(),
                v.kind()
            );
            let m = read_mask(mpath)?;
            ensure!(
                v.dims() == m.dims(),
                "scan `{id}`: volume dims {:?} differ from mask dims {:?}",
                v.dims(),
                m.dims()
            );
            Ok((id.clone(), clip_normalize_window(&v, cfg.clip_min, cfg.clip_max)?, m))
        })
        .collect::<Result<Vec<_>>>()?;

    let masks: Vec<(String, &MaskVolume)> = loaded.iter().map(|(id, _, m)| (id.clone(), m)).collect();
    let manifest = DatasetManifest::build(&masks, cfg.val_fraction, cfg.seed)?;

    ensure_dir(&out.join(IMAGES))?;
    ensure_dir(&out.join(LABELS))?;
    for (id, v, m) in &loaded {
        write_nifti(&AnyVolume::Intensity(v.clone()), &out.join(IMAGES).join(nifti_name(id)))?;
        write_nifti(&AnyVolume::Mask(m.clone()), &out.join(LABELS).join(nifti_name(id)))?;
    }
    manifest.write_csv(&out.join(MANIFEST))?;
    write_resolved(cfg, out)?;
    let n_train = manifest.split(Split::Train).count();
    let n_val = manifest.split(Split::InternalVal).count();
    println!(
        "prep: {} scans, {} annotated slices ({n_train} train, {n_val} internal_val) in {}",
        loaded.len(),
        manifest.entries.len(),
        out.display()
    );
    Ok(())
}

fn load_train_data(dir: &Path, seed: u64) -> Result<TrainData> {
    let manifest = DatasetManifest::read_csv(&dir.join(MANIFEST), seed)
        .with_context(|| format!("reading manifest in {} (run `airseg prep` first)", dir.display()))?;
    let ids = manifest.scan_ids();
    let scans = ids
        .par_iter()
        .map(|id| {
            let vpath = find_label(&dir.join(IMAGES), id)
                .with_context(|| format!("missing prepared volume for `{id}`"))?;
            let mpath = find_label(&dir.join(LABELS), id).with_context(|| format!("missing mask for `{id}`"))?;
            let v = read_intensity(&vpath)?;
            ensure!(
                v.kind() == IntensityKind::Normalized,
                "{} is not normalized; pass the output of `airseg prep`",
                vpath.display()
            );
            let m = read_mask(&mpath)?;
            ensure!(v.dims() == m.dims(), "scan `{id}`: volume and mask dims differ");
            Ok((id.clone(), (v, m)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TrainData {
        scans: scans.into_iter().collect::<BTreeMap<_, _>>(),
        manifest,
    })
}

pub fn train(cfg: &RunConfig, resume: Option<&Path>) -> Result<()> {
    let data = load_train_data(cfg.data_dir()?, cfg.seed)?;
    let out = cfg.out_dir()?.to_path_buf();
    ensure_dir(&out)?;
    let tc = cfg.train();
    let arch = cfg.arch();

    let state = match resume {
        None => TrainState::fresh(MedSegModel::<f32>::new(arch, cfg.seed)?),
        Some(path) => {
            let (model, opt) = load_checkpoint::<f32>(path)?;
            ensure!(
                *model.config() == arch,
                "checkpoint {} has architecture {:?}, configured {:?}",
                path.display(),
                model.config(),
                arch
            );
            match opt {
                None => TrainState::fresh(model),
                Some(OptimizerSection { state, epoch }) => {
                    let curves_path = out.join(CURVES);
                    let mut curves = CurveLog::read_csv(&curves_path)
                        .with_context(|| format!("resuming needs the earlier {}", curves_path.display()))?;
                    ensure!(
                        curves.rows.len() >= epoch,
                        "{} has {} rows but the checkpoint is at epoch {epoch}",
                        curves_path.display(),
                        curves.rows.len()
                    );
                    curves.rows.truncate(epoch);
                    TrainState {
                        model,
                        optimizer: state,
                        curves,
                    }
                }
            }
        }
    };
    ensure!(
        state.epoch() < tc.epochs,
        "checkpoint already completed {} of {} epochs",
        state.epoch(),
        tc.epochs
    );

    let outcome = train_loop(state, &data, &tc, |s, improved| {
        let section = OptimizerSection {
            state: s.optimizer.clone(),
            epoch: s.epoch(),
        };
        save_checkpoint(&s.model, Some(&section), &out.join(LAST))?;
        if improved {
            save_checkpoint(&s.model, None, &out.join(BEST))?;
        }
        s.curves.write_csv(&out.join(CURVES))
    })?;
    write_resolved(cfg, &out)?;
    let best = outcome
        .last
        .curves
        .rows
        .iter()
        .find(|r| r.epoch == outcome.best_epoch)
        .copied();
    match best {
        Some(r) => println!(
            "train: {} epochs, best epoch {} (val_loss {:.6}, val_dice {:.4}) -> {}",
            outcome.last.epoch(),
            r.epoch,
            r.val_loss,
            r.val_dice,
            out.join(BEST).display()
        ),
        None => println!("train: {} epochs -> {}", outcome.last.epoch(), out.display()),
    }
    Ok(())
}

pub fn predict(cfg: &RunConfig, checkpoint: &Path, input: &Path, postprocess: bool) -> Result<()> {
    ensure!(checkpoint.is_file(), "checkpoint {} not found", checkpoint.display());
    let (model, _) = load_checkpoint::<f32>(checkpoint)?;
    let inputs = if input.is_dir() {
        list_nifti(input)?
    } else {
        ensure!(input.is_file(), "input {} not found", input.display());
        vec![(airseg_core::volio::scan_id(input), input.to_path_buf())]
    };
    ensure!(!inputs.is_empty(), "no volumes in {}", input.display());
    let conn = Connectivity::from_count(cfg.connectivity)?;
    let out = cfg.out_dir()?;
    let (prob_dir, mask_dir) = (out.join("prob"), out.join("masks"));
    ensure_dir(&prob_dir)?;
    ensure_dir(&mask_dir)?;
    for (id, path) in &inputs {
        let v = read_intensity(path)?;
        let v = match v.kind() {
            IntensityKind::Hounsfield => clip_normalize_window(&v, cfg.clip_min, cfg.clip_max)?,
            IntensityKind::Normalized => v,
            IntensityKind::Probability => bail!("{} is a probability map, not a CT volume", path.display()),
        };
        let prob = predict_volume(&model, &v).with_context(|| format!("scan `{id}`"))?;
        let mut mask = threshold(&prob, cfg.threshold);
        if postprocess {
            mask = largest_component(&mask, conn);
        }
        write_nifti(&AnyVolume::Intensity(prob), &prob_dir.join(nifti_name(id)))?;
        write_nifti(&AnyVolume::Mask(mask), &mask_dir.join(nifti_name(id)))?;
    }
    write_resolved(cfg, out)?;
    println!(
        "predict: {} volume(s) -> {} and {}",
        inputs.len(),
        prob_dir.display(),
        mask_dir.display()
    );
    Ok(())
}

pub fn eval(cfg: &RunConfig, pred_dir: &Path, gt_dir: &Path) -> Result<()> {
    let preds: BTreeMap<String, PathBuf> = list_nifti(pred_dir)?.into_iter().collect();
    let gts: BTreeMap<String, PathBuf> = list_nifti(gt_dir)?.into_iter().collect();
    let p_ids: BTreeSet<&String> = preds.keys().collect();
    let g_ids: BTreeSet<&String> = gts.keys().collect();
    let only_pred: Vec<&&String> = p_ids.difference(&g_ids).collect();
    let only_gt: Vec<&&String> = g_ids.difference(&p_ids).collect();
    if !only_pred.is_empty() || !only_gt.is_empty() {
        bail!("unmatched scan ids: prediction only {only_pred:?}, ground truth only {only_gt:?}");
    }
    ensure!(!preds.is_empty(), "no masks in {}", pred_dir.display());
    let opts = EvalOptions {
        bd_min_fraction: cfg.bd_min_fraction,
    };
    let rows = preds
        .par_iter()
        .map(|(id, p)| {
            let pred = read_mask(p)?;
            let gt = read_mask(&gts[id])?;
            evaluate_pair(id, &pred, &gt, opts).with_context(|| format!("scan `{id}`"))
        })
        .collect::<Result<Vec<_>>>()?;
    let out = cfg.out_dir()?;
    ensure_dir(out)?;
    write_metrics_csv(&rows, &out.join("metrics.csv"))?;
    write_resolved(cfg, out)?;
    let mean = |f: fn(&airseg_core::airmetrics::MetricsReport) -> f64| rows.iter().map(f).sum::<f64>() / rows.len() as f64;
    println!(
        "eval: {} scan(s), mean dice {:.4} fne {:.4} fpe {:.4} td {:.4} bd {:.4}",
        rows.len(),
        mean(|r| r.dice),
        mean(|r| r.fne),
        mean(|r| r.fpe),
        mean(|r| r.td),
        mean(|r| r.bd)
    );
    Ok(())
}

pub fn report(cfg: &RunConfig, mask_dir: &Path) -> Result<()> {
    let masks = list_nifti(mask_dir)?;
    let rows = masks
        .par_iter()
        .map(|(id, p)| Ok(volumetric_report(&read_mask(p)?, id)))
        .collect::<Result<Vec<_>>>()?;
    let out = cfg.out_dir()?;
    ensure_dir(out)?;
    write_report_csv(&rows, &out.join("report.csv"))?;
    write_resolved(cfg, out)?;
    println!("report: {} mask(s) -> {}", rows.len(), out.join("report.csv").display());
    Ok(())
}
