use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde_json::json;
use volalign_core::config::RunConfig;
use volalign_core::contrastive::{pretrain_modality, retrieval_top1};
use volalign_core::data::{synthesize_dataset, write_mvol, Dataset, Split, VolumeRecord};
use volalign_core::diagnostics::{cam_map, render_cam_png, render_tsne_png, tsne_embed};
use volalign_core::fusion::{prepare_samples, CsaModel};
use volalign_core::text::BagEncoder;
use volalign_core::train::{self, ablation_csv, history_csv, ModelCheckpoint};
use volalign_core::vision::{Expert, ModalityExpertBank};

use crate::{ConfigArgs, Features};

/// Bad arguments detected by the driver itself.
#[derive(Debug)]
pub struct Invalid(pub String);

impl std::fmt::Display for Invalid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    Invalid(msg.into()).into()
}

pub fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.is::<Invalid>() {
            return 1;
        }
        if let Some(err) = cause.downcast_ref::<volalign_core::Error>() {
            return if err.is_validation() { 1 } else { 2 };
        }
    }
    2
}

fn resolve(args: &ConfigArgs) -> Result<RunConfig> {
    if let Some(p) = &args.config {
        if !p.is_file() {
            return Err(invalid(format!("config file {} does not exist", p.display())));
        }
    }
    Ok(RunConfig::resolve(args.config.as_deref(), &args.overrides)?)
}

fn existing(path: &Path, what: &str) -> Result<()> {
    if !path.exists() {
        return Err(invalid(format!("{what} {} does not exist", path.display())));
    }
    Ok(())
}

/// `dir/stem.suffix` next to an output file.
fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "out".into());
    out.with_file_name(format!("{stem}.{suffix}"))
}

fn ensure_parent(out: &Path) -> Result<()> {
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_json(path: &Path, v: &serde_json::Value) -> Result<()> {
    write(path, &(serde_json::to_string_pretty(v)? + "\n"))
}

fn load_dataset(manifest: &Path) -> Result<Dataset> {
    existing(manifest, "manifest")?;
    Ok(Dataset::load(manifest)?)
}

fn parse_split(s: &str) -> Result<Split> {
    Ok(s.parse::<Split>()?)
}

fn load_checkpoint(path: &Path) -> Result<ModelCheckpoint> {
    existing(path, "checkpoint")?;
    Ok(ModelCheckpoint::load(path)?)
}

pub fn synth(args: &ConfigArgs, out: &Path) -> Result<()> {
    let cfg = resolve(args)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let manifest = synthesize_dataset(&cfg.phantom, out)?;
    cfg.save(&out.join("config.json"))?;
    eprintln!("wrote {} records to {}", manifest.records.len(), out.display());
    Ok(())
}

pub fn pretrain(args: &ConfigArgs, manifest: &Path, modality: &str, out: &Path) -> Result<()> {
    let cfg = resolve(args)?;
    let ds = load_dataset(manifest)?;
    if !ds.manifest.modality_vocabulary.iter().any(|m| m == modality) {
        return Err(invalid(format!("modality `{modality}` is not in the manifest")));
    }
    let encoder = BagEncoder::new(&cfg.finetune.model.text)?;
    let outcome = pretrain_modality(&ds, modality, cfg.vision(), &cfg.pretrain, &encoder)?;
    ensure_parent(out)?;
    outcome.checkpoint(cfg.vision(), &cfg.pretrain).save(out)?;
    write(&sibling(out, "loss.csv"), &outcome.loss_csv())?;
    cfg.save(&sibling(out, "config.json"))?;

    let held_out: Vec<&VolumeRecord> = [Split::Val, Split::Test].iter().flat_map(|&s| ds.split_modality(s, modality)).collect();
    if !held_out.is_empty() {
        let pool = prepare_samples(&held_out, &encoder)?;
        let reports: Vec<String> = held_out.iter().map(|r| r.report.clone()).collect();
        let r = retrieval_top1(&outcome.expert, &pool, &reports)?;
        eprintln!("{modality}: held-out top-1 {:.3} (chance {:.3}, n {})", r.top1, r.chance, r.n);
        write_json(&sibling(out, "retrieval.json"), &serde_json::to_value(&r)?)?;
    }
    if let (Some(first), Some(last)) = (outcome.loss_curve.first(), outcome.loss_curve.last()) {
        eprintln!("{modality}: loss {:.4} -> {:.4}", first.1, last.1);
    }
    Ok(())
}

fn load_bank(dir: &Path, modalities: &[String]) -> Result<ModalityExpertBank> {
    existing(dir, "experts directory")?;
    let mut bank = ModalityExpertBank::default();
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ckpt"))
        .collect();
    paths.sort();
    for p in paths {
        let ckpt = ModelCheckpoint::load(&p)?;
        if ckpt.kind == "expert" {
            bank.insert(Expert::from_checkpoint(&ckpt).with_context(|| p.display().to_string())?);
        }
    }
    for m in modalities {
        if bank.get(m).is_err() {
            return Err(invalid(format!("no expert checkpoint for modality `{m}` in {}", dir.display())));
        }
    }
    Ok(bank)
}

pub fn finetune(args: &ConfigArgs, manifest: &Path, experts: Option<&Path>, out: &Path) -> Result<()> {
    let cfg = resolve(args)?;
    let ds = load_dataset(manifest)?;
    let bank = match experts {
        Some(dir) => Some(load_bank(dir, &ds.manifest.modality_vocabulary)?),
        None if cfg.finetune.ablation_flags.use_pretrained => {
            return Err(invalid("--experts is required when finetune.ablation_flags.use_pretrained is set"));
        }
        None => None,
    };
    let outcome = train::finetune(&ds, bank.as_ref(), &cfg.finetune)?;
    ensure_parent(out)?;
    outcome.checkpoint(&cfg.finetune, &ds.manifest.class_names)?.save(out)?;
    write(&sibling(out, "history.csv"), &history_csv(&outcome.history))?;
    cfg.save(&sibling(out, "config.json"))?;
    if let Some(last) = outcome.history.last() {
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.3}"));
        eprintln!(
            "{} steps; final loss {:.5}, bce {:.4}, val acc {}, val auc {}",
            outcome.steps,
            last.loss,
            last.bce,
            opt(last.val_acc),
            opt(last.val_auc)
        );
    }
    Ok(())
}

pub fn eval(ckpt: &Path, manifest: &Path, split: &str, report: &Path) -> Result<()> {
    let split = parse_split(split)?;
    let model = load_checkpoint(ckpt)?;
    let ds = load_dataset(manifest)?;
    let metrics = train::evaluate(&model, &ds, split)?;
    ensure_parent(report)?;
    write_json(report, &serde_json::to_value(&metrics)?)?;
    write_json(&sibling(report, "config.json"), &model.config)?;
    eprintln!("{split}: accuracy {:.4}, macro AUC {:.4} (n {})", metrics.accuracy, metrics.macro_auc, metrics.n);
    Ok(())
}

pub fn ablate(args: &ConfigArgs, manifest: &Path, experts: &Path, out: &Path) -> Result<()> {
    let cfg = resolve(args)?;
    let ds = load_dataset(manifest)?;
    let bank = load_bank(experts, &ds.manifest.modality_vocabulary)?;
    let rows = train::ablate(&ds, &bank, &cfg.finetune, &cfg.ablation.seeds)?;
    ensure_parent(out)?;
    write(out, &ablation_csv(&rows))?;
    write_json(&sibling(out, "json"), &serde_json::to_value(&rows)?)?;
    cfg.save(&sibling(out, "config.json"))?;
    for r in &rows {
        eprintln!("{:<9} {:.4} +- {:.4}", r.row, r.mean_acc, r.std_acc);
    }
    Ok(())
}

pub fn tsne(args: &ConfigArgs, ckpt: &Path, manifest: &Path, split: &str, features: Features, out: &Path, png: Option<&Path>) -> Result<()> {
    let cfg = resolve(args)?;
    let split = parse_split(split)?;
    let model = CsaModel::from_checkpoint(&load_checkpoint(ckpt)?)?;
    let ds = load_dataset(manifest)?;
    let records = ds.split(split);
    let samples = prepare_samples(&records, &model.text_encoder)?;
    let mut x = Vec::with_capacity(samples.len());
    for s in &samples {
        let f = model.forward(s)?;
        x.push(match features {
            Features::Fusion => f.f_fusion.vector.iter().map(|&v| v as f64).collect(),
            Features::Conv => channel_means(&f.f_v.data, f.f_v.channels),
        });
    }
    let result = tsne_embed(&x, &cfg.tsne)?;
    let classes: Vec<usize> = samples.iter().map(|s| s.class()).collect();
    ensure_parent(out)?;
    let mut csv = String::from("id,modality,class,x,y\n");
    for ((s, p), c) in samples.iter().zip(&result.points).zip(&classes) {
        csv.push_str(&format!("{},{},{},{:.8},{:.8}\n", s.id, s.modality, c, p[0], p[1]));
    }
    write(out, &csv)?;
    write_json(
        &sibling(out, "json"),
        &json!({
            "features": format!("{features:?}").to_lowercase(),
            "n": samples.len(),
            "kl_after_exaggeration": result.kl_after_exaggeration,
            "final_kl": result.final_kl,
            "kl_history": result.kl_history,
        }),
    )?;
    cfg.save(&sibling(out, "config.json"))?;
    if let Some(p) = png {
        ensure_parent(p)?;
        render_tsne_png(&result.points, &classes, p)?;
    }
    eprintln!("t-SNE of {} records: KL {:.4} -> {:.4}", samples.len(), result.kl_after_exaggeration, result.final_kl);
    Ok(())
}

fn channel_means(data: &[f32], channels: usize) -> Vec<f64> {
    let s = data.len() / channels;
    (0..channels).map(|c| data[c * s..(c + 1) * s].iter().map(|&v| v as f64).sum::<f64>() / s as f64).collect()
}

pub fn cam(ckpt: &Path, manifest: &Path, record: Option<&str>, class: Option<usize>, out: &Path, png: Option<&Path>) -> Result<()> {
    let stored = load_checkpoint(ckpt)?;
    let model = CsaModel::from_checkpoint(&stored)?;
    let ds = load_dataset(manifest)?;
    let rec = match record {
        Some(id) => ds.get(id).ok_or_else(|| invalid(format!("no record `{id}` in the manifest")))?,
        None => *ds.split(Split::Test).first().ok_or_else(|| invalid("the manifest has no test records"))?,
    };
    let class_index = match class.or_else(|| rec.primary_class()) {
        Some(k) => k,
        None => return Err(invalid(format!("record `{}` has no labelled class; pass --class", rec.id))),
    };
    let cam = cam_map(&model, rec, class_index)?;
    let class_name = ds.manifest.class_names.get(class_index).cloned().unwrap_or_default();
    ensure_parent(out)?;
    write_mvol(&cam.to_record(&format!("{}.cam{class_index}", rec.id), model.n_classes, &class_name), out)?;
    write_json(&sibling(out, "config.json"), &stored.config)?;
    if let Some(p) = png {
        ensure_parent(p)?;
        render_cam_png(&rec.voxels, &cam, p)?;
    }
    eprintln!("CAM of `{}` for class {class_index} ({class_name}) written to {}", rec.id, out.display());
    Ok(())
}
