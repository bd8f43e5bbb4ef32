use std::path::{Path, PathBuf};

use adwpf::augment::augment_pair;
use adwpf::checkpoint::Checkpoint;
use adwpf::metrics::{render_comparison, MetricsReport};
use adwpf::model::{Adwpf, AnyModel, MultiLabelModel};
use adwpf::synth::generate_dataset;
use adwpf::trace_io::{load_dataset, save_dataset, split_dataset, write_dataset, SplitSpec};
use adwpf::train::{self, AblationFlags, TrainHistory};
use adwpf::types::Dataset;
use anyhow::{bail, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::config::{parse_list, KeyValues, ModelKind, RunConfig};
use crate::output::{resolve_out, write_files_atomically, StagedDir};
use crate::plot::save_strip;

const EVAL_BATCH: usize = 64;

/// Flags shared by every subcommand.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct Common {
    /// Key=value run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output file or directory (default: under $ADWPF_RUN_DIR, else ./runs).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Replace an existing output.
    #[arg(long)]
    pub force: bool,
}

impl Common {
    pub fn key_values(&self) -> Result<KeyValues> {
        let mut kv = match &self.config {
            Some(p) => KeyValues::load(p)?,
            None => KeyValues::default(),
        };
        if let Some(s) = self.seed {
            kv.set("seed", s.to_string());
        }
        Ok(kv)
    }
}

fn json_bytes<T: serde::Serialize>(v: &T) -> Result<Vec<u8>> {
    let mut b = serde_json::to_vec_pretty(v)?;
    b.push(b'\n');
    Ok(b)
}

pub fn synth(common: &Common, classes: Option<usize>, samples: Option<usize>, tabs_dist: Option<&str>) -> Result<String> {
    let mut kv = common.key_values()?;
    if let Some(c) = classes {
        kv.set("synth.classes", c.to_string());
    }
    if let Some(n) = samples {
        kv.set("synth.samples", n.to_string());
    }
    if let Some(d) = tabs_dist {
        kv.set("synth.tabs_dist", d);
    }
    let cfg = RunConfig::resolve(&kv)?;
    let out = resolve_out(common.out.as_deref(), "synth.jsonl");
    let sidecar = sidecar_path(&out);
    let generated = generate_dataset(&cfg.synth, cfg.seed)?;
    let mut data = Vec::new();
    write_dataset(&generated.dataset, &mut data)?;
    write_files_atomically(&[(out.clone(), data), (sidecar.clone(), json_bytes(&generated.meta)?)], common.force)?;
    Ok(format!(
        "wrote {} samples ({} classes) to {} and provenance to {}",
        generated.dataset.len(),
        generated.dataset.class_count(),
        out.display(),
        sidecar.display()
    ))
}

/// `data.jsonl` gets `data.meta.json` beside it.
pub fn sidecar_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "dataset".into());
    out.with_file_name(format!("{stem}.meta.json"))
}

pub fn split(common: &Common, data: Option<&Path>) -> Result<String> {
    let mut kv = common.key_values()?;
    if let Some(d) = data {
        kv.set("data.path", d.display().to_string());
    }
    let cfg = RunConfig::resolve(&kv)?;
    let path = cfg.data.as_ref().context("split needs --data or data.path")?;
    let ds = load_dataset(path).with_context(|| format!("loading {}", path.display()))?;
    let (tr, va, te) = split_dataset(&ds, &SplitSpec { ratios: cfg.split_ratios, seed: cfg.seed })?;
    let stage = StagedDir::new(&resolve_out(common.out.as_deref(), "split"), common.force)?;
    for (name, part) in [("train", &tr), ("val", &va), ("test", &te)] {
        save_dataset(part, stage.path(&format!("{name}.jsonl")))?;
    }
    let dest = stage.commit()?;
    Ok(format!("split {} samples into {}/{}/{} under {}", ds.len(), tr.len(), va.len(), te.len(), dest.display()))
}

struct Splits {
    train: Dataset,
    val: Dataset,
    test: Option<Dataset>,
    /// The test split was carved from `data.path` and should be saved with the run.
    derived_test: bool,
}

fn load_splits(cfg: &RunConfig) -> Result<Splits> {
    let load = |p: &PathBuf| load_dataset(p).with_context(|| format!("loading {}", p.display()));
    match (&cfg.train_data, &cfg.val_data) {
        (Some(t), Some(v)) => Ok(Splits {
            train: load(t)?,
            val: load(v)?,
            test: cfg.test_data.as_ref().map(load).transpose()?,
            derived_test: false,
        }),
        (None, None) => {
            let path = cfg.data.as_ref().context("training needs --data, or data.train and data.val")?;
            let ds = load(path)?;
            let (train, val, test) = split_dataset(&ds, &SplitSpec { ratios: cfg.split_ratios, seed: cfg.seed })?;
            Ok(Splits { train, val, test: Some(test), derived_test: true })
        }
        _ => bail!("data.train and data.val must be given together"),
    }
}

struct RunResult {
    model: AnyModel<f32>,
    history: TrainHistory,
    best_epoch: usize,
    val: MetricsReport,
    test: Option<MetricsReport>,
}

fn train_once(cfg: &RunConfig, splits: &Splits) -> Result<RunResult> {
    let (model, history, best_epoch) = match cfg.kind {
        ModelKind::Adwpf => {
            let out = train::train(&cfg.train, &splits.train, &splits.val)?;
            (AnyModel::Adwpf(out.best), out.history, out.best_epoch)
        }
        ModelKind::Df => {
            let out = train::train_baseline(&cfg.train, &cfg.df, &splits.train, &splits.val)?;
            (AnyModel::Df(out.best), out.history, out.best_epoch)
        }
    };
    let val = train::evaluate(&model, &splits.val, EVAL_BATCH)?;
    let test = splits.test.as_ref().map(|t| train::evaluate(&model, t, EVAL_BATCH)).transpose()?;
    Ok(RunResult { model, history, best_epoch, val, test })
}

fn write_run(dir: &Path, cfg: &RunConfig, run: &RunResult) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("config.cfg"), cfg.render())?;
    let meta = json!({ "best_epoch": run.best_epoch, "seed": cfg.seed, "val_map": run.val.map });
    Checkpoint::capture(run.model.spec(), &run.model, meta).save(dir.join("best.ckpt"))?;
    std::fs::write(dir.join("history.jsonl"), run.history.to_jsonl())?;
    let report = json!({ "best_epoch": run.best_epoch, "validation": run.val, "test": run.test });
    std::fs::write(dir.join("report.json"), json_bytes(&report)?)?;
    std::fs::write(dir.join("report.txt"), render_run_report(run))?;
    Ok(())
}

fn render_run_report(run: &RunResult) -> String {
    let mut s = format!("best epoch {}\n\nvalidation\n{}", run.best_epoch, run.val.render_table());
    if let Some(t) = &run.test {
        s.push_str(&format!("\ntest\n{}", t.render_table()));
    }
    s
}

fn resolved_for_training(common: &Common, data: Option<&Path>) -> Result<(RunConfig, Splits)> {
    let mut kv = common.key_values()?;
    if let Some(d) = data {
        kv.set("data.path", d.display().to_string());
        kv.set("data.train", "");
        kv.set("data.val", "");
        kv.set("data.test", "");
    }
    let mut cfg = RunConfig::resolve(&kv)?;
    let splits = load_splits(&cfg)?;
    if splits.train.class_count() != splits.val.class_count() || splits.train.seq_len() != splits.val.seq_len() {
        bail!("training and validation files disagree on class count or trace length");
    }
    cfg.fit_to_data(splits.train.class_count(), splits.train.seq_len());
    cfg.train.validate()?;
    Ok((cfg, splits))
}

pub fn train(common: &Common, data: Option<&Path>) -> Result<String> {
    let (cfg, splits) = resolved_for_training(common, data)?;
    let stage = StagedDir::new(&resolve_out(common.out.as_deref(), &format!("train-{}", cfg.seed)), common.force)?;
    let run = train_once(&cfg, &splits)?;
    write_run(stage.root(), &cfg, &run)?;
    if splits.derived_test {
        save_dataset(splits.test.as_ref().unwrap(), stage.path("test.jsonl"))?;
    }
    let dest = stage.commit()?;
    let headline = run.test.as_ref().unwrap_or(&run.val);
    Ok(format!("{}\nrun written to {}", headline.render_table().trim_end(), dest.display()))
}

/// Accepts a checkpoint file, a path missing its `.ckpt` extension, or a run directory.
pub fn resolve_checkpoint(p: &Path) -> Result<PathBuf> {
    let with_ext = p.with_extension("ckpt");
    for c in [p.to_path_buf(), with_ext, p.join("best.ckpt")] {
        if c.is_file() {
            return Ok(c);
        }
    }
    bail!("no checkpoint at {}", p.display())
}

pub fn eval(common: &Common, ckpt: &Path, data: &Path) -> Result<String> {
    let ckpt_path = resolve_checkpoint(ckpt)?;
    let ck = Checkpoint::load(&ckpt_path).with_context(|| format!("loading {}", ckpt_path.display()))?;
    let model = ck.build::<f32>()?;
    let ds = load_dataset(data).with_context(|| format!("loading {}", data.display()))?;
    let scores = train::score_dataset(&model, &ds, EVAL_BATCH)?;
    let report = train::report_for_scores(&ds, &scores)?;
    let stem = data.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "data".into());
    let default = ckpt_path.parent().unwrap_or(Path::new(".")).join(format!("eval-{stem}"));
    let out = common.out.clone().unwrap_or(default);
    let stage = StagedDir::new(&out, common.force)?;
    std::fs::write(stage.path("report.json"), json_bytes(&report)?)?;
    std::fs::write(stage.path("report.txt"), report.render_table())?;
    let lines: String = ds
        .samples()
        .iter()
        .zip(&scores)
        .map(|(s, sc)| serde_json::to_string(&json!({ "id": s.id, "scores": sc })).unwrap() + "\n")
        .collect();
    std::fs::write(stage.path("scores.jsonl"), lines)?;
    let dest = stage.commit()?;
    Ok(format!("{}\nreport written to {}", report.render_table().trim_end(), dest.display()))
}

pub fn ablate(common: &Common, data: Option<&Path>, grid: &str) -> Result<String> {
    let (cfg, splits) = resolved_for_training(common, data)?;
    if cfg.kind != ModelKind::Adwpf {
        bail!("ablation applies to the attention-driven model only");
    }
    let tokens: Vec<String> = parse_list("--grid", grid)?;
    if tokens.is_empty() {
        bail!("--grid lists no configurations");
    }
    let flags: Vec<AblationFlags> = tokens.iter().map(|t| AblationFlags::parse(t)).collect::<adwpf::Result<_>>()?;
    let stage = StagedDir::new(&resolve_out(common.out.as_deref(), &format!("ablate-{}", cfg.seed)), common.force)?;
    let mut rows = Vec::new();
    for (token, f) in tokens.iter().zip(flags) {
        let mut sub = cfg.clone();
        sub.train.ablation = f;
        let run = train_once(&sub, &splits)?;
        write_run(&stage.path(&f.label()), &sub, &run)?;
        rows.push((token.clone(), run.test.unwrap_or(run.val)));
    }
    std::fs::write(stage.path("config.cfg"), cfg.render())?;
    let table = render_comparison(&rows);
    std::fs::write(stage.path("comparison.txt"), &table)?;
    let merged: serde_json::Map<String, serde_json::Value> =
        rows.iter().map(|(n, r)| (n.clone(), serde_json::to_value(r).unwrap())).collect();
    std::fs::write(stage.path("comparison.json"), json_bytes(&merged)?)?;
    let dest = stage.commit()?;
    Ok(format!("{}\nablation written to {}", table.trim_end(), dest.display()))
}

pub fn augment_dump(common: &Common, ckpt: Option<&Path>, data: &Path, n: usize, untrained: bool) -> Result<String> {
    let ds = load_dataset(data).with_context(|| format!("loading {}", data.display()))?;
    let mut cfg = RunConfig::resolve(&common.key_values()?)?;
    cfg.fit_to_data(ds.class_count(), ds.seq_len());
    let model: Adwpf<f32> = match (ckpt, untrained) {
        (Some(_), true) => bail!("--ckpt and --untrained are mutually exclusive"),
        (Some(p), false) => {
            let path = resolve_checkpoint(p)?;
            let m = Checkpoint::load(&path)?.build::<f32>()?;
            m.as_adwpf()?.clone()
        }
        (None, true) => Adwpf::new(&cfg.model_config(), cfg.seed)?,
        (None, false) => bail!("augment-dump needs --ckpt or --untrained"),
    };
    if model.seq_len() != ds.seq_len() || model.config.class_count != ds.class_count() {
        bail!("checkpoint and dataset disagree on class count or trace length");
    }
    let n = n.min(ds.len());
    let stage = StagedDir::new(&resolve_out(common.out.as_deref(), "augment-dump"), common.force)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut manifest = Vec::new();
    for (i, sample) in ds.samples()[..n].iter().enumerate() {
        let x = adwpf::model::traces_to_input::<f32>(&[&sample.trace]);
        let maps = model.attention_maps(&x, 1)?;
        let pair = augment_pair(&sample.trace, &maps.sample(0), &cfg.train.augment, &mut rng)?;
        for (kind, trace) in [("original", &sample.trace), ("cropped", &pair.crop.trace), ("masked", &pair.mask.trace)] {
            // Augmented traces hold interior zeros, so they are stored as raw values
            // rather than as dataset records.
            let record = json!({
                "id": sample.id,
                "kind": kind,
                "labels": sample.labels.decode(),
                "tabs": sample.tab_count,
                "values": trace.values(),
            });
            std::fs::write(stage.path(&format!("sample{i}_{kind}.json")), json_bytes(&record)?)?;
            save_strip(trace, &stage.path(&format!("sample{i}_{kind}.png")))?;
        }
        manifest.push(json!({
            "sample": i,
            "id": sample.id,
            "map_index": pair.map_index,
            "crop_threshold": pair.crop_threshold,
            "mask_threshold": pair.mask_threshold,
            "crop_span": pair.crop.span,
            "crop_degenerate": pair.crop.degenerate,
            "mask_degenerate": pair.mask.degenerate,
            "map": maps.sample(0)[pair.map_index],
        }));
    }
    std::fs::write(stage.path("manifest.json"), json_bytes(&manifest)?)?;
    let dest = stage.commit()?;
    Ok(format!("wrote {n} original/cropped/masked triples to {}", dest.display()))
}
