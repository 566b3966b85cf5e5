//! Subcommand implementations.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde_json::{json, Map, Value};

use hierfuse::checkpoint::{verify_frozen, Checkpoint};
use hierfuse::config::{deep_merge, resolve_str, RunConfig};
use hierfuse::data::{synthesize_dataset, SynthSpec};
use hierfuse::eval::ablation::{cells, run_ablation, write_csv, AblationAxis};
use hierfuse::eval::attention::export_attention_maps;
use hierfuse::eval::evaluate;
use hierfuse::eval::robustness::perturbation_grid;
use hierfuse::experiment::{
    echo_config, init_backbone, load_detector, sha256_hex, sidecar_config, train_run, write_json, write_run,
    LoadedSet, NamedReport,
};
use hierfuse::gradsuite::run_suite;
use hierfuse::model::Detector;
use hierfuse::trainer::encode_images;
use hierfuse::{Error, Rng};

use crate::{Cli, Command, GlobalArgs, Overrides};

#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(String),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) | Failure::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Usage(_) | Error::Config { .. } => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

type CmdResult<T = ()> = Result<T, Failure>;

fn io_err(path: &Path, e: std::io::Error) -> Failure {
    Failure::from(Error::io(path, e))
}

pub fn run(cli: Cli) -> CmdResult {
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.global.threads.max(1))
        .build_global()
        .map_err(|e| Failure::Runtime(format!("thread pool: {e}")))?;
    let out = output_dir(&cli.global, cli.command.name());
    let g = &cli.global;
    match cli.command {
        Command::Synth {
            family,
            per_class,
            frames_per_video,
            image_size,
            name,
        } => {
            let name = name.unwrap_or_else(|| family.name().to_string());
            let spec = SynthSpec {
                family,
                image_size,
                samples_per_class: per_class,
                frames_per_video,
                seed: Rng::derive_seed(g.seed.unwrap_or(0), &name),
            };
            let manifest = synthesize_dataset(&spec, &out, &name)?;
            println!("{}", manifest.display());
            Ok(())
        }
        Command::Train { overrides } => train(g, &overrides, &out),
        Command::Eval {
            ckpt,
            manifests,
            batch_size,
        } => eval(g, &ckpt, &manifests, batch_size, &out),
        Command::PerturbEval { ckpt, manifest } => perturb_eval(g, &ckpt, &manifest, &out),
        Command::Ablate { axis, overrides } => ablate(g, &axis, &overrides, &out),
        Command::AttnExport { ckpt, manifest, index } => attn_export(g, &ckpt, &manifest, index, &out),
        Command::GradCheck { precision, cases } => {
            let report = run_suite(precision, cases, g.seed.unwrap_or(0))?;
            for c in &report.cases {
                println!("{}  max rel {:.3e} ({} entries)", c.label, c.max_rel_error, c.entries);
            }
            println!(
                "{precision}: max relative error {:.3e} (tolerance {:.0e})",
                report.max_rel_error, report.tolerance
            );
            fs::create_dir_all(&out).map_err(|e| io_err(&out, e))?;
            write_json(&out.join(format!("grad_check_{precision}.json")), &report)?;
            if report.passed() {
                Ok(())
            } else {
                Err(Failure::Runtime(format!(
                    "gradient check failed: {:.3e} ≥ {:.0e}",
                    report.max_rel_error, report.tolerance
                )))
            }
        }
        Command::VerifyFrozen { before, after } => {
            let frozen = verify_frozen(&Checkpoint::read(&before)?, &Checkpoint::read(&after)?)?;
            println!("{}", json!({ "frozen": frozen }));
            if frozen {
                Ok(())
            } else {
                Err(Failure::Runtime("backbone parameters differ".into()))
            }
        }
    }
}

fn output_dir(g: &GlobalArgs, command: &str) -> PathBuf {
    if let Some(out) = &g.out {
        return out.clone();
    }
    let root = std::env::var_os("HAMLET_OUT").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"));
    root.join(command)
}

/// Sets `a.b.c = value` inside a JSON object, creating intermediate objects.
fn set_path(root: &mut Value, key: &str, value: Value) -> CmdResult {
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if part.is_empty() {
            return Err(Failure::Usage(format!("malformed key `{key}`")));
        }
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Failure::Usage(format!("`{key}` descends into a non-object")))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Map::new()));
    }
    Ok(())
}

fn override_patch(g: &GlobalArgs, ov: &Overrides) -> CmdResult<Value> {
    let mut patch = Value::Object(Map::new());
    let mut put = |key: &str, v: Value| set_path(&mut patch, key, v);
    if let Some(s) = g.seed {
        put("train.seed", json!(s))?;
    }
    if let Some(p) = &ov.train_manifest {
        put("data.train_manifest", json!(p))?;
    }
    if !ov.test_manifests.is_empty() {
        put("data.test_manifests", json!(ov.test_manifests))?;
    }
    if let Some(v) = ov.epochs {
        put("train.epochs", json!(v))?;
    }
    if let Some(v) = ov.batch_size {
        put("train.batch_size", json!(v))?;
    }
    if let Some(v) = ov.lr {
        put("train.lr", json!(v))?;
    }
    if let Some(v) = ov.weight_decay {
        put("train.weight_decay", json!(v))?;
    }
    if let Some(v) = ov.grad_clip {
        put("train.grad_clip", json!(v))?;
    }
    if let Some(v) = ov.dropout {
        put("prompts.dropout_rate", json!(v))?;
    }
    if let Some(v) = ov.heads {
        put("fusion.heads", json!(v))?;
    }
    for s in &ov.sets {
        let (key, raw) = s
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("`--set {s}` must look like KEY=VALUE")))?;
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        put(key.trim(), value)?;
    }
    Ok(patch)
}

/// Config file over profile defaults, then command-line overrides, validated.
fn resolve(g: &GlobalArgs, ov: &Overrides) -> CmdResult<RunConfig> {
    let mut doc = match &g.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
            if text.trim().is_empty() {
                Value::Object(Map::new())
            } else {
                serde_json::from_str(&text)
                    .map_err(|e| Failure::from(Error::config("<root>", format!("{}: {e}", path.display()))))?
            }
        }
        None => Value::Object(Map::new()),
    };
    if !doc.is_object() {
        return Err(Error::config("<root>", "configuration must be a JSON object").into());
    }
    deep_merge(&mut doc, override_patch(g, ov)?);
    Ok(resolve_str(&doc.to_string(), g.profile)?)
}

/// The configuration a checkpoint was trained with, falling back to the command line.
fn checkpoint_config(g: &GlobalArgs, ckpt: &Path) -> CmdResult<RunConfig> {
    match sidecar_config(ckpt)? {
        Some(cfg) => {
            cfg.validate()?;
            Ok(cfg)
        }
        None => resolve(g, &Overrides::default()),
    }
}

fn load_model(g: &GlobalArgs, ckpt: &Path) -> CmdResult<(RunConfig, Detector<f32>)> {
    let cfg = checkpoint_config(g, ckpt)?;
    let det = load_detector(&Checkpoint::read(ckpt)?, &cfg)?;
    Ok((cfg, det))
}

fn train(g: &GlobalArgs, ov: &Overrides, out: &Path) -> CmdResult {
    let cfg = resolve(g, ov)?;
    let manifest = cfg
        .data
        .train_manifest
        .clone()
        .ok_or_else(|| Failure::Usage("no training manifest (data.train_manifest or --train-manifest)".into()))?;
    echo_config(out, &cfg)?;
    let train_set = LoadedSet::load(&manifest)?;
    let backbone = init_backbone(&cfg.backbone)?;
    let data = train_set.encode(&backbone, &cfg)?;
    eprintln!("training on {} frames from {}", data.len(), manifest.display());
    let run = train_run(&cfg, Arc::clone(&backbone), &data)?;
    let digests = write_run(out, &cfg, &run)?;
    let mut reports = Vec::new();
    for path in &cfg.data.test_manifests {
        let set = LoadedSet::load(path)?;
        let enc = set.encode(&backbone, &cfg)?;
        reports.push(NamedReport {
            set: set.name.clone(),
            report: evaluate(&run.detector, &enc, cfg.eval.batch_size)?,
        });
    }
    if !reports.is_empty() {
        write_json(&out.join("metrics.json"), &reports)?;
    }
    let summary = json!({
        "out": out,
        "seed": cfg.train.seed,
        "digests": digests,
        "log": run.outcome.log.summary(),
        "reports": reports,
    });
    println!("{}", serde_json::to_string_pretty(&summary).map_err(Error::from)?);
    Ok(())
}

fn eval(g: &GlobalArgs, ckpt: &Path, manifests: &[PathBuf], batch: Option<usize>, out: &Path) -> CmdResult {
    let (mut cfg, det) = load_model(g, ckpt)?;
    if let Some(b) = batch {
        cfg.eval.batch_size = b;
    }
    cfg.data.test_manifests = manifests.to_vec();
    echo_config(out, &cfg)?;
    let mut reports = Vec::new();
    for path in manifests {
        let set = LoadedSet::load(path)?;
        let enc = set.encode(&det.backbone, &cfg)?;
        reports.push(NamedReport {
            set: set.name.clone(),
            report: evaluate(&det, &enc, cfg.eval.batch_size)?,
        });
    }
    write_json(&out.join("metrics.json"), &reports)?;
    let text = if let [single] = reports.as_slice() {
        serde_json::to_string_pretty(&single.report)
    } else {
        serde_json::to_string_pretty(&reports)
    };
    println!("{}", text.map_err(Error::from)?);
    Ok(())
}

fn perturb_eval(g: &GlobalArgs, ckpt: &Path, manifest: &Path, out: &Path) -> CmdResult {
    let (cfg, det) = load_model(g, ckpt)?;
    echo_config(out, &cfg)?;
    let set = LoadedSet::load(manifest)?;
    let seed = g.seed.unwrap_or(cfg.train.seed);
    let grid = perturbation_grid(
        &det,
        &set.images,
        &set.labels(),
        &cfg.data.normalization,
        seed,
        cfg.eval.batch_size,
    )?;
    let csv = grid.to_csv();
    let path = out.join("robustness.csv");
    fs::write(&path, &csv).map_err(|e| io_err(&path, e))?;
    write_json(&out.join("digests.json"), &json!({ "robustness_sha256": sha256_hex(csv.as_bytes()) }))?;
    print!("{csv}");
    Ok(())
}

fn ablate(g: &GlobalArgs, axes: &[AblationAxis], ov: &Overrides, out: &Path) -> CmdResult {
    let base = resolve(g, ov)?;
    let train_path = base
        .data
        .train_manifest
        .clone()
        .ok_or_else(|| Failure::Usage("no training manifest (data.train_manifest or --train-manifest)".into()))?;
    if base.data.test_manifests.is_empty() {
        return Err(Failure::Usage("ablation needs at least one test manifest".into()));
    }
    echo_config(out, &base)?;
    let train_set = LoadedSet::load(&train_path)?;
    let tests = base
        .data
        .test_manifests
        .iter()
        .map(|p| LoadedSet::load(p))
        .collect::<Result<Vec<_>, _>>()?;
    let axes = if axes.is_empty() { AblationAxis::ALL.to_vec() } else { axes.to_vec() };
    let all: Vec<_> = axes.iter().flat_map(|&a| cells(a, &base)).collect();
    eprintln!("{} ablation cells", all.len());
    let rows = run_ablation(&all, &train_set, &tests);
    let path = out.join("ablation.csv");
    let mut buf = Vec::new();
    write_csv(&rows, &mut buf)?;
    fs::write(&path, &buf).map_err(|e| io_err(&path, e))?;
    write_json(&out.join("digests.json"), &json!({ "ablation_sha256": sha256_hex(&buf) }))?;
    let failed = rows.iter().filter(|r| r.result.is_err()).count();
    println!("{} rows ({failed} failed) written to {}", rows.len(), path.display());
    Ok(())
}

fn attn_export(g: &GlobalArgs, ckpt: &Path, manifest: &Path, index: Option<usize>, out: &Path) -> CmdResult {
    let (cfg, det) = load_model(g, ckpt)?;
    echo_config(out, &cfg)?;
    let set = LoadedSet::load(manifest)?;
    let picks: Vec<usize> = match index {
        Some(i) => vec![i],
        None => (0..cfg.eval.attention_samples.min(set.images.len())).collect(),
    };
    if let Some(&bad) = picks.iter().find(|&&i| i >= set.images.len()) {
        return Err(Failure::Usage(format!("sample {bad} outside a set of {}", set.images.len())));
    }
    let images: Vec<_> = picks.iter().map(|&i| set.images[i].clone()).collect();
    let labels: Vec<u8> = picks.iter().map(|&i| set.records[i].label).collect();
    let videos = vec![None; picks.len()];
    let enc = encode_images(&det.backbone, &images, &labels, &videos, &cfg.data.normalization)?;
    let mut written = 0;
    for (row, &i) in picks.iter().enumerate() {
        let (_, levels, _) = enc.batch(&[row])?;
        let dir = out.join(format!("sample_{i:04}"));
        written += export_attention_maps(&det, &levels, 0, &dir)?.len();
    }
    println!("{written} maps for {} sample(s) written under {}", picks.len(), out.display());
    Ok(())
}
