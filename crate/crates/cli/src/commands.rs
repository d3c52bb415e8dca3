use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use sparsefocus::eval::{
    aggregate_sct, difference_map, evaluate_case, mean_of_summaries, render_report, render_table,
    summarize, CaseReport, Report, ReportFormat, ReportMetadata, Summary, DEFAULT_DICE_THRESHOLDS,
    DEFAULT_MASK_THRESHOLD,
};
use sparsefocus::image::{HuImage, MrImage};
use sparsefocus::network::{load_checkpoint, Model, MODEL_JSON};
use sparsefocus::phantom::{generate_dataset, SplitCounts};
use sparsefocus::sample::{
    list_case_dirs, read_f32_plane, read_meta, read_prediction, read_sample, write_f32_plane,
    write_meta, write_prediction, DIFF_FILE, META_FILE, MR_FILE,
};
use sparsefocus::trainer::{load_selected, SELECTED_FILE};
use sparsefocus::{read_cases, train, Meta, PhantomParams, Prediction, TrainConfig, Variant};

use crate::{
    config_hash, fresh_dir, read_json, write_json, Failure, RunManifest, CONFIG_FILE,
};

pub const REPORT_FILE: &str = "report.json";
pub const TABLE_MD: &str = "table.md";
pub const TABLE_CSV: &str = "table.csv";
pub const PRED_DIR: &str = "pred";

#[derive(Debug, Clone, Args)]
pub struct PhantomArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 120)]
    pub train: usize,
    #[arg(long, default_value_t = 20)]
    pub val: usize,
    #[arg(long, default_value_t = 40)]
    pub test: usize,
    /// Overrides `size` from --params.
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// JSON file with phantom parameters; missing keys take defaults.
    #[arg(long)]
    pub params: Option<PathBuf>,
    /// Replace the splits of an existing dataset directory.
    #[arg(long)]
    pub force: bool,
}

pub fn cmd_phantom(args: &PhantomArgs) -> Result<()> {
    if args.train == 0 || args.val == 0 || args.test == 0 {
        return Err(Failure::usage("--train, --val and --test must be at least 1"));
    }
    let mut params: PhantomParams = match &args.params {
        Some(p) => read_json(p)?,
        None => PhantomParams::default(),
    };
    if let Some(s) = args.size {
        params.size = s;
    }
    let counts = SplitCounts {
        train: args.train,
        val: args.val,
        test: args.test,
    };
    generate_dataset(&args.out, counts, &params, args.seed, args.force)?;
    Ok(())
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// Dataset directory with `train/` and `val/` splits.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub variant: Variant,
    /// JSON training config; missing keys take defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

/// Training config plus variant, as hashed into `config_hash`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResolvedConfig {
    pub variant: Variant,
    pub train: TrainConfig,
}

impl ResolvedConfig {
    pub fn hash(&self) -> Result<String> {
        config_hash(self)
    }
}

fn load_train_config(
    path: Option<&Path>,
    seed: Option<u64>,
    epochs: Option<usize>,
) -> Result<TrainConfig> {
    let mut cfg: TrainConfig = match path {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(e) = epochs {
        cfg.epochs = e;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let cfg = load_train_config(args.config.as_deref(), args.seed, args.epochs)?;
    let data = Data::open(&args.data)?;
    run_training(&data, &args.out, args.variant, &cfg)?;
    Ok(())
}

/// Dataset splits loaded once.
pub struct Data {
    pub train: Vec<sparsefocus::Case>,
    pub val: Vec<sparsefocus::Case>,
    pub test_dir: PathBuf,
}

impl Data {
    pub fn open(dir: &Path) -> Result<Self> {
        Ok(Data {
            train: read_cases(&dir.join("train")).context("loading train split")?,
            val: read_cases(&dir.join("val")).context("loading val split")?,
            test_dir: dir.join("test"),
        })
    }
}

/// Trains into a fresh run directory and returns the selected model.
pub fn run_training(
    data: &Data,
    out: &Path,
    variant: Variant,
    cfg: &TrainConfig,
) -> Result<Model<f32>> {
    fresh_dir(out)?;
    let resolved = ResolvedConfig {
        variant,
        train: cfg.clone(),
    };
    let hash = resolved.hash()?;
    let mut manifest = RunManifest::start(hash, vec![cfg.seed], Some(variant.to_string()));
    manifest.write(out)?;
    write_json(&out.join(CONFIG_FILE), &resolved)?;
    match train(&data.train, &data.val, cfg, variant, Some(out)) {
        Ok(outcome) => {
            let ckpt = outcome.selected.path.clone().unwrap_or_default();
            manifest.finish(
                "ok",
                vec![
                    CONFIG_FILE.into(),
                    "history.json".into(),
                    SELECTED_FILE.into(),
                    ckpt,
                ],
            );
            manifest.write(out)?;
            Ok(outcome.selected_model)
        }
        Err(e) => {
            manifest.finish("failed", Vec::new());
            manifest.write(out)?;
            Err(e.into())
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct PredictArgs {
    /// Run directory (uses the selected checkpoint) or a checkpoint directory.
    #[arg(long)]
    pub model: PathBuf,
    /// A sample directory, or a directory of sample directories.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_MASK_THRESHOLD)]
    pub mask_threshold: f32,
    /// Planes to write; defaults to every head the model has.
    #[arg(long, value_delimiter = ',')]
    pub outputs: Option<Vec<String>>,
}

/// Provenance stamped into prediction metadata.
#[derive(Debug, Clone, Default)]
pub struct Provenance {
    pub train_seed: Option<u64>,
    pub config_hash: Option<String>,
}

fn load_model(path: &Path) -> Result<(Model<f32>, Provenance)> {
    let model = if path.join(SELECTED_FILE).is_file() {
        load_selected(path)?.1
    } else if path.join(MODEL_JSON).is_file() {
        load_checkpoint(path)?
    } else {
        return Err(Failure::usage(format!(
            "{} is neither a run directory nor a checkpoint",
            path.display()
        )));
    };
    let prov = match RunManifest::read(path) {
        Ok(m) => Provenance {
            train_seed: m.seeds.first().copied(),
            config_hash: Some(m.config_hash),
        },
        Err(_) => Provenance::default(),
    };
    Ok((model, prov))
}

/// `(id, dir)` pairs: the directory itself when it is a sample, otherwise
/// its sample subdirectories.
fn case_dirs(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    if dir.join(META_FILE).is_file() {
        let id = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "case".into());
        return Ok(vec![(id, dir.to_path_buf())]);
    }
    if !dir.is_dir() {
        return Err(sparsefocus::Error::MissingFile(dir.to_path_buf()).into());
    }
    let list = list_case_dirs(dir)?;
    if list.is_empty() {
        return Err(Failure::usage(format!("no samples under {}", dir.display())));
    }
    Ok(list)
}

fn read_mr(dir: &Path) -> Result<(Meta, MrImage)> {
    let meta = read_meta(dir)?;
    let plane = read_f32_plane(&dir.join(MR_FILE), meta.height, meta.width)?;
    Ok((meta, MrImage::from_normalized(plane)))
}

fn check_outputs(variant: Variant, requested: &Option<Vec<String>>) -> Result<[bool; 2]> {
    let Some(req) = requested else {
        return Ok([variant.has_bone_head(), variant.has_mask_head()]);
    };
    let mut want = [false; 2];
    for r in req {
        match r.as_str() {
            "sct" => {}
            "bone" if variant.has_bone_head() => want[0] = true,
            "mask" if variant.has_mask_head() => want[1] = true,
            "bone" | "mask" => {
                return Err(Failure::usage(format!(
                    "a {variant} model has no {r} head"
                )))
            }
            other => return Err(Failure::usage(format!("unknown output {other:?}"))),
        }
    }
    Ok(want)
}

/// Predicts every case under `input` into `out/<id>/` (or `out/` for a
/// single sample directory).
pub fn predict_into(
    model: &Model<f32>,
    prov: &Provenance,
    input: &Path,
    out: &Path,
    mask_threshold: f32,
    outputs: [bool; 2],
) -> Result<Vec<String>> {
    if !(0.0..=1.0).contains(&mask_threshold) {
        return Err(Failure::usage("--mask-threshold must lie in [0, 1]"));
    }
    let single = input.join(META_FILE).is_file();
    let cases = case_dirs(input)?;
    let variant = model.variant();
    fs::create_dir_all(out)?;
    let mut ids = Vec::with_capacity(cases.len());
    for (id, dir) in cases {
        let (src, mr) = read_mr(&dir)?;
        let pred = model
            .predict(&[&mr])?
            .pop()
            .expect("one prediction per input");
        let sct = aggregate_sct(&pred, variant, mask_threshold)?;
        let written = Prediction {
            sct: sct.image().clone(),
            bone: pred.bone.filter(|_| outputs[0]),
            mask: pred.mask.filter(|_| outputs[1]),
        };
        let mut meta = Meta::new(src.height, src.width, src.seed);
        meta.variant = Some(variant.to_string());
        meta.train_seed = prov.train_seed;
        meta.config_hash = prov.config_hash.clone();
        let dst = if single { out.to_path_buf() } else { out.join(&id) };
        fs::create_dir_all(&dst)?;
        write_prediction(&written, &meta, &dst)?;
        ids.push(id);
    }
    Ok(ids)
}

pub fn cmd_predict(args: &PredictArgs) -> Result<()> {
    let (model, prov) = load_model(&args.model)?;
    let outputs = check_outputs(model.variant(), &args.outputs)?;
    predict_into(
        &model,
        &prov,
        &args.input,
        &args.out,
        args.mask_threshold,
        outputs,
    )?;
    Ok(())
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long = "ref")]
    pub reference: PathBuf,
    /// Report path; difference maps go to `diff/` beside it.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_DICE_THRESHOLDS.to_vec())]
    pub thresholds: Vec<f64>,
    #[arg(long, default_value = "json")]
    pub format: String,
}

/// Directory receiving the difference maps of the report at `report`.
pub fn diff_dir(report: &Path) -> PathBuf {
    report
        .parent()
        .map(|p| p.join("diff"))
        .unwrap_or_else(|| PathBuf::from("diff"))
}

/// Evaluates predictions against references and writes the report.
pub fn evaluate_dirs(
    pred: &Path,
    reference: &Path,
    out: &Path,
    thresholds: &[f64],
    format: ReportFormat,
) -> Result<Report> {
    if thresholds.is_empty() {
        return Err(Failure::usage("--thresholds must not be empty"));
    }
    if let Some(t) = thresholds.iter().find(|t| !t.is_finite()) {
        return Err(Failure::usage(format!("invalid threshold {t}")));
    }
    let preds = case_dirs(pred)?;
    let refs = case_dirs(reference)?;
    let pairs: Vec<(String, PathBuf, PathBuf)> = if preds.len() == 1 && refs.len() == 1 {
        vec![(refs[0].0.clone(), preds[0].1.clone(), refs[0].1.clone())]
    } else {
        let p: BTreeSet<&String> = preds.iter().map(|(id, _)| id).collect();
        let r: BTreeSet<&String> = refs.iter().map(|(id, _)| id).collect();
        let unpaired: Vec<&str> = p.symmetric_difference(&r).map(|s| s.as_str()).collect();
        if !unpaired.is_empty() {
            return Err(Failure::usage(format!(
                "unpaired case ids: {}",
                unpaired.join(", ")
            )));
        }
        preds
            .iter()
            .zip(&refs)
            .map(|((id, pd), (_, rd))| (id.clone(), pd.clone(), rd.clone()))
            .collect()
    };

    let diffs = diff_dir(out);
    let results: Vec<(Meta, CaseReport)> = pairs
        .par_iter()
        .map(|(id, pd, rd)| -> Result<(Meta, CaseReport)> {
            let (meta, p) = read_prediction(pd)?;
            let reference = read_sample(rd)?;
            let sct = HuImage::clamped(p.sct);
            let metrics = evaluate_case(&sct, &reference.ct, &reference.body, thresholds)
                .with_context(|| format!("case {id}"))?;
            let diff = difference_map(&sct, &reference.ct)?;
            let dst = diffs.join(id);
            fs::create_dir_all(&dst)?;
            write_meta(&dst, &Meta::new(meta.height, meta.width, meta.seed))?;
            write_f32_plane(&dst.join(DIFF_FILE), diff.values())?;
            Ok((
                meta,
                CaseReport {
                    id: id.clone(),
                    metrics,
                },
            ))
        })
        .collect::<Result<_>>()?;

    let first = &results[0].0;
    let metadata = ReportMetadata {
        variant: first.variant.clone().unwrap_or_else(|| "none".into()),
        seed: first.train_seed.unwrap_or(0),
        config_hash: first.config_hash.clone().unwrap_or_default(),
    };
    if results.iter().any(|(m, _)| {
        m.variant != first.variant
            || m.train_seed != first.train_seed
            || m.config_hash != first.config_hash
    }) {
        return Err(Failure::usage(
            "predictions come from different models (variant, seed or config differ)",
        ));
    }
    let cases: Vec<CaseReport> = results.into_iter().map(|(_, c)| c).collect();
    let report = summarize(&cases, metadata)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(out, render_report(&report, format)?)
        .with_context(|| format!("writing {}", out.display()))?;
    Ok(report)
}

pub fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let format: ReportFormat = args.format.parse()?;
    evaluate_dirs(
        &args.pred,
        &args.reference,
        &args.out,
        &args.thresholds,
        format,
    )?;
    Ok(())
}

#[derive(Debug, Clone, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = Variant::ALL.to_vec())]
    pub variants: Vec<Variant>,
    #[arg(long, value_delimiter = ',', default_values_t = vec![1u64, 2, 3])]
    pub seeds: Vec<u64>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Sub-runs trained concurrently.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[arg(long, default_value_t = DEFAULT_MASK_THRESHOLD)]
    pub mask_threshold: f32,
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_DICE_THRESHOLDS.to_vec())]
    pub thresholds: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: Variant,
    pub seeds: Vec<u64>,
    pub runs: Vec<PathBuf>,
    pub summary: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunFailure {
    pub variant: Variant,
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub config_hash: String,
    pub variants: Vec<VariantSummary>,
    pub failures: Vec<RunFailure>,
}

pub fn run_dir_name(variant: Variant, seed: u64) -> String {
    format!("{variant}-seed{seed}")
}

pub fn cmd_ablate(args: &AblateArgs) -> Result<()> {
    if args.variants.is_empty() || args.seeds.is_empty() {
        return Err(Failure::usage("--variants and --seeds must not be empty"));
    }
    if args.jobs == 0 {
        return Err(Failure::usage("--jobs must be at least 1"));
    }
    let mut variants = args.variants.clone();
    variants.sort();
    variants.dedup();
    let mut seeds = args.seeds.clone();
    seeds.dedup();
    let base = load_train_config(args.config.as_deref(), None, args.epochs)?;
    let data = Data::open(&args.data)?;
    if !data.test_dir.is_dir() {
        return Err(sparsefocus::Error::MissingFile(data.test_dir.clone()).into());
    }
    fresh_dir(&args.out)?;
    let hash = config_hash(&base)?;
    let mut manifest = RunManifest::start(hash.clone(), seeds.clone(), None);
    manifest.write(&args.out)?;

    let jobs: Vec<(Variant, u64)> = variants
        .iter()
        .flat_map(|&v| seeds.iter().map(move |&s| (v, s)))
        .collect();
    let one = |&(variant, seed): &(Variant, u64)| -> Result<Report> {
        let dir = args.out.join(run_dir_name(variant, seed));
        let cfg = TrainConfig {
            seed,
            ..base.clone()
        };
        let model = run_training(&data, &dir, variant, &cfg)?;
        let prov = Provenance {
            train_seed: Some(seed),
            config_hash: Some(
                ResolvedConfig {
                    variant,
                    train: cfg,
                }
                .hash()?,
            ),
        };
        let outputs = [variant.has_bone_head(), variant.has_mask_head()];
        let pred = dir.join(PRED_DIR);
        predict_into(&model, &prov, &data.test_dir, &pred, args.mask_threshold, outputs)?;
        evaluate_dirs(
            &pred,
            &data.test_dir,
            &dir.join(REPORT_FILE),
            &args.thresholds,
            ReportFormat::Json,
        )
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.jobs)
        .build()
        .context("building job pool")?;
    let results: Vec<Result<Report>> = pool.install(|| jobs.par_iter().map(one).collect());

    let mut failures = Vec::new();
    let mut per_variant: Vec<VariantSummary> = Vec::new();
    for &v in &variants {
        let mut summaries = Vec::new();
        let mut ok_seeds = Vec::new();
        for ((jv, seed), res) in jobs.iter().zip(&results) {
            if *jv != v {
                continue;
            }
            match res {
                Ok(r) => {
                    summaries.push(r.summary.clone());
                    ok_seeds.push(*seed);
                }
                Err(e) => failures.push(RunFailure {
                    variant: v,
                    seed: *seed,
                    error: format!("{e:#}"),
                }),
            }
        }
        if !summaries.is_empty() {
            per_variant.push(VariantSummary {
                variant: v,
                runs: ok_seeds
                    .iter()
                    .map(|&s| PathBuf::from(run_dir_name(v, s)).join(REPORT_FILE))
                    .collect(),
                seeds: ok_seeds,
                summary: mean_of_summaries(&summaries)?,
            });
        }
    }
    let report = AblationReport {
        config_hash: hash,
        variants: per_variant,
        failures,
    };
    write_json(&args.out.join(REPORT_FILE), &report)?;
    let rows: Vec<(String, &Summary)> = report
        .variants
        .iter()
        .map(|v| (v.variant.to_string(), &v.summary))
        .collect();
    let mut artifacts = vec![PathBuf::from(REPORT_FILE)];
    if !rows.is_empty() {
        fs::write(
            args.out.join(TABLE_MD),
            render_table(&rows, ReportFormat::Markdown)?,
        )?;
        fs::write(args.out.join(TABLE_CSV), render_table(&rows, ReportFormat::Csv)?)?;
        artifacts.push(TABLE_MD.into());
        artifacts.push(TABLE_CSV.into());
    }
    let status = if report.failures.is_empty() { "ok" } else { "partial" };
    manifest.finish(status, artifacts);
    manifest.write(&args.out)?;
    if !report.failures.is_empty() {
        let list: Vec<String> = report
            .failures
            .iter()
            .map(|f| format!("{}: {}", run_dir_name(f.variant, f.seed), f.error))
            .collect();
        return Err(Failure::partial(format!(
            "{} of {} runs failed:\n{}",
            list.len(),
            jobs.len(),
            list.join("\n")
        )));
    }
    Ok(())
}
