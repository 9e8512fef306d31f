use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgAction, Parser, Subcommand};
use log::info;
use serde_json::json;

use xattn_core::data::{
    load_dataset, read_annotations, read_detections, read_reports, read_roi_sets, synth_generate,
    synth_table, write_annotations, write_atomic, write_detections, write_jsonl, write_reports,
    write_roi_sets_jsonl,
};
use xattn_core::embed::{train_embeddings, EmbeddingTable};
use xattn_core::eval::{
    classification_metrics, infer, localization_metrics, severity_correlation, EvalReport, HitMode,
};
use xattn_core::grad::check_primitives;
use xattn_core::model::{load_checkpoint, loss_gradient_check, save_checkpoint};
use xattn_core::text::{extract_attributes, tokenize, DiseaseTerms};
use xattn_core::train::{train, write_loss_csv};
use xattn_core::{AttributeVocabulary, Error, ModelParams};

mod config;

use config::Settings;

const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(
    name = "xattn",
    version,
    about = "Attribute-grounded ROI localization trained from report text"
)]
struct Cli {
    /// Flat `key = value` file; command-line flags take precedence.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Seed for every random choice (falls back to the config file, then XATTN_SEED, then 0).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Extract attribute words from reports into JSONL.
    Extract {
        #[arg(long)]
        reports: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated disease terms.
        #[arg(long)]
        disease_terms: Option<String>,
    },
    /// Train skip-gram word vectors on a corpus.
    Embed {
        /// Reports JSONL, or plain text with one document per line.
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        dim: Option<usize>,
        #[arg(long)]
        window: Option<usize>,
        #[arg(long)]
        negatives: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Train the grounding model.
    Train {
        /// Directory holding reports.jsonl, rois.jsonl (or rois.bin) and embeddings.txt.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        reports: Option<PathBuf>,
        #[arg(long)]
        rois: Option<PathBuf>,
        #[arg(long)]
        embeddings: Option<PathBuf>,
        /// Output directory (defaults to the data directory).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        max_steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
    },
    /// Select boxes and attribute probabilities without report text.
    Infer {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        rois: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Localization, classification and severity metrics for detections.
    Eval {
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        annotations: PathBuf,
        /// Reports supply attribute targets and severity grades.
        #[arg(long)]
        reports: Option<PathBuf>,
        /// Restrict to the test ids of a split.json written by `train`.
        #[arg(long)]
        split: Option<PathBuf>,
        #[arg(long)]
        hit_mode: Option<HitMode>,
        /// Comma-separated IoU thresholds.
        #[arg(long)]
        thresholds: Option<String>,
        #[arg(long)]
        json: bool,
    },
    /// Cross-validated regression of expert severity on attribute probabilities.
    Severity {
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        reports: PathBuf,
        /// Comma-separated attribute words.
        #[arg(long)]
        attrs: Option<String>,
        #[arg(long)]
        folds: Option<usize>,
    },
    /// Write a synthetic planted-correspondence dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        num_images: Option<usize>,
        #[arg(long)]
        rois_per_image: Option<usize>,
        #[arg(long)]
        feat_dim: Option<usize>,
        #[arg(long)]
        attrs_per_image: Option<usize>,
        #[arg(long)]
        noise_sigma: Option<f64>,
        /// Attribute vector dimension.
        #[arg(long)]
        embed_dim: Option<usize>,
    },
    /// Finite-difference check of every primitive and the full loss.
    Gradcheck {
        #[arg(long, default_value_t = 10)]
        points: usize,
    },
}

enum Failure {
    Usage(String),
    Core(Error),
    Numeric(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) | Failure::Core(Error::InvalidConfig(_)) => 1,
            Failure::Core(e) if e.is_numeric() => 3,
            Failure::Core(_) => 2,
            Failure::Numeric(_) => 3,
        }
    }
}

type CliResult = std::result::Result<(), Failure>;

fn apply<T: ToString>(
    s: &mut Settings,
    key: &str,
    value: Option<T>,
) -> std::result::Result<(), Failure> {
    if let Some(v) = value {
        s.set(key, &v.to_string()).map_err(Failure::Usage)?;
    }
    Ok(())
}

fn resolve_seed(cli: Option<u64>, settings: &Settings) -> std::result::Result<u64, Failure> {
    if let Some(s) = cli.or(settings.seed) {
        return Ok(s);
    }
    match std::env::var("XATTN_SEED") {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Failure::Usage(format!("XATTN_SEED `{v}` is not an unsigned integer"))),
        Err(_) => Ok(0),
    }
}

fn disease_terms(settings: &Settings) -> DiseaseTerms {
    settings
        .disease_terms
        .as_ref()
        .map_or_else(DiseaseTerms::default, DiseaseTerms::new)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Usage(m) => eprintln!("error: {m}\n\nFor more information, try '--help'."),
                Failure::Core(e) => eprintln!("error: {e}"),
                Failure::Numeric(m) => eprintln!("error: {m}"),
            }
            ExitCode::from(f.exit_code())
        }
    }
}

fn run(cli: Cli) -> CliResult {
    let mut settings = Settings::load(cli.config.as_deref()).map_err(Failure::Usage)?;
    let seed = resolve_seed(cli.seed, &settings)?;
    match cli.command {
        Command::Extract {
            reports,
            out,
            disease_terms: terms,
        } => {
            apply(&mut settings, "disease_terms", terms)?;
            extract(&reports, &out, &settings)
        }
        Command::Embed {
            corpus,
            out,
            dim,
            window,
            negatives,
            epochs,
            lr,
        } => {
            apply(&mut settings, "embed_dim", dim)?;
            apply(&mut settings, "window", window)?;
            apply(&mut settings, "negatives", negatives)?;
            apply(&mut settings, "embed_epochs", epochs)?;
            apply(&mut settings, "embed_lr", lr)?;
            settings.embed.seed = seed;
            embed(&corpus, &out, &settings)
        }
        Command::Train {
            data,
            reports,
            rois,
            embeddings,
            out,
            epochs,
            max_steps,
            lr,
            batch_size,
        } => {
            apply(&mut settings, "epochs", epochs)?;
            apply(&mut settings, "max_steps", max_steps)?;
            apply(&mut settings, "lr", lr)?;
            apply(&mut settings, "batch_size", batch_size)?;
            settings.train.seed = seed;
            let paths = TrainPaths::resolve(data, reports, rois, embeddings, out)?;
            train_cmd(&paths, &settings, seed)
        }
        Command::Infer { model, rois, out } => infer_cmd(&model, &rois, &out),
        Command::Eval {
            detections,
            annotations,
            reports,
            split,
            hit_mode,
            thresholds,
            json,
        } => {
            apply(&mut settings, "hit_mode", hit_mode)?;
            apply(&mut settings, "thresholds", thresholds)?;
            eval_cmd(
                &detections,
                &annotations,
                reports.as_deref(),
                split.as_deref(),
                json,
                &settings,
                seed,
            )
        }
        Command::Severity {
            detections,
            reports,
            attrs,
            folds,
        } => {
            apply(&mut settings, "severity_attrs", attrs)?;
            apply(&mut settings, "folds", folds)?;
            severity_cmd(&detections, &reports, &settings, seed)
        }
        Command::Synth {
            out,
            num_images,
            rois_per_image,
            feat_dim,
            attrs_per_image,
            noise_sigma,
            embed_dim,
        } => {
            apply(&mut settings, "num_images", num_images)?;
            apply(&mut settings, "rois_per_image", rois_per_image)?;
            apply(&mut settings, "feat_dim", feat_dim)?;
            apply(&mut settings, "attrs_per_image", attrs_per_image)?;
            apply(&mut settings, "noise_sigma", noise_sigma)?;
            apply(&mut settings, "embed_dim", embed_dim)?;
            settings.synth.seed = seed;
            synth_cmd(&out, &settings)
        }
        Command::Gradcheck { points } => gradcheck(points, seed),
    }
}

fn extract(reports: &Path, out: &Path, settings: &Settings) -> CliResult {
    let reports = read_reports(reports)?;
    let vocab = AttributeVocabulary::load();
    let terms = disease_terms(settings);
    let records: Vec<_> = reports
        .iter()
        .map(|r| json!({ "id": r.id, "attributes": extract_attributes(r, &vocab, &terms).words(&vocab) }))
        .collect();
    write_jsonl(out, &records)?;
    println!(
        "extracted attributes for {} reports -> {}",
        records.len(),
        out.display()
    );
    Ok(())
}

fn embed(corpus: &Path, out: &Path, settings: &Settings) -> CliResult {
    let docs: Vec<String> = if corpus.extension().is_some_and(|e| e == "jsonl") {
        read_reports(corpus)?.into_iter().map(|r| r.text).collect()
    } else {
        std::fs::read_to_string(corpus)
            .map_err(Error::from)?
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(str::to_string)
            .collect()
    };
    let tokens: Vec<_> = docs.iter().map(|d| tokenize(d)).collect();
    let table = train_embeddings(&tokens, &settings.embed)?;
    table.save(out)?;
    println!(
        "{} words x {} dims -> {}",
        table.len(),
        table.dim(),
        out.display()
    );
    Ok(())
}

struct TrainPaths {
    reports: PathBuf,
    rois: PathBuf,
    embeddings: PathBuf,
    out: PathBuf,
}

impl TrainPaths {
    fn resolve(
        data: Option<PathBuf>,
        reports: Option<PathBuf>,
        rois: Option<PathBuf>,
        embeddings: Option<PathBuf>,
        out: Option<PathBuf>,
    ) -> std::result::Result<Self, Failure> {
        let in_data = |name: &str| data.as_ref().map(|d| d.join(name));
        let rois_default = data.as_ref().map(|d| {
            let bin = d.join("rois.bin");
            if bin.exists() {
                bin
            } else {
                d.join("rois.jsonl")
            }
        });
        let missing =
            |flag: &str| Failure::Usage(format!("`--{flag}` is required without `--data`"));
        Ok(Self {
            reports: reports
                .or_else(|| in_data("reports.jsonl"))
                .ok_or_else(|| missing("reports"))?,
            rois: rois.or(rois_default).ok_or_else(|| missing("rois"))?,
            embeddings: embeddings
                .or_else(|| in_data("embeddings.txt"))
                .ok_or_else(|| missing("embeddings"))?,
            out: out.or(data).unwrap_or_else(|| PathBuf::from(".")),
        })
    }
}

fn train_cmd(paths: &TrainPaths, settings: &Settings, seed: u64) -> CliResult {
    let table = EmbeddingTable::load(&paths.embeddings)?;
    let ds = load_dataset(
        &paths.reports,
        &paths.rois,
        None,
        &table,
        &disease_terms(settings),
    )?;
    let roi_dim = ds
        .samples
        .first()
        .ok_or(Error::EmptyDataset)?
        .roi_set
        .feature_dim();
    let mut settings = settings.clone();
    if !settings.model.contains_key("joint_dim") {
        settings
            .model
            .insert("joint_dim".into(), table.dim().to_string());
    }
    let mcfg = settings.model_config(roi_dim).map_err(Failure::Usage)?;
    if mcfg.joint_dim != table.dim() {
        return Err(Failure::Usage(format!(
            "joint_dim {} must equal the embedding dimension {}",
            mcfg.joint_dim,
            table.dim()
        )));
    }
    let init = ModelParams::init(mcfg, seed)?;
    info!(
        "training on {} samples, {} parameters",
        ds.samples.len(),
        init.num_trainable()
    );
    let outcome = train(&ds.samples, &table, &settings.train, init)?;

    std::fs::create_dir_all(&paths.out).map_err(Error::from)?;
    let ckpt = paths.out.join("model.ckpt");
    save_checkpoint(&outcome.params, &ckpt)?;
    write_loss_csv(&paths.out.join("loss.csv"), &outcome.trace)?;
    let ids = |ix: &[usize]| -> Vec<&str> {
        ix.iter()
            .map(|&i| ds.samples[i].image_id.as_str())
            .collect()
    };
    let split = json!({
        "train": ids(&outcome.split.train),
        "val": ids(&outcome.split.val),
        "test": ids(&outcome.split.test),
    });
    write_atomic(&paths.out.join("split.json"), split.to_string().as_bytes())?;
    let last = outcome.trace.last();
    println!(
        "{} epochs, {} steps (best epoch {}{}), final train loss {:.4} -> {}",
        outcome.trace.len(),
        outcome.steps,
        outcome.best_epoch,
        if outcome.stopped_early {
            ", stopped early"
        } else {
            ""
        },
        last.map_or(f64::NAN, |r| r.train_total),
        ckpt.display()
    );
    Ok(())
}

fn infer_cmd(model: &Path, rois: &Path, out: &Path) -> CliResult {
    let params = load_checkpoint(model)?;
    let sets = read_roi_sets(rois)?;
    let dets = sets
        .iter()
        .map(|s| infer(s, &params))
        .collect::<Result<Vec<_>, _>>()?;
    write_detections(out, &dets)?;
    println!("{} images -> {}", dets.len(), out.display());
    Ok(())
}

fn read_test_ids(split: &Path) -> std::result::Result<Vec<String>, Failure> {
    let text = std::fs::read_to_string(split).map_err(Error::from)?;
    let v: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Parse {
        line: e.line(),
        msg: e.to_string(),
    })?;
    let test = v["test"].as_array().ok_or_else(|| Error::Parse {
        line: 1,
        msg: "split file has no `test` array".into(),
    })?;
    Ok(test
        .iter()
        .filter_map(|x| x.as_str().map(str::to_string))
        .collect())
}

fn severity_series<'a>(
    dets: &[xattn_core::eval::Detection],
    severity: &HashMap<String, f64>,
    attrs: &'a [String],
) -> std::result::Result<(Vec<(&'a str, Vec<f64>)>, Vec<f64>), Failure> {
    let vocab = AttributeVocabulary::load();
    let mut cols = Vec::new();
    for a in attrs {
        let j = vocab
            .index(a)
            .ok_or_else(|| Failure::Usage(format!("`{a}` is not an attribute word")))?;
        cols.push((a.as_str(), j));
    }
    let graded: Vec<_> = dets
        .iter()
        .filter_map(|d| severity.get(&d.id).map(|s| (d, *s)))
        .collect();
    let series = cols
        .iter()
        .map(|&(name, j)| (name, graded.iter().map(|(d, _)| d.attr_probs[j]).collect()))
        .collect();
    Ok((series, graded.iter().map(|(_, s)| *s).collect()))
}

fn eval_cmd(
    detections: &Path,
    annotations: &Path,
    reports: Option<&Path>,
    split: Option<&Path>,
    json_out: bool,
    settings: &Settings,
    seed: u64,
) -> CliResult {
    let mut dets = read_detections(detections)?;
    if let Some(p) = split {
        let keep = read_test_ids(p)?;
        dets.retain(|d| keep.contains(&d.id));
    }
    let gt = read_annotations(annotations)?;
    let loc = localization_metrics(&dets, &gt, &settings.thresholds, settings.hit_mode)?;

    let mut cls = None;
    let mut sev = Vec::new();
    if let Some(p) = reports {
        let reports = read_reports(p)?;
        let vocab = AttributeVocabulary::load();
        let terms = disease_terms(settings);
        let by_id: HashMap<&str, _> = reports.iter().map(|r| (r.id.as_str(), r)).collect();
        let mut probs = Vec::new();
        let mut targets = Vec::new();
        for d in &dets {
            let r = by_id
                .get(d.id.as_str())
                .ok_or_else(|| Error::IdMismatch(d.id.clone()))?;
            probs.push(d.attr_probs.clone());
            targets.push(extract_attributes(r, &vocab, &terms).target_vector());
        }
        cls = Some(classification_metrics(&probs, &targets)?);
        let severity: HashMap<String, f64> = reports
            .iter()
            .filter_map(|r| r.severity.map(|s| (r.id.clone(), s)))
            .collect();
        let (series, grades) = severity_series(&dets, &severity, &settings.severity_attrs)?;
        if grades.len() >= settings.folds.max(2) {
            let refs: Vec<(&str, &[f64])> =
                series.iter().map(|(n, v)| (*n, v.as_slice())).collect();
            sev = severity_correlation(&refs, &grades, settings.folds, seed)?;
        }
    }
    let report = EvalReport::new(dets.len(), settings.hit_mode, loc, cls.as_ref(), sev);
    if json_out {
        println!(
            "{}",
            serde_json::to_string_pretty(&report).expect("report serializes")
        );
    } else {
        print!("{}", report.to_table());
    }
    Ok(())
}

fn severity_cmd(detections: &Path, reports: &Path, settings: &Settings, seed: u64) -> CliResult {
    let dets = read_detections(detections)?;
    let severity: HashMap<String, f64> = read_reports(reports)?
        .into_iter()
        .filter_map(|r| r.severity.map(|s| (r.id, s)))
        .collect();
    let (series, grades) = severity_series(&dets, &severity, &settings.severity_attrs)?;
    let refs: Vec<(&str, &[f64])> = series.iter().map(|(n, v)| (*n, v.as_slice())).collect();
    let stats = severity_correlation(&refs, &grades, settings.folds, seed)?;
    println!(
        "{:<10} {:>15} {:>15} {:>15} {:>15} {:>15}",
        "attribute", "Pearson CC", "Spearman CC", "R2", "MAE", "MSE"
    );
    for s in &stats {
        println!(
            "{:<10} {:>15} {:>15} {:>15} {:>15} {:>15}",
            s.attribute,
            s.pearson.to_string(),
            s.spearman.to_string(),
            s.r2.to_string(),
            s.mae.to_string(),
            s.mse.to_string()
        );
    }
    Ok(())
}

fn synth_cmd(out: &Path, settings: &Settings) -> CliResult {
    let table = synth_table(settings.embed.dim, settings.synth.seed)?;
    let data = synth_generate(&settings.synth, &table)?;
    std::fs::create_dir_all(out).map_err(Error::from)?;
    write_reports(&out.join("reports.jsonl"), &data.reports)?;
    write_roi_sets_jsonl(&out.join("rois.jsonl"), &data.roi_sets())?;
    write_annotations(&out.join("annotations.jsonl"), &data.annotations())?;
    table.save(&out.join("embeddings.txt"))?;
    println!(
        "{} images x {} ROIs (feature dim {}, attribute dim {}) -> {}",
        settings.synth.num_images,
        settings.synth.rois_per_image,
        settings.synth.feat_dim,
        table.dim(),
        out.display()
    );
    Ok(())
}

fn gradcheck(points: usize, seed: u64) -> CliResult {
    let mut worst = 0.0f64;
    let mut failed = Vec::new();
    for p in check_primitives(points, seed)? {
        println!("{:<20} {:.3e}", p.name, p.max_error);
        worst = worst.max(p.max_error);
        if !(p.max_error < GRAD_TOLERANCE) {
            failed.push(p.name.to_string());
        }
    }
    for s in 0..10 {
        let e = loss_gradient_check(seed.wrapping_add(s), 3, 2)?;
        println!("{:<20} {e:.3e}", format!("total_loss[{s}]"));
        worst = worst.max(e);
        if !(e < GRAD_TOLERANCE) {
            failed.push(format!("total_loss[{s}]"));
        }
    }
    if failed.is_empty() {
        println!("all checks below {GRAD_TOLERANCE:e} (worst {worst:.3e})");
        Ok(())
    } else {
        Err(Failure::Numeric(format!(
            "gradient checks above {GRAD_TOLERANCE:e}: {}",
            failed.join(", ")
        )))
    }
}
