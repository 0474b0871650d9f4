use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use tritower::data::{
    generate_dataset, load_dataset, load_pretrained, pretrain_classifier, save_dataset, save_pretrained,
    PretrainConfig, SyntheticDataset, SyntheticSpec, PRETRAINED_FILE,
};
use tritower::evaluation::{evaluate_model, prediction_difference, EvalOptions, ImageView, PredictionDiffTable};
use tritower::losses::{LossConfig, DEFAULT_TAU};
use tritower::towers::{
    load_checkpoint, save_checkpoint, HeadVariant, Modality, ModelConfig, ModelMode, ProjectionKind, TrainingMode,
    CHECKPOINT_FILE,
};
use tritower::training::{train_on_dataset, TrainConfig};
use tritower::Model;

use crate::args::{mode_name, EvalArgs, GenDataArgs, OodArg, PretrainArgs, ReportArgs, TrainArgs};
use crate::failure::{CliResult, Context, Failure};
use crate::reports::{
    predictions_alpha_csv, read_predictions, report_csv, Predictions, ReportFile, ReportRow, PREDICTIONS_ALPHA_CSV,
    PREDICTIONS_CSV, REPORT_CSV, REPORT_JSON,
};
use crate::run::{layer_config, prepare_output, Run};

const DATASET_FILES: [&str; 6] = [
    "manifest.json",
    "image.3tmx",
    "text.3tmx",
    "latent.3tmx",
    "class_text.3tmx",
    "labels.csv",
];

fn set<T>(slot: &mut T, flag: Option<impl Into<T>>) {
    if let Some(v) = flag {
        *slot = v.into();
    }
}

fn read_dataset(dir: &Path) -> CliResult<SyntheticDataset> {
    load_dataset(dir).with(format!("loading dataset {}", dir.display()))
}

pub fn gen_data(args: GenDataArgs) -> CliResult<()> {
    let out = &args.output;
    let mut spec = layer_config(SyntheticSpec::default(), out.config.as_deref())?;
    set(&mut spec.seed, args.seed);
    set(&mut spec.latent_dim, args.latent_dim);
    set(&mut spec.img_dim, args.img_dim);
    set(&mut spec.txt_dim, args.txt_dim);
    set(&mut spec.num_classes, args.classes);
    set(&mut spec.num_pairs, args.pairs);
    set(&mut spec.noise_sigma, args.noise);
    set(&mut spec.visible_dims, args.visible_dims);
    spec.validate()?;

    prepare_output(&out.out, out.force)?;
    let mut run = Run::start("gen-data", &out.out)?;
    let ds = generate_dataset(&spec)?;
    save_dataset(run.dir(), &ds).with("writing dataset")?;
    run.record(DATASET_FILES.iter().map(|s| s.to_string()));
    run.finish(&spec, Some(spec.seed))
}

pub fn pretrain(args: PretrainArgs) -> CliResult<()> {
    let ds = read_dataset(&args.data)?;
    let out = &args.output;
    let base = PretrainConfig {
        visible_dims: ds.spec.visible_dims,
        ..PretrainConfig::default()
    };
    let mut cfg = layer_config(base, out.config.as_deref())?;
    set(&mut cfg.visible_dims, args.visible_dims);
    set(&mut cfg.steps, args.steps);
    set(&mut cfg.batch_size, args.batch);
    set(&mut cfg.peak_lr, args.lr);
    set(&mut cfg.weight_decay, args.weight_decay);
    set(&mut cfg.hidden, args.hidden);
    set(&mut cfg.embed_dim, args.embed_dim);
    set(&mut cfg.modality, args.modality);
    set(&mut cfg.seed, args.seed);

    prepare_output(&out.out, out.force)?;
    let mut run = Run::start("pretrain", &out.out)?;
    run.input("data", &args.data);
    let pretrained = pretrain_classifier(&ds, &cfg)?;
    let manifest = save_pretrained(run.dir(), &pretrained, &cfg).with("writing pretrained artifact")?;
    run.record(std::iter::once(PRETRAINED_FILE.to_string()).chain(manifest.tensors.into_iter().map(|t| t.path)));
    run.finish(&cfg, Some(cfg.seed))
}

/// Resolved configuration of a `train` run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainSettings {
    pub mode: TrainingMode,
    pub frozen_modality: Modality,
    pub init_main_from_pretrained: bool,
    pub head_variant: HeadVariant,
    pub projection: ProjectionKind,
    pub loss: LossConfig,
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
    pub init_tau: f64,
    pub training: TrainConfig,
}

impl Default for TrainSettings {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            mode: TrainingMode::ThreeTowers,
            frozen_modality: Modality::Image,
            init_main_from_pretrained: false,
            head_variant: m.heads,
            projection: m.projection,
            loss: m.loss,
            hidden: m.hidden,
            embed_dim: m.embed_dim,
            init_tau: DEFAULT_TAU,
            training: TrainConfig::default(),
        }
    }
}

pub fn train(args: TrainArgs) -> CliResult<()> {
    let out = &args.output;
    let mut s = layer_config(TrainSettings::default(), out.config.as_deref())?;
    set(&mut s.mode, args.mode);
    set(&mut s.frozen_modality, args.frozen_modality);
    s.init_main_from_pretrained |= args.init_main_from_pretrained;
    set(&mut s.head_variant, args.head_variant);
    set(&mut s.projection, args.projection);
    set(&mut s.loss.weight, args.loss_weight);
    set(&mut s.loss.transfer, args.transfer);
    set(&mut s.loss.temperatures, args.temps);
    if let Some(t) = args.drop_term {
        s.loss.dropped = Some(t.into());
    }
    set(&mut s.hidden, args.hidden);
    set(&mut s.embed_dim, args.embed_dim);
    let t = &mut s.training;
    set(&mut t.total_steps, args.steps);
    set(&mut t.warmup_steps, args.warmup);
    set(&mut t.batch_size, args.batch);
    set(&mut t.peak_lr, args.lr);
    set(&mut t.weight_decay, args.weight_decay);
    set(&mut t.clip_norm, args.clip_norm);
    set(&mut t.seed, args.seed);
    if args.warmup.is_none() {
        t.warmup_steps = t.warmup_steps.min(t.total_steps);
    }
    t.validate()?;
    s.loss.validate()?;

    let needs_pretrained = s.mode != TrainingMode::Baseline || s.init_main_from_pretrained;
    let pretrained = match (&args.pretrained, needs_pretrained) {
        (None, true) => {
            return Err(Failure::usage(format!(
                "--mode {} needs --pretrained",
                mode_name(s.mode)
            )))
        }
        (Some(p), false) => {
            eprintln!("warning: --pretrained {} is ignored in baseline mode", p.display());
            None
        }
        (Some(p), true) => Some(
            load_pretrained(p)
                .with(format!("loading pretrained artifact {}", p.display()))?
                .0,
        ),
        (None, false) => None,
    };

    let ds = read_dataset(&args.data)?;
    if let Some(p) = &pretrained {
        if p.table.rows() != ds.len() {
            return Err(Failure::usage(format!(
                "pretrained table has {} rows but the dataset has {} pairs",
                p.table.rows(),
                ds.len()
            )));
        }
    }
    let config = ModelConfig {
        mode: ModelMode {
            mode: s.mode,
            frozen_modality: s.frozen_modality,
            init_main_from_pretrained: s.init_main_from_pretrained,
        },
        image_dim: ds.spec.img_dim,
        text_dim: ds.spec.txt_dim,
        hidden: s.hidden.clone(),
        embed_dim: s.embed_dim,
        projection: s.projection,
        heads: s.head_variant,
        loss: s.loss.clone(),
        init_tau: s.init_tau,
    };

    prepare_output(&out.out, out.force)?;
    let mut run = Run::start("train", &out.out)?;
    run.input("data", &args.data);
    if let (Some(p), true) = (&args.pretrained, needs_pretrained) {
        run.input("pretrained", p);
    }
    let model = Model::initialize(&config, pretrained.map(Arc::new), s.training.seed)?;
    let (model, trace) = train_on_dataset(model, &ds, &s.training)?;
    let manifest = save_checkpoint(run.dir(), &model).with("writing checkpoint")?;
    run.record(std::iter::once(CHECKPOINT_FILE.to_string()).chain(manifest.tensors.into_iter().map(|t| t.path)));
    run.write("loss_trace.csv", trace.to_csv())?;
    run.finish(&s, Some(s.training.seed))
}

/// Resolved configuration of an `eval` run.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct EvalSettings {
    pub alphas: Vec<f64>,
    pub options: EvalOptions,
}

pub fn eval(args: EvalArgs) -> CliResult<()> {
    let out = &args.output;
    let mut s = layer_config(EvalSettings::default(), out.config.as_deref())?;
    if !args.alpha.is_empty() {
        s.alphas = args.alpha.clone();
    }
    let o = &mut s.options;
    if let Some(n) = args.ood_count {
        o.ood_count = Some(n);
    }
    if let Some(OodArg::None) = args.ood_split {
        o.ood_count = None;
    }
    set(&mut o.shots, args.shots);
    set(&mut o.probe_seeds, args.probe_seeds);
    set(&mut o.ridge_lambda, args.ridge_lambda);
    set(&mut o.ece_bins, args.ece_bins);
    if o.ece_bins == 0 {
        return Err(Failure::usage("--ece-bins must be positive"));
    }
    if let Some(a) = s.alphas.iter().find(|a| !(0.0..=1.0).contains(*a)) {
        return Err(Failure::usage(format!("--alpha must lie in [0, 1], got {a}")));
    }

    let model: Model =
        load_checkpoint(&args.checkpoint).with(format!("loading checkpoint {}", args.checkpoint.display()))?;
    if !s.alphas.is_empty() && (model.heads().variant() != HeadVariant::Headless || model.frozen().is_none()) {
        return Err(Failure::usage(
            "--alpha needs a checkpoint trained with --mode 3t --head-variant headless",
        ));
    }
    let ds = read_dataset(&args.data)?;
    if model.image_encoder().input_dim() != ds.spec.img_dim || model.text_encoder().input_dim() != ds.spec.txt_dim {
        return Err(Failure::usage("checkpoint feature widths do not match the dataset"));
    }

    prepare_output(&out.out, out.force)?;
    let mut run = Run::start("eval", &out.out)?;
    run.input("checkpoint", &args.checkpoint);
    run.input("data", &args.data);

    let standard = evaluate_model(&model, &ds, ImageView::Standard, &s.options)?;
    let sweep = s
        .alphas
        .iter()
        .map(|&a| evaluate_model(&model, &ds, ImageView::Combined(a), &s.options))
        .collect::<Result<Vec<_>, _>>()?;
    let rows: Vec<ReportRow> = if sweep.is_empty() {
        vec![ReportRow::from(&standard)]
    } else {
        sweep.iter().map(ReportRow::from).collect()
    };
    let file = ReportFile {
        mode: mode_name(model.mode().mode).into(),
        head_variant: model.heads().variant(),
        ece_bins: s.options.ece_bins,
        rows: rows.clone(),
    };
    run.write(
        REPORT_JSON,
        serde_json::to_string_pretty(&file).expect("report serializes") + "\n",
    )?;
    run.write(REPORT_CSV, report_csv(&rows, !sweep.is_empty()))?;
    run.write(PREDICTIONS_CSV, standard.predictions_csv())?;
    if !sweep.is_empty() {
        run.write(PREDICTIONS_ALPHA_CSV, predictions_alpha_csv(&sweep))?;
    }
    run.finish(&s, None)
}

struct EvaluatedRun {
    label: String,
    report: ReportFile,
    predictions: Predictions,
}

fn read_run(dir: &Path) -> CliResult<EvaluatedRun> {
    let json = dir.join(REPORT_JSON);
    let text = std::fs::read_to_string(&json)
        .map_err(|e| Failure::usage(format!("{} has no readable {REPORT_JSON}: {e}", dir.display())))?;
    let report: ReportFile =
        serde_json::from_str(&text).map_err(|e| Failure::usage(format!("malformed {}: {e}", json.display())))?;
    let predictions = read_predictions(&dir.join(PREDICTIONS_CSV))?;
    let label = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string());
    Ok(EvaluatedRun {
        label,
        report,
        predictions,
    })
}

/// Runs in A, B, C order: baseline, lit, 3t when the first three runs are one of
/// each, otherwise the order given.
fn assign_roles(runs: &[EvaluatedRun]) -> Vec<usize> {
    let first: Vec<usize> = (0..runs.len().min(3)).collect();
    let modes: BTreeSet<&str> = first.iter().map(|&i| runs[i].report.mode.as_str()).collect();
    if first.len() == 3 && modes == BTreeSet::from(["baseline", "lit", "3t"]) {
        ["baseline", "lit", "3t"]
            .iter()
            .map(|m| {
                *first
                    .iter()
                    .find(|&&i| runs[i].report.mode == *m)
                    .expect("mode present")
            })
            .collect()
    } else {
        first
    }
}

#[derive(Serialize)]
struct ReportSettings<'a> {
    roles: Vec<&'a str>,
}

pub fn report(args: ReportArgs) -> CliResult<()> {
    if args.runs.len() < 2 {
        return Err(Failure::usage("report needs at least two --runs"));
    }
    let runs = args.runs.iter().map(|d| read_run(d)).collect::<CliResult<Vec<_>>>()?;
    let reference = &runs[0].predictions;
    for (r, dir) in runs.iter().zip(&args.runs).skip(1) {
        if r.predictions.ids != reference.ids || r.predictions.labels != reference.labels {
            return Err(Failure::usage(format!(
                "{} was evaluated on different examples than {}",
                dir.display(),
                args.runs[0].display()
            )));
        }
    }
    if reference.ids.is_empty() {
        return Err(Failure::usage("prediction files are empty"));
    }

    let mut comparison = format!("run,mode,alpha,{}\n", tritower::evaluation::EvalReport::CSV_HEADER);
    for r in &runs {
        for row in &r.report.rows {
            let alpha = row.alpha.map(|a| a.to_string()).unwrap_or_default();
            writeln!(comparison, "{},{},{alpha},{}", r.label, r.report.mode, row.csv_fields()).expect("string write");
        }
    }

    let roles = assign_roles(&runs);
    let preds = |k: usize| roles.get(k).map(|&i| runs[i].predictions.preds.as_slice());
    let (a, b) = (preds(0).expect("two runs"), preds(1).expect("two runs"));
    let table = prediction_difference(a, b, preds(2).unwrap_or(b), &reference.labels)?;
    let names: Vec<&str> = roles.iter().map(|&i| runs[i].label.as_str()).collect();
    let diff = format!("{}\n{}\n", PredictionDiffTable::CSV_HEADER, diff_row(&table, &names));

    prepare_output(&args.out, args.force)?;
    let mut run = Run::start("report", &args.out)?;
    run.inputs("runs", &args.runs);
    run.write("comparison.csv", comparison)?;
    run.write("prediction_diff.csv", diff)?;
    run.finish(&ReportSettings { roles: names }, None)
}

/// The diff row with run names as roles; C's columns are empty for two runs.
fn diff_row(t: &PredictionDiffTable, names: &[&str]) -> String {
    let c = names.get(2).copied().unwrap_or_default();
    let tail = if names.len() > 2 {
        format!("{},{},{}", t.c_ne_a, t.c_ne_b, t.c_ne_both)
    } else {
        ",,".into()
    };
    format!(
        "{},{},{c},{},{},{tail}",
        names[0], names[1], t.a_correct_b_wrong, t.b_correct_a_wrong
    )
}

/// Parses `TRITOWER_THREADS` and sizes the global thread pool.
pub fn configure_threads() -> CliResult<()> {
    let Ok(v) = std::env::var("TRITOWER_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::usage(format!("TRITOWER_THREADS must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::usage(format!("cannot size thread pool: {e}")))
}
