//! Subcommand implementations. Each reads its inputs, writes its outputs
//! under the configured output directory, and echoes the configuration.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use interformer::evaluation::{
    evaluate, reactions, train_classifier, EvalReport, MotionClassifier,
};
use interformer::generation::{self, generate_diverse, generate_long, Generated};
use interformer::model::{InterFormerModel, ModelConfig, Setup};
use interformer::numerics::{load_checkpoint, save_checkpoint};
use interformer::skeleton::{
    load_dataset, load_sequence, normalize_sample, save_dataset, save_sequence, save_sequence_csv,
    synthesize_dataset, Dataset, InteractionSample, MotionSequence, NormMode, Normalizer,
};
use interformer::training::{TrainLog, Trainer};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::RunConfig;
use crate::error::CliError;

/// Checkpoint metadata key recording the normalisation used in training.
const NORM_META: &str = "normalize";
/// Seed offset between the train and test splits.
pub const TEST_SEED_OFFSET: u64 = 1000;

pub fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| interformer::Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| interformer::Error::io(path, e))?;
    Ok(())
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| interformer::Error::io(dir, e))?;
    Ok(())
}

fn require(path: &Path, what: &str) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Usage(format!(
            "{what} not found: {}",
            path.display()
        )))
    }
}

fn same_file(a: &Path, b: &Path) -> bool {
    match (a.canonicalize(), b.canonicalize()) {
        (Ok(x), Ok(y)) => x == y,
        _ => false,
    }
}

fn load_split(path: &Path, what: &str) -> Result<Dataset, CliError> {
    require(path, what)?;
    Ok(load_dataset(path)?)
}

/// Train and test splits; the test split uses a shifted seed and its own
/// per-class count.
pub fn synthesize_splits(cfg: &RunConfig) -> Result<(Dataset, Dataset), CliError> {
    let train = synthesize_dataset(&cfg.synth)?;
    let mut test_cfg = cfg.synth.clone();
    test_cfg.seed = cfg.synth.seed.wrapping_add(TEST_SEED_OFFSET);
    test_cfg.samples_per_class = cfg.data.test_samples_per_class;
    let test = synthesize_dataset(&test_cfg)?;
    Ok((train, test))
}

fn class_counts(ds: &Dataset) -> String {
    ds.classes()
        .iter()
        .map(|c| {
            format!(
                "{c}={}",
                ds.samples.iter().filter(|s| &s.label == c).count()
            )
        })
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn synth(cfg: &RunConfig) -> Result<(), CliError> {
    let (train, test) = synthesize_splits(cfg)?;
    for path in [cfg.train_data(), cfg.test_data()] {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            create_dir(dir)?;
        }
    }
    save_dataset(&cfg.train_data(), &train)?;
    save_dataset(&cfg.test_data(), &test)?;
    cfg.echo(&cfg.out)?;
    println!(
        "train {}: {}",
        cfg.train_data().display(),
        class_counts(&train)
    );
    println!(
        "test  {}: {}",
        cfg.test_data().display(),
        class_counts(&test)
    );
    Ok(())
}

/// Applies the per-sample normalisation to every sample of `ds`.
pub fn normalized(ds: &Dataset, mode: NormMode) -> Result<Vec<InteractionSample>, CliError> {
    ds.samples
        .iter()
        .map(|s| Ok(normalize_sample(s, &ds.topology, mode)?.0))
        .collect()
}

/// Model configuration for `ds`: the joint count comes from the data.
pub fn model_config(cfg: &RunConfig, ds: &Dataset) -> ModelConfig {
    ModelConfig {
        k: ds.topology.joint_count(),
        ..cfg.model.clone()
    }
}

/// Saves a trained model together with the normalisation it expects.
pub fn save_model(path: &Path, model: &InterFormerModel, mode: NormMode) -> Result<(), CliError> {
    model.save(path)?;
    let mut ck = load_checkpoint(path).map_err(interformer::Error::from)?;
    ck.meta.insert(NORM_META.into(), json!(mode));
    save_checkpoint(path, &ck).map_err(interformer::Error::from)?;
    Ok(())
}

/// Loads a model and the normalisation recorded at training time, falling
/// back to `default` for checkpoints without one.
pub fn load_model(
    path: &Path,
    default: NormMode,
) -> Result<(InterFormerModel, NormMode), CliError> {
    require(path, "model checkpoint")?;
    let ck = load_checkpoint(path).map_err(interformer::Error::from)?;
    let model = InterFormerModel::from_checkpoint(&ck)?;
    let mode = match ck.meta.get(NORM_META) {
        Some(v) => serde_json::from_value(v.clone()).map_err(|e| {
            CliError::Usage(format!("{}: bad `{NORM_META}` entry: {e}", path.display()))
        })?,
        None => default,
    };
    Ok((model, mode))
}

/// Trains a fresh model (or resumes from `resume`) on `data`, writing the
/// training state to `state` when given.
pub fn fit(
    cfg: &RunConfig,
    model_cfg: ModelConfig,
    ds: &Dataset,
    data: &[InteractionSample],
    resume: Option<&Path>,
    state: Option<&Path>,
    verbose: bool,
) -> Result<(InterFormerModel, TrainLog), CliError> {
    let mut trainer = match resume {
        Some(path) => {
            require(path, "training state")?;
            Trainer::resume(path, data, cfg.train.clone())?
        }
        None => {
            let model = InterFormerModel::new(model_cfg, ds.topology.clone(), cfg.seed)?;
            Trainer::new(model, data, cfg.train.clone())?
        }
    };
    let every = (cfg.train.steps / 20).max(1);
    let log = trainer.run(state, |r| {
        if verbose && (r.step % every == 0 || r.step == cfg.train.steps) {
            eprintln!(
                "step {:>6}  L_s {:.6}  L_ff {:.6}  total {:.6}",
                r.step, r.l_s, r.l_ff, r.total
            );
        }
    })?;
    Ok((trainer.into_model(), log))
}

pub fn train(cfg: &RunConfig, resume: Option<&Path>) -> Result<InterFormerModel, CliError> {
    let ds = load_split(&cfg.train_data(), "training data")?;
    let data = normalized(&ds, cfg.data.normalize)?;
    create_dir(&cfg.out)?;
    let state = cfg.out.join("train_state.ckpt");
    if let Some(resume) = resume {
        if same_file(resume, &state) {
            return Err(CliError::Usage(format!(
                "--resume {} would be overwritten by this run; choose another --out",
                resume.display()
            )));
        }
    }
    let (model, log) = fit(
        cfg,
        model_config(cfg, &ds),
        &ds,
        &data,
        resume,
        Some(&state),
        true,
    )?;
    save_model(&cfg.checkpoint(), &model, cfg.data.normalize)?;
    log.write_csv(&cfg.out.join("train_log.csv"))?;
    cfg.echo(&cfg.out)?;
    if let Some(last) = log.last() {
        println!(
            "trained to step {}: L_s {:.6} L_ff {:.6}",
            last.step, last.l_s, last.l_ff
        );
    }
    println!("model written to {}", cfg.checkpoint().display());
    Ok(model)
}

fn generation_inputs(
    cfg: &RunConfig,
    sample: Option<usize>,
) -> Result<(MotionSequence, MotionSequence), CliError> {
    if let Some(i) = sample {
        let ds = load_split(&cfg.test_data(), "test data")?;
        let s = ds.samples.get(i).ok_or_else(|| {
            CliError::Usage(format!(
                "sample {i} out of range; the test data has {} samples",
                ds.samples.len()
            ))
        })?;
        return Ok((s.action.clone(), s.reaction.clone()));
    }
    let action = cfg.paths.action.as_ref().ok_or_else(|| {
        CliError::Usage("generate needs --action and --first-frame, or --sample".into())
    })?;
    let first = cfg.paths.first_frame.as_ref().ok_or_else(|| {
        CliError::Usage("generate needs --first-frame together with --action".into())
    })?;
    require(action, "action file")?;
    require(first, "first-frame file")?;
    Ok((load_sequence(action)?.1, load_sequence(first)?.1))
}

pub fn generate(
    cfg: &RunConfig,
    sample: Option<usize>,
    samples: usize,
    long: bool,
    csv: bool,
) -> Result<(), CliError> {
    if samples == 0 {
        return Err(CliError::Usage("--samples must be at least 1".into()));
    }
    if samples > 1 && long {
        return Err(CliError::Usage(
            "--long cannot be combined with --samples > 1".into(),
        ));
    }
    let (model, mode) = load_model(&cfg.checkpoint(), cfg.data.normalize)?;
    let (action, first) = generation_inputs(cfg, sample)?;
    let topology = model.topology().clone();
    let norm = Normalizer::fit_action(&action, &topology, mode)?;
    let action_n = norm.apply(&action);
    let first_n = norm.apply(&first).frames[0].clone();
    let outputs: Vec<Generated> = if samples > 1 {
        generate_diverse(&model, &action_n, &first_n, &cfg.gen, samples)?
    } else if long {
        vec![generate_long(&model, &action_n, &first_n, &cfg.gen)?]
    } else {
        vec![generation::generate(&model, &action_n, &first_n, &cfg.gen)?]
    };
    let dir = cfg.out.join("generated");
    create_dir(&dir)?;
    for (i, out) in outputs.iter().enumerate() {
        let seq = norm.invert(&out.sequence);
        let path = dir.join(format!("reaction_{i}.json"));
        save_sequence(&path, &topology, &seq)?;
        if csv {
            save_sequence_csv(&path.with_extension("csv"), &seq)?;
        }
        println!(
            "{}: {} frames (action {}), stop {:?}, chunks {:?}",
            path.display(),
            seq.len(),
            action.len(),
            out.stop,
            out.chunks
        );
    }
    cfg.echo(&cfg.out)?;
    Ok(())
}

/// Trains the evaluation classifier on the normalised training reactions.
pub fn fit_classifier(
    cfg: &RunConfig,
    train: &[InteractionSample],
) -> Result<MotionClassifier, CliError> {
    Ok(train_classifier(&reactions(train), &cfg.classifier)?)
}

fn classifier(
    cfg: &RunConfig,
    mode: NormMode,
    save_to: &Path,
) -> Result<MotionClassifier, CliError> {
    if let Some(path) = &cfg.paths.classifier {
        require(path, "classifier checkpoint")?;
        return Ok(MotionClassifier::load(path)?);
    }
    let ds = load_split(&cfg.train_data(), "training data")?;
    let clf = fit_classifier(cfg, &normalized(&ds, mode)?)?;
    clf.save(save_to)?;
    if let Some(acc) = clf.holdout_accuracy {
        eprintln!("classifier holdout accuracy {acc:.1}%");
    }
    Ok(clf)
}

pub fn eval(cfg: &RunConfig) -> Result<EvalReport, CliError> {
    let (model, mode) = load_model(&cfg.checkpoint(), cfg.data.normalize)?;
    let test_ds = load_split(&cfg.test_data(), "test data")?;
    create_dir(&cfg.out)?;
    let clf = classifier(cfg, mode, &cfg.out.join("classifier.ckpt"))?;
    let test = normalized(&test_ds, mode)?;
    let report = evaluate(&model, &test, &clf, &cfg.gen)?;
    write_text(&cfg.out.join("report.json"), &(report.to_json() + "\n"))?;
    write_text(&cfg.out.join("report.txt"), &report.to_table())?;
    cfg.echo(&cfg.out)?;
    print!("{}", report.to_table());
    println!(
        "length match rate {:.3}, EOS mismatches {}",
        report.length_match_rate, report.eos_mismatches
    );
    Ok(report)
}

/// One ablation variant: a setup, optionally with single-head attention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    pub setup: Setup,
    pub temporal_heads: Option<usize>,
    pub spatial_heads: Option<usize>,
}

impl Variant {
    pub fn apply(&self, base: &ModelConfig) -> ModelConfig {
        let mut m = base.clone().with_setup(self.setup);
        if let Some(h) = self.temporal_heads {
            m.temporal_heads = h;
        }
        if let Some(h) = self.spatial_heads {
            m.spatial_heads = h;
        }
        m
    }
}

/// The configured setups, plus the single-head variants of the full setup
/// when the multihead grid is enabled.
pub fn variants(cfg: &RunConfig) -> Vec<Variant> {
    let mut out: Vec<Variant> = cfg
        .ablate
        .setups
        .iter()
        .map(|&s| Variant {
            name: s.name().into(),
            setup: s,
            temporal_heads: None,
            spatial_heads: None,
        })
        .collect();
    if cfg.ablate.multihead_grid {
        for (t, s, name) in [
            (Some(1), None, "S4 T1"),
            (None, Some(1), "S4 S1h"),
            (Some(1), Some(1), "S4 T1 S1h"),
        ] {
            out.push(Variant {
                name: name.into(),
                setup: Setup::S4,
                temporal_heads: t,
                spatial_heads: s,
            });
        }
    }
    out
}

/// Mean and sample standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub sd: f64,
}

impl Stat {
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let sd = if xs.len() > 1 {
            (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, sd }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub name: String,
    pub model: ModelConfig,
    pub accuracy: Stat,
    pub fvd: Stat,
    pub diversity_score: Stat,
    pub length_match_rate: Stat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    /// Ground truth and ZeroV scores; they do not depend on the model.
    pub ground_truth: VariantSummary,
    pub zero_velocity: VariantSummary,
    pub variants: Vec<VariantSummary>,
    /// Every individual evaluation, keyed by variant name.
    pub runs: BTreeMap<String, Vec<EvalReport>>,
}

impl AblationReport {
    pub fn variant(&self, name: &str) -> Option<&VariantSummary> {
        self.variants.iter().find(|v| v.name == name)
    }

    pub fn to_table(&self) -> String {
        let rows: Vec<&VariantSummary> = self
            .variants
            .iter()
            .chain([&self.zero_velocity, &self.ground_truth])
            .collect();
        let width = rows
            .iter()
            .map(|r| r.name.len())
            .max()
            .unwrap_or(0)
            .max("Variant".len());
        let mut out = format!(
            "{:<width$}  {:>15}  {:>17}  {:>15}  {:>13}\n",
            "Variant", "Accuracy (%)", "FVD", "Div. score", "Length match"
        );
        out += &"-".repeat(width + 2 + 15 + 2 + 17 + 2 + 15 + 2 + 13);
        out.push('\n');
        for r in rows {
            let f = |s: Stat, p: usize| format!("{:.p$} ± {:.p$}", s.mean, s.sd);
            out += &format!(
                "{:<width$}  {:>15}  {:>17}  {:>15}  {:>13}\n",
                r.name,
                f(r.accuracy, 1),
                f(r.fvd, 3),
                f(r.diversity_score, 3),
                f(r.length_match_rate, 2)
            );
        }
        out
    }
}

fn summarize(
    name: &str,
    model: ModelConfig,
    reports: &[&EvalReport],
    pick: impl Fn(&EvalReport) -> (f64, f64, f64, f64),
) -> VariantSummary {
    let v: Vec<(f64, f64, f64, f64)> = reports.iter().map(|r| pick(r)).collect();
    VariantSummary {
        name: name.into(),
        model,
        accuracy: Stat::of(&v.iter().map(|x| x.0).collect::<Vec<_>>()),
        fvd: Stat::of(&v.iter().map(|x| x.1).collect::<Vec<_>>()),
        diversity_score: Stat::of(&v.iter().map(|x| x.2).collect::<Vec<_>>()),
        length_match_rate: Stat::of(&v.iter().map(|x| x.3).collect::<Vec<_>>()),
    }
}

/// Trains and evaluates every variant for `cfg.ablate.seeds` seeds. Run `i`
/// uses `seed + i` for model initialisation, batching and input noise; the
/// data and the classifier are shared. When `out` is given each run's
/// configuration and report are written under `runs/<variant>/seed<i>/`.
/// `on_run` sees every trained model with its evaluation.
pub fn run_ablation(
    cfg: &RunConfig,
    variants: &[Variant],
    train_ds: &Dataset,
    test_ds: &Dataset,
    out: Option<&Path>,
    verbose: bool,
    mut on_run: impl FnMut(&Variant, usize, &InterFormerModel, &EvalReport),
) -> Result<AblationReport, CliError> {
    if cfg.ablate.seeds == 0 {
        return Err(CliError::Usage("ablate.seeds must be at least 1".into()));
    }
    if variants.is_empty() {
        return Err(CliError::Usage("no ablation variants selected".into()));
    }
    let mode = cfg.data.normalize;
    let train = normalized(train_ds, mode)?;
    let test = normalized(test_ds, mode)?;
    let clf = fit_classifier(cfg, &train)?;
    if verbose {
        eprintln!(
            "classifier holdout accuracy {:.1}%",
            clf.holdout_accuracy.unwrap_or(f64::NAN)
        );
    }
    let seeds: Vec<u64> = (0..cfg.ablate.seeds as u64)
        .map(|i| cfg.seed.wrapping_add(i))
        .collect();
    let base = model_config(cfg, train_ds);
    let mut runs: BTreeMap<String, Vec<EvalReport>> = BTreeMap::new();
    let mut summaries = Vec::new();
    for v in variants {
        let model_cfg = v.apply(&base);
        let mut reports = Vec::new();
        for (i, &seed) in seeds.iter().enumerate() {
            let mut run_cfg = cfg.clone();
            run_cfg.seed = seed;
            run_cfg.train.seed = cfg.train.seed.wrapping_add(i as u64);
            run_cfg.model = model_cfg.clone();
            let start = std::time::Instant::now();
            let (model, _) = fit(
                &run_cfg,
                model_cfg.clone(),
                train_ds,
                &train,
                None,
                None,
                false,
            )?;
            let report = evaluate(&model, &test, &clf, &run_cfg.gen)?;
            if verbose {
                eprintln!(
                    "{} seed {seed}: accuracy {:.1}%  FVD {:.3}  ({:.0} s)",
                    v.name,
                    report.generated.average_accuracy,
                    report.generated.fvd,
                    start.elapsed().as_secs_f64()
                );
            }
            if let Some(out) = out {
                let dir = out
                    .join("runs")
                    .join(v.name.replace(' ', "_"))
                    .join(format!("seed{i}"));
                run_cfg.out = dir.clone();
                run_cfg.echo(&dir)?;
                write_text(&dir.join("report.json"), &(report.to_json() + "\n"))?;
            }
            on_run(v, i, &model, &report);
            reports.push(report);
        }
        let refs: Vec<&EvalReport> = reports.iter().collect();
        summaries.push(summarize(&v.name, model_cfg, &refs, |r| {
            (
                r.generated.average_accuracy,
                r.generated.fvd,
                r.generated.diversity_score,
                r.length_match_rate,
            )
        }));
        runs.insert(v.name.clone(), reports);
    }
    let all: Vec<&EvalReport> = runs.values().flatten().collect();
    let ground_truth = summarize("GT", base.clone(), &all, |r| {
        (
            r.ground_truth.average_accuracy,
            r.ground_truth.fvd,
            r.ground_truth.diversity_score,
            1.0,
        )
    });
    let zero_velocity = summarize("ZeroV", base, &all, |r| {
        (
            r.zero_velocity.average_accuracy,
            r.zero_velocity.fvd,
            r.zero_velocity.diversity_score,
            1.0,
        )
    });
    Ok(AblationReport {
        seeds,
        ground_truth,
        zero_velocity,
        variants: summaries,
        runs,
    })
}

fn load_or_synthesize(cfg: &RunConfig) -> Result<(Dataset, Dataset), CliError> {
    let (train_path, test_path): (PathBuf, PathBuf) = (cfg.train_data(), cfg.test_data());
    if train_path.exists() && test_path.exists() {
        return Ok((load_dataset(&train_path)?, load_dataset(&test_path)?));
    }
    if cfg.paths.train_data.is_some() || cfg.paths.test_data.is_some() {
        require(&train_path, "training data")?;
        require(&test_path, "test data")?;
    }
    eprintln!(
        "no datasets under {}; synthesizing them in memory",
        cfg.out.display()
    );
    synthesize_splits(cfg)
}

pub fn ablate(cfg: &RunConfig) -> Result<AblationReport, CliError> {
    let (train, test) = load_or_synthesize(cfg)?;
    create_dir(&cfg.out)?;
    let report = run_ablation(
        cfg,
        &variants(cfg),
        &train,
        &test,
        Some(&cfg.out),
        true,
        |_, _, _, _| {},
    )?;
    let json = serde_json::to_string_pretty(&report).expect("report serialises");
    write_text(&cfg.out.join("ablation.json"), &(json + "\n"))?;
    write_text(&cfg.out.join("ablation.txt"), &report.to_table())?;
    cfg.echo(&cfg.out)?;
    print!("{}", report.to_table());
    Ok(report)
}
