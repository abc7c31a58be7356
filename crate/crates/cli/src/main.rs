//! `prefsynth`: command-line front end for the teacher/student loop.
//!
//! `run` executes the whole pipeline and writes a manifest. The step
//! subcommands (`probe`, `build-prefs`, `train-teacher`, `synthesize`,
//! `train-student`) operate on a warmed-up run directory and stage their
//! outputs under `<out>/steps/iter<N>/` without touching the manifest.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use prefsynth::influence::{positive_fraction, InfluenceRecord};
use prefsynth::langmodel::TinyLM;
use prefsynth::pipeline::{self, compare_runs, evaluate, EvalSets, Manifest, Method, Pipeline, RunConfig};
use prefsynth::preference::{build_preference_pairs, dpo_train, split_held_out, PreferenceTriple};
use prefsynth::synthesis::{read_dataset_jsonl, write_dataset_jsonl, DatasetMode};
use prefsynth::training::{sft_train, write_log_jsonl, TrainState};
use prefsynth::{Example, SftSample};

#[derive(Parser)]
#[command(name = "prefsynth", version, about = "Student-preference-guided synthetic data generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run configuration; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed (overrides the config).
    #[arg(long)]
    seed: Option<u64>,
    /// montessori, self_instruct, bootstrap_influence, hard_example_bootstrap or response_optimization.
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    iterations: Option<usize>,
    /// Threads used for influence probing.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the stand-in teacher and save it as checkpoints/teacher_base.tlm.
    PretrainTeacher(Common),
    /// Draw the fixed sets and warm up a fresh student.
    Warmup {
        #[command(flatten)]
        common: Common,
        /// Base teacher checkpoint (default: <out>/checkpoints/teacher_base.tlm, pretrained if absent).
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Build a probing set with the current teacher and score it on the current student.
    Probe(Common),
    /// Pair positive- and negative-influence instructions from the staged probe.
    BuildPrefs(Common),
    /// DPO-train the current teacher on the staged preference pairs.
    TrainTeacher(Common),
    /// Synthesize a training set with the staged (or current) teacher.
    Synthesize(Common),
    /// Fine-tune the current student on the staged training set.
    TrainStudent(Common),
    /// Full pipeline: pretrain or load the teacher, warm up, iterate.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        teacher: Option<PathBuf>,
        /// Continue an existing run directory instead of starting over.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a student checkpoint, optionally against a second one.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Student checkpoint to evaluate (default: latest student of the run).
        #[arg(long)]
        student: Option<PathBuf>,
        /// Second student for the win-rate proxy.
        #[arg(long)]
        against: Option<PathBuf>,
        /// Compare with another run directory of the same seed at this iteration.
        #[arg(long, requires = "iteration")]
        other_run: Option<PathBuf>,
        #[arg(long)]
        iteration: Option<usize>,
    },
    /// Summarize a finished run directory.
    Stats(Common),
    /// Print the effective configuration as JSON.
    Config(Common),
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(out) = &c.out {
        cfg.output_dir = out.display().to_string();
    }
    if let Some(s) = c.seed {
        cfg.master_seed = s;
    }
    if let Some(m) = &c.method {
        cfg.method = Method::parse(m)?;
    }
    if let Some(n) = c.iterations {
        cfg.iterations = n;
    }
    if let Some(w) = c.workers {
        cfg.workers = w;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(c: &Common) -> Result<PathBuf> {
    Ok(PathBuf::from(load_config(c)?.output_dir))
}

fn base_teacher(cfg: &RunConfig, explicit: Option<&Path>) -> Result<TinyLM> {
    let default = Path::new(&cfg.output_dir).join("checkpoints/teacher_base.tlm");
    let path = explicit.map(Path::to_path_buf).unwrap_or(default);
    if path.exists() {
        log::info!("loading teacher {}", path.display());
        return Ok(TinyLM::load(&path)?);
    }
    if explicit.is_some() {
        bail!("teacher checkpoint {} not found", path.display());
    }
    log::info!("pretraining the base teacher");
    let (t, report) = pipeline::pretrain_teacher(cfg)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(t)
}

/// Resumed run plus the staging directory of its next iteration.
fn staged(c: &Common) -> Result<(Pipeline, PathBuf, usize)> {
    let dir = out_dir(c)?;
    let p = Pipeline::resume(&dir, None).with_context(|| format!("loading run {}", dir.display()))?;
    let i = p.iterations_done() + 1;
    let stage = dir.join(format!("steps/iter{i}"));
    fs::create_dir_all(&stage)?;
    Ok((p, stage, i))
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}; run the previous step first", path.display()))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

fn write_jsonl<T: serde::Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    write_log_jsonl(records, &mut buf)?;
    fs::write(path, buf)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Config(c) => {
            println!("{}", load_config(&c)?.to_json());
        }
        Command::PretrainTeacher(c) => {
            let cfg = load_config(&c)?;
            let dir = Path::new(&cfg.output_dir).join("checkpoints");
            fs::create_dir_all(&dir)?;
            let (teacher, report) = pipeline::pretrain_teacher(&cfg)?;
            teacher.save(&dir.join("teacher_base.tlm"))?;
            fs::write(dir.join("teacher_report.json"), serde_json::to_string_pretty(&report)?)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Warmup { common, teacher } => {
            let cfg = load_config(&common)?;
            let t = base_teacher(&cfg, teacher.as_deref())?;
            let mut p = Pipeline::new(cfg, t)?;
            p.warmup_student()?;
            let m = p.manifest()?;
            println!(
                "reference loss {:.4} -> {:.4}",
                m.setup.fresh_reference_loss, m.setup.warmup_reference_loss
            );
        }
        Command::Probe(c) => {
            let (p, stage, i) = staged(&c)?;
            let n = p.config.sizes.probing_at(i);
            let (probing, _) = p.synthesize(&p.teacher, DatasetMode::Probing, n, p.stage_seed("probing", i))?;
            let records = p.probe(&probing)?;
            println!("positive-influence fraction {:.4}", positive_fraction(&records));
            write_jsonl(&stage.join("influence.jsonl"), &records)?;
        }
        Command::BuildPrefs(c) => {
            let (_, stage, _) = staged(&c)?;
            let records: Vec<InfluenceRecord> = read_jsonl(&stage.join("influence.jsonl"))?;
            let triples = build_preference_pairs(&records);
            println!("{} preference pairs from {} probes", triples.len(), records.len());
            if triples.is_empty() {
                bail!("no preference pairs; the teacher would be left unchanged");
            }
            write_jsonl(&stage.join("prefs.jsonl"), &triples)?;
        }
        Command::TrainTeacher(c) => {
            let (p, stage, i) = staged(&c)?;
            let triples: Vec<PreferenceTriple> = read_jsonl(&stage.join("prefs.jsonl"))?;
            let (train, _) = split_held_out(&triples, p.config.dpo_heldout_fraction, p.stage_seed("dpo-split", i));
            let mut teacher = p.teacher.clone();
            let log = dpo_train(&mut teacher, &p.teacher, &train, &p.config.dpo, &p.vocab, p.stage_seed("dpo", i))?;
            if let Some(last) = log.last() {
                println!("{} DPO steps, final loss {:.4}, margin {:.4}", log.len(), last.loss, last.margin);
            }
            teacher.save(&stage.join("teacher.tlm"))?;
            write_jsonl(&stage.join("dpo_log.jsonl"), &log)?;
        }
        Command::Synthesize(c) => {
            let (p, stage, i) = staged(&c)?;
            let staged_teacher = stage.join("teacher.tlm");
            let teacher = if staged_teacher.exists() { TinyLM::load(&staged_teacher)? } else { p.teacher.clone() };
            let (training, stats) = p.synthesize(&teacher, DatasetMode::Training, p.config.sizes.training, p.stage_seed("training", i))?;
            println!(
                "{} examples from {} prompts ({} ROUGE-L rejections)",
                training.len(),
                stats.prompts,
                stats.rouge_dropped
            );
            let path = stage.join("training.jsonl");
            let mut buf = Vec::new();
            write_dataset_jsonl(&training, i, "staged_teacher", &mut buf)?;
            fs::write(&path, buf)?;
            println!("wrote {}", path.display());
        }
        Command::TrainStudent(c) => {
            let (p, stage, i) = staged(&c)?;
            let path = stage.join("training.jsonl");
            let training: Vec<Example> = read_dataset_jsonl(fs::read(&path).with_context(|| format!("reading {}", path.display()))?.as_slice())?;
            let samples = training
                .iter()
                .map(|e| SftSample::from_example(&p.vocab, e))
                .collect::<Result<Vec<_>, _>>()?;
            let mut state: TrainState<TinyLM> = p.student.clone();
            let s = p.config.student;
            let log = sft_train(&mut state, &samples, s.batch_size, s.epochs, s.lr_max, p.stage_seed("sft", i))?;
            println!("{} SFT steps", log.len());
            state.model.save(&stage.join("student.tlm"))?;
            fs::write(stage.join("student.opt"), state.opt.to_bytes())?;
            write_jsonl(&stage.join("sft_log.jsonl"), &log)?;
        }
        Command::Run { common, teacher, resume } => {
            let manifest = if resume {
                let dir = out_dir(&common)?;
                let mut p = Pipeline::resume(&dir, common.iterations)?;
                p.run_remaining()?;
                p.manifest()?
            } else {
                let cfg = load_config(&common)?;
                let t = base_teacher(&cfg, teacher.as_deref())?;
                pipeline::run(&cfg, Some(t))?.manifest
            };
            for r in &manifest.iterations {
                println!(
                    "iteration {}: reference loss {:.4}, held-out loss {:.4}, exact match {:.3}, {:.1}s",
                    r.iteration,
                    r.reference_loss,
                    r.heldout_loss,
                    r.exact_match,
                    r.timings.total()
                );
            }
        }
        Command::Eval {
            common,
            student,
            against,
            other_run,
            iteration,
        } => {
            let dir = out_dir(&common)?;
            let report = match (other_run, iteration) {
                (Some(other), Some(it)) => compare_runs(&dir, &other, it)?,
                _ => {
                    let p = Pipeline::resume(&dir, None)?;
                    let a = match student {
                        Some(path) => TinyLM::load(&path)?,
                        None => p.student.model.clone(),
                    };
                    let b = against.map(|path| TinyLM::load(&path)).transpose()?;
                    let seen: Vec<&[Example]> = vec![&p.warmup];
                    let sets = EvalSets {
                        reference: &p.reference,
                        heldout: &p.heldout,
                        seen: &seen,
                        grammar: &p.config.grammar,
                        vocab: &p.vocab,
                    };
                    evaluate(&a, b.as_ref(), &sets, None)?
                }
            };
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Stats(c) => {
            let dir = out_dir(&c)?;
            let m = Manifest::load(&dir)?;
            println!("method {} seed {}", m.config.method.name(), m.config.master_seed);
            println!(
                "warmup: reference loss {:.4} -> {:.4}",
                m.setup.fresh_reference_loss, m.setup.warmup_reference_loss
            );
            println!("iter  ref_loss  heldout  exact  pairs  pos_probe  pos_new  seconds");
            for r in &m.iterations {
                let f = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{v:.3}"));
                println!(
                    "{:>4}  {:>8.4}  {:>7.4}  {:>5.3}  {:>5}  {:>9}  {:>7}  {:>7.1}",
                    r.iteration,
                    r.reference_loss,
                    r.heldout_loss,
                    r.exact_match,
                    r.preference_pairs,
                    f(r.probing_positive_fraction),
                    f(r.shift_positive_fraction),
                    r.timings.total()
                );
            }
            println!("per-bucket statistics: {}", dir.join("stats.csv").display());
        }
    }
    Ok(())
}
