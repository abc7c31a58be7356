//! The full loop: warm up a student on base-teacher data, then per iteration
//! probe, pair, tune the teacher with DPO, synthesize, and train the student.
//! Baseline methods reuse the same steps with some of them skipped.
//!
//! All randomness is derived from `master_seed` by stage name and iteration,
//! so two runs that share a seed draw identical randomness for every stage
//! they have in common.

mod artifacts;
mod config;
mod eval;

pub use artifacts::{
    ArtifactStore, BuildSummary, IterationRecord, Manifest, SetupRecord, StepTimings, FORMAT_VERSION, GENESIS_HASH,
    MANIFEST_FILE,
};
pub use config::{DatasetSizes, DpoReference, Method, RunConfig, StudentConfig};
pub use eval::{evaluate, example_losses, exact_match, win_rate, EvalReport, EvalSets, StudentScores};

use std::collections::{BTreeMap, HashSet};
use std::io::BufRead;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::example::{response_prompt, Example, SftSample};
use crate::influence::{collect_influences, positive_fraction, reference_loss, InfluenceRecord, ReferenceSet};
use crate::langmodel::{ModelRole, TinyLM, Vocab};
use crate::preference::{build_preference_pairs, dpo_margin, dpo_train, split_held_out, PreferenceTriple};
use crate::rng::{derive_seed, stream, tag};
use crate::synthesis::{
    build_dataset, generate_response, pretrain_toy_teacher, read_dataset_jsonl, write_dataset_jsonl, BuildRequest,
    BuildStats, DatasetMode, PoolEntry, PoolSplit, PretrainReport, SeedPool, TaskKind,
};
use crate::training::{sft_train, AdamWState, StepLog, Trainable, TrainState};

/// The alias used by the persisted per-iteration state.
pub type IterationState = IterationRecord;

/// One line of `metrics.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub iteration: usize,
    pub phase: String,
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub margin: Option<f64>,
}

/// Trains the stand-in teacher described by the config.
pub fn pretrain_teacher(config: &RunConfig) -> Result<(TinyLM, PretrainReport)> {
    pretrain_toy_teacher(&config.grammar, &config.teacher, &config.synthesis, &Vocab::toy(), config.teacher_seed)
}

/// Seed exemplars, reference set and held-out set, all with ground-truth
/// responses and pairwise-distinct instructions.
pub fn fixed_sets(config: &RunConfig) -> (Vec<Example>, Vec<Example>, Vec<Example>) {
    let g = &config.grammar;
    let mut rng = stream(config.master_seed, "fixed-sets", 0);
    let mut seen = HashSet::new();
    let mut draw = |n: usize, seed_mix: bool| {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let kind = if seed_mix { Some(g.seed_mix.sample(&mut rng)) } else { None };
            let ex = g.sample(kind, &mut rng);
            if seen.insert(ex.instruction.clone()) {
                out.push(ex);
            }
        }
        out
    };
    let s = &config.sizes;
    let seeds = draw(s.seed_pool, true);
    let reference = draw(s.reference, false);
    let heldout = draw(s.heldout, false);
    (seeds, reference, heldout)
}

fn samples(vocab: &Vocab, examples: &[Example]) -> Result<Vec<SftSample>> {
    Ok(examples
        .iter()
        .map(|e| SftSample::from_example(vocab, e))
        .collect::<std::result::Result<Vec<_>, _>>()?)
}

fn dataset_bytes(examples: &[Example], iteration: usize, provenance: &str) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_dataset_jsonl(examples, iteration, provenance, &mut buf)?;
    Ok(buf)
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(bytes: &[u8]) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for line in bytes.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

fn metric_lines(iteration: usize, phase: &str, log: &[StepLog]) -> Vec<MetricRecord> {
    log.iter()
        .map(|s| MetricRecord {
            iteration,
            phase: phase.into(),
            step: s.step,
            lr: s.lr,
            loss: s.loss,
            margin: None,
        })
        .collect()
}

/// Indices of the `ceil(n/2)` largest scores; ties keep input order.
pub fn top_half(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(scores.len().div_ceil(2));
    order.sort_unstable();
    order
}

/// Best-versus-worst response pairs, at most one per instruction. Records are
/// grouped by `seed_id`; a pair is emitted only when the best influence is
/// strictly above the worst.
pub fn best_worst_pairs(records: &[InfluenceRecord]) -> Vec<PreferenceTriple> {
    let mut groups: BTreeMap<u64, Vec<&InfluenceRecord>> = BTreeMap::new();
    for r in records {
        groups.entry(r.example.seed_id).or_default().push(r);
    }
    let mut out = Vec::new();
    for (seed_id, group) in groups {
        let best = group.iter().copied().reduce(|a, b| if b.influence > a.influence { b } else { a });
        let worst = group.iter().copied().reduce(|a, b| if b.influence < a.influence { b } else { a });
        if let (Some(best), Some(worst)) = (best, worst) {
            if best.influence > worst.influence && best.example.response != worst.example.response {
                out.push(PreferenceTriple {
                    seed_id,
                    prompt: best.example.prompt.clone(),
                    chosen: best.example.response.clone(),
                    rejected: worst.example.response.clone(),
                    chosen_influence: best.influence,
                    rejected_influence: worst.influence,
                });
            }
        }
    }
    out
}

/// In-memory state of a run plus its artifact directory.
pub struct Pipeline {
    pub config: RunConfig,
    pub vocab: Vocab,
    pub base_teacher: TinyLM,
    pub teacher: TinyLM,
    pub student: TrainState<TinyLM>,
    pub seeds: Vec<Example>,
    pub warmup: Vec<Example>,
    pub pool: SeedPool,
    pub reference: ReferenceSet,
    pub heldout: Vec<Example>,
    forbidden: HashSet<String>,
    store: ArtifactStore,
    setup: Option<SetupRecord>,
    records: Vec<IterationRecord>,
    metrics: Vec<MetricRecord>,
    stats: Vec<String>,
}

const STATS_HEADER: &str = "iteration,dataset,metric,key,value";

impl Pipeline {
    /// Fresh run state: fixed sets drawn, student initialized, nothing trained.
    pub fn new(config: RunConfig, base_teacher: TinyLM) -> Result<Self> {
        config.validate()?;
        if base_teacher.config() != &config.teacher.model {
            return Err(Error::Config("teacher checkpoint does not match the teacher model config".into()));
        }
        let vocab = Vocab::toy();
        let (seeds, reference, heldout) = fixed_sets(&config);
        let forbidden = reference.iter().chain(&heldout).map(|e| e.instruction.clone()).collect();
        let student = TinyLM::init(
            config.student.model,
            ModelRole::Student,
            derive_seed(config.master_seed, &[tag("student-init")]),
        )?;
        let store = ArtifactStore::create(Path::new(&config.output_dir))?;
        Ok(Self {
            student: TrainState::new(student, config.student.weight_decay),
            pool: SeedPool::from_seeds(&seeds),
            reference: ReferenceSet::new(&vocab, reference)?,
            teacher: base_teacher.clone(),
            base_teacher,
            vocab,
            seeds,
            warmup: Vec::new(),
            heldout,
            forbidden,
            store,
            setup: None,
            records: Vec::new(),
            metrics: Vec::new(),
            stats: Vec::new(),
            config,
        })
    }

    pub fn iterations_done(&self) -> usize {
        self.records.len()
    }

    pub fn records(&self) -> &[IterationRecord] {
        &self.records
    }

    pub fn store(&self) -> &ArtifactStore {
        &self.store
    }

    /// Seed of a named stage in one iteration (0 for setup stages).
    pub fn stage_seed(&self, stage: &str, iteration: usize) -> u64 {
        derive_seed(self.config.master_seed, &[tag(stage), iteration as u64])
    }

    /// Synthesizes `total` examples from `teacher` with the current pool.
    pub fn synthesize(&self, teacher: &TinyLM, mode: DatasetMode, total: usize, rng_seed: u64) -> Result<(Vec<Example>, BuildStats)> {
        let req = BuildRequest {
            total,
            mode,
            rng_seed,
            forbidden: &self.forbidden,
        };
        let (examples, stats) = build_dataset(teacher, &self.config.grammar, &self.vocab, &self.pool, &self.config.synthesis, &req)?;
        self.reference.check_disjoint(&examples, mode.name())?;
        eval::check_heldout(&self.heldout, &examples, mode.name())?;
        Ok((examples, stats))
    }

    /// Influence of each example on the current student.
    pub fn probe(&self, examples: &[Example]) -> Result<Vec<InfluenceRecord>> {
        collect_influences(
            examples,
            &self.student,
            &self.reference,
            &self.vocab,
            self.config.probe_lr(),
            self.config.probe_optimizer,
            self.config.workers,
        )
    }

    fn eval_sets<'a>(&'a self, seen: &'a [&'a [Example]]) -> EvalSets<'a> {
        EvalSets {
            reference: &self.reference,
            heldout: &self.heldout,
            seen,
            grammar: &self.config.grammar,
            vocab: &self.vocab,
        }
    }

    fn push_stats(&mut self, iteration: usize, dataset: &str, examples: &[Example]) {
        let mut instr: BTreeMap<usize, usize> = BTreeMap::new();
        let mut resp: BTreeMap<usize, usize> = BTreeMap::new();
        let mut kinds = [0usize; 4];
        for e in examples {
            *instr.entry(e.instruction.chars().count()).or_default() += 1;
            *resp.entry(e.response.chars().count()).or_default() += 1;
            if let Some(t) = self.config.grammar.parse(&e.instruction) {
                kinds[t.kind().index()] += 1;
            }
        }
        for (k, n) in instr {
            self.stats.push(format!("{iteration},{dataset},instruction_length,{k},{n}"));
        }
        for (k, n) in resp {
            self.stats.push(format!("{iteration},{dataset},response_length,{k},{n}"));
        }
        for kind in TaskKind::ALL {
            let share = kinds[kind.index()] as f64 / examples.len().max(1) as f64;
            self.stats.push(format!("{iteration},{dataset},kind_share,{},{share}", kind.keyword()));
        }
    }

    fn push_stat(&mut self, iteration: usize, dataset: &str, metric: &str, value: f64) {
        self.stats.push(format!("{iteration},{dataset},{metric},,{value}"));
    }

    fn write_logs(&mut self) -> Result<()> {
        let metrics = std::mem::take(&mut self.metrics);
        self.store.put_jsonl("metrics.jsonl", &metrics)?;
        self.metrics = metrics;
        let mut csv = String::from(STATS_HEADER);
        csv.push('\n');
        for row in &self.stats {
            csv.push_str(row);
            csv.push('\n');
        }
        self.store.put("stats.csv", csv.as_bytes())?;
        Ok(())
    }

    /// The manifest describing everything written so far.
    pub fn manifest(&self) -> Result<Manifest> {
        let setup = self
            .setup
            .clone()
            .ok_or_else(|| Error::Config("the student has not been warmed up".into()))?;
        Ok(Manifest {
            format_version: FORMAT_VERSION,
            crate_version: env!("CARGO_PKG_VERSION").into(),
            config: self.config.clone(),
            setup,
            iterations: self.records.clone(),
            files: self.store.files().clone(),
        })
    }

    fn save_manifest(&self) -> Result<()> {
        self.manifest()?.save(self.store.root())
    }

    fn put_student(&mut self, stem: &str) -> Result<(String, String, String)> {
        let ckpt = format!("checkpoints/{stem}.tlm");
        let opt = format!("checkpoints/{stem}.opt");
        self.store.put(&ckpt, &self.student.model.to_bytes())?;
        self.store.put(&opt, &self.student.opt.to_bytes())?;
        Ok((ckpt, opt, self.student.model.content_hash()))
    }

    /// Persists the fixed sets and base teacher, then trains the student on a
    /// warmup set written by the base teacher.
    pub fn warmup_student(&mut self) -> Result<()> {
        if self.setup.is_some() {
            return Err(Error::Config("the student is already warmed up".into()));
        }
        let started = Instant::now();
        let mut datasets = BTreeMap::new();
        for (name, examples) in [("seeds", &self.seeds), ("reference", &self.reference.examples().to_vec()), ("heldout", &self.heldout)] {
            let file = format!("datasets/{name}.jsonl");
            let bytes = dataset_bytes(examples, 0, "grammar")?;
            self.store.put(&file, &bytes)?;
            datasets.insert(name.to_string(), file);
        }
        let base_ckpt = "checkpoints/teacher_base.tlm".to_string();
        self.store.put(&base_ckpt, &self.base_teacher.to_bytes())?;

        let fresh_loss = reference_loss(&self.student.model, &self.reference)?;
        let (warmup, stats) = self.synthesize(&self.base_teacher.clone(), DatasetMode::Warmup, self.config.sizes.warmup, self.stage_seed("warmup", 0))?;
        let s = self.config.student;
        let seed = self.stage_seed("warmup-sft", 0);
        let log = sft_train(&mut self.student, &samples(&self.vocab, &warmup)?, s.batch_size, s.warmup_epochs, s.lr_max, seed)?;
        let warm_loss = reference_loss(&self.student.model, &self.reference)?;
        log::info!("warmup: reference loss {fresh_loss:.4} -> {warm_loss:.4}");
        self.metrics.extend(metric_lines(0, "warmup_sft", &log));
        self.store.put("datasets/warmup.jsonl", &dataset_bytes(&warmup, 0, "base_teacher")?)?;
        datasets.insert("warmup".into(), "datasets/warmup.jsonl".into());
        self.push_stats(0, "warmup", &warmup);
        let (ckpt, _, hash) = self.put_student("student_warmup")?;
        self.setup = Some(SetupRecord {
            base_teacher_checkpoint: base_ckpt,
            base_teacher_hash: self.base_teacher.content_hash(),
            warmup_student_checkpoint: ckpt,
            warmup_student_hash: hash,
            fresh_reference_loss: fresh_loss,
            warmup_reference_loss: warm_loss,
            warmup: BuildSummary::new(warmup.len(), &stats),
            datasets,
            warmup_seconds: started.elapsed().as_secs_f64(),
        });
        self.warmup = warmup;
        self.write_logs()?;
        self.save_manifest()
    }

    /// Runs iterations until `config.iterations` are done.
    pub fn run_remaining(&mut self) -> Result<()> {
        while self.records.len() < self.config.iterations {
            self.run_iteration()?;
        }
        Ok(())
    }

    /// One iteration of the configured method. On an empty preference set the
    /// iteration aborts with [`Error::NoPreferences`] and nothing changes.
    pub fn run_iteration(&mut self) -> Result<IterationRecord> {
        if self.setup.is_none() {
            return Err(Error::Config("warm up the student before iterating".into()));
        }
        let i = self.records.len() + 1;
        let method = self.config.method;
        let mut t = StepTimings::default();
        let mut datasets = BTreeMap::new();
        let mut clock = Instant::now();
        let mut lap = || {
            let s = clock.elapsed().as_secs_f64();
            clock = Instant::now();
            s
        };

        // Steps 1 to 4: probing, influence, preference pairs, teacher update.
        let mut probing_summary = None;
        let mut probing: Vec<Example> = Vec::new();
        let mut records: Vec<InfluenceRecord> = Vec::new();
        let mut triples: Vec<PreferenceTriple> = Vec::new();
        let n_probe = self.config.sizes.probing_at(i);
        let probes_this_iteration = match method {
            Method::Montessori | Method::ResponseOptimization => true,
            Method::BootstrapInfluence => i == 1,
            Method::SelfInstruct | Method::HardExampleBootstrap => false,
        };
        if probes_this_iteration {
            if method == Method::ResponseOptimization {
                let n_instr = n_probe.div_ceil(self.config.response_candidates);
                let (base, stats) = self.synthesize(&self.teacher, DatasetMode::Probing, n_instr, self.stage_seed("probing", i))?;
                probing = self.response_candidates(&base, self.stage_seed("candidates", i))?;
                probing_summary = Some(BuildSummary::new(probing.len(), &stats));
            } else {
                let (ex, stats) = self.synthesize(&self.teacher, DatasetMode::Probing, n_probe, self.stage_seed("probing", i))?;
                probing_summary = Some(BuildSummary::new(ex.len(), &stats));
                probing = ex;
            }
            t.build_probing = lap();
            records = self.probe(&probing)?;
            t.collect_influences = lap();
            triples = match method {
                Method::Montessori => build_preference_pairs(&records),
                Method::ResponseOptimization => best_worst_pairs(&records),
                _ => Vec::new(),
            };
        }
        let mut new_pool = None;
        match method {
            Method::BootstrapInfluence if i == 1 => {
                let scores: Vec<f64> = records.iter().map(|r| r.influence).collect();
                let promoted: Vec<Example> = top_half(&scores).into_iter().map(|k| probing[k].clone()).collect();
                new_pool = Some(SeedPool::from_seeds(&promoted));
            }
            Method::HardExampleBootstrap => {
                let losses = self.student.model.sample_losses(&samples(&self.vocab, &self.seeds)?)?;
                let promoted: Vec<Example> = top_half(&losses).into_iter().map(|k| self.seeds[k].clone()).collect();
                let mut pool = SeedPool::from_seeds(&promoted);
                for e in self.pool.entries().iter().filter(|e| e.split == PoolSplit::Synthetic) {
                    pool.push(Example::pair(e.instruction.clone(), e.response.clone()), PoolSplit::Synthetic);
                }
                new_pool = Some(pool);
                t.collect_influences = lap();
            }
            _ => {}
        }
        let uses_dpo = matches!(method, Method::Montessori | Method::ResponseOptimization);
        let (dpo_train_set, dpo_held) = split_held_out(&triples, self.config.dpo_heldout_fraction, self.stage_seed("dpo-split", i));
        if uses_dpo && dpo_train_set.is_empty() {
            log::error!("iteration {i}: {} probes gave no usable preference pair", records.len());
            return Err(Error::NoPreferences(i));
        }
        t.build_preferences = lap();

        let mut teacher = self.teacher.clone();
        let (mut margin_before, mut margin_after, mut dpo_steps) = (None, None, 0);
        if uses_dpo {
            let reference = match self.config.dpo_reference {
                DpoReference::CurrentTeacher => self.teacher.clone(),
                DpoReference::BaseTeacher => self.base_teacher.clone(),
            };
            let beta = self.config.dpo.beta;
            if !dpo_held.is_empty() {
                margin_before = Some(dpo_margin(&teacher, &reference, &dpo_held, beta, &self.vocab)?);
            }
            let log = dpo_train(&mut teacher, &reference, &dpo_train_set, &self.config.dpo, &self.vocab, self.stage_seed("dpo", i))?;
            dpo_steps = log.len();
            self.metrics.extend(log.iter().map(|s| MetricRecord {
                iteration: i,
                phase: "teacher_dpo".into(),
                step: s.step,
                lr: s.lr,
                loss: s.loss,
                margin: Some(s.margin),
            }));
            if !dpo_held.is_empty() {
                margin_after = Some(dpo_margin(&teacher, &reference, &dpo_held, beta, &self.vocab)?);
            }
        }
        t.train_teacher = lap();

        // Step 5: training data from the (possibly updated) teacher.
        if let Some(pool) = new_pool {
            self.pool = pool;
        }
        let (training, tstats) = self.synthesize(&teacher, DatasetMode::Training, self.config.sizes.training, self.stage_seed("training", i))?;
        t.build_training = lap();

        // Distribution of the new data's influence, on the pre-update student.
        let n_shift = self.config.sizes.shift_probe.min(training.len());
        let shift = if n_shift > 0 { self.probe(&training[..n_shift])? } else { Vec::new() };
        let shift_time = lap();

        // Step 6: the student continues from its current state.
        let s = self.config.student;
        let seed = self.stage_seed("sft", i);
        let log = sft_train(&mut self.student, &samples(&self.vocab, &training)?, s.batch_size, s.epochs, s.lr_max, seed)?;
        self.metrics.extend(metric_lines(i, "student_sft", &log));
        t.train_student = lap();

        // Step 7: evaluate and persist.
        let seen: Vec<&[Example]> = vec![&self.warmup, &probing, &training];
        let report = evaluate(&self.student.model, None, &self.eval_sets(&seen), Some(&shift))?;
        let teacher_changed = teacher.content_hash() != self.teacher.content_hash();
        self.teacher = teacher;
        self.pool.extend_synthetic(&training);

        let teacher_ckpt = format!("checkpoints/teacher_iter{i}.tlm");
        self.store.put(&teacher_ckpt, &self.teacher.to_bytes())?;
        let (student_ckpt, student_opt, student_hash) = self.put_student(&format!("student_iter{i}"))?;
        let mut put = |store: &mut ArtifactStore, role: &str, bytes: Vec<u8>| -> Result<()> {
            let file = format!("datasets/{role}_iter{i}.jsonl");
            store.put(&file, &bytes)?;
            datasets.insert(role.to_string(), file);
            Ok(())
        };
        if !probing.is_empty() {
            put(&mut self.store, "probing", dataset_bytes(&probing, i, "current_teacher")?)?;
            let mut buf = Vec::new();
            crate::training::write_log_jsonl(&records, &mut buf)?;
            put(&mut self.store, "influence", buf)?;
        }
        if uses_dpo {
            let mut buf = Vec::new();
            crate::training::write_log_jsonl(&triples, &mut buf)?;
            put(&mut self.store, "prefs", buf)?;
        }
        put(&mut self.store, "training", dataset_bytes(&training, i, "updated_teacher")?)?;
        if !shift.is_empty() {
            let mut buf = Vec::new();
            crate::training::write_log_jsonl(&shift, &mut buf)?;
            put(&mut self.store, "shift", buf)?;
        }
        let mut buf = Vec::new();
        crate::training::write_log_jsonl(self.pool.entries(), &mut buf)?;
        put(&mut self.store, "pool", buf)?;

        if !probing.is_empty() {
            self.push_stats(i, "probing", &probing);
            self.push_stat(i, "probing", "positive_fraction", positive_fraction(&records));
        }
        self.push_stats(i, "training", &training);
        if !shift.is_empty() {
            self.push_stat(i, "shift", "positive_fraction", positive_fraction(&shift));
        }
        self.push_stat(i, "student", "reference_loss", report.a.reference_loss);
        self.push_stat(i, "student", "heldout_loss", report.a.heldout_loss);
        self.push_stat(i, "student", "exact_match", report.a.exact_match);
        t.evaluate = shift_time + lap();

        let mut record = IterationRecord {
            iteration: i,
            method,
            teacher_checkpoint: teacher_ckpt,
            student_checkpoint: student_ckpt,
            student_optimizer: student_opt,
            teacher_hash: self.teacher.content_hash(),
            student_hash,
            teacher_changed,
            datasets,
            probing: probing_summary,
            training: BuildSummary::new(training.len(), &tstats),
            preference_pairs: triples.len(),
            dpo_train_pairs: if uses_dpo { dpo_train_set.len() } else { 0 },
            dpo_heldout_pairs: if uses_dpo { dpo_held.len() } else { 0 },
            dpo_steps,
            margin_before,
            margin_after,
            probing_positive_fraction: (!records.is_empty()).then(|| positive_fraction(&records)),
            shift_positive_fraction: report.positive_fraction.filter(|_| !shift.is_empty()),
            reference_loss: report.a.reference_loss,
            heldout_loss: report.a.heldout_loss,
            exact_match: report.a.exact_match,
            pool_size: self.pool.len(),
            prev_hash: self.records.last().map_or(GENESIS_HASH.to_string(), |r| r.hash.clone()),
            hash: String::new(),
            timings: t,
        };
        record.hash = record.link_hash();
        log::info!(
            "{} iteration {i}: reference loss {:.4}, held-out loss {:.4}, positive fraction {:?} -> {:?}",
            method.name(),
            record.reference_loss,
            record.heldout_loss,
            record.probing_positive_fraction,
            record.shift_positive_fraction
        );
        self.records.push(record.clone());
        self.write_logs()?;
        self.save_manifest()?;
        Ok(record)
    }

    /// `response_candidates` sampled responses per instruction, as examples
    /// whose `seed_id` is the instruction index and whose prompt is the
    /// teacher's response prompt. Unterminated samples are dropped.
    fn response_candidates(&self, base: &[Example], rng_seed: u64) -> Result<Vec<Example>> {
        let mut out = Vec::new();
        for (k, ex) in base.iter().enumerate() {
            for r in 0..self.config.response_candidates {
                let params = self
                    .config
                    .synthesis
                    .response_sampling
                    .with_seed(derive_seed(rng_seed, &[k as u64, r as u64]));
                if let Some(resp) = generate_response(&self.teacher, &self.vocab, &ex.instruction, &params)? {
                    out.push(Example::new(k as u64, response_prompt(&ex.instruction), ex.instruction.clone(), resp));
                }
            }
        }
        Ok(out)
    }

    /// Restores a run from its verified manifest. `iterations` overrides the
    /// configured iteration count.
    pub fn resume(dir: &Path, iterations: Option<usize>) -> Result<Self> {
        let manifest = Manifest::load(dir)?;
        let mut config = manifest.config.clone();
        config.output_dir = dir.display().to_string();
        if let Some(n) = iterations {
            config.iterations = n;
        }
        config.validate()?;
        let store = ArtifactStore::with_files(dir, manifest.files.clone())?;
        let vocab = Vocab::toy();
        let load_model = |name: &str| -> Result<TinyLM> { Ok(TinyLM::from_bytes(&store.get(name)?)?) };
        let load_examples = |name: &str| -> Result<Vec<Example>> { read_dataset_jsonl(store.get(name)?.as_slice()) };
        let setup = manifest.setup.clone();
        let dataset = |role: &str| -> Result<&String> {
            setup
                .datasets
                .get(role)
                .ok_or_else(|| Error::Corrupt(format!("manifest lacks the {role} dataset")))
        };
        let seeds = load_examples(dataset("seeds")?)?;
        let reference = load_examples(dataset("reference")?)?;
        let heldout = load_examples(dataset("heldout")?)?;
        let warmup = load_examples(dataset("warmup")?)?;
        let base_teacher = load_model(&setup.base_teacher_checkpoint)?;
        let (teacher, student_ckpt, student_opt, pool) = match manifest.iterations.last() {
            Some(r) => {
                let pool_file = r
                    .datasets
                    .get("pool")
                    .ok_or_else(|| Error::Corrupt(format!("iteration {} lacks its pool file", r.iteration)))?;
                let mut pool = SeedPool::default();
                for e in read_jsonl::<PoolEntry>(&store.get(pool_file)?)? {
                    pool.push(Example::pair(e.instruction, e.response), e.split);
                }
                (load_model(&r.teacher_checkpoint)?, r.student_checkpoint.clone(), r.student_optimizer.clone(), pool)
            }
            None => (
                base_teacher.clone(),
                setup.warmup_student_checkpoint.clone(),
                setup.warmup_student_checkpoint.replace(".tlm", ".opt"),
                SeedPool::from_seeds(&seeds),
            ),
        };
        let model = load_model(&student_ckpt)?;
        let opt = AdamWState::from_bytes(&store.get(&student_opt)?, model.params())?;
        let metrics = read_jsonl::<MetricRecord>(&store.get("metrics.jsonl")?)?;
        let stats_text = String::from_utf8(store.get("stats.csv")?).map_err(|_| Error::Corrupt("stats.csv is not UTF-8".into()))?;
        let stats = stats_text.lines().skip(1).map(str::to_string).collect();
        let forbidden = reference.iter().chain(&heldout).map(|e| e.instruction.clone()).collect();
        Ok(Self {
            student: TrainState { model, opt },
            reference: ReferenceSet::new(&vocab, reference)?,
            config,
            vocab,
            base_teacher,
            teacher,
            seeds,
            warmup,
            pool,
            heldout,
            forbidden,
            store,
            setup: Some(setup),
            records: manifest.iterations,
            metrics,
            stats,
        })
    }
}

/// Outcome of [`run`].
pub struct RunOutcome {
    pub manifest: Manifest,
    pub student: TinyLM,
    pub teacher: TinyLM,
}

/// Warmup plus all configured iterations. The base teacher is pretrained
/// unless one is supplied.
pub fn run(config: &RunConfig, base_teacher: Option<TinyLM>) -> Result<RunOutcome> {
    let teacher = match base_teacher {
        Some(t) => t,
        None => pretrain_teacher(config)?.0,
    };
    let mut p = Pipeline::new(config.clone(), teacher)?;
    p.warmup_student()?;
    p.run_remaining()?;
    Ok(RunOutcome {
        manifest: p.manifest()?,
        student: p.student.model.clone(),
        teacher: p.teacher.clone(),
    })
}

/// Student checkpoint of `iteration` (0 for the warmup student) of a run.
pub fn load_student(dir: &Path, iteration: usize) -> Result<TinyLM> {
    let m = Manifest::load(dir)?;
    let name = if iteration == 0 {
        m.setup.warmup_student_checkpoint.clone()
    } else {
        m.iterations
            .iter()
            .find(|r| r.iteration == iteration)
            .map(|r| r.student_checkpoint.clone())
            .ok_or_else(|| Error::MissingFile(format!("iteration {iteration} of {}", dir.display())))?
    };
    Ok(TinyLM::from_bytes(&std::fs::read(dir.join(name))?)?)
}

/// Evaluates the students of two runs with the same master seed against each
/// other at one iteration.
pub fn compare_runs(dir_a: &Path, dir_b: &Path, iteration: usize) -> Result<EvalReport> {
    let a = Pipeline::resume(dir_a, None)?;
    let b = Manifest::load(dir_b)?;
    if b.config.master_seed != a.config.master_seed {
        return Err(Error::Config("compared runs must share the master seed".into()));
    }
    let sa = load_student(dir_a, iteration)?;
    let sb = load_student(dir_b, iteration)?;
    let seen: Vec<&[Example]> = vec![&a.warmup];
    evaluate(&sa, Some(&sb), &a.eval_sets(&seen), None)
}
