use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{assemble_prompt, generate_instructions, generate_response, FewShotPrompt, KindMix, PoolSplit, SeedPool, SynthesisConfig, TaskGrammar, TaskKind};
use crate::error::{Error, Result};
use crate::example::{continuation_ids, prompt_ids, SftSample};
use crate::langmodel::{ModelConfig, ModelRole, TinyLM, Vocab};
use crate::rng::{derive_seed, stream};
use crate::training::{sft_train, StepLog, TrainState};

/// How the stand-in teacher is built before any preference tuning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherPretrainConfig {
    pub model: ModelConfig,
    /// Kinds the teacher writes when it does not copy a prompt exemplar's kind.
    pub instruction_mix: KindMix,
    /// Probability that a written instruction takes the kind of a random exemplar.
    pub prompt_follow: f64,
    /// Per-kind share of answered instructions in the corpus.
    pub response_mix: KindMix,
    pub instruction_sequences: usize,
    pub response_sequences: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Held-out prompts for the parse-rate gate.
    pub gate_prompts: usize,
    pub min_parse_rate: f64,
    /// Instructions per kind for the accuracy measurement.
    pub accuracy_probes: usize,
    /// Required accuracy gap between the most- and least-exposed kinds.
    pub min_accuracy_gap: f64,
}

impl Default for TeacherPretrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig {
                layers: 2,
                dim: 48,
                heads: 2,
                context: 80,
                vocab: 44,
            },
            instruction_mix: KindMix {
                add: 0.1,
                rev: 0.1,
                cpy: 0.4,
                srt: 0.4,
            },
            prompt_follow: 0.5,
            response_mix: KindMix {
                add: 0.25,
                rev: 0.25,
                cpy: 0.45,
                srt: 0.05,
            },
            instruction_sequences: 3000,
            response_sequences: 3000,
            epochs: 10,
            batch_size: 16,
            lr: 5e-3,
            weight_decay: 0.0,
            gate_prompts: 200,
            min_parse_rate: 0.9,
            accuracy_probes: 50,
            min_accuracy_gap: 0.2,
        }
    }
}

impl TeacherPretrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.instruction_mix.validate("teacher instruction mix")?;
        self.response_mix.validate("teacher response mix")?;
        if !(0.0..=1.0).contains(&self.prompt_follow) {
            return Err(Error::Config("prompt_follow must lie in [0, 1]".into()));
        }
        if self.instruction_sequences + self.response_sequences == 0 || self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("teacher corpus, epochs and batch size must be positive".into()));
        }
        Ok(())
    }
}

/// Measurements taken after pretraining.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub parse_rate: f64,
    /// Share of each kind among parseable gate instructions ([`TaskKind::ALL`] order).
    pub instruction_kind_share: [f64; 4],
    /// Exact-match response accuracy per kind ([`TaskKind::ALL`] order).
    pub accuracy: [f64; 4],
    pub accuracy_gap: f64,
    pub final_loss: f64,
    pub steps: usize,
}

fn random_prompt<R: Rng + ?Sized>(grammar: &TaskGrammar, shots: usize, rng: &mut R) -> FewShotPrompt {
    let ex: Vec<String> = (0..shots)
        .map(|_| grammar.sample(Some(grammar.seed_mix.sample(rng)), rng).instruction)
        .collect();
    FewShotPrompt::from_exemplars(ex, vec![PoolSplit::Seed; shots])
}

/// Instruction-writing sequences (`BOS prompt new-instruction EOS`, loss on
/// the new instruction) and answering sequences (`BOS x SEP y EOS`).
pub fn pretraining_corpus(grammar: &TaskGrammar, cfg: &TeacherPretrainConfig, shots: usize, vocab: &Vocab, seed: u64) -> Result<Vec<SftSample>> {
    let mut rng = stream(seed, "teacher-corpus", 0);
    let mut out = Vec::with_capacity(cfg.instruction_sequences + cfg.response_sequences);
    for _ in 0..cfg.instruction_sequences {
        let prompt = random_prompt(grammar, shots, &mut rng);
        let kind = if rng.random::<f64>() < cfg.prompt_follow {
            let pick = &prompt.exemplars[rng.random_range(0..shots)];
            grammar.parse(pick).map(|t| t.kind()).unwrap_or(TaskKind::Cpy)
        } else {
            cfg.instruction_mix.sample(&mut rng)
        };
        let target = grammar.sample_task(kind, &mut rng).instruction();
        out.push(SftSample::from_parts(prompt_ids(vocab, &prompt.text)?, continuation_ids(vocab, &target)?));
    }
    for _ in 0..cfg.response_sequences {
        let ex = grammar.sample(Some(cfg.response_mix.sample(&mut rng)), &mut rng);
        out.push(SftSample::from_example(vocab, &ex)?);
    }
    Ok(out)
}

/// Trains the stand-in teacher from scratch and checks the two gates: enough
/// parseable instructions, and a response-accuracy gap between the most- and
/// least-exposed kinds.
pub fn pretrain_toy_teacher(
    grammar: &TaskGrammar,
    cfg: &TeacherPretrainConfig,
    synthesis: &SynthesisConfig,
    vocab: &Vocab,
    seed: u64,
) -> Result<(TinyLM, PretrainReport)> {
    grammar.validate()?;
    cfg.validate()?;
    let corpus = pretraining_corpus(grammar, cfg, synthesis.shots, vocab, seed)?;
    let model = TinyLM::init(cfg.model, ModelRole::Teacher, derive_seed(seed, &[1]))?;
    let mut state = TrainState::new(model, cfg.weight_decay);
    let log: Vec<StepLog> = sft_train(&mut state, &corpus, cfg.batch_size, cfg.epochs, cfg.lr, derive_seed(seed, &[2]))?;
    let teacher = state.model;
    let report = measure_teacher(&teacher, grammar, cfg, synthesis, vocab, seed, &log)?;
    log::info!(
        "teacher pretraining: parse rate {:.3}, accuracy {:?}, gap {:.3}",
        report.parse_rate,
        report.accuracy,
        report.accuracy_gap
    );
    if report.parse_rate < cfg.min_parse_rate {
        return Err(Error::GateFailure(format!(
            "parse rate {:.3} below {:.3}",
            report.parse_rate, cfg.min_parse_rate
        )));
    }
    if report.accuracy_gap < cfg.min_accuracy_gap {
        return Err(Error::GateFailure(format!(
            "response accuracy gap {:.3} below {:.3} (per-kind accuracy {:?})",
            report.accuracy_gap, cfg.min_accuracy_gap, report.accuracy
        )));
    }
    Ok((teacher, report))
}

fn measure_teacher(
    teacher: &TinyLM,
    grammar: &TaskGrammar,
    cfg: &TeacherPretrainConfig,
    synthesis: &SynthesisConfig,
    vocab: &Vocab,
    seed: u64,
    log: &[StepLog],
) -> Result<PretrainReport> {
    let gate_pool = SeedPool::from_grammar(grammar, 4 * synthesis.shots.max(8), &mut stream(seed, "gate-pool", 0));
    let mut parsed = 0usize;
    let mut share = [0.0; 4];
    for i in 0..cfg.gate_prompts {
        let prompt = assemble_prompt(&gate_pool, synthesis.shots, &mut stream(seed, "gate-prompt", i as u64))?;
        let params = synthesis.instruction_sampling.with_seed(derive_seed(seed, &[3, i as u64]));
        for text in generate_instructions(teacher, grammar, vocab, &prompt, 1, &params)? {
            parsed += 1;
            if let Some(t) = grammar.parse(&text) {
                share[t.kind().index()] += 1.0;
            }
        }
    }
    if parsed > 0 {
        share.iter_mut().for_each(|s| *s /= parsed as f64);
    }
    let mut accuracy = [0.0; 4];
    for kind in TaskKind::ALL {
        let mut rng = stream(seed, "gate-accuracy", kind.index() as u64);
        let mut hits = 0usize;
        for j in 0..cfg.accuracy_probes {
            let ex = grammar.sample(Some(kind), &mut rng);
            let params = synthesis.response_sampling.with_seed(derive_seed(seed, &[4, kind.index() as u64, j as u64]));
            if generate_response(teacher, vocab, &ex.instruction, &params)?.as_deref() == Some(ex.response.as_str()) {
                hits += 1;
            }
        }
        accuracy[kind.index()] = hits as f64 / cfg.accuracy_probes.max(1) as f64;
    }
    let w = cfg.response_mix.weights();
    let most = (0..4).max_by(|&a, &b| w[a].total_cmp(&w[b]).then(b.cmp(&a))).unwrap_or(0);
    let least = (0..4).min_by(|&a, &b| w[a].total_cmp(&w[b]).then(a.cmp(&b))).unwrap_or(0);
    Ok(PretrainReport {
        parse_rate: parsed as f64 / cfg.gate_prompts.max(1) as f64,
        instruction_kind_share: share,
        accuracy,
        accuracy_gap: accuracy[most] - accuracy[least],
        final_loss: log.last().map(|l| l.loss).unwrap_or(f64::NAN),
        steps: log.len(),
    })
}
