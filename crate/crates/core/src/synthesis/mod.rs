//! Toy Self-Instruct: a task grammar, a seed pool, few-shot prompts, teacher
//! sampling of instructions and responses, and ROUGE-L deduplication.

mod grammar;
mod pretrain;

pub use grammar::{KindMix, Task, TaskGrammar, TaskKind};
pub use pretrain::{pretrain_toy_teacher, pretraining_corpus, PretrainReport, TeacherPretrainConfig};

use std::collections::HashSet;
use std::io::{BufRead, Write};

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::example::{prompt_ids, response_prompt, Example};
use crate::langmodel::{SamplingParams, TinyLM, Vocab};
use crate::rng::{derive_seed, stream, tag};

/// Text that opens every instruction-writing prompt.
pub const PROMPT_HEADER: &str = "i:";

/// Where a pool entry came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolSplit {
    Seed,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolEntry {
    pub instruction: String,
    pub response: String,
    pub split: PoolSplit,
}

/// Exemplars available to prompt assembly. Entries are only ever appended.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SeedPool {
    entries: Vec<PoolEntry>,
}

impl SeedPool {
    /// `n` distinct grammar-drawn exemplars from the seed mix.
    pub fn from_grammar<R: Rng + ?Sized>(grammar: &TaskGrammar, n: usize, rng: &mut R) -> Self {
        let mut seen = HashSet::new();
        let mut pool = Self::default();
        while pool.entries.len() < n {
            let ex = grammar.sample(Some(grammar.seed_mix.sample(rng)), rng);
            if seen.insert(ex.instruction.clone()) {
                pool.push(ex, PoolSplit::Seed);
            }
        }
        pool
    }

    /// Pool made of the given examples, all tagged as seeds.
    pub fn from_seeds(examples: &[Example]) -> Self {
        let mut pool = Self::default();
        for e in examples {
            pool.push(e.clone(), PoolSplit::Seed);
        }
        pool
    }

    pub fn push(&mut self, ex: Example, split: PoolSplit) {
        self.entries.push(PoolEntry {
            instruction: ex.instruction,
            response: ex.response,
            split,
        });
    }

    pub fn extend_synthetic(&mut self, examples: &[Example]) {
        for e in examples {
            self.push(e.clone(), PoolSplit::Synthetic);
        }
    }

    pub fn entries(&self) -> &[PoolEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn count(&self, split: PoolSplit) -> usize {
        self.entries.iter().filter(|e| e.split == split).count()
    }

    fn of(&self, split: PoolSplit) -> Vec<&PoolEntry> {
        self.entries.iter().filter(|e| e.split == split).collect()
    }

    pub fn seed_examples(&self) -> Vec<Example> {
        self.of(PoolSplit::Seed)
            .into_iter()
            .map(|e| Example::pair(e.instruction.clone(), e.response.clone()))
            .collect()
    }
}

/// An assembled few-shot prompt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FewShotPrompt {
    pub exemplars: Vec<String>,
    pub provenance: Vec<PoolSplit>,
    /// `header exemplar ; exemplar ; … >`
    pub text: String,
}

impl FewShotPrompt {
    pub fn from_exemplars(exemplars: Vec<String>, provenance: Vec<PoolSplit>) -> Self {
        let text = format!(
            "{PROMPT_HEADER}{}{}",
            exemplars.join(&Vocab::SHOT_SEP.to_string()),
            Vocab::CUE
        );
        Self {
            exemplars,
            provenance,
            text,
        }
    }
}

/// Number of slots reserved for previous-iteration synthetic exemplars.
pub fn synthetic_slots(k: usize) -> usize {
    k.div_ceil(4)
}

/// Draws `k` exemplars: all from the seed split while the pool has no
/// synthetic entries, otherwise `ceil(k/4)` synthetic and the rest seed.
pub fn assemble_prompt<R: Rng + ?Sized>(pool: &SeedPool, k: usize, rng: &mut R) -> Result<FewShotPrompt> {
    let seeds = pool.of(PoolSplit::Seed);
    let synth = pool.of(PoolSplit::Synthetic);
    let n_syn = if synth.is_empty() { 0 } else { synthetic_slots(k).min(synth.len()) };
    let n_seed = k - n_syn;
    if k == 0 || seeds.len() < n_seed {
        return Err(Error::Empty(format!(
            "prompt needs {n_seed} seed exemplars but the pool has {}",
            seeds.len()
        )));
    }
    let mut slots: Vec<(String, PoolSplit)> = Vec::with_capacity(k);
    for i in index::sample(rng, seeds.len(), n_seed) {
        slots.push((seeds[i].instruction.clone(), PoolSplit::Seed));
    }
    for i in index::sample(rng, synth.len(), n_syn) {
        slots.push((synth[i].instruction.clone(), PoolSplit::Synthetic));
    }
    slots.shuffle(rng);
    let (ex, prov) = slots.into_iter().unzip();
    Ok(FewShotPrompt::from_exemplars(ex, prov))
}

/// Decoding and filtering settings for synthesis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthesisConfig {
    /// Exemplars per prompt.
    pub shots: usize,
    /// Instructions sampled per prompt.
    pub n_per_seed: usize,
    pub rouge_threshold: f64,
    /// Instruction decoding; the seed field is replaced per draw.
    pub instruction_sampling: SamplingParams,
    /// Response decoding; the seed field is replaced per draw.
    pub response_sampling: SamplingParams,
    /// Give up after this many instruction samples per requested example.
    pub max_attempt_factor: usize,
}

impl SynthesisConfig {
    pub fn for_grammar(grammar: &TaskGrammar) -> Self {
        Self {
            shots: 4,
            n_per_seed: 4,
            rouge_threshold: 0.7,
            instruction_sampling: SamplingParams::instruction_preset(grammar.max_instruction_len() + 1, 0),
            response_sampling: SamplingParams::response_preset(grammar.max_response_len() + 1, 0),
            max_attempt_factor: 20,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.shots == 0 || self.n_per_seed == 0 || self.max_attempt_factor == 0 {
            return Err(Error::Config("shots, n_per_seed and max_attempt_factor must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.rouge_threshold) {
            return Err(Error::Config("rouge threshold must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Samples `n` instructions for `prompt`. Outputs without a terminator, empty
/// outputs, and outputs the grammar cannot parse are dropped.
pub fn generate_instructions(
    teacher: &TinyLM,
    grammar: &TaskGrammar,
    vocab: &Vocab,
    prompt: &FewShotPrompt,
    n: usize,
    params: &SamplingParams,
) -> Result<Vec<String>> {
    let ids = prompt_ids(vocab, &prompt.text)?;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let p = params.with_seed(derive_seed(params.rng_seed, &[i as u64]));
        let toks = teacher.sample(&ids, vocab.eos(), &p)?;
        match toks.split_last() {
            Some((&last, body)) if last == vocab.eos() && !body.is_empty() => {
                let text = vocab.decode(body)?;
                if grammar.parse(&text).is_some() {
                    out.push(text);
                } else {
                    log::debug!("dropping unparseable instruction {text:?}");
                }
            }
            _ => log::debug!("dropping unterminated or empty instruction"),
        }
    }
    Ok(out)
}

/// One sampled response, or `None` when decoding stops without a terminator.
pub fn generate_response(teacher: &TinyLM, vocab: &Vocab, instruction: &str, params: &SamplingParams) -> Result<Option<String>> {
    let ids = prompt_ids(vocab, &response_prompt(instruction))?;
    let toks = teacher.sample(&ids, vocab.eos(), params)?;
    match toks.split_last() {
        Some((&last, body)) if last == vocab.eos() => Ok(Some(vocab.decode(body)?)),
        _ => Ok(None),
    }
}

fn lcs_len(a: &[char], b: &[char]) -> usize {
    let mut row = vec![0usize; b.len() + 1];
    for &ca in a {
        let mut diag = 0;
        for (j, &cb) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if ca == cb { diag + 1 } else { up.max(row[j]) };
            diag = up;
        }
    }
    row[b.len()]
}

/// Character-level ROUGE-L F1.
pub fn rouge_l(a: &str, b: &str) -> f64 {
    let (a, b): (Vec<char>, Vec<char>) = (a.chars().collect(), b.chars().collect());
    let l = lcs_len(&a, &b);
    if l == 0 {
        return 0.0;
    }
    let p = l as f64 / a.len() as f64;
    let r = l as f64 / b.len() as f64;
    2.0 * p * r / (p + r)
}

/// Greedy in-order filter: a candidate is kept when its ROUGE-L against every
/// previously kept string (and every string of `retained_init`) is at most
/// `threshold`. Returns the kept candidates only.
pub fn filter_instructions(candidates: &[String], retained_init: &[String], threshold: f64) -> Vec<String> {
    let mut pool: Vec<Vec<char>> = retained_init.iter().map(|s| s.chars().collect()).collect();
    let mut kept = Vec::new();
    for c in candidates {
        let cc: Vec<char> = c.chars().collect();
        let ok = pool.iter().all(|r| {
            let l = lcs_len(&cc, r);
            if l == 0 {
                return true;
            }
            let (p, q) = (l as f64 / cc.len() as f64, l as f64 / r.len() as f64);
            2.0 * p * q / (p + q) <= threshold
        });
        if ok {
            pool.push(cc);
            kept.push(c.clone());
        }
    }
    kept
}

/// Largest pairwise ROUGE-L within a list (0 for fewer than two items).
pub fn max_pairwise_rouge(items: &[String]) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..items.len() {
        for j in i + 1..items.len() {
            worst = worst.max(rouge_l(&items[i], &items[j]));
        }
    }
    worst
}

/// What a synthesized dataset is for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetMode {
    Warmup,
    Probing,
    Training,
}

impl DatasetMode {
    pub fn name(self) -> &'static str {
        match self {
            DatasetMode::Warmup => "warmup",
            DatasetMode::Probing => "probing",
            DatasetMode::Training => "training",
        }
    }
}

/// Inputs for [`build_dataset`] besides the teacher and pool.
#[derive(Debug, Clone)]
pub struct BuildRequest<'a> {
    pub total: usize,
    pub mode: DatasetMode,
    pub rng_seed: u64,
    /// Instructions that must never be emitted (reference and held-out sets).
    pub forbidden: &'a HashSet<String>,
}

/// Statistics of one dataset build.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BuildStats {
    pub prompts: usize,
    pub instruction_samples: usize,
    pub valid_instructions: usize,
    pub forbidden_dropped: usize,
    pub rouge_dropped: usize,
    pub unterminated_responses: usize,
    /// Every instruction retained by the ROUGE-L filter, in order.
    pub retained: Vec<String>,
}

/// Prompt → instructions → filter → responses, until `total` examples exist.
/// Each example keeps the prompt text and a per-prompt `seed_id`.
pub fn build_dataset(
    teacher: &TinyLM,
    grammar: &TaskGrammar,
    vocab: &Vocab,
    pool: &SeedPool,
    cfg: &SynthesisConfig,
    req: &BuildRequest<'_>,
) -> Result<(Vec<Example>, BuildStats)> {
    cfg.validate()?;
    if req.total == 0 {
        return Err(Error::Empty("requested dataset size is zero".into()));
    }
    let base = derive_seed(req.rng_seed, &[tag(req.mode.name())]);
    let budget = cfg.max_attempt_factor * req.total;
    let mut stats = BuildStats::default();
    let mut out = Vec::with_capacity(req.total);
    let mut p = 0u64;
    while out.len() < req.total {
        if stats.instruction_samples >= budget {
            return Err(Error::NonTermination(format!(
                "{} of {} {} examples after {} instruction samples",
                out.len(),
                req.total,
                req.mode.name(),
                stats.instruction_samples
            )));
        }
        let prompt = assemble_prompt(pool, cfg.shots, &mut stream(base, "prompt", p))?;
        let iparams = cfg.instruction_sampling.with_seed(derive_seed(base, &[tag("instruction"), p]));
        let cands = generate_instructions(teacher, grammar, vocab, &prompt, cfg.n_per_seed, &iparams)?;
        stats.prompts += 1;
        stats.instruction_samples += cfg.n_per_seed;
        stats.valid_instructions += cands.len();
        let n_valid = cands.len();
        let allowed: Vec<String> = cands.into_iter().filter(|c| !req.forbidden.contains(c)).collect();
        stats.forbidden_dropped += n_valid - allowed.len();
        let kept = filter_instructions(&allowed, &stats.retained, cfg.rouge_threshold);
        stats.rouge_dropped += allowed.len() - kept.len();
        for (j, instruction) in kept.into_iter().enumerate() {
            stats.retained.push(instruction.clone());
            if out.len() == req.total {
                continue;
            }
            let rparams = cfg.response_sampling.with_seed(derive_seed(base, &[tag("response"), p, j as u64]));
            match generate_response(teacher, vocab, &instruction, &rparams)? {
                Some(response) => out.push(Example::new(p, prompt.text.clone(), instruction, response)),
                None => stats.unterminated_responses += 1,
            }
        }
        p += 1;
    }
    Ok((out, stats))
}

/// Line format of dataset files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub seed_id: u64,
    pub prompt: String,
    pub instruction: String,
    pub response: String,
    pub iteration: usize,
    pub provenance: String,
}

pub fn write_dataset_jsonl<W: Write>(examples: &[Example], iteration: usize, provenance: &str, mut out: W) -> Result<()> {
    for e in examples {
        let r = DatasetRecord {
            seed_id: e.seed_id,
            prompt: e.prompt.clone(),
            instruction: e.instruction.clone(),
            response: e.response.clone(),
            iteration,
            provenance: provenance.to_string(),
        };
        serde_json::to_writer(&mut out, &r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_dataset_jsonl<R: BufRead>(input: R) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: DatasetRecord = serde_json::from_str(&line)?;
        out.push(Example::new(r.seed_id, r.prompt, r.instruction, r.response));
    }
    Ok(out)
}
