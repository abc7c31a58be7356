use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::example::Example;

/// The four toy task families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// `add a b` → decimal sum.
    Add,
    /// `rev s` → `s` reversed.
    Rev,
    /// `cpy s` → `s`.
    Cpy,
    /// `srt s` → letters of `s` in ascending order.
    Srt,
}

impl TaskKind {
    pub const ALL: [TaskKind; 4] = [TaskKind::Add, TaskKind::Rev, TaskKind::Cpy, TaskKind::Srt];

    pub fn keyword(self) -> &'static str {
        match self {
            TaskKind::Add => "add",
            TaskKind::Rev => "rev",
            TaskKind::Cpy => "cpy",
            TaskKind::Srt => "srt",
        }
    }

    pub fn from_keyword(word: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.keyword() == word)
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Categorical weights over [`TaskKind`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KindMix {
    pub add: f64,
    pub rev: f64,
    pub cpy: f64,
    pub srt: f64,
}

impl KindMix {
    pub fn uniform() -> Self {
        Self {
            add: 0.25,
            rev: 0.25,
            cpy: 0.25,
            srt: 0.25,
        }
    }

    /// Weights in [`TaskKind::ALL`] order.
    pub fn weights(&self) -> [f64; 4] {
        [self.add, self.rev, self.cpy, self.srt]
    }

    pub fn weight(&self, kind: TaskKind) -> f64 {
        self.weights()[kind.index()]
    }

    pub fn validate(&self, name: &str) -> Result<()> {
        let w = self.weights();
        if w.iter().any(|x| !(x.is_finite() && *x >= 0.0)) || (w.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("{name} weights {w:?} must be non-negative and sum to 1")));
        }
        Ok(())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> TaskKind {
        let u: f64 = rng.random();
        let mut cum = 0.0;
        let mut last = TaskKind::Srt;
        for (k, w) in TaskKind::ALL.into_iter().zip(self.weights()) {
            if w > 0.0 {
                last = k;
                cum += w;
                if u < cum {
                    return k;
                }
            }
        }
        last
    }
}

/// The micro task universe: syntax, payload samplers and the reference mix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskGrammar {
    /// Alphabet of string payloads.
    pub letters: String,
    pub min_len: usize,
    pub max_len: usize,
    /// Largest `add` operand.
    pub max_operand: u32,
    /// Kind distribution of the seed pool.
    pub seed_mix: KindMix,
    /// Kind distribution of the reference and held-out evaluation sets.
    pub reference_mix: KindMix,
}

impl Default for TaskGrammar {
    fn default() -> Self {
        Self {
            letters: "abcdefghijklmnopqrstuvwxyz".into(),
            min_len: 5,
            max_len: 8,
            max_operand: 9999,
            seed_mix: KindMix::uniform(),
            reference_mix: KindMix {
                add: 0.4,
                rev: 0.4,
                cpy: 0.1,
                srt: 0.1,
            },
        }
    }
}

/// A parsed instruction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Task {
    Add(u32, u32),
    Str(TaskKind, String),
}

impl Task {
    pub fn kind(&self) -> TaskKind {
        match self {
            Task::Add(..) => TaskKind::Add,
            Task::Str(k, _) => *k,
        }
    }

    pub fn instruction(&self) -> String {
        match self {
            Task::Add(a, b) => format!("add {a} {b}"),
            Task::Str(k, s) => format!("{} {s}", k.keyword()),
        }
    }

    /// The unique correct response.
    pub fn answer(&self) -> String {
        match self {
            Task::Add(a, b) => (*a as u64 + *b as u64).to_string(),
            Task::Str(TaskKind::Rev, s) => s.chars().rev().collect(),
            Task::Str(TaskKind::Srt, s) => {
                let mut c: Vec<char> = s.chars().collect();
                c.sort_unstable();
                c.into_iter().collect()
            }
            Task::Str(_, s) => s.clone(),
        }
    }
}

impl TaskGrammar {
    pub fn validate(&self) -> Result<()> {
        let letters: Vec<char> = self.letters.chars().collect();
        if letters.is_empty() || letters.iter().any(|c| !c.is_ascii_lowercase()) {
            return Err(Error::Config("payload letters must be non-empty lowercase ascii".into()));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Config(format!("bad payload length range {}..={}", self.min_len, self.max_len)));
        }
        self.seed_mix.validate("seed mix")?;
        self.reference_mix.validate("reference mix")
    }

    /// Longest instruction the grammar can produce.
    pub fn max_instruction_len(&self) -> usize {
        let op = self.max_operand.to_string().len();
        (4 + self.max_len).max(5 + 2 * op)
    }

    /// Longest correct response.
    pub fn max_response_len(&self) -> usize {
        self.max_len.max((2 * self.max_operand as u64).to_string().len())
    }

    pub fn sample_task<R: Rng + ?Sized>(&self, kind: TaskKind, rng: &mut R) -> Task {
        match kind {
            TaskKind::Add => Task::Add(rng.random_range(0..=self.max_operand), rng.random_range(0..=self.max_operand)),
            k => {
                let letters: Vec<char> = self.letters.chars().collect();
                let n = rng.random_range(self.min_len..=self.max_len);
                Task::Str(k, (0..n).map(|_| letters[rng.random_range(0..letters.len())]).collect())
            }
        }
    }

    /// A valid `(instruction, answer)` pair; the kind follows the reference
    /// mix when not given.
    pub fn sample<R: Rng + ?Sized>(&self, kind: Option<TaskKind>, rng: &mut R) -> Example {
        let kind = kind.unwrap_or_else(|| self.reference_mix.sample(rng));
        let t = self.sample_task(kind, rng);
        Example::pair(t.instruction(), t.answer())
    }

    /// Parses an instruction that the grammar could have produced.
    pub fn parse(&self, instruction: &str) -> Option<Task> {
        let (word, rest) = instruction.split_once(' ')?;
        let kind = TaskKind::from_keyword(word)?;
        match kind {
            TaskKind::Add => {
                let (a, b) = rest.split_once(' ')?;
                Some(Task::Add(self.parse_operand(a)?, self.parse_operand(b)?))
            }
            k => {
                let n = rest.chars().count();
                let ok = (self.min_len..=self.max_len).contains(&n) && rest.chars().all(|c| self.letters.contains(c));
                ok.then(|| Task::Str(k, rest.to_string()))
            }
        }
    }

    fn parse_operand(&self, s: &str) -> Option<u32> {
        if s.is_empty() || !s.bytes().all(|b| b.is_ascii_digit()) || (s.len() > 1 && s.starts_with('0')) {
            return None;
        }
        s.parse::<u32>().ok().filter(|&v| v <= self.max_operand)
    }

    /// Ground-truth answer for a parseable instruction.
    pub fn solve(&self, instruction: &str) -> Option<String> {
        self.parse(instruction).map(|t| t.answer())
    }
}
