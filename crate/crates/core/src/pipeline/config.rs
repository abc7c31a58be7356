use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::langmodel::ModelConfig;
use crate::preference::DpoConfig;
use crate::synthesis::{SynthesisConfig, TaskGrammar, TeacherPretrainConfig};
use crate::training::ProbeOptimizer;

/// Which data-synthesis strategy a run follows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Influence-guided DPO on the teacher's instructions.
    Montessori,
    /// The unoptimized teacher writes all data.
    SelfInstruct,
    /// Top-influence probing examples become the new seed pool.
    BootstrapInfluence,
    /// Seeds the student finds hardest become the new seed pool.
    HardExampleBootstrap,
    /// Influence-guided DPO on the teacher's responses.
    ResponseOptimization,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Montessori,
        Method::SelfInstruct,
        Method::BootstrapInfluence,
        Method::HardExampleBootstrap,
        Method::ResponseOptimization,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Montessori => "montessori",
            Method::SelfInstruct => "self_instruct",
            Method::BootstrapInfluence => "bootstrap_influence",
            Method::HardExampleBootstrap => "hard_example_bootstrap",
            Method::ResponseOptimization => "response_optimization",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == name)
            .ok_or_else(|| Error::Config(format!("unknown method {name:?}")))
    }
}

/// Reference policy for DPO from the second iteration on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DpoReference {
    /// The teacher as it entered the iteration.
    CurrentTeacher,
    /// The pretrained teacher, in every iteration.
    BaseTeacher,
}

/// Student model and SFT settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudentConfig {
    pub model: ModelConfig,
    pub lr_max: f64,
    pub batch_size: usize,
    /// Epochs over each iteration's training set.
    pub epochs: usize,
    /// Epochs over the warmup set.
    pub warmup_epochs: usize,
    pub weight_decay: f64,
}

/// Example counts for every dataset of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSizes {
    pub seed_pool: usize,
    pub warmup: usize,
    /// Probing size per iteration; the last entry repeats.
    pub probing: Vec<usize>,
    pub training: usize,
    pub reference: usize,
    pub heldout: usize,
    /// Examples of each new training set probed to measure the influence
    /// distribution of the updated teacher (0 disables).
    pub shift_probe: usize,
}

impl DatasetSizes {
    pub fn probing_at(&self, iteration: usize) -> usize {
        let i = iteration.saturating_sub(1).min(self.probing.len().saturating_sub(1));
        self.probing.get(i).copied().unwrap_or(0)
    }
}

/// Everything that determines a run. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub master_seed: u64,
    /// Seed of teacher pretraining, kept apart from the master seed so that
    /// runs with different master seeds share one teacher.
    pub teacher_seed: u64,
    pub method: Method,
    pub iterations: usize,
    pub output_dir: String,
    pub workers: usize,
    pub grammar: TaskGrammar,
    pub teacher: TeacherPretrainConfig,
    pub synthesis: SynthesisConfig,
    pub student: StudentConfig,
    /// One-step probe learning rate; `null` uses the student's `lr_max`.
    pub probe_lr: Option<f64>,
    pub probe_optimizer: ProbeOptimizer,
    pub sizes: DatasetSizes,
    pub dpo: DpoConfig,
    pub dpo_heldout_fraction: f64,
    pub dpo_reference: DpoReference,
    /// Responses sampled per instruction by response-level optimization.
    pub response_candidates: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let grammar = TaskGrammar::default();
        let synthesis = SynthesisConfig::for_grammar(&grammar);
        Self {
            master_seed: 0,
            teacher_seed: 1,
            method: Method::Montessori,
            iterations: 2,
            output_dir: "runs/default".into(),
            workers: 1,
            teacher: TeacherPretrainConfig::default(),
            synthesis,
            student: StudentConfig {
                model: ModelConfig {
                    layers: 2,
                    dim: 32,
                    heads: 2,
                    context: 32,
                    vocab: 44,
                },
                lr_max: 3e-3,
                batch_size: 8,
                epochs: 3,
                warmup_epochs: 8,
                weight_decay: 0.0,
            },
            probe_lr: Some(3e-4),
            probe_optimizer: ProbeOptimizer::Fresh,
            sizes: DatasetSizes {
                seed_pool: 32,
                warmup: 64,
                probing: vec![256],
                training: 512,
                reference: 128,
                heldout: 128,
                shift_probe: 256,
            },
            dpo: DpoConfig {
                beta: 0.1,
                lr: 3e-4,
                batch_size: 2,
                epochs: 1,
                weight_decay: 0.0,
            },
            dpo_heldout_fraction: 0.1,
            dpo_reference: DpoReference::CurrentTeacher,
            response_candidates: 4,
            grammar,
        }
    }
}

impl RunConfig {
    pub fn probe_lr(&self) -> f64 {
        self.probe_lr.unwrap_or(self.student.lr_max)
    }

    pub fn validate(&self) -> Result<()> {
        self.grammar.validate()?;
        self.teacher.validate()?;
        self.synthesis.validate()?;
        self.student.model.validate()?;
        self.dpo.validate()?;
        let s = &self.sizes;
        let sizes = [s.seed_pool, s.warmup, s.training, s.reference, s.heldout];
        if sizes.contains(&0) || s.probing.is_empty() || s.probing.contains(&0) {
            return Err(Error::Config("every dataset size must be at least 1".into()));
        }
        if self.iterations == 0 || self.workers == 0 || self.response_candidates < 2 {
            return Err(Error::Config("iterations and workers must be positive and response_candidates at least 2".into()));
        }
        if s.seed_pool < self.synthesis.shots {
            return Err(Error::Config("seed pool smaller than the prompt size".into()));
        }
        if self.student.batch_size == 0 || self.student.epochs == 0 || self.student.warmup_epochs == 0 {
            return Err(Error::Config("student batch size and epochs must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dpo_heldout_fraction) {
            return Err(Error::Config("dpo_heldout_fraction must lie in [0, 1)".into()));
        }
        if self.student.model.vocab != self.teacher.model.vocab {
            return Err(Error::Config("teacher and student vocabularies differ".into()));
        }
        let needed = self.grammar.max_instruction_len() + self.grammar.max_response_len() + 3;
        if self.student.model.context < needed {
            return Err(Error::Config(format!(
                "student context {} cannot hold the longest example ({needed} tokens)",
                self.student.model.context
            )));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
