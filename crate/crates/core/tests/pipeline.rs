//! End-to-end behaviour of the iteration loop on a deliberately small setup.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::OnceLock;

use prefsynth::influence::InfluenceRecord;
use prefsynth::langmodel::{ModelConfig, TinyLM};
use prefsynth::pipeline::{compare_runs, fixed_sets, load_student, pretrain_teacher, run, top_half, Manifest, Method, Pipeline, RunConfig, StepTimings};
use prefsynth::preference::PreferenceTriple;
use prefsynth::synthesis::{PoolEntry, PoolSplit};
use prefsynth::training::Trainable;
use prefsynth::Error;
use tempfile::TempDir;

fn small_config(method: Method, dir: &Path) -> RunConfig {
    let mut c = RunConfig::default();
    c.method = method;
    c.output_dir = dir.to_string_lossy().to_string();
    c.teacher.model = ModelConfig {
        layers: 1,
        dim: 24,
        heads: 2,
        context: 80,
        vocab: 44,
    };
    c.teacher.instruction_sequences = 400;
    c.teacher.response_sequences = 400;
    c.teacher.epochs = 3;
    c.teacher.gate_prompts = 20;
    c.teacher.accuracy_probes = 5;
    c.teacher.min_parse_rate = 0.0;
    c.teacher.min_accuracy_gap = -1.0;
    c.synthesis.max_attempt_factor = 200;
    c.student.model = ModelConfig {
        layers: 1,
        dim: 16,
        heads: 2,
        context: 32,
        vocab: 44,
    };
    c.student.epochs = 1;
    c.student.warmup_epochs = 2;
    c.sizes.seed_pool = 12;
    c.sizes.warmup = 16;
    c.sizes.probing = vec![32];
    c.sizes.training = 24;
    c.sizes.reference = 16;
    c.sizes.heldout = 16;
    c.sizes.shift_probe = 16;
    c
}

fn teacher() -> &'static TinyLM {
    static T: OnceLock<TinyLM> = OnceLock::new();
    T.get_or_init(|| pretrain_teacher(&small_config(Method::Montessori, Path::new("unused"))).unwrap().0)
}

fn run_in(method: Method, iterations: usize) -> (TempDir, Manifest) {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(method, dir.path());
    cfg.iterations = iterations;
    let out = run(&cfg, Some(teacher().clone())).unwrap();
    (dir, out.manifest)
}

fn files(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else if !path.ends_with("manifest.json") {
                out.insert(path.strip_prefix(root).unwrap().display().to_string(), std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn assert_same_run(a: &Path, b: &Path) {
    assert_eq!(files(a), files(b));
    let ma = Manifest::load(a).unwrap().without_timings();
    let mut mb = Manifest::load(b).unwrap().without_timings();
    mb.config.output_dir = ma.config.output_dir.clone();
    assert_eq!(serde_json::to_string(&ma).unwrap(), serde_json::to_string(&mb).unwrap());
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Vec<T> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn rerun_is_byte_identical() {
    let (a, _) = run_in(Method::Montessori, 1);
    let (b, _) = run_in(Method::Montessori, 1);
    assert_same_run(a.path(), b.path());
}

#[test]
fn resumed_run_matches_an_unbroken_one() {
    let (whole, _) = run_in(Method::Montessori, 2);
    let (part, m1) = run_in(Method::Montessori, 1);
    assert_eq!(m1.iterations.len(), 1);
    let mut p = Pipeline::resume(part.path(), Some(2)).unwrap();
    assert_eq!(p.iterations_done(), 1);
    p.run_remaining().unwrap();
    assert_same_run(whole.path(), part.path());
}

#[test]
fn manifest_detects_missing_and_tampered_files() {
    let (dir, m) = run_in(Method::SelfInstruct, 1);
    let training = dir.path().join(&m.iterations[0].datasets["training"]);
    let mut bytes = std::fs::read(&training).unwrap();
    bytes[10] ^= 1;
    std::fs::write(&training, &bytes).unwrap();
    assert!(matches!(Manifest::load(dir.path()), Err(Error::Corrupt(_))));
    bytes[10] ^= 1;
    std::fs::write(&training, &bytes).unwrap();
    Manifest::load(dir.path()).unwrap();

    std::fs::remove_file(dir.path().join(&m.iterations[0].student_checkpoint)).unwrap();
    assert!(matches!(Manifest::load(dir.path()), Err(Error::MissingFile(_))));
    assert!(Pipeline::resume(dir.path(), None).is_err());
}

#[test]
fn manifest_chain_detects_edited_records() {
    let (dir, _) = run_in(Method::SelfInstruct, 2);
    let path = dir.path().join("manifest.json");
    let text = std::fs::read_to_string(&path).unwrap();
    let mut m: Manifest = serde_json::from_str(&text).unwrap();
    m.iterations[0].reference_loss += 0.25;
    std::fs::write(&path, serde_json::to_string_pretty(&m).unwrap()).unwrap();
    assert!(matches!(Manifest::load(dir.path()), Err(Error::Corrupt(_))));
}

#[test]
fn manifest_records_chain_and_timings() {
    let (_dir, m) = run_in(Method::Montessori, 2);
    assert_eq!(m.iterations.len(), 2);
    assert_eq!(m.iterations[1].prev_hash, m.iterations[0].hash);
    let timings = serde_json::to_value(&m.iterations[0].timings).unwrap();
    assert_eq!(timings.as_object().unwrap().len(), 7);
    assert_eq!(StepTimings::NAMES.len(), 7);
    for r in &m.iterations {
        assert!(r.timings.values().iter().all(|t| *t >= 0.0));
        assert!(r.training.max_pairwise_rouge <= 0.7);
        assert!(r.probing.as_ref().unwrap().max_pairwise_rouge <= 0.7);
    }
}

#[test]
fn unknown_config_keys_are_rejected() {
    let good = RunConfig::default().to_json();
    assert_eq!(RunConfig::from_json(&good).unwrap(), RunConfig::default());
    let mut v: serde_json::Value = serde_json::from_str(&good).unwrap();
    v["probe_learning_rate"] = serde_json::json!(0.1);
    assert!(RunConfig::from_json(&v.to_string()).is_err());
    let mut v: serde_json::Value = serde_json::from_str(&good).unwrap();
    v["student"]["epochs"] = serde_json::json!(0);
    assert!(RunConfig::from_json(&v.to_string()).is_err());
}

#[test]
fn fixed_sets_are_disjoint_and_seeded() {
    let cfg = small_config(Method::Montessori, Path::new("unused"));
    let (seeds, reference, heldout) = fixed_sets(&cfg);
    assert_eq!((seeds.len(), reference.len(), heldout.len()), (12, 16, 16));
    let mut all: Vec<&str> = seeds.iter().chain(&reference).chain(&heldout).map(|e| e.instruction.as_str()).collect();
    all.sort_unstable();
    all.dedup();
    assert_eq!(all.len(), 44);
    assert_eq!(fixed_sets(&cfg).1, reference);
    let mut other = cfg.clone();
    other.master_seed = 9;
    assert_ne!(fixed_sets(&other).1, reference);
}

#[test]
fn comparisons_and_evaluation() {
    let (a, m) = run_in(Method::Montessori, 1);
    let same = compare_runs(a.path(), a.path(), 1).unwrap();
    assert_eq!(same.win_rate, Some(0.5));
    assert_eq!(same.a.reference_loss, m.iterations[0].reference_loss);
    assert_eq!(same.a.heldout_loss, m.iterations[0].heldout_loss);

    let (b, _) = run_in(Method::SelfInstruct, 1);
    let ab = compare_runs(a.path(), b.path(), 1).unwrap().win_rate.unwrap();
    let ba = compare_runs(b.path(), a.path(), 1).unwrap().win_rate.unwrap();
    assert!((ab + ba - 1.0).abs() < 1e-12, "{ab} + {ba}");

    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(Method::SelfInstruct, dir.path());
    cfg.master_seed = 5;
    cfg.iterations = 1;
    run(&cfg, Some(teacher().clone())).unwrap();
    assert!(compare_runs(a.path(), dir.path(), 1).is_err());

    let warm = load_student(a.path(), 0).unwrap();
    assert_eq!(warm.content_hash(), m.setup.warmup_student_hash);
}

#[test]
fn teacher_changes_exactly_when_preferences_exist() {
    let (_d, m) = run_in(Method::Montessori, 2);
    for r in &m.iterations {
        assert!(r.dpo_train_pairs > 0);
        assert_eq!(r.dpo_train_pairs + r.dpo_heldout_pairs, r.preference_pairs);
        assert!(r.teacher_changed);
        assert!(r.margin_before.is_some() == (r.dpo_heldout_pairs > 0));
    }
    assert_ne!(m.iterations[0].teacher_hash, m.setup.base_teacher_hash);

    let (_d, m) = run_in(Method::SelfInstruct, 2);
    for r in &m.iterations {
        assert_eq!((r.preference_pairs, r.dpo_steps), (0, 0));
        assert!(!r.teacher_changed);
        assert_eq!(r.teacher_hash, m.setup.base_teacher_hash);
        assert!(r.probing.is_none() && r.probing_positive_fraction.is_none());
    }
}

#[test]
fn montessori_preferences_follow_the_sign_rule() {
    let (dir, m) = run_in(Method::Montessori, 1);
    let r = &m.iterations[0];
    let prefs: Vec<PreferenceTriple> = read_jsonl(&dir.path().join(&r.datasets["prefs"]));
    let influence: Vec<InfluenceRecord> = read_jsonl(&dir.path().join(&r.datasets["influence"]));
    assert_eq!(prefs.len(), r.preference_pairs);
    assert_eq!(influence.len(), r.probing.as_ref().unwrap().examples);
    for t in &prefs {
        assert!(t.chosen_influence > 0.0 && t.rejected_influence < 0.0);
        assert_ne!(t.chosen, t.rejected);
        let from_prompt: Vec<&InfluenceRecord> = influence.iter().filter(|x| x.example.seed_id == t.seed_id).collect();
        assert!(from_prompt.iter().all(|x| x.example.prompt == t.prompt));
        assert!(from_prompt.iter().any(|x| x.example.instruction == t.chosen));
        assert!(from_prompt.iter().any(|x| x.example.instruction == t.rejected));
    }
}

#[test]
fn bootstrap_promotes_the_more_influential_half_once() {
    let (dir, m) = run_in(Method::BootstrapInfluence, 2);
    let r1 = &m.iterations[0];
    let influence: Vec<InfluenceRecord> = read_jsonl(&dir.path().join(&r1.datasets["influence"]));
    let pool: Vec<PoolEntry> = read_jsonl(&dir.path().join(&r1.datasets["pool"]));
    let promoted: Vec<&PoolEntry> = pool.iter().filter(|e| e.split == PoolSplit::Seed).collect();
    assert_eq!(promoted.len(), influence.len().div_ceil(2));
    let scores: Vec<f64> = influence.iter().map(|x| x.influence).collect();
    let chosen = top_half(&scores);
    let cutoff = chosen.iter().map(|&k| scores[k]).fold(f64::INFINITY, f64::min);
    assert!(scores.iter().enumerate().filter(|(k, _)| !chosen.contains(k)).all(|(_, &s)| s <= cutoff));
    for (e, &k) in promoted.iter().zip(&chosen) {
        assert_eq!(e.instruction, influence[k].example.instruction);
    }
    assert_eq!(pool.len() - promoted.len(), r1.training.examples);
    // the second iteration does not probe again
    assert!(m.iterations[1].probing.is_none());
    assert!(!m.iterations[1].datasets.contains_key("influence"));
}

#[test]
fn hard_examples_come_from_the_seed_set() {
    let (dir, m) = run_in(Method::HardExampleBootstrap, 1);
    let student = load_student(dir.path(), 0).unwrap();
    let seeds: Vec<prefsynth::Example> = {
        let file = std::io::BufReader::new(std::fs::File::open(dir.path().join("datasets/seeds.jsonl")).unwrap());
        prefsynth::synthesis::read_dataset_jsonl(file).unwrap()
    };
    let vocab = prefsynth::langmodel::Vocab::toy();
    let samples: Vec<prefsynth::SftSample> = seeds.iter().map(|e| prefsynth::SftSample::from_example(&vocab, e).unwrap()).collect();
    let losses = student.sample_losses(&samples).unwrap();
    let hard = top_half(&losses);
    let pool: Vec<PoolEntry> = read_jsonl(&dir.path().join(&m.iterations[0].datasets["pool"]));
    let promoted: Vec<&str> = pool.iter().filter(|e| e.split == PoolSplit::Seed).map(|e| e.instruction.as_str()).collect();
    let expected: Vec<&str> = hard.iter().map(|&k| seeds[k].instruction.as_str()).collect();
    assert_eq!(promoted, expected);
    let easy_max = (0..seeds.len()).filter(|k| !hard.contains(k)).map(|k| losses[k]).fold(f64::NEG_INFINITY, f64::max);
    assert!(hard.iter().all(|&k| losses[k] >= easy_max));
    assert_eq!(m.iterations[0].preference_pairs, 0);
}

#[test]
fn response_optimization_pairs_responses_of_one_instruction() {
    let (dir, m) = run_in(Method::ResponseOptimization, 1);
    let r = &m.iterations[0];
    let prefs: Vec<PreferenceTriple> = read_jsonl(&dir.path().join(&r.datasets["prefs"]));
    let influence: Vec<InfluenceRecord> = read_jsonl(&dir.path().join(&r.datasets["influence"]));
    let mut prompts: Vec<&str> = prefs.iter().map(|t| t.prompt.as_str()).collect();
    prompts.sort_unstable();
    prompts.dedup();
    assert_eq!(prompts.len(), prefs.len());
    for t in &prefs {
        assert!(t.chosen_influence > t.rejected_influence);
        let group: Vec<&InfluenceRecord> = influence.iter().filter(|x| x.example.seed_id == t.seed_id).collect();
        let best = group.iter().map(|x| x.influence).fold(f64::NEG_INFINITY, f64::max);
        let worst = group.iter().map(|x| x.influence).fold(f64::INFINITY, f64::min);
        assert_eq!((t.chosen_influence, t.rejected_influence), (best, worst));
        assert!(group.iter().all(|x| x.example.prompt == t.prompt));
    }
}

#[test]
fn warmup_happens_once_and_iterations_need_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(Method::SelfInstruct, dir.path());
    let mut p = Pipeline::new(cfg, teacher().clone()).unwrap();
    assert!(p.run_iteration().is_err());
    p.warmup_student().unwrap();
    assert!(p.warmup_student().is_err());
    let hash = p.student.content_hash();
    let probing = p.warmup.clone();
    p.probe(&probing).unwrap();
    assert_eq!(p.student.content_hash(), hash);
}
