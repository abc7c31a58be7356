use super::*;
use crate::example::Example;
use crate::langmodel::{ModelConfig, ModelRole};
use crate::numerics::log_softmax_in_place;

fn teacher(seed: u64) -> TinyLM {
    let cfg = ModelConfig {
        layers: 1,
        dim: 16,
        heads: 2,
        context: 32,
        vocab: 44,
    };
    TinyLM::init(cfg, ModelRole::Teacher, seed).unwrap()
}

fn rec(seed: u64, instr: &str, influence: f64) -> InfluenceRecord {
    InfluenceRecord {
        example: Example::new(seed, format!("shots{seed}>"), instr, "x"),
        loss_before: 1.0,
        loss_after: 1.0 - influence,
        influence,
        probe_lr: 1e-3,
        student_hash: String::new(),
    }
}

fn triple(prompt: &str, chosen: &str, rejected: &str) -> PreferenceTriple {
    PreferenceTriple {
        seed_id: 0,
        prompt: prompt.into(),
        chosen: chosen.into(),
        rejected: rejected.into(),
        chosen_influence: 1.0,
        rejected_influence: -1.0,
    }
}

#[test]
fn pairs_follow_sign_rule() {
    let recs = vec![rec(0, "x1", 0.5), rec(0, "x2", -0.2), rec(0, "x3", 0.1), rec(0, "x4", 0.0)];
    let pairs = build_preference_pairs(&recs);
    let got: Vec<(&str, &str)> = pairs.iter().map(|p| (p.chosen.as_str(), p.rejected.as_str())).collect();
    assert_eq!(got, vec![("x1", "x2"), ("x3", "x2")]);
    assert!(pairs.iter().all(|p| p.chosen_influence > 0.0 && p.rejected_influence < 0.0));
}

#[test]
fn no_pairs_without_negatives_or_across_seeds() {
    assert!(build_preference_pairs(&[rec(0, "a", 0.1), rec(0, "b", 0.2)]).is_empty());
    let pairs = build_preference_pairs(&[rec(0, "a", 0.1), rec(1, "b", -0.2), rec(1, "c", 0.3), rec(0, "d", -0.1)]);
    assert_eq!(pairs.len(), 2);
    for p in &pairs {
        assert_eq!(p.prompt, format!("shots{}>", p.seed_id));
    }
    assert_eq!((pairs[0].seed_id, pairs[0].chosen.as_str()), (0, "a"));
    assert_eq!((pairs[1].seed_id, pairs[1].chosen.as_str()), (1, "c"));
}

#[test]
fn identical_instructions_never_pair() {
    let pairs = build_preference_pairs(&[rec(0, "a", 0.1), rec(0, "a", -0.1)]);
    assert!(pairs.is_empty());
}

#[test]
fn loss_is_ln2_at_identity() {
    let vocab = Vocab::toy();
    for seed in 0..5 {
        let t = teacher(seed);
        let tr = triple("i:rev ab;cpy c>", "rev abc", "add 1 2");
        let l = dpo_loss(&t, &t.clone(), &tr, 0.1, &vocab).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12, "{l}");
        assert_eq!(dpo_margin(&t, &t, &[tr], 0.1, &vocab).unwrap(), 0.0);
    }
}

#[test]
fn closed_form_at_gap_two() {
    let m = margin_from_log_probs(2.0, 0.0, 0.0, 0.0, 0.1);
    let expected = (1.0 + (-0.2f64).exp()).ln();
    assert!((dpo_objective(m) - expected).abs() < 1e-15);
    assert!((expected - 0.598139).abs() < 1e-6);
}

#[test]
fn single_triple_margin_is_the_sigmoid_argument() {
    let vocab = Vocab::toy();
    let (p, r) = (teacher(1), teacher(2));
    let tr = triple("i:srt ba>", "cpy ab", "rev ba");
    let m = dpo_margin(&p, &r, std::slice::from_ref(&tr), 0.1, &vocab).unwrap();
    let l = dpo_loss(&p, &r, &tr, 0.1, &vocab).unwrap();
    assert!((dpo_objective(m) - l).abs() < 1e-12);
}

#[test]
fn gradient_matches_finite_differences() {
    use rand::Rng;
    let vocab = Vocab::toy();
    let reference = teacher(3);
    let mut policy = teacher(4);
    // move the policy off the reference so the sigmoid is not at its midpoint
    for t in policy.params_mut() {
        t.data_mut().iter_mut().for_each(|x| *x *= 3.0);
    }
    let tr = triple("i:add 1 2>", "rev ab", "cpy ba");
    let enc = tr.encode(&vocab).unwrap();
    let refs = reference_log_probs(&reference, std::slice::from_ref(&enc)).unwrap();
    let mut g = Graph::new();
    let (loss, _, params) = dpo_loss_graph(&mut g, &policy, &[&enc], &refs, 0.1, true).unwrap();
    g.backward(loss).unwrap();
    let mut rng = crate::rng::rng_from_seed(17);
    let h = 1e-5;
    let mut worst = 0.0f64;
    for _ in 0..40 {
        let ti = rng.random_range(0..params.len());
        let n = policy.params()[ti].len();
        let ci = rng.random_range(0..n);
        let analytic = g.grad(params[ti]).unwrap()[ci];
        let at = |delta: f64| {
            let mut m = policy.clone();
            m.params_mut()[ti].data_mut()[ci] += delta;
            dpo_loss(&m, &reference, &tr, 0.1, &vocab).unwrap()
        };
        let numeric = (at(h) - at(-h)) / (2.0 * h);
        if analytic.abs() + numeric.abs() > 1e-7 {
            worst = worst.max((analytic - numeric).abs() / (analytic.abs() + 1e-8));
        }
    }
    assert!(worst < 1e-4, "{worst}");
}

#[test]
fn loss_decreases_with_chosen_and_increases_with_rejected() {
    let eps = 1e-4;
    let base = margin_from_log_probs(-3.0, -4.0, -3.5, -3.5, 0.1);
    let up_c = margin_from_log_probs(-3.0 + eps, -4.0, -3.5, -3.5, 0.1);
    let up_r = margin_from_log_probs(-3.0, -4.0 + eps, -3.5, -3.5, 0.1);
    assert!(dpo_objective(up_c) < dpo_objective(base));
    assert!(dpo_objective(up_r) > dpo_objective(base));
}

/// Log-probability of `cont` under logits where `c` is added to the chosen
/// token's logit at every position of the chosen path.
fn boosted_log_prob(logits: &[Vec<f64>], path: &[usize], cont: &[usize], c: f64) -> f64 {
    cont.iter()
        .enumerate()
        .map(|(i, &tok)| {
            let mut row = logits[i].clone();
            row[path[i]] += c;
            log_softmax_in_place(&mut row);
            row[tok]
        })
        .sum()
}

#[test]
fn margin_is_monotone_in_chosen_path_boost() {
    let vocab = Vocab::toy();
    let m = teacher(5);
    let prompt = crate::example::prompt_ids(&vocab, "i:cpy ab>").unwrap();
    let chosen = crate::example::continuation_ids(&vocab, "rev ab").unwrap();
    let rejected = crate::example::continuation_ids(&vocab, "rev ba").unwrap();
    let rows = |cont: &[usize]| -> Vec<Vec<f64>> {
        let mut seq = prompt.clone();
        seq.extend_from_slice(&cont[..cont.len() - 1]);
        let l = m.forward_logits(&seq).unwrap();
        (0..cont.len()).map(|i| l.row(prompt.len() - 1 + i).to_vec()).collect()
    };
    let (lc, lr) = (rows(&chosen), rows(&rejected));
    let ref_c = boosted_log_prob(&lc, &chosen, &chosen, 0.0);
    let ref_r = boosted_log_prob(&lr, &chosen, &rejected, 0.0);
    assert!((ref_c - m.sequence_log_prob(&prompt, &chosen).unwrap()).abs() < 1e-10);
    let mut prev = f64::NEG_INFINITY;
    for k in 0..8 {
        let c = 0.5 * k as f64;
        // positions where the paths agree see the same boost on both sides
        let pc = boosted_log_prob(&lc, &chosen, &chosen, c);
        let pr = boosted_log_prob(&lr, &chosen, &rejected, c);
        let margin = margin_from_log_probs(pc, pr, ref_c, ref_r, 0.1);
        assert!(margin > prev, "k={k}: {margin} <= {prev}");
        prev = margin;
    }
}

fn toy_triples() -> Vec<PreferenceTriple> {
    let kinds = ["rev", "cpy", "srt", "add"];
    (0..20)
        .map(|i| {
            let s: String = (0..3).map(|j| (b'a' + ((i + 2 * j) % 6) as u8) as char).collect();
            PreferenceTriple {
                seed_id: (i / 4) as u64,
                prompt: format!("i:{} {s}>", kinds[i % 4]),
                chosen: format!("rev {s}"),
                rejected: format!("cpy {s}"),
                chosen_influence: 0.1,
                rejected_influence: -0.1,
            }
        })
        .collect()
}

#[test]
fn held_out_margin_grows_after_training() {
    let vocab = Vocab::toy();
    let all = toy_triples();
    let (train, held) = split_held_out(&all, 0.1, 0);
    assert_eq!(held.len(), 2);
    assert_eq!(train.len() + held.len(), all.len());
    let cfg = DpoConfig {
        lr: 5e-3,
        batch_size: 2,
        epochs: 5,
        ..DpoConfig::default()
    };
    let mut wins = 0;
    for seed in 0..5 {
        let reference = teacher(20 + seed);
        let frozen = reference.content_hash();
        let mut policy = reference.clone();
        let log = dpo_train(&mut policy, &reference, &train, &cfg, &vocab, seed).unwrap();
        assert_eq!(log.len(), 45);
        assert_eq!(reference.content_hash(), frozen);
        if dpo_margin(&policy, &reference, &held, cfg.beta, &vocab).unwrap() > 0.0 {
            wins += 1;
        }
    }
    assert!(wins >= 4, "{wins}/5");
}

#[test]
fn zero_lr_leaves_policy_and_loss_at_ln2() {
    let vocab = Vocab::toy();
    let reference = teacher(30);
    let mut policy = reference.clone();
    let cfg = DpoConfig {
        lr: 0.0,
        ..DpoConfig::default()
    };
    let log = dpo_train(&mut policy, &reference, &toy_triples(), &cfg, &vocab, 1).unwrap();
    assert_eq!(policy.content_hash(), reference.content_hash());
    assert!(log.iter().all(|l| (l.loss - std::f64::consts::LN_2).abs() < 1e-12));
}

#[test]
fn dpo_training_is_deterministic() {
    let vocab = Vocab::toy();
    let run = || {
        let reference = teacher(31);
        let mut policy = reference.clone();
        let cfg = DpoConfig {
            lr: 1e-3,
            ..DpoConfig::default()
        };
        let log = dpo_train(&mut policy, &reference, &toy_triples(), &cfg, &vocab, 9).unwrap();
        (log.iter().map(|l| (l.loss, l.margin)).collect::<Vec<_>>(), policy.content_hash())
    };
    assert_eq!(run(), run());
}

#[test]
fn triple_json_fields() {
    let v = serde_json::to_value(triple("p", "a", "b")).unwrap();
    for k in ["seed_id", "prompt", "chosen", "rejected", "chosen_influence", "rejected_influence"] {
        assert!(v.get(k).is_some());
    }
}
