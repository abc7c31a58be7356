use super::*;
use crate::langmodel::{ModelConfig, ModelRole};
use crate::training::QuadraticModel;

fn tiny(seed: u64) -> TinyLM {
    let cfg = ModelConfig {
        layers: 1,
        dim: 16,
        heads: 2,
        context: 32,
        vocab: 44,
    };
    TinyLM::init(cfg, ModelRole::Student, seed).unwrap()
}

fn reference(vocab: &Vocab) -> ReferenceSet {
    let ex = vec![
        Example::pair("rev abc", "cba"),
        Example::pair("add 3 4", "7"),
        Example::pair("cpy dog", "dog"),
        Example::pair("srt cba", "abc"),
    ];
    ReferenceSet::new(vocab, ex).unwrap()
}

fn probes(n: usize) -> Vec<Example> {
    (0..n)
        .map(|i| {
            let s: String = (0..3 + i % 3).map(|j| (b'a' + ((i * 7 + j * 3) % 8) as u8) as char).collect();
            let r: String = s.chars().rev().collect();
            Example::new((i / 4) as u64, format!("p{}", i / 4), format!("rev {s}"), r)
        })
        .collect()
}

#[test]
fn reference_loss_is_a_mean_of_example_losses() {
    let m = QuadraticModel::new(0.0);
    let (a, b) = ((0.8f64).sqrt(), (1.2f64).sqrt());
    let losses = m.sample_losses(&[a, b]).unwrap();
    assert!((losses[0] - 0.4).abs() < 1e-15 && (losses[1] - 0.6).abs() < 1e-15);
    assert!((m.mean_loss(&[a, b]).unwrap() - 0.5).abs() < 1e-15);
}

#[test]
fn uniform_model_has_log_vocab_reference_loss() {
    let vocab = Vocab::new("_^$|;> abcdefghij".chars().filter(|&c| c != ' ').collect()).unwrap();
    assert_eq!(vocab.len(), 16);
    let cfg = ModelConfig {
        layers: 1,
        dim: 8,
        heads: 2,
        context: 16,
        vocab: 16,
    };
    let m = TinyLM::zeros(cfg, ModelRole::Student).unwrap();
    let set = ReferenceSet::new(&vocab, vec![Example::pair("abc", "cba"), Example::pair("j", "ghij")]).unwrap();
    let loss = reference_loss(&m, &set).unwrap();
    assert!((loss - 16f64.ln()).abs() < 1e-12, "{loss}");
}

#[test]
fn reference_loss_is_deterministic_and_rejects_empty() {
    let vocab = Vocab::toy();
    let m = tiny(1);
    let set = reference(&vocab);
    assert_eq!(reference_loss(&m, &set).unwrap().to_bits(), reference_loss(&m.clone(), &set).unwrap().to_bits());
    assert!(ReferenceSet::new(&vocab, vec![]).is_err());
}

#[test]
fn quadratic_oracle() {
    // Closed form of the first bias-corrected Adam step from θ = 0 on (θ − 1)²/2:
    // g = −1, m̂ = −1, v̂ = 1, so θ₁ = lr / (1 + eps).
    let lr = 0.1;
    let theta1 = lr / (1.0 + 1e-8);
    let expected = 0.5 - 0.5 * (theta1 - 1.0) * (theta1 - 1.0);
    let st = TrainState::new(QuadraticModel::new(0.0), 0.0);
    let (before, after, inf) = probe_influence(&st, &1.0, &[1.0], lr, ProbeOptimizer::Inherit).unwrap();
    assert_eq!(before, 0.5);
    assert!((after - 0.405).abs() < 1e-8);
    assert!((inf - expected).abs() < 1e-10);
    assert!((inf - 0.095).abs() < 1e-8);
    assert_eq!(inf, before - after);
}

#[test]
fn quadratic_influence_grows_with_small_lr() {
    let st = TrainState::new(QuadraticModel::new(0.0), 0.0);
    let infs: Vec<f64> = [1e-4, 1e-3, 1e-2]
        .iter()
        .map(|&lr| probe_influence(&st, &1.0, &[1.0], lr, ProbeOptimizer::Inherit).unwrap().2)
        .collect();
    assert!(infs[0] > 0.0 && infs[0] < infs[1] && infs[1] < infs[2], "{infs:?}");
}

#[test]
fn zero_probe_lr_gives_zero_influence() {
    let vocab = Vocab::toy();
    let st = TrainState::new(tiny(2), 0.0);
    let recs = collect_influences(&probes(8), &st, &reference(&vocab), &vocab, 0.0, ProbeOptimizer::Inherit, 1).unwrap();
    assert!(recs.iter().all(|r| r.influence == 0.0));
}

#[test]
fn probing_a_reference_example_helps() {
    let vocab = Vocab::toy();
    let ex = Example::pair("rev abcd", "dcba");
    let set = ReferenceSet::new(&vocab, vec![ex.clone()]).unwrap();
    let positive = (0..100)
        .filter(|&seed| {
            let st = TrainState::new(tiny(1000 + seed), 0.0);
            local_influence(&ex, &st, &set, &vocab, 1e-3, ProbeOptimizer::Inherit).unwrap().influence > 0.0
        })
        .count();
    assert!(positive >= 95, "{positive}/100");
}

#[test]
fn records_satisfy_the_loss_difference_identity() {
    let vocab = Vocab::toy();
    let st = TrainState::new(tiny(3), 0.0);
    let set = reference(&vocab);
    let recs = collect_influences(&probes(6), &st, &set, &vocab, 1e-3, ProbeOptimizer::Inherit, 1).unwrap();
    for r in &recs {
        assert_eq!(r.influence, r.loss_before - r.loss_after);
        assert_eq!(r.student_hash, st.content_hash());
        assert_eq!(r.probe_lr, 1e-3);
    }
    let single = local_influence(&probes(6)[2], &st, &set, &vocab, 1e-3, ProbeOptimizer::Inherit).unwrap();
    assert_eq!(single, recs[2]);
}

#[test]
fn collection_is_order_preserving_pure_and_parallel_invariant() {
    let vocab = Vocab::toy();
    let st = TrainState::new(tiny(4), 0.0);
    let set = reference(&vocab);
    let mut probing = probes(64);
    probing[10] = probing[3].clone();
    let hash = st.content_hash();
    let one = collect_influences(&probing, &st, &set, &vocab, 1e-3, ProbeOptimizer::Inherit, 1).unwrap();
    let eight = collect_influences(&probing, &st, &set, &vocab, 1e-3, ProbeOptimizer::Inherit, 8).unwrap();
    assert_eq!(one, eight);
    assert_eq!(st.content_hash(), hash);
    assert_eq!(one[10].influence.to_bits(), one[3].influence.to_bits());
    for (r, e) in one.iter().zip(&probing) {
        assert_eq!(&r.example, e);
    }
}

#[test]
fn disjointness_checks() {
    let vocab = Vocab::toy();
    let set = reference(&vocab);
    assert!(set.check_disjoint(&probes(4), "probing").is_ok());
    let clash = vec![Example::pair("add 3 4", "7")];
    assert!(matches!(set.check_disjoint(&clash, "probing"), Err(Error::Overlap(_))));
}

#[test]
fn record_json_has_flat_fields() {
    let r = InfluenceRecord {
        example: Example::new(3, "p", "rev ab", "ba"),
        loss_before: 1.0,
        loss_after: 0.5,
        influence: 0.5,
        probe_lr: 1e-3,
        student_hash: "h".into(),
    };
    let v: serde_json::Value = serde_json::to_value(&r).unwrap();
    for k in ["seed_id", "instruction", "response", "loss_before", "loss_after", "influence", "probe_lr", "student_hash"] {
        assert!(v.get(k).is_some(), "missing {k}");
    }
    let back: InfluenceRecord = serde_json::from_value(v).unwrap();
    assert_eq!(back, r);
}
