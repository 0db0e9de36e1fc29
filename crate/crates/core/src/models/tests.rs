use super::*;
use crate::autodiff::{Tape, Tensor};
use crate::error::Error;

fn input(n: usize, d: usize) -> Tensor {
    let data = (0..n * d).map(|i| ((i * 7 % 11) as f64 - 5.0) / 4.0).collect();
    Tensor::new(vec![n, d], data).unwrap()
}

fn logits_of(group: &StudentGroup, x: &Tensor) -> Vec<Vec<f64>> {
    let mut tape = Tape::new();
    let bound = group.bind(&mut tape);
    let xv = tape.leaf(x);
    let out = group.forward(&mut tape, &bound, xv, 3.0).unwrap();
    out.logits.iter().map(|&g| tape.value(g).to_vec()).collect()
}

#[test]
fn branch_group_layout_and_determinism() {
    let cfg = StudentGroupConfig::mlp(4, 5, 3, 11);
    let a = StudentGroup::build(cfg.clone()).unwrap();
    let b = StudentGroup::build(cfg).unwrap();
    assert_eq!(a.params(), b.params());
    assert_eq!(a.trunk_param_ids().len(), 2);
    for s in 0..4 {
        assert_eq!(a.student_param_ids(s).len(), 4);
    }
    // trunk + 4 students + projector
    assert_eq!(a.params().len(), 2 + 4 * 4 + 2);
}

#[test]
fn network_group_has_disjoint_distinct_students() {
    let cfg = StudentGroupConfig::mlp(4, 5, 3, 11).with_mode(GroupMode::NetworkBased);
    let g = StudentGroup::build(cfg).unwrap();
    assert!(g.trunk_param_ids().is_empty());
    assert!(!g.has_trunk());
    let first: Vec<Vec<f64>> = (0..4)
        .map(|s| g.params().get(g.student_param_ids(s)[0]).data().to_vec())
        .collect();
    for i in 0..4 {
        assert_eq!(g.student_param_ids(i).len(), 6);
        for j in i + 1..4 {
            assert_ne!(first[i], first[j]);
        }
    }
}

#[test]
fn rejects_single_student() {
    let cfg = StudentGroupConfig::mlp(1, 5, 3, 0);
    assert!(matches!(StudentGroup::build(cfg), Err(Error::Config(_))));
}

#[test]
fn invalid_layer_is_named() {
    let mut cfg = StudentGroupConfig::mlp(3, 5, 3, 0);
    cfg.branch.insert(0, LayerSpec::MaxPool2);
    match StudentGroup::build(cfg) {
        Err(Error::InvalidLayer { index, kind, .. }) => {
            assert_eq!(index, 1);
            assert_eq!(kind, "max_pool2");
        }
        other => panic!("unexpected {other:?}"),
    }

    let mut cfg = StudentGroupConfig::mlp(3, 5, 3, 0);
    cfg.feature_dim = 7;
    assert!(matches!(StudentGroup::build(cfg), Err(Error::InvalidLayer { .. })));
}

#[test]
fn forced_identical_branches_give_identical_logits() {
    let mut g = StudentGroup::build(StudentGroupConfig::mlp(3, 4, 3, 5)).unwrap();
    let source: Vec<Tensor> = g
        .student_param_ids(0)
        .iter()
        .map(|&id| g.params().get(id).clone())
        .collect();
    for s in 1..3 {
        for (&id, t) in g.student_param_ids(s).iter().zip(&source) {
            g.params_mut().get_mut(id).data_mut().copy_from_slice(t.data());
        }
    }
    let logits = logits_of(&g, &input(6, 4));
    assert_eq!(logits[0], logits[1]);
    assert_eq!(logits[0], logits[2]);
}

#[test]
fn single_sample_probability_rows() {
    let g = StudentGroup::build(StudentGroupConfig::mlp(4, 4, 5, 9)).unwrap();
    let mut tape = Tape::new();
    let bound = g.bind(&mut tape);
    let xv = tape.leaf(&input(1, 4));
    let out = g.forward(&mut tape, &bound, xv, 3.0).unwrap();
    assert_eq!(out.num_students(), 4);
    for (&q, &qs) in out.probs.iter().zip(&out.soft_probs) {
        for v in [q, qs] {
            assert_eq!(tape.shape(v), &[1, 5]);
            assert!((tape.value(v).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn micro_mlp_matches_hand_unrolled_chain() {
    // 2 -> 4 (ReLU trunk) -> 2 classes, no branch layers.
    let mut cfg = StudentGroupConfig::mlp_with(2, 2, 4, 4, 2, 0);
    cfg.branch.clear();
    let mut g = StudentGroup::build(cfg).unwrap();
    let w1 = [0.5, -1.0, 0.25, 2.0, 1.5, 0.5, -0.75, 1.0];
    let b1 = [0.1, 0.0, -0.2, 0.3];
    let w2 = [1.0, -1.0, 0.5, 2.0, -0.5, 0.25, 0.0, 1.0];
    let b2 = [0.05, -0.05];
    let set = |g: &mut StudentGroup, name: &str, vals: &[f64]| {
        let id = g.params().find(name).unwrap();
        g.params_mut().get_mut(id).data_mut().copy_from_slice(vals);
    };
    set(&mut g, "trunk.0.weight", &w1);
    set(&mut g, "trunk.0.bias", &b1);
    set(&mut g, "student0.head.weight", &w2);
    set(&mut g, "student0.head.bias", &b2);

    let x = [1.0, -2.0];
    // h = relu(x W1 + b1)
    //   col0: 0.5 - 3.0 + 0.1 = -2.4 -> 0
    //   col1: -1.0 - 1.0 + 0.0 = -2.0 -> 0
    //   col2: 0.25 + 1.5 - 0.2 = 1.55
    //   col3: 2.0 - 2.0 + 0.3 = 0.3
    // g = h W2 + b2
    //   col0: 1.55 * -0.5 + 0.3 * 0.0 + 0.05 = -0.725
    //   col1: 1.55 * 0.25 + 0.3 * 1.0 - 0.05 = 0.6375
    let logits = logits_of(&g, &Tensor::new(vec![1, 2], x.to_vec()).unwrap());
    assert!((logits[0][0] - -0.725).abs() < 1e-15);
    assert!((logits[0][1] - 0.6375).abs() < 1e-15);
}

#[test]
fn pass_through_trunk_branch_equals_network() {
    let mut cfg = StudentGroupConfig::mlp(3, 4, 3, 21);
    cfg.trunk.clear();
    cfg.branch = vec![
        LayerSpec::Linear { out: 8, relu: true },
        LayerSpec::Linear { out: 6, relu: true },
    ];
    cfg.feature_dim = 6;
    let branch = StudentGroup::build(cfg.clone()).unwrap();
    let network = StudentGroup::build(cfg.with_mode(GroupMode::NetworkBased)).unwrap();
    let x = input(5, 4);
    let mut tb = Tape::new();
    let bb = branch.bind(&mut tb);
    let xb = tb.leaf(&x);
    let ob = branch.forward(&mut tb, &bb, xb, 3.0).unwrap();
    let mut tn = Tape::new();
    let bn = network.bind(&mut tn);
    let xn = tn.leaf(&x);
    let on = network.forward(&mut tn, &bn, xn, 3.0).unwrap();
    for s in 0..3 {
        assert_eq!(tb.value(ob.features[s]), tn.value(on.features[s]));
        assert_eq!(tb.value(ob.logits[s]), tn.value(on.logits[s]));
        assert_eq!(tb.value(ob.probs[s]), tn.value(on.probs[s]));
        assert_eq!(tb.value(ob.soft_probs[s]), tn.value(on.soft_probs[s]));
    }
}

fn grads_for_single_student_loss(group: &mut StudentGroup, student: usize) {
    let x = input(4, 5);
    let mut tape = Tape::new();
    let bound = group.bind(&mut tape);
    let xv = tape.leaf(&x);
    let out = group.forward(&mut tape, &bound, xv, 3.0).unwrap();
    let loss = tape.cross_entropy(out.probs[student], &[0, 1, 2, 0]).unwrap();
    let grads = tape.backward(loss).unwrap();
    group.params_mut().zero_grads();
    group.params_mut().accumulate(&bound, &grads);
}

fn grad_norm(group: &StudentGroup, ids: &[crate::autodiff::ParamId]) -> f64 {
    ids.iter()
        .map(|&id| {
            group
                .params()
                .get(id)
                .grad()
                .map_or(0.0, |g| g.iter().map(|v| v * v).sum::<f64>())
        })
        .sum()
}

#[test]
fn network_mode_leader_loss_leaves_peers_untouched() {
    let cfg = StudentGroupConfig::mlp(4, 5, 3, 2).with_mode(GroupMode::NetworkBased);
    let mut g = StudentGroup::build(cfg).unwrap();
    grads_for_single_student_loss(&mut g, 3);
    for peer in 0..3 {
        assert_eq!(grad_norm(&g, &g.student_param_ids(peer)), 0.0);
    }
    assert!(grad_norm(&g, &g.student_param_ids(3)) > 0.0);

    grads_for_single_student_loss(&mut g, 1);
    assert_eq!(grad_norm(&g, &g.student_param_ids(3)), 0.0);
    assert!(grad_norm(&g, &g.student_param_ids(1)) > 0.0);
}

#[test]
fn branch_mode_single_student_loss_reaches_trunk() {
    let mut g = StudentGroup::build(StudentGroupConfig::mlp(4, 5, 3, 2)).unwrap();
    for s in 0..4 {
        grads_for_single_student_loss(&mut g, s);
        assert!(grad_norm(&g, &g.trunk_param_ids()) > 0.0);
    }
}

#[test]
fn forward_rejects_wrong_input_shape() {
    let g = StudentGroup::build(StudentGroupConfig::mlp(3, 5, 3, 2)).unwrap();
    let mut tape = Tape::new();
    let bound = g.bind(&mut tape);
    let xv = tape.leaf(&input(2, 4));
    assert!(matches!(
        g.forward(&mut tape, &bound, xv, 3.0),
        Err(Error::ShapeMismatch { .. })
    ));
}

#[test]
fn cnn_group_runs() {
    let g = StudentGroup::build(StudentGroupConfig::cnn(3, 3, 8, 8, 4, 1)).unwrap();
    let x = Tensor::new(vec![2, 3, 8, 8], (0..384).map(|i| (i % 13) as f64 / 13.0).collect()).unwrap();
    let probs = g.predict(&x, 16).unwrap();
    assert_eq!(probs.len(), 3);
    for p in probs {
        assert_eq!(p.shape(), &[2, 4]);
    }
}

#[test]
fn predict_matches_forward_across_chunks() {
    let g = StudentGroup::build(StudentGroupConfig::mlp(3, 5, 3, 8)).unwrap();
    let x = input(7, 5);
    let a = g.predict(&x, 3).unwrap();
    let b = g.predict(&x, 100).unwrap();
    assert_eq!(a, b);
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("group.json");
    let mut g = StudentGroup::build(StudentGroupConfig::mlp(3, 5, 3, 8)).unwrap();
    // Perturb so the stored values differ from a fresh build.
    for t in g.params_mut().tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = *v * 1.37 + 1e-3);
    }
    save_checkpoint(&g, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back.config(), g.config());
    assert_eq!(back.params().flatten(), g.params().flatten());
}

#[test]
fn checkpoint_rejects_wrong_version() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("group.json");
    let g = StudentGroup::build(StudentGroupConfig::mlp(3, 5, 3, 8)).unwrap();
    save_checkpoint(&g, &path).unwrap();
    let text = std::fs::read_to_string(&path)
        .unwrap()
        .replace("\"version\":1", "\"version\":99");
    std::fs::write(&path, text).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
}

#[test]
fn teacher_classifier_logits() {
    let t = Classifier::mlp(5, 16, 3, 4).unwrap();
    let logits = t.predict_logits(&input(6, 5)).unwrap();
    assert_eq!(logits.shape(), &[6, 3]);
    assert!(logits.all_finite());
}
