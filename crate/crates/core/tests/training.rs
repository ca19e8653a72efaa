use std::path::Path;

use diffcore::Tape;
use gapnav::dynamics::{step, ControlCommand, QuadState};
use gapnav::policy::{Policy, PolicyArch};
use gapnav::trainer::{
    balance_weights, collect_aux_dataset, mix_seed, rollout, train_auxiliary, train_policy, Episode, ResumeState,
    RolloutOptions,
};
use gapnav::RunConfig;
use nalgebra::Vector3;

fn tiny() -> RunConfig {
    let mut cfg = RunConfig {
        seed: 17,
        ..RunConfig::default()
    };
    cfg.policy = PolicyArch {
        channels: [2, 4, 4],
        embed: 8,
        hidden: 8,
        aux_hidden: 16,
        ..PolicyArch::default()
    };
    cfg.train.iterations = 4;
    cfg.train.batch = 3;
    cfg.train.horizon = 12;
    cfg.train.checkpoint_every = 2;
    cfg.train.threads = 1;
    cfg
}

fn read(p: &Path) -> String {
    std::fs::read_to_string(p).unwrap()
}

#[test]
fn zero_learning_rate_freezes_parameters() {
    let mut cfg = tiny();
    cfg.train.learning_rate = 0.0;
    let dir = tempfile::tempdir().unwrap();
    let out = train_policy(&cfg, dir.path(), None).unwrap();
    let init = Policy::init(&cfg.policy, mix_seed(cfg.seed, &[0]), &cfg.dynamics).unwrap();
    assert_eq!(out.policy.hash(), init.hash());
    assert_eq!(out.log.len(), 4);
}

#[test]
fn reruns_and_thread_counts_give_identical_logs() {
    let cfg = tiny();
    let (a, b, c) = (
        tempfile::tempdir().unwrap(),
        tempfile::tempdir().unwrap(),
        tempfile::tempdir().unwrap(),
    );
    let pa = train_policy(&cfg, a.path(), None).unwrap().policy;
    let pb = train_policy(&cfg, b.path(), None).unwrap().policy;
    let mut two = cfg.clone();
    two.train.threads = 2;
    let pc = train_policy(&two, c.path(), None).unwrap().policy;
    let log = read(&a.path().join("train_log.csv"));
    assert_eq!(log, read(&b.path().join("train_log.csv")));
    assert_eq!(log, read(&c.path().join("train_log.csv")));
    assert_eq!(pa.hash(), pb.hash());
    assert_eq!(pa.hash(), pc.hash());
    for f in ["policy.ckpt", "policy_iter2.ckpt", "optim_iter2.ckpt"] {
        assert_eq!(
            std::fs::read(a.path().join(f)).unwrap(),
            std::fs::read(b.path().join(f)).unwrap()
        );
    }
}

#[test]
fn resume_reproduces_the_remaining_curve() {
    let cfg = tiny();
    let full = tempfile::tempdir().unwrap();
    let straight = train_policy(&cfg, full.path(), None).unwrap();
    let resumed_dir = tempfile::tempdir().unwrap();
    for f in ["policy_iter2.ckpt", "optim_iter2.ckpt"] {
        std::fs::copy(full.path().join(f), resumed_dir.path().join(f)).unwrap();
    }
    let resume = ResumeState::load(resumed_dir.path(), 2).unwrap();
    let resumed = train_policy(&cfg, resumed_dir.path(), Some(resume)).unwrap();
    assert_eq!(resumed.log, straight.log[2..]);
    assert_eq!(resumed.policy.hash(), straight.policy.hash());
}

#[test]
fn zero_policy_rollout_matches_dynamics_replay() {
    let cfg = tiny();
    let policy = Policy::zeros(&cfg.policy).unwrap();
    let mut ep = Episode::sample(&cfg, &cfg.scene, 3).unwrap();
    ep.init = QuadState::hover(Vector3::from(cfg.train.start), &ep.dynamics);
    let opts = RolloutOptions::from_config(&cfg);
    let mut tape = Tape::no_grad();
    let out = rollout(&mut tape, &policy, &policy.params, &ep, &opts, None).unwrap();
    let rec = out.record;
    let mut s = ep.init.clone();
    for (k, c) in rec.commands.iter().enumerate() {
        let cmd = ControlCommand {
            omega_c: Vector3::new(c[0], c[1], c[2]),
            thrust_c: c[3] * ep.dynamics.hover_thrust(),
        };
        assert!(cmd.omega_c.norm() == 0.0);
        assert!((cmd.thrust_c - ep.dynamics.max_thrust() / 2.0).abs() < 1e-12);
        s = step(&s, &cmd, &ep.dynamics).unwrap();
        let r = &rec.states[k + 1];
        assert!((s.p - r.p).amax() < 1e-12 && (s.v - r.v).amax() < 1e-12 && (s.r - r.r).amax() < 1e-12);
    }
}

#[test]
fn single_step_horizon_is_the_weighted_step_loss() {
    let mut cfg = tiny();
    cfg.train.horizon = 1;
    let policy = Policy::init(&cfg.policy, 2, &cfg.dynamics).unwrap();
    let ep = Episode::sample(&cfg, &cfg.scene, 8).unwrap();
    let opts = RolloutOptions::from_config(&cfg);
    let mut tape = Tape::no_grad();
    let out = rollout(&mut tape, &policy, &policy.params, &ep, &opts, None).unwrap();
    let w = cfg.loss.as_array();
    let step = out.record.step_losses[0];
    let u = out.record.commands[0];
    let l_a = u.iter().map(|x| x * x).sum::<f64>();
    let expected = (0..4).map(|i| w[i] * step[i]).sum::<f64>() + w[4] * l_a;
    assert!((out.breakdown.total.item() - expected).abs() < 1e-12);
    assert_eq!(out.breakdown.values()[5], 0.0);
}

#[test]
fn every_parameter_tensor_receives_gradient() {
    let mut cfg = tiny();
    cfg.train.horizon = 30;
    cfg.scene.distance = [2.0, 2.0];
    let policy = Policy::init(&cfg.policy, 5, &cfg.dynamics).unwrap();
    let opts = RolloutOptions::from_config(&cfg);
    let mut totals = vec![0.0; policy.params.len()];
    for seed in 0..3 {
        let ep = Episode::sample(&cfg, &cfg.scene, seed).unwrap();
        let mut tape = Tape::new();
        let w = policy.bind(&mut tape);
        let out = rollout(&mut tape, &policy, &w, &ep, &opts, None).unwrap();
        let g = tape.backward(&out.breakdown.total).unwrap();
        for (t, acc) in w.iter().zip(totals.iter_mut()) {
            *acc += g.get_or_zeros(t).iter().map(|x| x.abs()).sum::<f64>();
        }
    }
    for (name, total) in policy.names().iter().zip(&totals) {
        assert!(*total > 0.0, "{name} receives no gradient");
    }
}

#[test]
fn auxiliary_training_leaves_policy_untouched() {
    let mut cfg = tiny();
    cfg.aux.trajectories = 24;
    cfg.aux.horizon = 40;
    cfg.aux.epochs = 2;
    cfg.scene.distance = [2.0, 3.0];
    let policy = Policy::init(&cfg.policy, 4, &cfg.dynamics).unwrap();
    let before = policy.hash();
    let dir = tempfile::tempdir().unwrap();
    match train_auxiliary(&policy, &cfg, 16, Some(dir.path())) {
        Ok(out) => {
            assert!(dir.path().join("aux_16.ckpt").exists());
            let (raw, weighted) = out.positive_fraction;
            if !(0.1..=0.9).contains(&raw) {
                assert!((0.4..=0.6).contains(&weighted), "weighted positive share {weighted}");
            } else {
                assert_eq!(raw, weighted);
            }
        }
        Err(gapnav::Error::Dataset(_)) => {}
        Err(e) => panic!("{e}"),
    }
    assert_eq!(policy.hash(), before);
}

#[test]
fn crossing_labels_follow_the_plane() {
    let mut cfg = tiny();
    cfg.scene.distance = [2.0, 4.0];
    let policy = Policy::init(&cfg.policy, 6, &cfg.dynamics).unwrap();
    let ds = collect_aux_dataset(&policy, &cfg, 12, 30, [0.625, 1.0], 2).unwrap();
    for (t, crossing) in ds.crossing_step.iter().enumerate() {
        let rows: Vec<usize> = (0..ds.len()).filter(|&i| ds.trajectory[i] == t).collect();
        for (k, &i) in rows.iter().enumerate() {
            let passed = crossing.is_some_and(|c| k >= c);
            assert_eq!(ds.crossing[i], f64::from(u8::from(passed)));
            assert_eq!(ds.traversable[i].is_none(), passed);
        }
    }
    assert!(ds.scale.iter().all(|s| (0.625..=1.0).contains(s)));

    let short = collect_aux_dataset(&policy, &cfg, 4, 3, [1.0, 1.0], 2).unwrap();
    assert!(short.crossing_step.iter().all(Option::is_none));
    assert!(short.crossing.iter().all(|&c| c == 0.0));
    assert_eq!(short.len(), 12);
}

#[test]
fn imbalance_reweighting_balances_classes() {
    let labels: Vec<f64> = (0..100).map(|i| f64::from(u8::from(i < 5))).collect();
    let w = balance_weights(&labels, 9.0).unwrap();
    let pos: f64 = labels.iter().zip(&w).map(|(y, w)| y * w).sum();
    assert!((pos / w.iter().sum::<f64>() - 0.5).abs() < 1e-12);
    let even: Vec<f64> = (0..10).map(|i| f64::from(u8::from(i < 3))).collect();
    assert!(balance_weights(&even, 9.0).unwrap().iter().all(|&x| x == 1.0));
    assert!(balance_weights(&[1.0, 1.0], 9.0).is_err());
}
