use diffcore::Tensor;
use gapnav::checkpoint::Checkpoint;
use gapnav::dynamics::DynamicsParams;
use gapnav::policy::{AuxHeads, ObservationState, Policy, PolicyArch};
use gapnav::Error;
use nalgebra::Vector3;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small() -> PolicyArch {
    PolicyArch {
        channels: [3, 4, 5],
        embed: 7,
        hidden: 6,
        aux_hidden: 9,
        ..PolicyArch::default()
    }
}

fn random_inputs(rng: &mut ChaCha8Rng, arch: &PolicyArch) -> (Tensor, ObservationState) {
    let n = arch.input[0] * arch.input[1];
    let depth = Tensor::new(
        &[1, arch.input[0], arch.input[1]],
        (0..n).map(|_| rng.gen_range(0.05..1.0)).collect(),
    );
    let obs = ObservationState {
        v_body: Vector3::from_fn(|_, _| rng.gen_range(-4.0..4.0)),
        r_col2: Vector3::from_fn(|_, _| rng.gen_range(-1.0..1.0)).normalize(),
        v_target: Vector3::from_fn(|_, _| rng.gen_range(-4.0..4.0)),
    };
    (depth.unwrap(), obs)
}

/// Output size of a zero-padded convolution, computed the long way by
/// counting valid window positions.
fn windows(len: usize, k: usize, s: usize, pad: usize) -> usize {
    (0..).step_by(s).take_while(|start| start + k <= len + 2 * pad).count()
}

#[test]
fn default_shape_chain() {
    let a = PolicyArch::default();
    let mut shape = [1, a.input[0], a.input[1]];
    assert_eq!(shape, [1, 12, 16]);
    for i in 0..3 {
        let (k, s) = (a.kernels[i], a.strides[i]);
        let p = PolicyArch::padding(k);
        shape = [a.channels[i], windows(shape[1], k, s, p), windows(shape[2], k, s, p)];
        assert_eq!(a.conv_shapes().unwrap()[i], shape);
    }
    assert_eq!(a.conv_shapes().unwrap(), [[32, 6, 8], [64, 6, 8], [128, 6, 8]]);
    assert_eq!(a.flat_dim().unwrap(), 6144);
    let layout = a.layout().unwrap();
    let vis = layout.iter().find(|(n, _)| n == "vis_proj.weight").unwrap();
    assert_eq!(vis.1, vec![a.embed, 6144]);
    let total: usize = layout.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
    let p = Policy::zeros(&a).unwrap();
    assert_eq!(p.num_parameters(), total);
}

#[test]
fn zero_aux_heads_predict_one_half() {
    let policy = Policy::init(&small(), 1, &DynamicsParams::default()).unwrap();
    let heads = AuxHeads::zeros(&policy, 32);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..10 {
        let h = Tensor::vector(&(0..6).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>()).unwrap();
        assert_eq!(heads.predict_crossing(&h).unwrap(), 0.5);
        assert_eq!(heads.predict_traversability(&h).unwrap(), 0.5);
    }
}

#[test]
fn reset_matches_fresh_rollout() {
    let arch = small();
    let dynp = DynamicsParams::default();
    let policy = Policy::init(&arch, 4, &dynp).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let inputs: Vec<_> = (0..12).map(|_| random_inputs(&mut rng, &arch)).collect();
    let run = |seq: &[(Tensor, ObservationState)], reset_at: Option<usize>| {
        let mut h = policy.reset_hidden();
        let mut out = Vec::new();
        for (k, (d, o)) in seq.iter().enumerate() {
            if Some(k) == reset_at {
                h = policy.reset_hidden();
            }
            let (cmd, h_new) = policy.act(d, o, &h, &dynp).unwrap();
            out.push((cmd, h_new.clone()));
            h = h_new;
        }
        out
    };
    let segmented = run(&inputs, Some(5));
    let fresh_a = run(&inputs[..5], None);
    let fresh_b = run(&inputs[5..], None);
    let joined: Vec<_> = fresh_a.into_iter().chain(fresh_b).collect();
    assert_eq!(segmented, joined);
    assert_ne!(run(&inputs, None)[6], segmented[6]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn commands_stay_within_limits(seed in any::<u64>(), gain in 0.1f64..50.0) {
        let arch = small();
        let dynp = DynamicsParams::default();
        let mut policy = Policy::init(&arch, seed, &dynp).unwrap();
        for p in &mut policy.params {
            *p = Tensor::new(p.shape(), p.values().iter().map(|v| v * gain).collect()).unwrap();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut h = policy.reset_hidden();
        for _ in 0..5 {
            let (d, o) = random_inputs(&mut rng, &arch);
            let (cmd, h_new) = policy.act(&d, &o, &h, &dynp).unwrap();
            prop_assert!(cmd.omega_c.iter().all(|w| w.abs() <= dynp.limits.omega_max));
            prop_assert!(cmd.thrust_c >= 0.0 && cmd.thrust_c <= dynp.max_thrust());
            prop_assert!(h_new.values().iter().all(|v| v.abs() <= 1.0));
            h = h_new;
        }
    }
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let policy = Policy::init(&small(), 8, &DynamicsParams::default()).unwrap();
    let (a, b) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    policy.save(&a).unwrap();
    let back = Policy::load(&a).unwrap();
    back.save(&b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(back, policy);
    assert_eq!(back.hash(), policy.hash());

    let heads = AuxHeads::init(&policy, 16, 3);
    let c = dir.path().join("aux.ckpt");
    heads.save(&c).unwrap();
    assert_eq!(AuxHeads::load(&c, &policy, Some(16)).unwrap(), heads);
}

#[test]
fn corrupted_checkpoints_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let policy = Policy::init(&small(), 8, &DynamicsParams::default()).unwrap();
    let path = dir.path().join("p.ckpt");
    policy.save(&path).unwrap();
    let good = std::fs::read(&path).unwrap();

    let mut bad = good.clone();
    bad[0] ^= 0x01;
    assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format(_))));

    let mut bad = good.clone();
    let mid = good.len() / 2;
    bad[mid] ^= 0x40;
    assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format(_))));

    assert!(matches!(
        Checkpoint::from_bytes(&good[..good.len() - 5]),
        Err(Error::Format(_))
    ));

    let other = PolicyArch { hidden: 8, ..small() };
    assert!(matches!(
        Policy::load_expecting(&path, &other),
        Err(Error::ArchitectureMismatch(_))
    ));
}

#[test]
fn aux_width_and_policy_must_match() {
    let dir = tempfile::tempdir().unwrap();
    let dynp = DynamicsParams::default();
    let policy = Policy::init(&small(), 8, &dynp).unwrap();
    let path = dir.path().join("aux_2048.ckpt");
    AuxHeads::zeros(&policy, 2048).save(&path).unwrap();
    assert!(matches!(
        AuxHeads::load(&path, &policy, Some(1024)),
        Err(Error::ArchitectureMismatch(_))
    ));
    assert_eq!(AuxHeads::load(&path, &policy, None).unwrap().width, 2048);
    let other = Policy::init(&small(), 9, &dynp).unwrap();
    assert!(matches!(
        AuxHeads::load(&path, &other, Some(2048)),
        Err(Error::ArchitectureMismatch(_))
    ));
    assert!(matches!(Policy::load(&path), Err(Error::Format(_))));
}
