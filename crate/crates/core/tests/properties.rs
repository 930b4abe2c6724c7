use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sparkdqn::envs::{make_env, FrameStack, ACTION_COUNT, ENV_NAMES};
use sparkdqn::models::{argmax, dueling_combine, ArchKind, ArchitectureSpec, QNetwork};
use sparkdqn::rl::{compute_target, dqn_update, EpsilonSchedule, ReplayBuffer, Transition};
use sparkdqn::snn::{ContextSignal, DendriteBank, DendriteSharing, IfNeurons, ResetMode};
use sparkdqn::state::StateBundle;
use sparkdqn::tensor::{cross_entropy, mse_selected, Adam, AdamConfig, BnMode, Surrogate};

fn transition(id: u32, obs_len: usize) -> Transition {
    Transition {
        phi: vec![(id % 251) as u8; obs_len],
        action: (id as usize) % ACTION_COUNT,
        reward: id as f32,
        phi_next: vec![(id % 241) as u8; obs_len],
        terminal: id % 7 == 0,
        env_index: 0,
    }
}

fn distinct_by(values: &[f64], gap: f64) -> bool {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v.windows(2).all(|w| w[1] - w[0] > gap)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn replay_keeps_exactly_the_newest(capacity in 1usize..40, extra in 0usize..60) {
        let mut b = ReplayBuffer::new(capacity, 3);
        for id in 0..(capacity + extra) as u32 {
            b.push(&transition(id, 3)).unwrap();
        }
        prop_assert_eq!(b.len(), capacity);
        for i in 0..capacity {
            prop_assert_eq!(b.get(i).unwrap().reward, (extra + i) as f32);
        }
    }

    #[test]
    fn replay_batches_are_unit_scaled(n in 1usize..30, batch in 1usize..16, seed: u64) {
        let mut b = ReplayBuffer::new(64, 5);
        for id in 0..n as u32 {
            b.push(&transition(id * 37, 5)).unwrap();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = b.sample::<f32, _>(batch, &mut rng);
        prop_assert_eq!(s.len(), batch);
        prop_assert!(s.phi.iter().chain(&s.phi_next).all(|v| (0.0..=1.0).contains(v)));
        prop_assert!(s.actions.iter().all(|a| *a < ACTION_COUNT));
    }

    #[test]
    fn epsilon_is_nonincreasing_and_bounded(a in 0u64..3_000_000, b in 0u64..3_000_000) {
        let s = EpsilonSchedule::default();
        let (lo, hi) = (a.min(b), a.max(b));
        prop_assert!(s.at(hi) <= s.at(lo));
        prop_assert!(s.at(lo) <= 1.0 && s.at(hi) >= 0.1 - 1e-15);
    }

    #[test]
    fn dueling_argmax_ignores_advantage_offsets(
        v in -10.0f64..10.0,
        adv in prop::collection::vec(-10.0f64..10.0, 18),
        k in -1e6f64..1e6,
    ) {
        prop_assume!(distinct_by(&adv, 1e-6));
        let shifted: Vec<f64> = adv.iter().map(|a| a + k).collect();
        let q = dueling_combine(&[v], &adv, 18).unwrap();
        let qs = dueling_combine(&[v], &shifted, 18).unwrap();
        prop_assert_eq!(argmax(&q), argmax(&qs));
        prop_assert_eq!(argmax(&q), argmax(&adv));
    }

    #[test]
    fn terminal_targets_are_rewards(
        rewards in prop::collection::vec(-1.0f64..1.0, 1..20),
        seed: u64,
    ) {
        let n = rewards.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q: Vec<f64> = (0..n * 4).map(|_| rand::Rng::gen_range(&mut rng, -5.0..5.0)).collect();
        let y = compute_target(&rewards, &vec![true; n], &q, &q, 4, 0.99);
        prop_assert_eq!(y, rewards);
    }

    #[test]
    fn identical_networks_give_the_max_target(
        q in prop::collection::vec(-5.0f64..5.0, 12),
        r in -1.0f64..1.0,
    ) {
        let y = compute_target(&[r, r, r], &[false; 3], &q, &q, 4, 0.9);
        for (n, yn) in y.iter().enumerate() {
            let max = q[n * 4..(n + 1) * 4].iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!((yn - (r + 0.9 * max)).abs() < 1e-12);
        }
    }

    #[test]
    fn losses_are_nonnegative(
        logits in prop::collection::vec(-20.0f64..20.0, 30),
        labels in prop::collection::vec(0usize..10, 3),
        targets in prop::collection::vec(-3.0f64..3.0, 3),
    ) {
        prop_assert!(cross_entropy(&logits, 10, &labels).unwrap().loss >= 0.0);
        prop_assert!(mse_selected(&logits, 10, &labels, &targets).unwrap().loss >= 0.0);
    }

    #[test]
    fn uniform_logits_cost_ln_ten(c in -5.0f64..5.0, labels in prop::collection::vec(0usize..10, 1..8)) {
        let logits = vec![c; labels.len() * 10];
        let loss = cross_entropy(&logits, 10, &labels).unwrap().loss;
        prop_assert!((loss - 10f64.ln()).abs() < 0.01 * 10f64.ln());
    }

    #[test]
    fn dendrite_contexts_separate(seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = DendriteBank::<f64>::for_tasks(16, 2, DendriteSharing::PerNeuron, &mut rng);
        let a = d.gains(&ContextSignal::one_hot(0, 2).unwrap()).unwrap();
        let b = d.gains(&ContextSignal::one_hot(1, 2).unwrap()).unwrap();
        prop_assert_ne!(a, b);
    }

    #[test]
    fn spikes_are_binary(input in prop::collection::vec(-2.0f64..3.0, 8), steps in 1usize..6, hard: bool) {
        let reset = if hard { ResetMode::HardToZero } else { ResetMode::SubtractThreshold };
        let mut n = IfNeurons::<f64>::new(1.0, reset, Surrogate::default());
        let s = n.forward(&input, steps, true, false);
        prop_assert_eq!(s.len(), steps * 8);
        prop_assert!(s.iter().all(|v| *v == 0.0 || *v == 1.0));
    }

    #[test]
    fn stack_depth_is_constant(pushes in 0usize..12) {
        let mut s = FrameStack::new(4, 3);
        s.reset(vec![9; 3]);
        for p in 0..pushes {
            s.push(vec![p as u8; 3]);
        }
        prop_assert_eq!(s.bytes().len(), 12);
        prop_assert_eq!(s.frames().count(), 4);
    }

    #[test]
    fn games_are_deterministic_and_bounded(seed: u64, actions in prop::collection::vec(0usize..ACTION_COUNT, 1..200)) {
        for name in ENV_NAMES {
            let mut a = make_env(name, seed, 1).unwrap();
            let mut b = make_env(name, seed, 1).unwrap();
            prop_assert_eq!(a.reset(), b.reset());
            for &act in &actions {
                if a.is_terminal() {
                    prop_assert_eq!(a.reset(), b.reset());
                }
                let (ra, rb) = (a.step(act).unwrap(), b.step(act).unwrap());
                prop_assert!(ra.reward.abs() <= 1.0);
                prop_assert_eq!(ra, rb);
            }
        }
    }
}

fn tiny_spec(kind: ArchKind) -> ArchitectureSpec {
    ArchitectureSpec { input: [2, 36, 36], fc_width: 16, t_sim: 2, ..ArchitectureSpec::new(kind) }
}

#[test]
fn updates_never_touch_the_target_network() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for kind in ArchKind::ALL {
        let spec = tiny_spec(kind);
        let mut online = QNetwork::<f32>::build(&spec, &mut rng).unwrap();
        let mut target = online.snapshot();
        let frozen = target.export_state_bundle();
        let mut adam = Adam::new(AdamConfig::default());
        let mut buffer = ReplayBuffer::new(32, spec.input_len());
        for id in 0..32 {
            buffer.push(&transition(id * 11, spec.input_len())).unwrap();
        }
        let ctx = ContextSignal::one_hot(1, 3).unwrap();
        for _ in 0..3 {
            let batch = buffer.sample::<f32, _>(8, &mut rng);
            let loss = dqn_update(&mut online, &mut target, &mut adam, &batch, &ctx, 0.99).unwrap();
            assert!(loss >= 0.0);
        }
        assert_eq!(target.export_state_bundle(), frozen, "{kind}");
        assert_ne!(online.export_state_bundle(), frozen, "{kind}");
        target.copy_from(&online);
        assert_eq!(target.export_state_bundle(), online.export_state_bundle(), "{kind}");
    }
}

#[test]
fn exported_state_reproduces_q_values_bitwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for kind in ArchKind::ALL {
        let spec = tiny_spec(kind);
        let mut a = QNetwork::<f32>::build(&spec, &mut rng).unwrap();
        let obs: Vec<f32> = (0..2 * spec.input_len()).map(|i| (i % 13) as f32 / 13.0).collect();
        let ctx = ContextSignal::one_hot(2, 3).unwrap();
        a.forward(&obs, 2, &ctx, BnMode::Train, false).unwrap();
        let mut b = QNetwork::<f32>::build(&spec, &mut rng).unwrap();
        b.import_state("net", &a.export_state_bundle()).unwrap();
        let qa = a.forward(&obs, 2, &ctx, BnMode::Eval, false).unwrap();
        let qb = b.forward(&obs, 2, &ctx, BnMode::Eval, false).unwrap();
        assert_eq!(qa, qb, "{kind}");
    }
}

trait ExportBundle {
    fn export_state_bundle(&self) -> StateBundle;
}

impl ExportBundle for QNetwork<f32> {
    fn export_state_bundle(&self) -> StateBundle {
        let mut b = StateBundle::new(&()).unwrap();
        self.export_state("net", &mut b);
        b
    }
}
