use super::*;
use crate::dataset::{collect_random, compute_norm_stats};
use crate::envs::{EnvId, RealEnv};
use crate::error::FormatError;
use crate::selfmodel::{SelfModel, SelfModelConfig};
use crate::tasks::{TaskId, TaskSpec};
use proptest::prelude::*;

fn brute_force_gae(r: &[f64], v: &[f64], d: &[bool], gamma: f64, lambda: f64, last: f64) -> Vec<f64> {
    let n = r.len();
    let value_at = |t: usize| if t == n { last } else { v[t] };
    (0..n)
        .map(|t| {
            let mut total = 0.0;
            let mut weight = 1.0;
            for l in t..n {
                let live = if d[l] { 0.0 } else { 1.0 };
                let delta = r[l] + gamma * value_at(l + 1) * live - v[l];
                total += weight * delta;
                if d[l] {
                    break;
                }
                weight *= gamma * lambda;
            }
            total
        })
        .collect()
}

proptest! {
    #[test]
    fn gae_matches_brute_force(
        steps in proptest::collection::vec((-5.0f64..5.0, -5.0f64..5.0, proptest::bool::weighted(0.15)), 1..=32),
        gamma in 0.5f64..=1.0,
        lambda in 0.0f64..=1.0,
        last in -5.0f64..5.0,
    ) {
        let r: Vec<f64> = steps.iter().map(|s| s.0).collect();
        let v: Vec<f64> = steps.iter().map(|s| s.1).collect();
        let d: Vec<bool> = steps.iter().map(|s| s.2).collect();
        let (adv, ret) = gae(&r, &v, &d, gamma, lambda, last).unwrap();
        let oracle = brute_force_gae(&r, &v, &d, gamma, lambda, last);
        for t in 0..r.len() {
            prop_assert!((adv[t] - oracle[t]).abs() < 1e-12, "t={} {} vs {}", t, adv[t], oracle[t]);
            prop_assert_eq!(ret[t], adv[t] + v[t]);
        }
    }

    #[test]
    fn advantage_normalization(adv in proptest::collection::vec(-100.0f64..100.0, 2..200)) {
        let mut a = adv.clone();
        normalize_advantages(&mut a);
        let n = a.len() as f64;
        let mean = a.iter().sum::<f64>() / n;
        let std = (a.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        prop_assert!(mean.abs() < 1e-10);
        let spread = adv.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - adv.iter().cloned().fold(f64::INFINITY, f64::min);
        if spread > 1e-6 {
            prop_assert!((std - 1.0).abs() < 1e-10);
        }
    }
}

#[test]
fn gae_examples() {
    let (adv, ret) = gae(&[1.0, 1.0], &[0.0, 0.0], &[false, false], 1.0, 1.0, 0.0).unwrap();
    assert_eq!(adv, vec![2.0, 1.0]);
    assert_eq!(ret, vec![2.0, 1.0]);
    let (adv, _) = gae(&[0.0; 5], &[0.0; 5], &[false; 5], 0.99, 0.95, 0.0).unwrap();
    assert!(adv.iter().all(|&a| a == 0.0));
    assert!(gae(&[0.0; 3], &[0.0; 2], &[false; 3], 0.99, 0.95, 0.0).is_err());
    // A terminal step cuts both the bootstrap and the recursion.
    let (adv, _) = gae(&[1.0, 1.0], &[0.5, 0.5], &[true, false], 1.0, 1.0, 10.0).unwrap();
    assert_eq!(adv, vec![0.5, 10.5]);
}

fn buffer_for(policy: &Policy, states: &[[f64; 3]], us: &[f64], adv: &[f64]) -> RolloutBuffer {
    let mut buf = RolloutBuffer::new(3, 1);
    for ((s, &u), &a) in states.iter().zip(us).zip(adv) {
        let lp = policy.log_prob(s, &[u]).unwrap();
        buf.push(s, &[u], lp, 0.0, 0.0, false);
        buf.advantages.push(a);
        buf.returns.push(a);
    }
    buf
}

const STATES: [[f64; 3]; 4] = [[1.0, 0.0, 0.5], [0.0, 1.0, -1.0], [-1.0, 0.0, 2.0], [0.6, 0.8, 0.0]];

#[test]
fn fresh_policy_first_minibatch_has_no_clipping() {
    let mut policy = Policy::<f64>::new(3, 1, &[16, 16], 1).unwrap();
    let mut value = ValueFn::<f64>::new(3, &[16, 16], 1).unwrap();
    let buf = buffer_for(&policy, &STATES, &[0.3, -0.2, 1.1, 0.0], &[1.0, -2.0, 0.5, 0.3]);
    let mut opt = PpoOptimizers::new(&policy, &value);
    let cfg = PpoConfig {
        minibatch_size: 4,
        epochs: 3,
        ..PpoConfig::default()
    };
    let st = ppo_update(&mut policy, &mut value, &mut opt, &buf, &cfg, &mut crate::rng::stream(1, "t")).unwrap();
    assert_eq!(st.first_minibatch_clip_fraction, 0.0);
    assert!(st.minibatches >= 1);
}

#[test]
fn surrogate_matches_straight_line_recomputation() {
    let mut policy = Policy::<f64>::new(3, 1, &[8], 2).unwrap();
    policy.set_log_std(&[-0.3]).unwrap();
    let us = [0.3, -0.2, 1.1, 0.0];
    let adv = [1.0, -2.0, 0.5, 0.3];
    // Behaviour log-probs that put some ratios outside the clip range.
    let shifts = [0.0, 0.4, -0.5, 0.1];
    let mut old = Vec::new();
    let mut expected = 0.0;
    for i in 0..4 {
        let mean = policy.mean(&STATES[i]).unwrap()[0];
        let ls = -0.3f64;
        let z = (us[i] - mean) / ls.exp();
        let lp = -0.5 * z * z - ls - 0.5 * (2.0 * std::f64::consts::PI).ln();
        let lp_old = lp - shifts[i];
        old.push(lp_old);
        let rho = (lp - lp_old).exp();
        expected += (rho * adv[i]).min(rho.clamp(0.8, 1.2) * adv[i]);
    }
    expected = -expected / 4.0;
    let states = Tensor::matrix(4, 3, STATES.concat()).unwrap();
    let u = Tensor::matrix(4, 1, us.to_vec()).unwrap();
    let mb = policy_minibatch(&mut policy, &states, &u, &old, &adv, 0.2, 0.0).unwrap();
    assert!((mb.loss - expected).abs() < 1e-12, "{} vs {expected}", mb.loss);
    assert_eq!(mb.clip_fraction, 0.5);
}

#[test]
fn zero_advantages_give_zero_policy_gradient() {
    let mut policy = Policy::<f64>::new(3, 1, &[8], 3).unwrap();
    let states = Tensor::matrix(4, 3, STATES.concat()).unwrap();
    let u = Tensor::matrix(4, 1, vec![0.1, 0.2, -0.3, 0.4]).unwrap();
    policy_minibatch(&mut policy, &states, &u, &[-1.0, -1.2, -0.9, -1.1], &[0.0; 4], 0.2, 0.0).unwrap();
    assert_eq!(policy.params().grad_norm(), 0.0);
}

#[test]
fn narrow_policy_samples_near_its_mean() {
    let mut policy = Policy::<f64>::new(3, 1, &[8], 4).unwrap();
    policy.set_log_std(&[-5.0]).unwrap();
    let s = EnvState(vec![0.2, 0.9, -0.4]);
    let target = policy.act_mean(&s).unwrap()[0];
    let mut rng = crate::rng::stream(4, "sample");
    let mut close = 0;
    for _ in 0..2000 {
        let (a, _, lp) = policy.act(&s, &mut rng).unwrap();
        assert!(lp.is_finite());
        assert!((-1.0..=1.0).contains(&a[0]));
        close += usize::from((a[0] - target).abs() < 0.05);
    }
    assert_eq!(close, 2000);
    assert_eq!(policy.act_mean(&s).unwrap(), policy.act_mean(&s).unwrap());
    policy.set_log_std(&[-50.0]).unwrap();
    assert_eq!(policy.log_std(), vec![LOG_STD_MIN]);
}

#[test]
fn return_stats_match_direct_computation() {
    let xs: Vec<f64> = (0..50).map(|i| (i as f64 * 0.7).sin() * 10.0 + 3.0).collect();
    let mut st = ReturnStats::default();
    st.update(&xs[..17]);
    st.update(&xs[17..]);
    let mean = xs.iter().sum::<f64>() / 50.0;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 50.0;
    assert!((st.mean - mean).abs() < 1e-12);
    assert!((st.std() - var.sqrt()).abs() < 1e-12);
}

fn tiny_model() -> (SelfModel, Vec<EnvState>) {
    let ds = collect_random(&EnvId::PointHopper.descriptor(), 100, 20, 1).unwrap();
    let norm = compute_norm_stats(&ds).unwrap();
    let cfg = SelfModelConfig {
        hidden_size: 8,
        decoder_hidden: 8,
        ..SelfModelConfig::default()
    };
    let m = SelfModel::new(4, 2, &cfg, norm, Some(EnvId::PointHopper), 1).unwrap();
    (m, ds.initial_states())
}

#[test]
fn model_env_counts_predictions_and_respects_horizon() {
    let (m, seeds) = tiny_model();
    let task = TaskSpec::with_params(TaskId::Forward, EnvId::PointHopper, 7, 1.0).unwrap();
    let mut env = ModelEnv::new(&m, task, seeds).unwrap();
    assert!(env.step(&Action(vec![0.0, 0.0])).is_err());
    let s0 = env.reset(3).unwrap();
    let mut last = None;
    let mut actions = Vec::new();
    for i in 0..7 {
        let a = Action(vec![0.1 * i as f64, -0.5]);
        let st = env.step(&a).unwrap();
        actions.push(a);
        assert_eq!(st.truncated, i == 6);
        assert!(!st.terminated);
        last = Some(st.state);
    }
    assert_eq!(env.predict_calls(), 7);
    assert!(matches!(env.step(&Action(vec![0.0, 0.0])), Err(crate::Error::Contract(_))));
    // Same seed and actions reproduce the episode exactly.
    assert_eq!(env.reset(3).unwrap(), s0);
    let mut again = None;
    for a in &actions {
        again = Some(env.step(a).unwrap().state);
    }
    assert_eq!(again, last);
    assert_eq!(m.rollout_open_loop(&s0, &actions).unwrap().last(), last.as_ref());
    assert!(ModelEnv::new(&m, TaskSpec::new(TaskId::Jump, EnvId::PointHopper).unwrap(), Vec::new()).is_err());
}

#[test]
fn model_env_jump_terminates_on_predicted_height() {
    let (m, seeds) = tiny_model();
    // A negative threshold is reached by any predicted state with z >= -1e9.
    let mut task = TaskSpec::new(TaskId::Jump, EnvId::PointHopper).unwrap();
    task.z_term = -1e9;
    let mut env = ModelEnv::new(&m, task, seeds).unwrap();
    env.reset(0).unwrap();
    let st = env.step(&Action(vec![0.0, 1.0])).unwrap();
    assert!(st.terminated);
}

#[test]
fn model_training_never_touches_the_simulator() {
    let (m, seeds) = tiny_model();
    let task = TaskSpec::with_params(TaskId::Jump, EnvId::PointHopper, 20, 1.0).unwrap();
    let mut env = ModelEnv::new(&m, task, seeds).unwrap();
    let cfg = PpoConfig {
        total_steps: 300,
        steps_per_batch: 128,
        hidden_sizes: vec![8],
        ..PpoConfig::default()
    };
    let out = ppo_train::<f64>(&mut env, None, &cfg, 5).unwrap();
    assert_eq!(out.env_steps, 300);
    assert_eq!(env.predict_calls(), 300);
    assert_eq!(out.updates.len(), 3);
    assert!(out.curve.points.is_empty());
}

#[test]
fn zero_budget_returns_the_initial_policy() {
    let task = TaskSpec::new(TaskId::PendulumUpright, EnvId::Pendulum).unwrap();
    let mut env = RealTaskEnv::for_task(task);
    let cfg = PpoConfig {
        total_steps: 0,
        ..PpoConfig::default()
    };
    let out = ppo_train::<f64>(&mut env, None, &cfg, 11).unwrap();
    assert_eq!(out.policy, Policy::new(3, 1, &cfg.hidden_sizes, 11).unwrap());
    assert_eq!(env.inner().total_steps(), 0);
}

#[test]
fn real_training_is_deterministic_and_budget_exact() {
    let task = TaskSpec::with_params(TaskId::Forward, EnvId::PointHopper, 50, 1.0).unwrap();
    let cfg = PpoConfig {
        total_steps: 500,
        steps_per_batch: 200,
        hidden_sizes: vec![16],
        eval_interval: 200,
        curve_eval_episodes: 2,
        ..PpoConfig::default()
    };
    let run = || {
        let mut env = RealTaskEnv::for_task(task.clone());
        let mut ev = RealTaskEnv::for_eval(task.clone());
        let out = ppo_train::<f64>(
            &mut env,
            Some(CurveEval {
                env: &mut ev,
                task: TaskId::Forward,
            }),
            &cfg,
            7,
        )
        .unwrap();
        assert_eq!(env.inner().training_steps(), 500);
        assert_eq!(env.inner().eval_steps(), 0);
        assert_eq!(ev.inner().training_steps(), 0);
        (out.policy, out.curve)
    };
    let (p1, c1) = run();
    let (p2, c2) = run();
    assert_eq!(p1, p2);
    assert_eq!(c1, c2);
    let steps: Vec<usize> = c1.points.iter().map(|p| p.cumulative_env_steps).collect();
    assert_eq!(steps, vec![0, 200, 400, 500]);
    let mut csv = Vec::new();
    c1.write_csv(&mut csv).unwrap();
    assert!(String::from_utf8(csv).unwrap().starts_with("cumulative_env_steps,eval_return_mean,eval_return_std,aux_metric\n"));
}

#[test]
fn evaluation_examples() {
    let task = TaskSpec::new(TaskId::Forward, EnvId::PointHopper).unwrap();
    let policy = Policy::<f64>::new(4, 2, &[64, 64], 1).unwrap();
    let mut env = RealTaskEnv::for_eval(task);
    assert!(eval_policy(&mut env, &policy, 0, 1).is_err());
    let a = eval_policy(&mut env, &policy, 3, 1).unwrap();
    let b = eval_policy(&mut env, &policy, 3, 1).unwrap();
    assert_eq!(a, b);
    assert!(a.displacement_mean.unwrap().abs() < 2.0);
    assert_eq!(a.lengths, vec![200; 3]);
    assert_eq!(env.inner().eval_steps(), 1200);
    assert_eq!(env.inner().training_steps(), 0);
}

#[test]
fn task_env_rejects_mismatch_and_finished_episodes() {
    let task = TaskSpec::with_params(TaskId::PendulumUpright, EnvId::Pendulum, 2, 1.0).unwrap();
    assert!(RealTaskEnv::new(RealEnv::new(EnvId::PointHopper), task.clone()).is_err());
    let mut env = RealTaskEnv::new(RealEnv::new(EnvId::Pendulum), task).unwrap();
    env.reset(0).unwrap();
    env.step(&Action(vec![0.0])).unwrap();
    assert!(env.step(&Action(vec![0.0])).unwrap().truncated);
    assert!(matches!(env.step(&Action(vec![0.0])), Err(crate::Error::Contract(_))));
}

#[test]
fn checkpoint_round_trip_and_corruption() {
    let mut value = ValueFn::<f64>::new(4, &[8, 8], 3).unwrap();
    value.observe_returns(&[1.0, 5.0, -2.0]);
    let ck = PolicyCheckpoint {
        env_id: EnvId::PointHopper,
        task_id: TaskId::Jump,
        env_steps: 1234,
        trained_in_model: true,
        config: PpoConfig {
            hidden_sizes: vec![8, 8],
            ..PpoConfig::default()
        },
        policy: Policy::new(4, 2, &[8, 8], 3).unwrap(),
        value,
    };
    let bytes = ck.to_bytes();
    assert_eq!(&bytes[..4], b"SMP1");
    assert_eq!(PolicyCheckpoint::<f64>::from_bytes(&bytes).unwrap(), ck);
    let mut v = bytes.clone();
    v[3] = b'9';
    assert!(matches!(
        PolicyCheckpoint::<f64>::from_bytes(&v),
        Err(crate::Error::Format(FormatError::UnsupportedVersion { found: 9, .. }))
    ));
    v[0] = b'Q';
    assert!(matches!(PolicyCheckpoint::<f64>::from_bytes(&v), Err(crate::Error::Format(FormatError::BadMagic { .. }))));
    assert!(matches!(
        PolicyCheckpoint::<f64>::from_bytes(&bytes[..bytes.len() - 1]),
        Err(crate::Error::Format(FormatError::Truncated { .. }))
    ));
    assert!(matches!(
        PolicyCheckpoint::<f64>::from_bytes(&bytes[..6]),
        Err(crate::Error::Format(FormatError::Truncated { .. }))
    ));
}
