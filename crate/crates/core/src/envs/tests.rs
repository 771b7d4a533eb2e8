use super::*;
use proptest::prelude::*;

fn pend() -> EnvDescriptor {
    EnvId::Pendulum.descriptor()
}

fn hop() -> EnvDescriptor {
    EnvId::PointHopper.descriptor()
}

#[test]
fn descriptors_are_well_formed() {
    for id in EnvId::ALL {
        let d = id.descriptor();
        assert!(d.dt > 0.0);
        assert_eq!(d.native_action_low.len(), d.action_dim);
        for (lo, hi) in d.native_action_low.iter().zip(&d.native_action_high) {
            assert!(lo < hi);
        }
        assert_eq!(id.state_names().len(), d.state_dim);
        assert_eq!(id.action_names().len(), d.action_dim);
        assert_eq!(id.as_str().parse::<EnvId>().unwrap(), id);
    }
    assert!("walker".parse::<EnvId>().is_err());
}

#[test]
fn action_normalization_examples() {
    let d = hop();
    assert_eq!(normalize_action(&d, &[5.0, 0.0]).0, vec![1.0, 0.0]);
    let p = pend();
    assert_eq!(normalize_action(&p, &[1.0]).0, vec![0.5]);
    assert_eq!(denormalize_action(&p, &[0.5]), vec![1.0]);
}

#[test]
fn out_of_range_actions_are_clipped_and_counted() {
    let p = pend();
    let before = action_clip_warnings();
    assert_eq!(normalize_action(&p, &[3.0]).0, vec![1.0]);
    assert_eq!(denormalize_action(&p, &[-1.5]), vec![-2.0]);
    assert!(action_clip_warnings() >= before + 2);
}

#[test]
fn pendulum_reset_within_distribution_bounds() {
    let p = pend();
    for seed in 0..200 {
        let s = env_reset(&p, seed);
        let theta = angle_of(s[0], s[1]);
        assert!((-PI..=PI).contains(&theta));
        assert!((-1.0..=1.0).contains(&s[2]));
        assert!(((s[0] * s[0] + s[1] * s[1]) - 1.0).abs() < 1e-12);
    }
    assert_eq!(env_reset(&p, 9), env_reset(&p, 9));
    assert_ne!(env_reset(&p, 9), env_reset(&p, 10));
}

#[test]
fn hopper_reset_is_grounded_with_small_jitter() {
    let d = hop();
    for seed in 0..100 {
        let s = env_reset(&d, seed);
        assert_eq!(s[hopper::Z], 0.0);
        assert_eq!(s[hopper::CONTACT], 1.0);
        assert!(s[hopper::X_DOT].abs() <= 0.05);
        assert!(s[hopper::Z_DOT].abs() <= 0.05);
    }
}

#[test]
fn pendulum_upright_rest_is_fixed_point() {
    let p = pend();
    let s = EnvState(vec![1.0, 0.0, 0.0]);
    let next = env_step(&p, &s, &Action(vec![0.0])).unwrap();
    assert_eq!(next, s);
}

#[test]
fn pendulum_horizontal_step_matches_hand_euler() {
    // θ = π/2, θ̇ = 0, τ = 0: θ' = θ, θ̇' = dt * 3g/(2l) * sin θ = 0.05 * 15
    let p = pend();
    let theta = PI / 2.0;
    let s = EnvState(vec![theta.cos(), theta.sin(), 0.0]);
    let next = env_step(&p, &s, &Action(vec![0.0])).unwrap();
    let expect_dot = 0.05 * 15.0;
    assert!((next[2] - expect_dot).abs() < 1e-12);
    assert!((next[0] - theta.cos()).abs() < 1e-12);
    assert!((next[1] - 1.0).abs() < 1e-12);
}

#[test]
fn pendulum_speed_is_clipped() {
    let p = pend();
    let theta: f64 = 1.0;
    let s = EnvState(vec![theta.cos(), theta.sin(), 7.99]);
    let next = env_step(&p, &s, &Action(vec![1.0])).unwrap();
    assert_eq!(next[2], 8.0);
}

#[test]
fn hopper_idle_on_ground_decays_by_friction() {
    let d = hop();
    let s = EnvState(vec![0.0, 2.0, 0.0, 1.0]);
    let next = env_step(&d, &s, &Action(vec![0.0, 0.0])).unwrap();
    assert_eq!(next[hopper::Z], 0.0);
    assert_eq!(next[hopper::CONTACT], 1.0);
    assert!((next[hopper::X_DOT] - 2.0 * hopper::GROUND_FRICTION).abs() < 1e-12);
}

#[test]
fn hopper_full_vertical_push_reaches_one_metre() {
    let d = hop();
    let mut s = env_reset(&d, 0);
    s.0[hopper::X_DOT] = 0.0;
    s.0[hopper::Z_DOT] = 0.0;
    let mut max_z: f64 = 0.0;
    let mut a = Action(vec![0.0, 1.0]);
    for _ in 0..20 {
        s = env_step(&d, &s, &a).unwrap();
        a = Action(vec![0.0, 0.0]);
        max_z = max_z.max(s[hopper::Z]);
    }
    assert!(max_z > 1.0, "apex {max_z}");
    assert!(max_z < 1.2);
}

#[test]
fn hopper_push_below_weight_stays_grounded() {
    let d = hop();
    let s = EnvState(vec![0.0, 0.0, 0.0, 1.0]);
    // native push 0.5 exactly cancels one step of gravity
    let a = normalize_action(&d, &[0.0, 0.5]);
    let next = env_step(&d, &s, &a).unwrap();
    assert_eq!(next[hopper::Z], 0.0);
    assert_eq!(next[hopper::CONTACT], 1.0);
}

#[test]
fn hopper_airborne_ignores_actions() {
    let d = hop();
    let s = EnvState(vec![0.5, 1.0, 2.0, 0.0]);
    let a = env_step(&d, &s, &Action(vec![1.0, 1.0])).unwrap();
    let b = env_step(&d, &s, &Action(vec![-1.0, -1.0])).unwrap();
    assert_eq!(a, b);
    assert!((a[hopper::Z_DOT] - 1.5).abs() < 1e-12);
}

#[test]
fn step_dimension_mismatch_is_an_error() {
    let d = pend();
    assert!(env_step(&d, &EnvState(vec![1.0, 0.0]), &Action(vec![0.0])).is_err());
    assert!(env_step(&d, &EnvState(vec![1.0, 0.0, 0.0]), &Action(vec![0.0, 0.0])).is_err());
}

#[test]
fn cartpole_wall_zeroes_velocity() {
    let d = EnvId::Cartpole.descriptor();
    let s = EnvState(vec![2.99, 5.0, -1.0, 0.0, 0.0]);
    let next = env_step(&d, &s, &Action(vec![1.0])).unwrap();
    assert_eq!(next[0], 3.0);
    assert_eq!(next[1], 0.0);
}

#[test]
fn real_env_counts_by_accounting_mode() {
    let mut e = RealEnv::new(EnvId::PointHopper);
    assert!(e.step(&Action(vec![0.0, 0.0])).is_err());
    e.reset(1);
    for _ in 0..3 {
        e.step(&Action(vec![1.0, 1.0])).unwrap();
    }
    e.set_accounting(Accounting::Evaluation);
    e.step(&Action(vec![1.0, 1.0])).unwrap();
    assert_eq!((e.training_steps(), e.eval_steps()), (3, 1));
    assert!(e.x_position() > 0.0);
}

/// Bound on the energy change of one explicit Euler step of the unforced
/// pendulum: the `dt²` local error plus the leading `dt³` cosine term.
fn euler_energy_bound(theta_dot: f64) -> f64 {
    let h = pendulum::DT;
    let acc_max = 3.0 * pendulum::G / 2.0;
    let inertia = 1.0 / 3.0;
    let pot = pendulum::G * 0.5;
    h * h * (0.5 * inertia * acc_max * acc_max + 0.5 * pot * theta_dot * theta_dot)
        + pot * (h * theta_dot.abs()).powi(3) / 6.0
}

proptest! {
    #[test]
    fn normalize_round_trip(x in -5.0f64..=5.0, y in -5.0f64..=5.0) {
        let d = hop();
        let back = denormalize_action(&d, &normalize_action(&d, &[x, y]));
        prop_assert!((back[0] - x).abs() <= 1e-14 * (1.0 + x.abs()));
        prop_assert!((back[1] - y).abs() <= 1e-14 * (1.0 + y.abs()));
    }

    #[test]
    fn hopper_ground_constraint(
        z in 0.0f64..2.0, xd in -10.0f64..10.0, zd in -10.0f64..10.0,
        grounded in any::<bool>(), ax in -1.0f64..=1.0, az in -1.0f64..=1.0,
    ) {
        let d = hop();
        let s = if grounded { EnvState(vec![0.0, xd, 0.0, 1.0]) } else { EnvState(vec![z, xd, zd, 0.0]) };
        let next = env_step(&d, &s, &Action(vec![ax, az])).unwrap();
        prop_assert!(next[hopper::Z] >= 0.0);
        prop_assert_eq!(next[hopper::CONTACT] == 1.0, next[hopper::Z] == 0.0);
        prop_assert!(next[hopper::X_DOT].abs() <= 10.0 && next[hopper::Z_DOT].abs() <= 10.0);
    }

    #[test]
    fn env_step_is_pure(seed in 0u64..1000, a in -1.0f64..=1.0) {
        for id in EnvId::ALL {
            let d = id.descriptor();
            let s = env_reset(&d, seed);
            let act = Action(vec![a; d.action_dim]);
            prop_assert_eq!(env_step(&d, &s, &act).unwrap(), env_step(&d, &s, &act).unwrap());
        }
    }

    #[test]
    fn pendulum_unforced_energy_drift_is_second_order(theta in -PI..PI, theta_dot in -8.0f64..8.0) {
        let d = pend();
        let s = EnvState(vec![theta.cos(), theta.sin(), theta_dot]);
        let next = env_step(&d, &s, &Action(vec![0.0])).unwrap();
        let unclipped = theta_dot + d.dt * pendulum::angular_accel(theta, 0.0);
        prop_assume!(unclipped.abs() <= pendulum::MAX_SPEED);
        let e0 = pendulum::energy(theta, theta_dot);
        let e1 = pendulum::energy(angle_of(next[0], next[1]), next[2]);
        prop_assert!((e1 - e0).abs() <= euler_energy_bound(theta_dot),
            "ΔE = {} exceeds {}", e1 - e0, euler_energy_bound(theta_dot));
    }
}
