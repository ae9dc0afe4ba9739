use nalgebra::DVector;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};

use keec::bundle::Bundle;
use keec::config::RunConfig;
use keec::data::generate_random_trajectories;
use keec::envs::{EnvKind, EnvSpec};
use keec::koopman::{identify_operators, EmbeddingModel, LatentOperators};
use keec::numkit::{colwise_kron, mat_exp, phi1, ridge_lstsq, Matrix};
use keec::seed;
use keec::valuectl::{greedy_action, greedy_action_unclipped, PolicyConfig, ValueModel};

fn rng(s: u64) -> seed::Rng {
    seed::Rng::seed_from_u64(s)
}

fn rand_mat(r: &mut seed::Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| scale * r.random_range(-1.0..1.0))
}

fn spectral_norm(a: &Matrix) -> f64 {
    a.clone().singular_values().max()
}

fn rel(a: &Matrix, b: &Matrix) -> f64 {
    (a - b).norm() / b.norm().max(1e-300)
}

fn env_of(kind: u8) -> EnvSpec {
    match kind % 3 {
        0 => EnvSpec::pendulum(),
        1 => EnvSpec::lorenz63(),
        _ => EnvSpec::wave(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mat_exp_semigroup(seed in any::<u64>(), s in 0.0f64..=1.0, t in 0.0f64..=1.0) {
        let mut r = rng(seed);
        let m = rand_mat(&mut r, 6, 6, 1.0);
        let a = &m - Matrix::identity(6, 6) * (spectral_norm(&m) + 0.1);
        let joint = mat_exp(&(&a * (s + t))).unwrap();
        let split = mat_exp(&(&a * s)).unwrap() * mat_exp(&(&a * t)).unwrap();
        prop_assert!(rel(&split, &joint) <= 1e-8);
    }

    #[test]
    fn phi1_consistency(seed in any::<u64>(), norm in 0.0f64..=5.0, dim in 1usize..7, singular in any::<bool>()) {
        let mut r = rng(seed);
        let mut a = rand_mat(&mut r, dim, dim, 1.0);
        if singular {
            let c = a.column(0) * 2.0;
            a.set_column(dim - 1, &c);
            if dim == 1 {
                a[(0, 0)] = 0.0;
            }
        }
        let sn = spectral_norm(&a);
        if sn > 0.0 {
            a *= norm / sn;
        }
        let e = mat_exp(&a).unwrap();
        let lhs = &a * phi1(&a).unwrap() + Matrix::identity(dim, dim);
        prop_assert!(rel(&lhs, &e) <= 1e-9);
    }

    #[test]
    fn ridge_shrinks_monotonically(seed in any::<u64>(), e1 in 1e-8f64..10.0, factor in 1.0f64..100.0) {
        let mut r = rng(seed);
        let x = rand_mat(&mut r, 12, 5, 1.0);
        let y = rand_mat(&mut r, 12, 3, 1.0);
        let small = ridge_lstsq(&x, &y, e1).unwrap().norm();
        let large = ridge_lstsq(&x, &y, e1 * factor).unwrap().norm();
        prop_assert!(large <= small * (1.0 + 1e-12));
    }

    #[test]
    fn colwise_kron_is_bilinear(seed in any::<u64>(), alpha in -3.0f64..3.0, beta in -3.0f64..3.0) {
        let mut r = rng(seed);
        let (z1, z2) = (rand_mat(&mut r, 7, 3, 1.0), rand_mat(&mut r, 7, 3, 1.0));
        let (a1, a2) = (rand_mat(&mut r, 7, 2, 1.0), rand_mat(&mut r, 7, 2, 1.0));
        let k = |z: &Matrix, a: &Matrix| colwise_kron(z, a).unwrap();
        let left = k(&(&z1 * alpha + &z2 * beta), &a1) - (k(&z1, &a1) * alpha + k(&z2, &a1) * beta);
        let right = k(&z1, &(&a1 * alpha + &a2 * beta)) - (k(&z1, &a1) * alpha + k(&z1, &a2) * beta);
        prop_assert!(left.amax() <= 1e-12);
        prop_assert!(right.amax() <= 1e-12);
    }

    #[test]
    fn vector_field_is_affine_in_action(kind in 0u8..3, seed in any::<u64>()) {
        let env = env_of(kind);
        let mut r = rng(seed);
        let s = env.sample_collection(&mut r);
        let a1 = env.sample_action(&mut r) * 0.5;
        let a2 = env.sample_action(&mut r) * 0.5;
        let f = |a: &DVector<f64>| env.vector_field(&s, a).unwrap();
        let zero = DVector::zeros(env.action_dim());
        let resid = f(&(&a1 + &a2)) - f(&a1) - f(&a2) + f(&zero);
        let scale = f(&zero).amax().max(1.0);
        prop_assert!(resid.amax() <= 1e-12 * scale);
    }

    #[test]
    fn reward_is_even_in_action(kind in 0u8..3, seed in any::<u64>()) {
        let env = env_of(kind);
        let mut r = rng(seed);
        let s = env.sample_collection(&mut r);
        let a = env.sample_action(&mut r);
        prop_assert_eq!(env.reward(&s, &a), env.reward(&s, &-a));
    }

    #[test]
    fn identification_ignores_row_order(seed in any::<u64>()) {
        let mut r = rng(seed);
        let (rows, n, d) = (40, 3, 2);
        let z = rand_mat(&mut r, rows, n, 1.0);
        let zp = rand_mat(&mut r, rows, n, 1.0);
        let a = rand_mat(&mut r, rows, d, 1.0);
        let mut perm: Vec<usize> = (0..rows).collect();
        for i in (1..rows).rev() {
            perm.swap(i, r.random_range(0..=i));
        }
        let pick = |m: &Matrix| Matrix::from_fn(rows, m.ncols(), |i, j| m[(perm[i], j)]);
        let base = identify_operators(&z, &zp, &a, 0.1, 1e-3).unwrap();
        let shuffled = identify_operators(&pick(&z), &pick(&zp), &pick(&a), 0.1, 1e-3).unwrap();
        prop_assert!(rel(&shuffled.coefficient_matrix(), &base.coefficient_matrix()) <= 1e-9);
    }

    #[test]
    fn greedy_action_respects_box_and_scales_with_r1(seed in any::<u64>(), bound in 0.1f64..5.0) {
        let mut r = rng(seed);
        let (n, d) = (4, 2);
        let ops = LatentOperators::new(rand_mat(&mut r, n, n, 0.5), vec![rand_mat(&mut r, n, n, 0.5); d], 0.1).unwrap();
        let vm = ValueModel::mlp(n, 0.99, 5.0, &mut r).unwrap();
        let z = DVector::from_fn(n, |_, _| r.random_range(-1.0..1.0));
        let m = rand_mat(&mut r, d, d, 1.0);
        let r1 = &m * m.transpose() + Matrix::identity(d, d) * 0.1;
        let hi = DVector::from_element(d, bound);
        let cfg = PolicyConfig::new(0.99, r1.clone(), 0.1, -&hi, hi.clone()).unwrap();
        let a = greedy_action(&ops, &vm, &z, &cfg).unwrap();
        prop_assert!(a.iter().all(|v| v.abs() <= bound));
        prop_assert_eq!(cfg.clip(&a), a);

        let cfg2 = PolicyConfig::new(0.99, &r1 * 2.0, 0.1, -&hi, hi.clone()).unwrap();
        let u1 = greedy_action_unclipped(&ops, &vm, &z, &cfg).unwrap();
        let u2 = greedy_action_unclipped(&ops, &vm, &z, &cfg2).unwrap();
        prop_assert!((u2 - &u1 * 0.5).amax() <= 1e-14 * u1.amax().max(1e-300));
    }

    #[test]
    fn config_text_round_trips(seed in any::<u64>(), lam in 0.0f64..=1.0, epochs in 1usize..500, env in 0u8..3) {
        let kind = [EnvKind::Pendulum, EnvKind::Lorenz63, EnvKind::Wave][env as usize];
        let mut cfg = RunConfig::for_env(kind);
        cfg.seed = seed;
        cfg.lambda_met = lam;
        cfg.epochs = epochs;
        let back = RunConfig::parse(&cfg.to_text()).unwrap();
        prop_assert_eq!(&back, &cfg);
        prop_assert_eq!(back.hash(), cfg.hash());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn rk4_is_fourth_order(seed in any::<u64>()) {
        let mut env = EnvSpec::pendulum();
        let mut r = rng(seed);
        let s = env.sample_collection(&mut r) * 0.5;
        let a = env.sample_action(&mut r);
        env.dt = 0.5;
        let run = |env: &mut EnvSpec, m: usize| {
            env.substeps = m;
            env.step_rk4(&s, &a).unwrap()
        };
        let reference = run(&mut env, 1000);
        let coarse = (run(&mut env, 10) - &reference).norm();
        let fine = (run(&mut env, 20) - &reference).norm();
        let ratio = coarse / fine;
        prop_assert!((10.0..=22.0).contains(&ratio), "error ratio {}", ratio);
    }

    #[test]
    fn stored_transitions_replay_exactly(kind in 0u8..2, seed in any::<u64>()) {
        let env = env_of(kind);
        let ts = generate_random_trajectories(&env, 3, 15, seed).unwrap();
        for t in &ts.trajectories {
            for (i, a) in t.actions.iter().enumerate() {
                let next = env.step_rk4(&t.states[i], a).unwrap();
                prop_assert!((next - &t.states[i + 1]).amax() <= 1e-12);
            }
        }
        let again = generate_random_trajectories(&env, 3, 15, seed).unwrap();
        prop_assert_eq!(ts, again);
    }

    #[test]
    fn bundle_round_trips(seed in any::<u64>(), n in 1usize..5) {
        let n = 2 * n;
        let env = EnvSpec::pendulum();
        let mut r = rng(seed);
        let model = EmbeddingModel::for_env(&env, n, 0.3, &mut r).unwrap();
        let ops = LatentOperators::new(rand_mat(&mut r, n, n, 1.0), vec![rand_mat(&mut r, n, n, 1.0)], env.dt).unwrap();
        let value = ValueModel::mlp(n, 0.99, 12.0, &mut r).unwrap();
        let b = Bundle { env_name: env.name().into(), model, operators: ops, value: Some(value) };
        prop_assert_eq!(Bundle::decode(&b.encode()).unwrap(), b);
    }
}
