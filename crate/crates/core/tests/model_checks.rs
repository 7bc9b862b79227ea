mod common;

use common::{fd_gradient_error, random_scenario, reference_fim, RandomSpec};
use pebsim::fim::{assemble_fim, chain_rule_check};

#[test]
fn structured_fim_matches_brute_force() {
    let spec = RandomSpec { n_subcarriers: 64, ..Default::default() };
    for seed in 0..20 {
        let s = random_scenario(seed, &spec);
        let f = assemble_fim(&s).unwrap().fim;
        let r = reference_fim(&s);
        for i in 0..f.nrows() {
            for j in 0..f.ncols() {
                let scale = (r[(i, i)] * r[(j, j)]).sqrt();
                assert!((f[(i, j)] - r[(i, j)]).abs() <= 1e-9 * scale, "seed {seed} ({i},{j})");
            }
        }
    }
}

#[test]
fn gradients_match_finite_differences() {
    let spec = RandomSpec { n_subcarriers: 3000, ..Default::default() };
    for seed in 0..20 {
        let s = random_scenario(seed, &spec);
        let err = fd_gradient_error(&s, &[(0, 0), (2, 1500), (4, 2999), (3, 777)]);
        assert!(err < 1e-6, "seed {seed}: {err:e}");
    }
}

#[test]
fn chain_rule_identity() {
    let spec = RandomSpec::default();
    for seed in 0..20 {
        let s = random_scenario(seed, &spec);
        let d = chain_rule_check(&s).unwrap();
        assert!(d < 1e-8, "seed {seed}: {d:e}");
    }
}
