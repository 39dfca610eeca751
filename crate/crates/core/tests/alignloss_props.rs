use gazeprior::alignloss::{align_loss_graph, loss_align, mode_rows, AlignLossConfig};
use gazeprior::astalign::{compute_targets, FixationTarget};
use gazeprior::eyelayer::GaussianMixtureParams;
use gazeprior::numerics::{grad_check, Array, Graph, Var};
use gazeprior::Result;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_target(r: &mut ChaCha8Rng, len: usize) -> FixationTarget {
    let mut f: Vec<f64> = (0..len)
        .map(|_| {
            if r.gen_bool(0.4) {
                r.gen_range(0.5..4.0)
            } else {
                0.0
            }
        })
        .collect();
    f[r.gen_range(0..len)] += 1.0;
    compute_targets(&f, 1.0).unwrap()
}

/// Builds the loss from unconstrained logits, centers and log-spreads.
fn loss_from_raw(
    g: &mut Graph,
    raw_w: Var,
    mu: Var,
    log_sigma: Var,
    targets: &[Option<&FixationTarget>],
    lens: &[usize],
    cfg: &AlignLossConfig,
) -> Result<(Var, Var, Var, Var, Var)> {
    let w = g.softmax_last(raw_w);
    let sigma = g.exp(log_sigma);
    let pk = g.gaussian_modes(mu, sigma, lens)?;
    let loss = align_loss_graph(g, w, mu, sigma, pk, targets, cfg)?.expect("targets present");
    Ok((loss, w, mu, sigma, pk))
}

#[test]
fn gradients_match_finite_differences() {
    let mut r = ChaCha8Rng::seed_from_u64(11);
    let cfg = AlignLossConfig {
        min_distance_frac: 0.6,
        margin: 0.5,
        ..AlignLossConfig::default()
    };
    for trial in 0..5 {
        let lens = [r.gen_range(4..12), r.gen_range(4..12)];
        let t0 = random_target(&mut r, lens[0]);
        let t1 = random_target(&mut r, lens[1]);
        let k = 3;
        let raw_w = Array::randn(&[2, k], 1.0, &mut r);
        let mu = Array::new(
            vec![2, k],
            (0..2 * k)
                .map(|i| r.gen_range(0.3..(lens[i / k] as f64 - 1.3)))
                .collect(),
        )
        .unwrap();
        let log_sigma = Array::new(
            vec![2, k],
            (0..2 * k).map(|_| r.gen_range(0.1..1.2)).collect(),
        )
        .unwrap();
        let targets = [Some(&t0), Some(&t1)];
        let report = grad_check(
            |g, v| Ok(loss_from_raw(g, v[0], v[1], v[2], &targets, &lens, &cfg)?.0),
            &[raw_w, mu, log_sigma],
            1e-5,
        )
        .unwrap();
        assert!(
            report.max_rel_err < 1e-4,
            "trial {trial}: {} at {:?}",
            report.max_rel_err,
            report.worst
        );
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn nonnegative_and_permutation_invariant(seed in any::<u64>()) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let len = r.gen_range(1..20);
        let t = random_target(&mut r, len);
        let k = r.gen_range(1..=4);
        let cfg = AlignLossConfig::default();
        let raw: Vec<f64> = (0..k).map(|_| r.gen_range(0.01..1.0)).collect();
        let s: f64 = raw.iter().sum();
        let gmm = GaussianMixtureParams {
            w: raw.iter().map(|v| v / s).collect(),
            mu: (0..k).map(|_| r.gen_range(0.0..=(len - 1) as f64)).collect(),
            sigma: (0..k).map(|_| r.gen_range(1.0..=(len as f64 / 2.0).max(1.0))).collect(),
        };
        let mut g = Graph::new();
        let mu = g.constant(Array::new(vec![1, k], gmm.mu.clone()).unwrap());
        let sigma = g.constant(Array::new(vec![1, k], gmm.sigma.clone()).unwrap());
        let pk = g.gaussian_modes(mu, sigma, &[len]).unwrap();
        let rows = mode_rows(&g, pk, 0, len);
        let base = loss_align(&gmm, &rows, &t, &cfg).unwrap();
        prop_assert!(base >= 0.0);

        let mut order: Vec<usize> = (0..k).collect();
        order.reverse();
        order.rotate_left(seed as usize % k);
        let perm = GaussianMixtureParams {
            w: order.iter().map(|&i| gmm.w[i]).collect(),
            mu: order.iter().map(|&i| gmm.mu[i]).collect(),
            sigma: order.iter().map(|&i| gmm.sigma[i]).collect(),
        };
        let prows: Vec<Vec<f64>> = order.iter().map(|&i| rows[i].clone()).collect();
        let permuted = loss_align(&perm, &prows, &t, &cfg).unwrap();
        prop_assert!((base - permuted).abs() < 1e-12);
    }
}
