use dpgroups::accountant::{epsilon_for_steps, rdp_step, OrderGrid};
use dpgroups_oracle as oracle;

fn integer_grid() -> OrderGrid {
    OrderGrid::new((2..=64).map(f64::from).collect()).unwrap()
}

#[test]
fn binomial_expansion_matches_quadrature_oracle() {
    let grid = integer_grid();
    for q in [0.01, 0.1] {
        for z in [0.8, 1.0, 2.0] {
            let p = rdp_step(q, z, &grid).unwrap();
            for (&order, &v) in grid.orders().iter().zip(p.values()) {
                let r = oracle::rdp(q, z, order);
                assert!(
                    (v - r).abs() <= 1e-6 * r,
                    "q={q} z={z} order={order}: {v} vs {r}"
                );
            }
        }
    }
}

#[test]
fn forward_direction_dominates() {
    for q in [0.001, 0.01, 0.1, 0.5] {
        for z in [0.5, 0.8, 1.0, 2.0, 5.0] {
            for order in [2.0, 3.0, 5.0, 8.0, 16.0, 32.0] {
                let f = oracle::rdp(q, z, order);
                let r = oracle::rdp_reverse(q, z, order);
                assert!(
                    f >= r * (1.0 - 1e-9),
                    "q={q} z={z} order={order}: {f} < {r}"
                );
            }
        }
    }
}

#[test]
fn full_rate_closed_form_epsilon() {
    let g = epsilon_for_steps(1.0, 1.0, 1, 1e-5, &OrderGrid::default()).unwrap();
    let (_, continuous) = oracle::gaussian_epsilon_continuous(1.0, 1e-5);
    let closed = 0.5 + (2.0 * 1e5f64.ln()).sqrt();
    assert!((continuous - closed).abs() < 1e-12);
    assert!(g.epsilon >= closed - 1e-12);
    assert!(g.epsilon - closed <= 0.02, "{} vs {closed}", g.epsilon);
}

#[test]
fn many_steps_match_oracle_epsilon() {
    let orders = oracle::default_orders();
    for (q, z, t) in [(0.01, 1.1, 1000), (0.05, 2.0, 200), (0.001, 0.8, 10_000)] {
        let g = epsilon_for_steps(q, z, t, 1e-5, &OrderGrid::default()).unwrap();
        let r = oracle::epsilon(q, z, t, 1e-5, &orders);
        assert!(
            (g.epsilon - r).abs() <= 1e-6 * r,
            "{q} {z} {t}: {} vs {r}",
            g.epsilon
        );
    }
}
