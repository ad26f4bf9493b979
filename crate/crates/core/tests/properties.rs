use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use scsyn::abstraction::{normal_mass, robust_letters, Grid};
use scsyn::geometry::{LabeledPartition, Polytope};
use scsyn::linalg::{Mat, Vect};
use scsyn::mor::project_initial;
use scsyn::runtime::{wilson_interval, WILSON_Z};
use scsyn::similarity::{decoupling_probability, maximal_coupling};
use scsyn::speclang::{minimize, parse_scltl, translate_spec, word_satisfies, Expr, Formula};

fn expr(depth: u32) -> impl Strategy<Value = Expr> {
    let leaf = prop_oneof![
        Just(Expr::True),
        Just(Expr::False),
        (0usize..2).prop_map(Expr::Ap),
        (0usize..2).prop_map(Expr::Not),
    ];
    leaf.prop_recursive(depth, 24, 2, |inner| {
        prop_oneof![
            (inner.clone(), inner.clone()).prop_map(|(a, b)| Expr::and(a, b)),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| Expr::or(a, b)),
            inner.clone().prop_map(Expr::next),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| Expr::until(a, b)),
            inner.prop_map(Expr::eventually),
        ]
    })
}

fn formula() -> impl Strategy<Value = Formula> {
    expr(4).prop_map(|e| Formula::new(e, vec!["a".into(), "b".into()]).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn dfa_agrees_with_semantics(f in formula(), words in prop::collection::vec(prop::collection::vec(0u32..4, 0..=8), 20)) {
        let dfa = translate_spec(&f);
        for w in &words {
            prop_assert_eq!(dfa.accepts(w), word_satisfies(&f, w), "{} on {:?}", f, w);
        }
    }

    #[test]
    fn translation_is_minimal(f in formula()) {
        let dfa = translate_spec(&f);
        prop_assert_eq!(minimize(&dfa).num_states, dfa.num_states);
        for q in 0..dfa.num_states {
            prop_assert_eq!(dfa.transitions[q].len(), 4);
        }
    }

    #[test]
    fn printed_formula_parses_to_same_language(f in formula(), words in prop::collection::vec(prop::collection::vec(0u32..4, 0..=6), 20)) {
        let g = parse_scltl(&f.to_string(), &["a", "b"]).unwrap();
        let (d1, d2) = (translate_spec(&f), translate_spec(&g));
        prop_assert_eq!(d1.num_states, d2.num_states);
        for w in &words {
            prop_assert_eq!(d1.accepts(w), d2.accepts(w));
        }
    }

    #[test]
    fn grid_indices_round_trip(counts in prop::collection::vec(1usize..12, 1..4), pick in any::<prop::sample::Index>()) {
        let n = counts.len();
        let lo: Vec<f64> = (0..n).map(|d| -1.0 - d as f64).collect();
        let hi: Vec<f64> = (0..n).map(|d| 2.0 + d as f64).collect();
        let g = Grid::new(&lo, &hi, &counts).unwrap();
        let i = pick.index(g.num_cells());
        prop_assert_eq!(g.flat_index(&g.multi_index(i)), i);
        prop_assert_eq!(g.index_of(&g.center(i)), Some(i));
        prop_assert_eq!(g.clamp_index(&g.center(i)), i);
    }

    #[test]
    fn normal_mass_is_additive(a in -9.0f64..9.0, w1 in 0.0f64..4.0, w2 in 0.0f64..4.0) {
        let (b, c) = (a + w1, a + w1 + w2);
        let (m1, m2, m) = (normal_mass(a, b), normal_mass(b, c), normal_mass(a, c));
        prop_assert!((0.0..=1.0).contains(&m));
        prop_assert!((m1 + m2 - m).abs() < 1e-14);
        let total = normal_mass(f64::NEG_INFINITY, a) + m + normal_mass(c, f64::INFINITY);
        prop_assert!((total - 1.0).abs() < 1e-14);
    }

    #[test]
    fn wilson_interval_brackets_the_estimate(n in 1usize..2000, frac in 0.0f64..=1.0) {
        let k = ((n as f64) * frac).round() as usize;
        let (lo, hi) = wilson_interval(k, n, WILSON_Z);
        let p = k as f64 / n as f64;
        prop_assert!(0.0 <= lo && lo <= p + 1e-12 && p <= hi + 1e-12 && hi <= 1.0);
    }

    #[test]
    fn robust_letters_grow_with_radius(y in prop::collection::vec(-3.0f64..3.0, 2), r1 in 0.0f64..1.0, dr in 0.0f64..1.0) {
        let universe = Polytope::from_box(&[-4.0, -4.0], &[4.0, 4.0]).unwrap();
        let p0 = Polytope::from_box(&[0.0, -1.0], &[2.0, 1.0]).unwrap();
        let p1 = Polytope::from_box(&[-2.0, -2.0], &[0.5, 0.0]).unwrap();
        let lab = LabeledPartition::new(vec![(p0, 0), (p1, 1)], universe, 2).unwrap();
        let exact = lab.label(&y);
        let small = robust_letters(&y, &lab, r1);
        let large = robust_letters(&y, &lab, r1 + dr);
        prop_assert!(robust_letters(&y, &lab, 0.0).contains(&exact));
        prop_assert!(small.iter().all(|l| large.contains(l)));
    }

    #[test]
    fn initial_projection_inverts_the_lift(p in prop::collection::vec(-2.0f64..2.0, 8), z in prop::collection::vec(-5.0f64..5.0, 2), dd in prop::collection::vec(0.1f64..3.0, 4)) {
        let p = Mat::from_row_slice(4, 2, &p);
        prop_assume!(p.clone().svd(false, false).singular_values.min() > 0.1);
        let d = Mat::from_diagonal(&Vect::from_vec(dd));
        let z = Vect::from_vec(z);
        let back = project_initial(&p, &d, &(&p * &z)).unwrap();
        prop_assert!((back - z).norm() < 1e-8);
    }

    #[test]
    fn coupled_draws_follow_the_shift(seed in any::<u64>(), w in prop::collection::vec(-3.0f64..3.0, 3), g in prop::collection::vec(-1.0f64..1.0, 3)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (w, g) = (Vect::from_vec(w), Vect::from_vec(g));
        let (wr, held) = maximal_coupling(&mut rng, &w, &g);
        if held {
            prop_assert!((&wr - (&w + &g)).norm() < 1e-12);
        } else {
            prop_assert!((&wr - (&w + &g)).norm() > 0.0);
        }
    }
}

#[test]
fn coupling_failure_rate_matches_total_variation() {
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let g = Vect::from_vec(vec![0.6, -0.3]);
    let n = 200_000;
    let mut fails = 0;
    for _ in 0..n {
        let w = Vect::from_fn(2, |_, _| StandardNormal.sample(&mut rng));
        if !maximal_coupling(&mut rng, &w, &g).1 {
            fails += 1;
        }
    }
    let rate = fails as f64 / n as f64;
    let expected = decoupling_probability(g.norm());
    let sd = (expected * (1.0 - expected) / n as f64).sqrt();
    assert!((rate - expected).abs() < 5.0 * sd, "rate {rate} expected {expected}");
}
