use num::{BigInt, BigRational, One, Zero};
use snakelab::oracle::*;
use snakelab::sampling::{stream_rng, OffspringLaw};
use snakelab::tree::DegreeSequence;

fn q(a: i64, b: i64) -> BigRational {
    BigRational::new(BigInt::from(a), BigInt::from(b))
}

fn ds(v: &[usize]) -> DegreeSequence {
    DegreeSequence::new(v.to_vec()).unwrap()
}

fn row<'a>(r: &'a ExactLawReport, label: &str) -> (&'a str, &'a str) {
    let i = r.support.iter().position(|s| s == label).expect(label);
    (&r.computed_probabilities[i], &r.formula_probabilities[i])
}

#[test]
fn pd_count_is_factorial() {
    for d in degree_sequences(6) {
        assert_eq!(enumerate_pd(&d).unwrap().count(), 120);
    }
}

#[test]
fn sb_order_small_case() {
    let r = check_sb_order_law(&ds(&[2, 1, 0, 0])).unwrap();
    assert_eq!(row(&r, "(1,2)"), ("2/3", "2/3"));
    assert!(r.passed(), "{r:?}");
    let r = check_sb_order_law(&ds(&[3, 2, 1, 0, 0, 0, 0])).unwrap();
    assert_eq!(r.support.len(), 6 + 1);
    assert!(r.passed());
    assert!(DegreeSequence::new(vec![0, 0, 2, 0]).is_err());
}

#[test]
fn sb_order_one_internal_vertex() {
    let r = check_sb_order_law(&ds(&[0, 3, 0, 0])).unwrap();
    assert_eq!(r.mismatches, 0);
    assert_eq!(row(&r, "(2)"), ("1", "1"));
}

#[test]
fn sb_order_all_sequences_up_to_six() {
    for n in 1..=6 {
        for d in degree_sequences(n) {
            assert!(check_sb_order_law(&d).unwrap().passed(), "{d:?}");
        }
    }
}

#[test]
fn repeat_laws_all_sequences_up_to_six() {
    for n in 1..=6 {
        for d in degree_sequences(n) {
            let r = check_repeat_laws(&d).unwrap();
            assert!(r.passed(), "{d:?} {r:?}");
        }
    }
}

#[test]
fn repeat_laws_selected_eights() {
    for d in [
        [1, 2, 0, 1, 0, 2, 1, 0],
        [0, 3, 0, 1, 1, 0, 2, 0],
        [7, 0, 0, 0, 0, 0, 0, 0],
        [1, 1, 1, 1, 1, 1, 1, 0],
    ] {
        assert!(check_repeat_laws(&ds(&d)).unwrap().passed(), "{d:?}");
    }
}

#[test]
fn path_has_no_repeats() {
    let r = check_repeat_laws(&ds(&[1, 1, 1, 1, 0])).unwrap();
    // every row has Jtilde = (5)
    for s in &r.support[..r.support.len() - 1] {
        assert!(s.ends_with("Jtilde=(5)"), "{s}");
    }
}

#[test]
fn repeat_survival_vanishes_past_internal_count() {
    // d = (2,1,0,0), Vhat = (1,2): two internal vertices.
    let s = [0usize, 2, 3];
    assert_eq!(repeat_survival(4, &s, 0, 0, 1), BigRational::one());
    assert_eq!(repeat_survival(4, &s, 0, 0, 2), q(1, 2));
    assert_eq!(repeat_survival(4, &s, 0, 0, 3), BigRational::zero());
}

#[test]
fn kemperman_binary() {
    let b = OffspringLaw::builtin("binary").unwrap();
    let r = check_kemperman(&b, 3).unwrap();
    assert_eq!(row(&r, "k=2"), ("1", "1"));
    for n in [5, 7, 9, 11] {
        assert!(check_kemperman(&b, n).unwrap().passed());
    }
    assert!(check_kemperman(&b, 4).is_err());
}

#[test]
fn kemperman_other_laws() {
    let t = OffspringLaw::from_exact("t", vec![q(1, 3), q(1, 3), q(1, 3)], true).unwrap();
    for n in 2..=10 {
        assert!(check_kemperman(&t, n).unwrap().passed(), "n={n}");
    }
    assert!(check_kemperman(&OffspringLaw::builtin("poisson1").unwrap(), 5).is_err());
}

#[test]
fn theta_closed_values() {
    let pmf = vec![q(1, 2), BigRational::zero(), q(1, 2)];
    // (1/4) / (3/8) * (3/2)
    assert_eq!(theta_n(&pmf, 3, &[2]).unwrap(), BigRational::one());
    assert_eq!(theta_n(&pmf, 3, &[2, 2]).unwrap(), BigRational::zero());
    assert!(theta_n(&[q(1, 1)], 3, &[1]).is_err());
}

#[test]
fn theta_general_reduces_to_theta_n() {
    let pmf = vec![q(13, 24), q(1, 4), BigRational::zero(), q(1, 12), q(1, 8)];
    for ks in [vec![1], vec![3, 1], vec![4, 4], vec![1, 1, 3]] {
        assert_eq!(
            theta_general(&pmf, 8, 0, 0, &[], &ks).unwrap(),
            theta_n(&pmf, 8, &ks).unwrap()
        );
    }
    assert_eq!(
        theta_general(&pmf, 6, 1, 3, &[3], &[3]).unwrap(),
        BigRational::zero()
    );
}

#[test]
fn theta_identities() {
    let binary = vec![q(1, 2), BigRational::zero(), q(1, 2)];
    let r = check_theta_general_identity(&binary, 5, &[2], 1).unwrap();
    assert!(r.passed(), "{r:?}");
    let skew = vec![q(13, 24), q(1, 4), BigRational::zero(), q(1, 12), q(1, 8)];
    for m in 1..=3 {
        let r = check_theta_n_identity(&skew, 8, m).unwrap();
        assert!(r.passed(), "{r:?}");
    }
    // non-critical law: the mean enters through (E X)^m
    let sub = vec![q(1, 2), q(1, 3), q(1, 6)];
    for prefix in [vec![], vec![1], vec![2, 1]] {
        for m in 1..=2 {
            let r = check_theta_general_identity(&sub, 7, &prefix, m).unwrap();
            assert!(r.passed(), "{prefix:?} {m} {r:?}");
        }
    }
}

#[test]
fn prune_graft_exact_law() {
    let r = PruneGraftInstance::default().exact_report();
    assert!(r.passed(), "{:?}", r.notes);
    assert!(r.support.len() > 100);
}

#[test]
fn prune_graft_trivial_threshold() {
    let inst = PruneGraftInstance {
        tau: 10.0,
        ..Default::default()
    };
    let r = inst.exact_report();
    assert!(r.passed());
    assert!(
        r.notes[0].ends_with("0 with more than one grafting outcome"),
        "{:?}",
        r.notes
    );
}

#[test]
fn prune_graft_monte_carlo() {
    let inst = PruneGraftInstance::default();
    let r = check_prune_graft_mc(&inst, 200_000, 11).unwrap();
    assert_eq!(r.impossible_outcomes, 0);
    assert!(r.df > 0);
    assert!(r.p_value > 1e-4, "{r:?}");
}

#[test]
fn ancestral_bound() {
    let d = ds(&[2, 2, 1, 1, 0, 2, 0, 0, 1, 0, 2, 1, 0]);
    let mut rng = stream_rng(5, 0);
    let one = check_ancestral_bound(&d, &[3], 2, 1000, &mut rng).unwrap();
    assert_eq!(one.empirical, 0.0);
    let zero = check_ancestral_bound(&d, &[1, 2, 3], 0, 1000, &mut rng).unwrap();
    assert_eq!(zero.empirical, 0.0);
    let r = check_ancestral_bound(&d, &[1, 5, 9], 2, 100_000, &mut rng).unwrap();
    assert!(r.holds, "{r:?}");
    assert!(r.empirical > 0.0);
    let na = check_ancestral_bound(&d, &[1, 5, 9], 7, 10, &mut rng).unwrap();
    assert!(na.bound.is_none());
}
