use nsi_core::basis::BasisKind;
use nsi_core::estimator::{estimate_nsi, NsiConfig, Pooling};
use nsi_core::gmm::Weighting;
use nsi_core::score::RieszTarget;
use nsi_core::simulation::{generate_study, DgpSpec, Variant};

fn linear_study(n: usize, seed: u64) -> nsi_core::simulation::Study {
    generate_study(&DgpSpec::linear(n), Variant::A, seed).unwrap()
}

#[test]
fn every_basis_family_recovers_the_linear_effect() {
    let study = linear_study(1500, 11);
    for kind in [
        BasisKind::Polynomial,
        BasisKind::KernelNystrom,
        BasisKind::TreeLeaf,
    ] {
        let res = estimate_nsi(&study.dataset, &NsiConfig::new(kind).with_seed(2)).unwrap();
        let (tau, se) = (res.estimate.beta_hat[0], res.estimate.se[0]);
        assert!((tau - 0.8).abs() < 4.0 * se, "{kind:?}: tau {tau} se {se}");
        assert_eq!(res.estimate.per_measurement.len(), 3);
        assert_eq!(res.crossfit.scores.n(), 1500);
    }
}

#[test]
fn regression_target_pools_intercept_and_effect() {
    let study = linear_study(1200, 12);
    let mut cfg = NsiConfig::new(BasisKind::Polynomial).with_seed(1);
    cfg.target = Some(RieszTarget::Regression {
        regressors: vec!["z".into()],
    });
    for pooling in [Pooling::Joint, Pooling::PerCoefficient] {
        cfg.pooling = pooling;
        let res = estimate_nsi(&study.dataset, &cfg).unwrap();
        assert_eq!(res.estimate.coefficients, ["(intercept)", "z"]);
        let (tau, se) = (res.estimate.beta_hat[1], res.estimate.se[1]);
        assert!(
            (tau - 0.8).abs() < 4.0 * se,
            "{pooling:?}: tau {tau} se {se}"
        );
    }
}

#[test]
fn efficient_weighting_is_not_less_precise_than_identity() {
    let study = linear_study(1000, 13);
    let mut cfg = NsiConfig::new(BasisKind::Polynomial).with_seed(3);
    let eff = estimate_nsi(&study.dataset, &cfg).unwrap();
    cfg.weighting = Weighting::Identity;
    let ident = estimate_nsi(&study.dataset, &cfg).unwrap();
    assert!(eff.estimate.se[0] <= ident.estimate.se[0] * (1.0 + 1e-9));
    assert!(ident.estimate.j_stat.is_none());
    assert_eq!(eff.estimate.j_df, 2);
}

#[test]
fn fold_seed_changes_scores_but_not_inputs() {
    let study = linear_study(600, 14);
    let a = estimate_nsi(&study.dataset, &NsiConfig::default().with_seed(1)).unwrap();
    let b = estimate_nsi(&study.dataset, &NsiConfig::default().with_seed(1)).unwrap();
    let c = estimate_nsi(&study.dataset, &NsiConfig::default().with_seed(2)).unwrap();
    assert_eq!(a.estimate, b.estimate);
    assert_ne!(a.crossfit.scores.folds, c.crossfit.scores.folds);
}
