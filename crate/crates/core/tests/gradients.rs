mod common;

use common::{grad_check, ModelPart, ModelProbe, OpCase};

const TOL: f64 = 1e-3;

#[test]
fn every_op_matches_finite_differences() {
    for case in OpCase::ALL {
        let r = grad_check(&case, 20, 1);
        assert!(r.passed(TOL), "{case:?}: {r:?}");
    }
}

#[test]
fn encoder_matches_finite_differences() {
    let r = grad_check(&ModelProbe::new(ModelPart::Encoder, 1), 20, 2);
    assert!(r.passed(TOL), "{r:?}");
}

#[test]
fn decoder_matches_finite_differences() {
    let r = grad_check(&ModelProbe::new(ModelPart::Decoder, 2), 20, 3);
    assert!(r.passed(TOL), "{r:?}");
}

#[test]
fn dual_loss_matches_finite_differences_on_eight_parameters() {
    let r = grad_check(&ModelProbe::new(ModelPart::DualLoss, 3), 8, 4);
    assert!(r.passed(TOL), "{r:?}");
}

#[test]
fn classifier_head_matches_finite_differences() {
    let r = grad_check(&ModelProbe::new(ModelPart::Classifier, 4), 20, 5);
    assert!(r.passed(TOL), "{r:?}");
}

#[test]
fn checks_cover_requested_coordinates() {
    for case in OpCase::ALL {
        let r = grad_check(&case, 20, 1);
        assert_eq!(r.checked, 20, "{case:?}: {r:?}");
        println!("{case:?}: worst rel {:.2e}", r.worst_rel);
    }
    for part in [ModelPart::Encoder, ModelPart::Decoder, ModelPart::DualLoss, ModelPart::Classifier] {
        let r = grad_check(&ModelProbe::new(part, 5), 20, 6);
        assert_eq!(r.checked, 20, "{part:?}: {r:?}");
        println!("{part:?}: worst rel {:.2e}", r.worst_rel);
    }
}
