mod common;

use common::*;
use ovd_detector::config::IouKind;

const TOL: f64 = 1e-4;

#[test]
fn contrastive_and_objectness() {
    for seed in 0..3 {
        let e = contrastive_grad_error(seed, 8, 8);
        assert!(e < TOL, "seed {seed}: {e}");
    }
}

#[test]
fn iou_and_ciou() {
    for seed in 0..3 {
        for kind in [IouKind::Iou, IouKind::Ciou] {
            let e = iou_grad_error(seed, 8, kind);
            assert!(e < TOL, "seed {seed} {kind:?}: {e}");
        }
    }
}

#[test]
fn distribution_focal() {
    for seed in 0..3 {
        let e = dfl_grad_error(seed, 8, 16);
        assert!(e < TOL, "seed {seed}: {e}");
    }
}

#[test]
fn total() {
    for seed in 0..2 {
        let e = total_grad_error(seed, 8, 8, 16);
        assert!(e < TOL, "seed {seed}: {e}");
    }
}

#[test]
fn detection_loss_wrt_parameters() {
    let e = model_grad_error(3, 40);
    assert!(e < TOL, "{e}");
}
