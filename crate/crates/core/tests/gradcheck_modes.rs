//! Finite-difference verification of the alternative probability-averaging
//! forward mode, end to end.

use cnnic::gradcheck::{composite_case, run_case, GradCheckSettings};
use cnnic::net::CnnicConfig;

#[test]
fn per_patch_softmax_composite_gradients_check_out() {
    let config = CnnicConfig {
        patch_size: 16,
        patch_stride: 2,
        image_size: 18,
        softmax_per_patch: true,
        ..CnnicConfig::default()
    };
    let settings = GradCheckSettings::default();
    let case = composite_case(&config, settings.seed, 2).unwrap();
    for outcome in run_case(&case, &settings).unwrap() {
        assert!(
            outcome.pass,
            "{}.{} worst rel {:.3e}",
            outcome.case, outcome.tensor, outcome.worst_rel
        );
    }
}
