mod common;

use common::*;

#[test]
fn network_gradients_match_central_differences() {
    for (seed, side) in [(1u64, 16usize), (2, 17), (3, 19)] {
        let (model, input) = gradcheck_draw(seed, side);
        let stats = gradcheck(&model, &input);
        assert_eq!(stats.checked, model.parameter_count() + input.values().len());
        assert!(stats.max_rel_err < 1e-4, "seed {seed}: {stats:?}");
    }
}
