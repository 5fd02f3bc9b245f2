//! Layout of the joint regression input `z = (ego state, follower state,
//! leader state, ego input)` and the linear map selecting the six features
//! the kernel sees: `v0, v1, v2, X1 - X0, X1 - X2, Y1 - Y0`.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};

use crate::vehicle::{idx, InputVec, StateVec};

pub const Z_DIM: usize = 17;
pub const FEATURE_DIM: usize = 6;

pub const EGO: Range<usize> = 0..5;
pub const TARGET: Range<usize> = 5..10;
pub const LEADER: Range<usize> = 10..15;
pub const EGO_INPUT: Range<usize> = 15..17;

pub fn assemble(ego: &StateVec, target: &StateVec, leader: &StateVec, input: &InputVec) -> DVector<f64> {
    let mut z = DVector::zeros(Z_DIM);
    z.rows_mut(EGO.start, 5).copy_from(ego);
    z.rows_mut(TARGET.start, 5).copy_from(target);
    z.rows_mut(LEADER.start, 5).copy_from(leader);
    z.rows_mut(EGO_INPUT.start, 2).copy_from(input);
    z
}

/// The 6 x 17 selection matrix for the merge scenario.
pub fn merge_feature_map() -> DMatrix<f64> {
    let mut c = DMatrix::zeros(FEATURE_DIM, Z_DIM);
    c[(0, EGO.start + idx::V)] = 1.0;
    c[(1, TARGET.start + idx::V)] = 1.0;
    c[(2, LEADER.start + idx::V)] = 1.0;
    c[(3, TARGET.start + idx::X)] = 1.0;
    c[(3, EGO.start + idx::X)] = -1.0;
    c[(4, TARGET.start + idx::X)] = 1.0;
    c[(4, LEADER.start + idx::X)] = -1.0;
    c[(5, TARGET.start + idx::Y)] = 1.0;
    c[(5, EGO.start + idx::Y)] = -1.0;
    c
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn selects_expected_features() {
        let ego = StateVec::new(-80.0, -3.5, 31.0, 0.0, 0.0);
        let fol = StateVec::new(-75.0, 0.0, 30.0, 0.0, 0.0);
        let lead = StateVec::new(0.0, 0.0, 25.0, 0.0, 0.0);
        let z = assemble(&ego, &fol, &lead, &InputVec::new(1.0, 0.1));
        let f = merge_feature_map() * z;
        assert_eq!(f.as_slice(), &[31.0, 30.0, 25.0, 5.0, -75.0, 3.5]);
    }
}
