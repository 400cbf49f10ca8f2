//! Model files shipped with the crate.

use crate::countable::CountableFamily;
use crate::model::ProcessModel;

pub const SINGLE_QUADRATIC: &str = include_str!("../models/single_quadratic.json");
pub const COUNTEREXAMPLE_D2: &str = include_str!("../models/counterexample_d2.json");
pub const DEMO_COUNTABLE: &str = include_str!("../models/demo_countable.json");

/// `p(0) = 3/4`, `p(2) = 1/4`; fixed points 1 and 3.
pub fn single_quadratic() -> ProcessModel {
    ProcessModel::from_json_str(SINGLE_QUADRATIC).expect("bundled model is valid")
}

/// Two-type model whose generating function has three fixed points in `(1,∞)²`.
pub fn counterexample_d2() -> ProcessModel {
    ProcessModel::from_json_str(COUNTEREXAMPLE_D2).expect("bundled model is valid")
}

/// 32-type tabulated family with nearest-neighbour transitions and
/// geometrically damped offspring of type 1.
pub fn demo_countable() -> CountableFamily {
    CountableFamily::from_json_str(DEMO_COUNTABLE).expect("bundled family is valid")
}
