//! Small hand-written models shared by unit tests.

use crate::model::ProcessModel;

pub use crate::bundled::{counterexample_d2 as counterexample, single_quadratic as quadratic};

fn parse(text: &str) -> ProcessModel {
    ProcessModel::from_json_str(text).unwrap()
}

/// Each type has exactly one child of its own type.
pub fn identity_chain(d: usize) -> ProcessModel {
    let types: Vec<String> = (0..d)
        .map(|k| {
            let counts: Vec<String> = (0..d).map(|j| if j == k { "1" } else { "0" }.to_string()).collect();
            format!(r#"{{"entries":[{{"counts":[{}],"prob":"1/1"}}]}}"#, counts.join(","))
        })
        .collect();
    parse(&format!(r#"{{"d":{d},"types":[{}]}}"#, types.join(",")))
}

/// Type 0 begets only type 1 and vice versa: irreducible with period 2.
pub fn periodic_pair() -> ProcessModel {
    parse(
        r#"{"d":2,"types":[
          {"entries":[{"counts":[0,2],"prob":"1/4"},{"counts":[0,0],"prob":"3/4"}]},
          {"entries":[{"counts":[1,0],"prob":"1/2"},{"counts":[0,0],"prob":"1/2"}]}]}"#,
    )
}

/// `p(0) = p(2) = 1/2`, mean one.
pub fn critical_binary() -> ProcessModel {
    parse(r#"{"d":1,"types":[{"entries":[{"counts":[0],"prob":"1/2"},{"counts":[2],"prob":"1/2"}]}]}"#)
}

/// `p(0) = 1/4`, `p(2) = 3/4`: the conjugate of the quadratic model.
pub fn supercritical_quadratic() -> ProcessModel {
    parse(r#"{"d":1,"types":[{"entries":[{"counts":[0],"prob":"1/4"},{"counts":[2],"prob":"3/4"}]}]}"#)
}

/// Every individual dies without offspring.
pub fn sterile(d: usize) -> ProcessModel {
    let zeros = vec!["0"; d].join(",");
    let types = vec![format!(r#"{{"entries":[{{"counts":[{zeros}],"prob":"1/1"}}]}}"#); d];
    parse(&format!(r#"{{"d":{d},"types":[{}]}}"#, types.join(",")))
}
