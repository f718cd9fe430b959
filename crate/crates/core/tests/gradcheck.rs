mod common;

use common::{run_case, COMPOSITES, PRIMITIVES};

#[test]
fn primitives_match_central_differences() {
    for (name, case) in PRIMITIVES {
        let r = run_case(*case);
        assert!(r.passes(), "{name}: worst {:e}, {} checked, {} on kinks", r.worst, r.checked, r.skipped);
    }
}

#[test]
fn composites_match_central_differences() {
    for (name, case) in COMPOSITES {
        let r = run_case(*case);
        assert!(r.passes(), "{name}: worst {:e}, {} checked, {} on kinks", r.worst, r.checked, r.skipped);
    }
}
