use pathreserve_demo::{asian_curve, simulate_paths, term_reserve_curve};
use serde_json::Value;

fn parse(s: String) -> Value {
    serde_json::from_str(&s).unwrap()
}

#[test]
fn paths_have_requested_shape() {
    let out = parse(simulate_paths(1.0, 0.05, 0.2, 0.03, 1.0, 50, 4, "q", 3));
    assert_eq!(out["times"].as_array().unwrap().len(), 51);
    let paths = out["paths"].as_array().unwrap();
    assert_eq!(paths.len(), 4);
    assert!(paths.iter().all(|p| p[0] == 1.0 && p.as_array().unwrap().len() == 51));
    assert_eq!(out, parse(simulate_paths(1.0, 0.05, 0.2, 0.03, 1.0, 50, 4, "q", 3)));
}

#[test]
fn asian_estimates_bracket_the_closed_form() {
    let out = parse(asian_curve(0.03, 0.2, 1.0, 32, 5, 4000, 9));
    let rows = out["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 5);
    for r in rows {
        let (o, m, se) = (r["oracle"].as_f64().unwrap(), r["mc"].as_f64().unwrap(), r["se"].as_f64().unwrap());
        assert!((o - m).abs() <= 4.0 * se + 1e-12, "{r}");
    }
    let last = &rows[4];
    assert_eq!(last["se"].as_f64().unwrap(), 0.0);
}

#[test]
fn term_reserve_matches_closed_form() {
    let out = parse(term_reserve_curve(0.4, 0.03, 2.0, 200));
    let engine = out["engine"].as_array().unwrap();
    let exact = out["closed_form"].as_array().unwrap();
    for (a, b) in engine.iter().zip(exact) {
        assert!((a.as_f64().unwrap() - b.as_f64().unwrap()).abs() < 1e-5);
    }
    assert_eq!(engine.last().unwrap().as_f64().unwrap(), 0.0);
}

#[test]
fn errors_come_back_as_json() {
    let out = parse(simulate_paths(-1.0, 0.05, 0.2, 0.03, 1.0, 50, 4, "p", 3));
    assert!(out["error"].as_str().unwrap().contains("positive"));
}
