use std::path::PathBuf;

use vgrad::autodiff::{gradients, virtual_gradients, PreconditionerSpec};
use vgrad::graph::{parse_text, to_text};
use vgrad::models::two_level_composite;
use vgrad::Graph;

fn golden(name: &str, got: &str) {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name);
    if std::env::var_os("VGRAD_BLESS").is_some() {
        std::fs::write(&path, got).unwrap();
        return;
    }
    let want = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    assert_eq!(got, want, "{name} drifted; rerun with VGRAD_BLESS=1 to update");
}

fn composite() -> Graph {
    two_level_composite(3).unwrap()
}

#[test]
fn forward_export_matches_golden() {
    golden("composite_forward.txt", &to_text(&composite()));
}

#[test]
fn gradient_export_matches_golden() {
    golden("composite_gradient.txt", &to_text(&gradients(&composite()).unwrap().graph));
}

#[test]
fn virtual_export_matches_golden() {
    let g = composite();
    let spec = PreconditionerSpec::bind(&g, 0.1).unwrap();
    golden("composite_virtual.txt", &to_text(&virtual_gradients(&g, &spec).unwrap().graph));
}

#[test]
fn exports_round_trip_through_the_parser() {
    let g = composite();
    let spec = PreconditionerSpec::bind(&g, 0.1).unwrap();
    for graph in [g.clone(), gradients(&g).unwrap().graph, virtual_gradients(&g, &spec).unwrap().graph] {
        let text = to_text(&graph);
        assert_eq!(to_text(&parse_text(&text).unwrap()), text);
    }
}
