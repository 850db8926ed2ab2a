//! Writes a builtin graph to JSON, reloads it and checks the costs survive.

use pokebnn::cost::{analyze, AnalyzeOptions};
use pokebnn::graphir::{builtin, graph_from_json, graph_to_json};

fn main() {
    let g = builtin("pokebnn-0.5x").expect("builtin");
    let json = graph_to_json(&g);
    let back = graph_from_json(&json).expect("round trip");
    let a = analyze(&g, AnalyzeOptions::default()).unwrap();
    let b = analyze(&back, AnalyzeOptions::default()).unwrap();
    println!("{} nodes, {} bytes of JSON", g.nodes.len(), json.len());
    println!("graph equal after round trip: {}", g == back);
    println!("ACE {} == {}: {}", a.ace, b.ace, a.ace == b.ace);
}
