//! Cost table for every PokeBNN width and the ResNet-50 baselines.

use pokebnn::cost::{analyze, render_reports, AnalyzeOptions, ReportFormat};
use pokebnn::graphir::{builtin, builtin_names};

fn main() {
    let reports: Vec<_> = builtin_names()
        .into_iter()
        .filter(|n| n != "pokebnn-toy")
        .map(|name| {
            let g = builtin(&name).expect("builtin builds");
            let mut r = analyze(&g, AnalyzeOptions::default()).expect("builtin analyzes");
            r.model = name;
            r
        })
        .collect();
    print!("{}", render_reports(&reports, ReportFormat::Table));
}
