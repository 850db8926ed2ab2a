//! Pearson correlation between per-MAC metric cost and measured add + multiply energy.

use pokebnn::cost::{energy_correlation, EnergyMetric, ProcessNode, RowSelection, ENERGY_TABLE};

fn main() {
    for node in [ProcessNode::Nm7, ProcessNode::Nm45] {
        for metric in [EnergyMetric::Ace, EnergyMetric::Cpu64] {
            match energy_correlation(&ENERGY_TABLE, node, metric, &RowSelection::Complete) {
                Ok(r) => println!("{node:?} {metric:?}: r = {r:.4}"),
                Err(e) => println!("{node:?} {metric:?}: {e}"),
            }
        }
    }
}
