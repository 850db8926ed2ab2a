//! Correlation between a cost metric and measured MAC energy (add + multiply).

use serde::{Deserialize, Serialize};

use super::CostError;

/// Per-format arithmetic energy in femtojoules and the matching metric weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyRow {
    pub name: &'static str,
    pub add_45nm: Option<f64>,
    pub add_7nm: Option<f64>,
    pub mul_45nm: Option<f64>,
    pub mul_7nm: Option<f64>,
    pub cpu64: Option<f64>,
    pub ace: Option<f64>,
}

const fn row(
    name: &'static str,
    add_45nm: Option<f64>,
    add_7nm: Option<f64>,
    mul_45nm: Option<f64>,
    mul_7nm: Option<f64>,
    cpu64: Option<f64>,
    ace: Option<f64>,
) -> EnergyRow {
    EnergyRow {
        name,
        add_45nm,
        add_7nm,
        mul_45nm,
        mul_7nm,
        cpu64,
        ace,
    }
}

/// Published per-operation energies with the per-MAC cost of each metric.
pub const ENERGY_TABLE: [EnergyRow; 5] = [
    row("fp32", Some(900.0), Some(380.0), Some(3700.0), Some(1310.0), Some(1.0), Some(1024.0)),
    row("fp16", Some(400.0), Some(160.0), Some(1100.0), Some(340.0), Some(1.0), Some(256.0)),
    row("bf16", None, Some(110.0), None, Some(210.0), None, Some(256.0)),
    row("int32", Some(100.0), Some(30.0), Some(3100.0), Some(1480.0), None, Some(1024.0)),
    row("int8", Some(30.0), Some(7.0), Some(200.0), Some(70.0), Some(0.125), Some(64.0)),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProcessNode {
    Nm45,
    Nm7,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnergyMetric {
    Ace,
    Cpu64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RowSelection {
    /// Every row where the add energy, multiply energy and metric are all present.
    Complete,
    /// Named rows; each must be complete.
    Named(Vec<String>),
}

impl EnergyRow {
    pub fn mac_energy(&self, node: ProcessNode) -> Option<f64> {
        match node {
            ProcessNode::Nm45 => Some(self.add_45nm? + self.mul_45nm?),
            ProcessNode::Nm7 => Some(self.add_7nm? + self.mul_7nm?),
        }
    }

    pub fn metric(&self, m: EnergyMetric) -> Option<f64> {
        match m {
            EnergyMetric::Ace => self.ace,
            EnergyMetric::Cpu64 => self.cpu64,
        }
    }
}

/// Pearson correlation of the metric against `add + mul` energy.
pub fn energy_correlation(
    rows: &[EnergyRow],
    node: ProcessNode,
    metric: EnergyMetric,
    selection: &RowSelection,
) -> Result<f64, CostError> {
    let pair = |r: &EnergyRow| Some((r.metric(metric)?, r.mac_energy(node)?));
    let pts: Vec<(f64, f64)> = match selection {
        RowSelection::Complete => rows.iter().filter_map(pair).collect(),
        RowSelection::Named(names) => names
            .iter()
            .map(|n| {
                rows.iter()
                    .find(|r| r.name == n)
                    .and_then(pair)
                    .ok_or_else(|| CostError::UnknownRow(n.clone()))
            })
            .collect::<Result<_, _>>()?,
    };
    if pts.len() < 3 {
        return Err(CostError::TooFewRows(pts.len()));
    }
    Ok(pearson(&pts))
}

fn pearson(pts: &[(f64, f64)]) -> f64 {
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for &(x, y) in pts {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    sxy / (sxx * syy).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn too_few_rows() {
        let sel = RowSelection::Named(vec!["fp32".into(), "int8".into()]);
        assert_eq!(
            energy_correlation(&ENERGY_TABLE, ProcessNode::Nm7, EnergyMetric::Ace, &sel),
            Err(CostError::TooFewRows(2))
        );
        let sel = RowSelection::Named(vec!["bf16".into(), "fp32".into(), "int8".into()]);
        assert!(matches!(
            energy_correlation(&ENERGY_TABLE, ProcessNode::Nm45, EnergyMetric::Ace, &sel),
            Err(CostError::UnknownRow(_))
        ));
    }

    #[test]
    fn perfect_linear_relation() {
        let rows: Vec<EnergyRow> = (1..=4)
            .map(|i| row("x", Some(i as f64), Some(i as f64), Some(0.0), Some(0.0), Some(2.0 * i as f64), None))
            .collect();
        let r = energy_correlation(&rows, ProcessNode::Nm7, EnergyMetric::Cpu64, &RowSelection::Complete).unwrap();
        assert!((r - 1.0).abs() < 1e-12);
    }
}
