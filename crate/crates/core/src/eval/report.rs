//! Evaluation reports: per-variant cost, gap against the reference
//! solver, wall time, and instance count.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct VariantReport {
    pub variant: String,
    pub mean_cost: f64,
    /// Mean of `(cost - ref) / ref` over the variant's instances.
    pub mean_gap: f64,
    pub wall_time_secs: f64,
    pub instances: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalReport {
    /// Which solver produced the reference costs. Desk-scale references
    /// (exhaustive enumeration, nearest-feasible construction) are not
    /// comparable to published heuristic baselines.
    pub reference: String,
    pub multi_start: usize,
    pub augmentations: usize,
    pub rows: Vec<VariantReport>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Table,
    Csv,
}

/// `x` to four significant digits.
fn sig4(x: f64) -> String {
    if x == 0.0 {
        return "0.000".to_string();
    }
    let mag = x.abs().log10().floor() as i32;
    let decimals = (3 - mag).max(0) as usize;
    format!("{:.*}", decimals, x)
}

fn fmt_gap(gap: f64) -> String {
    format!("{}%", sig4(gap * 100.0))
}

/// Renders the rows in a stable `(variant, cost, gap, time)` column order.
pub fn emit_report(report: &EvalReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Csv => {
            let mut out = String::from("variant,mean_cost,mean_gap,wall_time_secs,instances\n");
            for row in &report.rows {
                out.push_str(&format!(
                    "{},{:.6},{},{:.3},{}\n",
                    row.variant,
                    row.mean_cost,
                    fmt_gap(row.mean_gap),
                    row.wall_time_secs,
                    row.instances
                ));
            }
            out
        }
        ReportFormat::Table => {
            let mut out = String::new();
            out.push_str(&format!(
                "reference: {} | starts: {} | augmentations: {}\n",
                report.reference, report.multi_start, report.augmentations
            ));
            out.push_str(&format!(
                "{:<10} {:>12} {:>10} {:>10} {:>10}\n",
                "variant", "mean_cost", "gap", "time_s", "instances"
            ));
            for row in &report.rows {
                out.push_str(&format!(
                    "{:<10} {:>12.6} {:>10} {:>10.3} {:>10}\n",
                    row.variant,
                    row.mean_cost,
                    fmt_gap(row.mean_gap),
                    row.wall_time_secs,
                    row.instances
                ));
            }
            out
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> EvalReport {
        EvalReport {
            reference: "exhaustive".into(),
            multi_start: 4,
            augmentations: 8,
            rows: vec![
                VariantReport {
                    variant: "CVRP".into(),
                    mean_cost: 3.25,
                    mean_gap: 0.014454,
                    wall_time_secs: 1.5,
                    instances: 100,
                },
                VariantReport {
                    variant: "VRPTW".into(),
                    mean_cost: 4.5,
                    mean_gap: 0.0009588,
                    wall_time_secs: 2.0,
                    instances: 100,
                },
            ],
        }
    }

    #[test]
    fn empty_report_is_header_only() {
        let report = EvalReport {
            reference: "none".into(),
            multi_start: 1,
            augmentations: 1,
            rows: vec![],
        };
        let csv = emit_report(&report, ReportFormat::Csv);
        assert_eq!(csv.lines().count(), 1);
        assert!(csv.starts_with("variant,"));
    }

    #[test]
    fn gap_has_four_significant_digits() {
        assert_eq!(fmt_gap(0.014454), "1.445%");
        assert_eq!(fmt_gap(0.0009588), "0.09588%");
        assert_eq!(fmt_gap(0.12345), "12.35%");
        assert_eq!(fmt_gap(0.0), "0.000%");
    }

    #[test]
    fn csv_and_table_carry_identical_numbers() {
        let report = sample();
        let csv = emit_report(&report, ReportFormat::Csv);
        let table = emit_report(&report, ReportFormat::Table);
        for row in &report.rows {
            let cost = format!("{:.6}", row.mean_cost);
            let gap = fmt_gap(row.mean_gap);
            assert!(csv.contains(&cost) && table.contains(&cost));
            assert!(csv.contains(&gap) && table.contains(&gap));
        }
    }
}
