use crate::metrics::MetricsReport;

pub const REPORT_COLUMNS: [&str; 8] = [
    "name",
    "acc1",
    "acc5",
    "acc10",
    "weighted_f1",
    "ndcg10",
    "parse_failure_rate",
    "n_samples",
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReportTables {
    pub text: String,
    pub csv: String,
}

fn cells(report: &MetricsReport, decimals: usize) -> Vec<String> {
    let num = |x: f64| format!("{x:.decimals$}");
    let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), num);
    vec![
        num(report.acc1),
        opt(report.acc5),
        opt(report.acc10),
        num(report.weighted_f1),
        opt(report.ndcg10),
        num(report.parse_failure_rate),
        report.n_samples.to_string(),
    ]
}

/// Comparison table, as aligned text and as CSV. Unreachable cutoffs are `-`.
pub fn render_report(rows: &[(String, MetricsReport)]) -> ReportTables {
    let mut csv = REPORT_COLUMNS.join(",");
    csv.push('\n');
    let mut grid: Vec<Vec<String>> = vec![REPORT_COLUMNS.iter().map(|s| s.to_string()).collect()];
    for (name, report) in rows {
        let mut row = vec![name.clone()];
        row.extend(cells(report, 6));
        csv.push_str(&row.iter().map(|c| csv_field(c)).collect::<Vec<_>>().join(","));
        csv.push('\n');
        let mut row = vec![name.clone()];
        row.extend(cells(report, 4));
        grid.push(row);
    }
    let widths: Vec<usize> = (0..REPORT_COLUMNS.len())
        .map(|c| grid.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut text = String::new();
    for row in &grid {
        let line: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(c, cell)| {
                if c == 0 {
                    format!("{cell:<w$}", w = widths[c])
                } else {
                    format!("{cell:>w$}", w = widths[c])
                }
            })
            .collect();
        text.push_str(line.join("  ").trim_end());
        text.push('\n');
    }
    ReportTables { text, csv }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(acc5: Option<f64>) -> MetricsReport {
        MetricsReport {
            acc1: 0.5,
            acc5,
            acc10: None,
            weighted_f1: 0.25,
            ndcg10: None,
            parse_failure_rate: 0.0,
            n_samples: 4,
        }
    }

    #[test]
    fn empty_input_gives_header_only() {
        let t = render_report(&[]);
        assert_eq!(t.csv, format!("{}\n", REPORT_COLUMNS.join(",")));
        assert_eq!(t.text.lines().count(), 1);
    }

    #[test]
    fn missing_cutoffs_render_as_dash() {
        let t = render_report(&[("k1".into(), report(None)), ("k5".into(), report(Some(0.75)))]);
        let lines: Vec<&str> = t.csv.lines().collect();
        assert_eq!(lines[1], "k1,0.500000,-,-,0.250000,-,0.000000,4");
        assert_eq!(lines[2], "k5,0.500000,0.750000,-,0.250000,-,0.000000,4");
        assert!(t.text.lines().nth(1).unwrap().contains(" - "));
    }

    #[test]
    fn names_with_commas_are_quoted() {
        let t = render_report(&[("a,b".into(), report(None))]);
        assert!(t.csv.lines().nth(1).unwrap().starts_with("\"a,b\","));
    }
}
