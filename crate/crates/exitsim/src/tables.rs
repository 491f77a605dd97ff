//! Plot-ready CSV tables: aggregate reports, accuracy/FLOPs frontiers,
//! per-sample decisions and policy points.

use std::path::Path;

use exitsim_core::engine::{AggregateReport, DecisionRecord};
use exitsim_core::optimizer::PolicyPoint;

use crate::error::{Error, Result};
use crate::fsutil;

fn num(v: f64) -> String {
    format!("{v}")
}

fn opt_num(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

fn finish(w: csv::Writer<Vec<u8>>) -> String {
    String::from_utf8(w.into_inner().expect("in-memory writer")).expect("csv output is utf-8")
}

/// One frontier row: a report plus the thresholds that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct FrontierRow {
    pub lambda: Vec<f64>,
    /// Empty for policies without prediction thresholds.
    pub gamma: Vec<f64>,
    pub report: AggregateReport,
}

/// Renders reports as CSV sorted by mean on-device FLOPs, ascending. Rows
/// with equal cost keep their input order.
pub fn frontier_csv(rows: &[FrontierRow]) -> String {
    let early = rows.iter().map(|r| r.lambda.len()).max().unwrap_or(0);
    let exits = rows.iter().map(|r| r.report.exit_distribution.len()).max().unwrap_or(0);
    let mut header: Vec<String> = vec!["method".into()];
    header.extend((1..=early).map(|i| format!("lambda_{i}")));
    header.extend((1..=early).map(|i| format!("gamma_{i}")));
    for h in [
        "samples",
        "accuracy",
        "mean_on_device_mflops",
        "predictor_mflops",
        "mean_total_mflops",
        "mean_latency_s",
        "budget_satisfied",
    ] {
        header.push(h.into());
    }
    header.extend((1..=exits).map(|i| format!("exit_{i}_share")));

    let mut order: Vec<&FrontierRow> = rows.iter().collect();
    order.sort_by(|a, b| a.report.mean_on_device_mflops.total_cmp(&b.report.mean_on_device_mflops));

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(&header).expect("in-memory write");
    for row in order {
        let r = &row.report;
        let mut rec: Vec<String> = vec![r.method.tag().into()];
        let cells = |v: &[f64]| (0..early).map(|i| v.get(i).map(|&x| num(x)).unwrap_or_default()).collect::<Vec<_>>();
        rec.extend(cells(&row.lambda));
        rec.extend(cells(&row.gamma));
        rec.push(r.samples.to_string());
        rec.push(num(r.accuracy));
        rec.push(num(r.mean_on_device_mflops));
        rec.push(num(r.predictor_mflops));
        rec.push(num(r.mean_total_mflops));
        rec.push(opt_num(r.mean_latency_s));
        rec.push(r.budget_satisfied.map(|b| b.to_string()).unwrap_or_default());
        rec.extend((0..exits).map(|i| r.exit_distribution.get(i).map(|&x| num(x)).unwrap_or_default()));
        w.write_record(&rec).expect("in-memory write");
    }
    finish(w)
}

pub fn records_csv(records: &[DecisionRecord]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "id",
        "exit_taken",
        "exits_computed",
        "on_device_mflops",
        "total_mflops",
        "transmitted",
        "transmitted_bits",
        "correct",
        "latency_s",
    ])
    .expect("in-memory write");
    for r in records {
        let computed: String = r.exits_computed.iter().map(|&c| if c { '1' } else { '0' }).collect();
        w.write_record([
            r.id.to_string(),
            r.exit_taken.to_string(),
            computed,
            num(r.on_device_mflops),
            num(r.total_mflops),
            r.transmitted.to_string(),
            r.transmitted_bits.to_string(),
            r.correct.to_string(),
            opt_num(r.latency_s),
        ])
        .expect("in-memory write");
    }
    finish(w)
}

pub fn policy_points_csv(points: &[PolicyPoint]) -> String {
    let early = points.iter().map(|p| p.lambda.len()).max().unwrap_or(0);
    let mut header = vec!["bandwidth".to_string()];
    header.extend((1..=early).map(|i| format!("lambda_{i}")));
    header.extend((1..=early).map(|i| format!("gamma_{i}")));
    header.extend(["accuracy", "latency_s", "mean_on_device_mflops", "feasible"].map(String::from));
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(&header).expect("in-memory write");
    for p in points {
        let mut rec = vec![num(p.bandwidth)];
        rec.extend(p.lambda.iter().map(|&v| num(v)));
        rec.extend(p.gamma.iter().map(|&v| num(v)));
        rec.extend([num(p.accuracy), num(p.latency_s), num(p.mean_on_device_mflops), p.feasible.to_string()]);
        w.write_record(&rec).expect("in-memory write");
    }
    finish(w)
}

pub fn policy_points_from_str(path: &Path, text: &str) -> Result<Vec<PolicyPoint>> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let header = rdr.headers().map_err(|e| Error::parse(path, Some(1), e))?.clone();
    let col = |name: &str| header.iter().position(|h| h == name);
    let prefixed = |prefix: &str| {
        let mut v: Vec<usize> = Vec::new();
        while let Some(i) = col(&format!("{prefix}_{}", v.len() + 1)) {
            v.push(i);
        }
        v
    };
    let lambda_cols = prefixed("lambda");
    let gamma_cols = prefixed("gamma");
    let required = |name: &str| col(name).ok_or_else(|| Error::parse(path, Some(1), format!("missing column {name:?}")));
    let (bw, acc, lat, flops, feas) = (
        required("bandwidth")?,
        required("accuracy")?,
        required("latency_s")?,
        required("mean_on_device_mflops")?,
        required("feasible")?,
    );
    if lambda_cols.is_empty() || lambda_cols.len() != gamma_cols.len() {
        return Err(Error::parse(path, Some(1), "lambda_i and gamma_i columns must pair up"));
    }
    let mut out = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| Error::parse(path, Some(line), e))?;
        let f = |c: usize| -> Result<f64> {
            row.get(c)
                .unwrap_or("")
                .parse::<f64>()
                .map_err(|e| Error::parse(path, Some(line), format!("column {:?}: {e}", &header[c])))
        };
        let feasible = match row.get(feas).unwrap_or("") {
            "true" => true,
            "false" => false,
            other => return Err(Error::parse(path, Some(line), format!("feasible must be true or false, found {other:?}"))),
        };
        out.push(PolicyPoint {
            bandwidth: f(bw)?,
            lambda: lambda_cols.iter().map(|&c| f(c)).collect::<Result<_>>()?,
            gamma: gamma_cols.iter().map(|&c| f(c)).collect::<Result<_>>()?,
            accuracy: f(acc)?,
            latency_s: f(lat)?,
            mean_on_device_mflops: f(flops)?,
            feasible,
        });
    }
    Ok(out)
}

pub fn save_policy_points(path: &Path, points: &[PolicyPoint]) -> Result<()> {
    fsutil::write_atomic(path, policy_points_csv(points).as_bytes())
}

pub fn load_policy_points(path: &Path) -> Result<Vec<PolicyPoint>> {
    policy_points_from_str(path, &fsutil::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use exitsim_core::engine::Method;

    fn report(method: Method, flops: f64) -> AggregateReport {
        AggregateReport {
            method,
            samples: 10,
            accuracy: 0.9,
            mean_on_device_mflops: flops,
            mean_total_mflops: flops + 1.0,
            predictor_mflops: 0.0,
            exit_distribution: vec![0.5, 0.25, 0.25],
            mean_latency_s: None,
            budget_satisfied: None,
        }
    }

    #[test]
    fn frontier_rows_sorted_by_flops() {
        let rows = vec![
            FrontierRow { lambda: vec![0.9, 0.8], gamma: vec![], report: report(Method::Plain, 40.0) },
            FrontierRow { lambda: vec![0.9, 0.8], gamma: vec![], report: report(Method::Oracle, 30.0) },
            FrontierRow { lambda: vec![0.9, 0.8], gamma: vec![0.1, 0.2], report: report(Method::Predictor, 35.0) },
        ];
        let csv = frontier_csv(&rows);
        let methods: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
        assert_eq!(methods, ["oracle", "predictor", "plain"]);
        assert!(csv.lines().next().unwrap().starts_with("method,lambda_1,lambda_2,gamma_1,gamma_2,samples"));
        assert!(csv.lines().nth(1).unwrap().ends_with(",0.5,0.25,0.25"));
    }

    #[test]
    fn single_report_gives_single_row() {
        let rows = vec![FrontierRow { lambda: vec![0.5, 0.5], gamma: vec![], report: report(Method::Plain, 1.0) }];
        assert_eq!(frontier_csv(&rows).lines().count(), 2);
    }

    #[test]
    fn policy_points_round_trip() {
        let pts = vec![
            PolicyPoint {
                bandwidth: 1e5,
                lambda: vec![0.2, 0.30000000000000004],
                gamma: vec![0.0, 0.05],
                accuracy: 0.8125,
                latency_s: 0.029999,
                mean_on_device_mflops: 31.5,
                feasible: true,
            },
            PolicyPoint {
                bandwidth: 3e5,
                lambda: vec![0.9, 0.9],
                gamma: vec![1.0, 1.0],
                accuracy: 1.0 / 3.0,
                latency_s: 0.5,
                mean_on_device_mflops: 90.0,
                feasible: false,
            },
        ];
        let text = policy_points_csv(&pts);
        assert!(text.starts_with("bandwidth,lambda_1,lambda_2,gamma_1,gamma_2,accuracy,latency_s"));
        assert_eq!(policy_points_from_str(Path::new("p.csv"), &text).unwrap(), pts);
    }

    #[test]
    fn bad_cell_reports_its_line() {
        let text = "bandwidth,lambda_1,gamma_1,accuracy,latency_s,mean_on_device_mflops,feasible\n1e5,0.5,0,0.9,0.01,3,true\n1e6,oops,0,0.9,0.01,3,true\n";
        match policy_points_from_str(Path::new("p.csv"), text).unwrap_err() {
            Error::Parse { line, message, .. } => {
                assert_eq!(line, Some(3));
                assert!(message.contains("lambda_1"));
            }
            other => panic!("{other:?}"),
        }
    }
}
