use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::config::Protocol;
use super::store::ResultRecord;
use crate::error::{Error, Result};
use crate::eval::{mean_std, significant};
use crate::pool::{MetricKind, TaskId};

/// Mean and spread of one (protocol, combo, task) cell over seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub protocol: Protocol,
    pub combo_id: String,
    pub task: TaskId,
    pub task_name: String,
    pub metric: MetricKind,
    pub seeds: usize,
    pub mean: f64,
    pub std: f64,
}

/// Per-task difference `first − second` between two protocols.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffRow {
    pub task: TaskId,
    pub task_name: String,
    pub metric: MetricKind,
    pub mean_first: f64,
    pub std_first: f64,
    pub mean_second: f64,
    pub std_second: f64,
    pub diff: f64,
    /// Twice the larger of the two standard deviations.
    pub error_bar: f64,
    pub significant: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReportFiles {
    pub summary_csv: PathBuf,
    /// One (csv, svg) pair per compared protocol pair.
    pub comparisons: Vec<(PathBuf, PathBuf)>,
}

/// Scores of every cell, sorted by seed so the sums are order independent.
fn cells(records: &[ResultRecord]) -> BTreeMap<(Protocol, String, TaskId), Vec<&ResultRecord>> {
    let mut out: BTreeMap<(Protocol, String, TaskId), Vec<&ResultRecord>> = BTreeMap::new();
    for r in records {
        out.entry((r.protocol, r.combo_id.clone(), r.target_task)).or_default().push(r);
    }
    for v in out.values_mut() {
        v.sort_by_key(|r| r.seed);
    }
    out
}

pub fn summarize(records: &[ResultRecord]) -> Vec<SummaryRow> {
    cells(records)
        .into_iter()
        .map(|((protocol, combo_id, task), rs)| {
            let scores: Vec<f64> = rs.iter().map(|r| r.score).collect();
            let (mean, std) = mean_std(&scores);
            SummaryRow {
                protocol,
                combo_id,
                task,
                task_name: rs[0].task_name.clone(),
                metric: rs[0].metric_kind,
                seeds: scores.len(),
                mean,
                std,
            }
        })
        .collect()
}

/// Per-task differences on the tasks both protocols scored. Each protocol
/// must have a single combo per task.
pub fn compare(records: &[ResultRecord], first: Protocol, second: Protocol) -> Result<Vec<DiffRow>> {
    let summary = summarize(records);
    let per_task = |p: Protocol| -> Result<BTreeMap<TaskId, &SummaryRow>> {
        let mut m = BTreeMap::new();
        for row in summary.iter().filter(|r| r.protocol == p) {
            if m.insert(row.task, row).is_some() {
                return Err(Error::InvalidArgument(format!(
                    "protocol {} has several combos on task {}; it cannot be compared per task",
                    p.name(),
                    row.task_name
                )));
            }
        }
        Ok(m)
    };
    let a = per_task(first)?;
    let b = per_task(second)?;
    Ok(a.iter()
        .filter_map(|(t, ra)| b.get(t).map(|rb| (ra, rb)))
        .map(|(ra, rb)| DiffRow {
            task: ra.task,
            task_name: ra.task_name.clone(),
            metric: ra.metric,
            mean_first: ra.mean,
            std_first: ra.std,
            mean_second: rb.mean,
            std_second: rb.std,
            diff: ra.mean - rb.mean,
            error_bar: 2.0 * ra.std.max(rb.std),
            significant: significant(ra.mean, ra.std, rb.mean, rb.std),
        })
        .collect())
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut s = String::from("protocol,combo_id,task,task_name,metric,seeds,mean,std\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.protocol.name(),
            csv_field(&r.combo_id),
            r.task,
            csv_field(&r.task_name),
            r.metric,
            r.seeds,
            r.mean,
            r.std
        );
    }
    s
}

pub fn diff_csv(rows: &[DiffRow]) -> String {
    let mut s = String::from("task,task_name,metric,mean_first,std_first,mean_second,std_second,diff,error_bar,significant\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{}",
            r.task,
            csv_field(&r.task_name),
            r.metric,
            r.mean_first,
            r.std_first,
            r.mean_second,
            r.std_second,
            r.diff,
            r.error_bar,
            r.significant
        );
    }
    s
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Bar chart of differences with error bars; significant bars are filled
/// darker.
pub fn diff_svg(rows: &[DiffRow], title: &str) -> String {
    let (bar_w, gap, left, top, plot_h) = (36.0, 18.0, 60.0, 40.0, 240.0);
    let width = left + rows.len().max(1) as f64 * (bar_w + gap) + gap;
    let height = top + plot_h + 90.0;
    let extent = rows
        .iter()
        .map(|r| r.diff.abs() + r.error_bar)
        .fold(0.0f64, f64::max)
        .max(1e-3)
        * 1.1;
    let y = |v: f64| top + plot_h / 2.0 - v / extent * (plot_h / 2.0);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<text x="{left}" y="20" font-size="13">{}</text>"#, xml_escape(title));
    let _ = writeln!(
        s,
        r#"<line x1="{left}" y1="{z:.2}" x2="{x2:.2}" y2="{z:.2}" stroke="black"/>"#,
        z = y(0.0),
        x2 = width - gap
    );
    for tick in [-extent, -extent / 2.0, extent / 2.0, extent] {
        let _ = writeln!(
            s,
            r#"<text x="{x}" y="{yy:.2}" text-anchor="end">{tick:+.3}</text>"#,
            x = left - 6.0,
            yy = y(tick) + 4.0
        );
    }
    for (i, r) in rows.iter().enumerate() {
        let x = left + gap + i as f64 * (bar_w + gap);
        let (y0, y1) = (y(0.0), y(r.diff));
        let fill = if r.significant { "#2b5d8a" } else { "#9bbbd9" };
        let _ = writeln!(
            s,
            r#"<rect x="{x:.2}" y="{ry:.2}" width="{bar_w}" height="{rh:.2}" fill="{fill}"><title>{name}: {d:+.4} ± {e:.4}</title></rect>"#,
            ry = y0.min(y1),
            rh = (y1 - y0).abs(),
            name = xml_escape(&r.task_name),
            d = r.diff,
            e = r.error_bar
        );
        let cx = x + bar_w / 2.0;
        let (lo, hi) = (y(r.diff - r.error_bar), y(r.diff + r.error_bar));
        let _ = writeln!(
            s,
            r#"<path d="M{cx:.2} {lo:.2} V{hi:.2} M{a:.2} {lo:.2} H{b:.2} M{a:.2} {hi:.2} H{b:.2}" stroke="black"/>"#,
            a = cx - 6.0,
            b = cx + 6.0
        );
        let ly = top + plot_h + 12.0;
        let _ = writeln!(
            s,
            r#"<text x="{cx:.2}" y="{ly:.2}" transform="rotate(45 {cx:.2} {ly:.2})">{}</text>"#,
            xml_escape(&r.task_name)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Writes `summary.csv` and, for each pair whose protocols both have
/// records, `diff_<first>_vs_<second>.csv` plus a matching `.svg`.
pub fn emit_report(records: &[ResultRecord], out_dir: &Path, pairs: &[(&str, &str)]) -> Result<ReportFiles> {
    if records.is_empty() {
        return Err(Error::InvalidArgument("no result records to report".into()));
    }
    let pairs = pairs
        .iter()
        .map(|(a, b)| Ok((Protocol::parse(a)?, Protocol::parse(b)?)))
        .collect::<Result<Vec<_>>>()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let summary_path = out_dir.join("summary.csv");
    fs::write(&summary_path, summary_csv(&summarize(records))).map_err(|e| Error::io(&summary_path, e))?;
    let present: BTreeSet<Protocol> = records.iter().map(|r| r.protocol).collect();
    let mut comparisons = Vec::new();
    for (a, b) in pairs {
        if a == b || !present.contains(&a) || !present.contains(&b) {
            continue;
        }
        let rows = compare(records, a, b)?;
        let stem = format!("diff_{}_vs_{}", a.name(), b.name());
        let csv = out_dir.join(format!("{stem}.csv"));
        let svg = out_dir.join(format!("{stem}.svg"));
        fs::write(&csv, diff_csv(&rows)).map_err(|e| Error::io(&csv, e))?;
        let title = format!("{} minus {} (error bars: 2 × max std)", a.name(), b.name());
        fs::write(&svg, diff_svg(&rows, &title)).map_err(|e| Error::io(&svg, e))?;
        comparisons.push((csv, svg));
    }
    Ok(ReportFiles {
        summary_csv: summary_path,
        comparisons,
    })
}

/// Pairs charted by default: each protocol against the baseline it is
/// expected to beat.
pub const DEFAULT_COMPARISONS: [(&str, &str); 4] = [
    ("feature-extraction", "scratch"),
    ("fine-tune", "feature-extraction"),
    ("joint", "fine-tune"),
    ("fine-tune", "single-source"),
];

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workbench::store::RECORD_SCHEMA_VERSION;

    fn rec(protocol: Protocol, task: u32, seed: u64, score: f64) -> ResultRecord {
        ResultRecord {
            schema_version: RECORD_SCHEMA_VERSION,
            protocol,
            combo_id: "c".into(),
            target_task: TaskId(task),
            task_name: format!("task{task}"),
            seed,
            metric_kind: MetricKind::Accuracy,
            score,
            started_at: 0,
            finished_at: 0,
            config_hash: "h".into(),
            extra: serde_json::Value::Null,
        }
    }

    #[test]
    fn difference_bar_uses_twice_the_larger_std() {
        let a = [0.80, 0.82, 0.84, 0.86, 0.88];
        let b = [0.70, 0.71, 0.72, 0.73, 0.74];
        let mut records = Vec::new();
        for (i, (&x, &y)) in a.iter().zip(&b).enumerate() {
            records.push(rec(Protocol::FineTune, 0, i as u64, x));
            records.push(rec(Protocol::Scratch, 0, i as u64, y));
        }
        let rows = compare(&records, Protocol::FineTune, Protocol::Scratch).unwrap();
        let (ma, sa) = mean_std(&a);
        let (mb, sb) = mean_std(&b);
        assert_eq!(rows.len(), 1);
        assert!((rows[0].diff - (ma - mb)).abs() < 1e-12);
        assert!((rows[0].error_bar - 2.0 * sa.max(sb)).abs() < 1e-12);
    }

    #[test]
    fn clear_gap_is_flagged_significant() {
        assert!(significant(0.90, 0.01, 0.85, 0.02));
        let records = vec![
            rec(Protocol::FineTune, 0, 0, 0.90),
            rec(Protocol::FineTune, 0, 1, 0.91),
            rec(Protocol::Scratch, 0, 0, 0.85),
            rec(Protocol::Scratch, 0, 1, 0.86),
        ];
        assert!(compare(&records, Protocol::FineTune, Protocol::Scratch).unwrap()[0].significant);
    }

    #[test]
    fn single_protocol_gives_table_only() {
        let dir = tempfile::tempdir().unwrap();
        let records = vec![rec(Protocol::Scratch, 0, 0, 0.5), rec(Protocol::Scratch, 0, 1, 0.6)];
        let files = emit_report(&records, dir.path(), &DEFAULT_COMPARISONS).unwrap();
        assert!(files.summary_csv.exists());
        assert!(files.comparisons.is_empty());
    }

    #[test]
    fn unknown_protocol_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let records = vec![rec(Protocol::Scratch, 0, 0, 0.5)];
        assert!(matches!(
            emit_report(&records, dir.path(), &[("scratch", "magic")]),
            Err(Error::UnknownProtocol(_))
        ));
    }

    #[test]
    fn two_protocols_emit_csv_and_svg() {
        let dir = tempfile::tempdir().unwrap();
        let records = vec![
            rec(Protocol::FeatureExtraction, 0, 0, 0.7),
            rec(Protocol::FeatureExtraction, 0, 1, 0.8),
            rec(Protocol::Scratch, 0, 0, 0.5),
            rec(Protocol::Scratch, 0, 1, 0.6),
        ];
        let files = emit_report(&records, dir.path(), &DEFAULT_COMPARISONS).unwrap();
        assert_eq!(files.comparisons.len(), 1);
        let svg = fs::read_to_string(&files.comparisons[0].1).unwrap();
        assert!(svg.starts_with("<svg") && svg.contains("<rect"));
        let csv = fs::read_to_string(&files.comparisons[0].0).unwrap();
        let fields: Vec<&str> = csv.lines().nth(1).unwrap().split(',').collect();
        let diff: f64 = fields[7].parse().unwrap();
        assert!((diff - 0.2).abs() < 1e-12);
    }
}
