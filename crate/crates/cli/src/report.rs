//! Report emission: a markdown summary plus two SVG panels (score curves and
//! the layer-selection histogram), all derived purely from a finished run
//! directory. Everything is built in memory first — a failing run dir never
//! leaves partial report files behind.

use crate::svg;
use crate::CliError;
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub t: f64,
    pub f: f64,
    pub r: f64,
    pub fq: f64,
    pub rq: f64,
    pub fd: f64,
    pub ru: f64,
}

#[derive(Debug)]
pub struct RunDirData {
    pub metrics: Vec<MetricsRow>,
    /// Times each block was selected for update, indexed by block.
    pub selections: Vec<usize>,
}

fn required(dir: &Path, name: &str) -> Result<String, CliError> {
    let path = dir.join(name);
    std::fs::read_to_string(&path)
        .map_err(|_| CliError::Report(format!("missing {name} in {}", dir.display())))
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricsRow>, CliError> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let head = rdr.headers().map_err(|e| CliError::Report(e.to_string()))?.clone();
    let col = |name: &str| -> Result<usize, CliError> {
        head.iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| CliError::Report(format!("metrics.csv lacks column `{name}`")))
    };
    let (ct, cf, cr, cfq, crq, cfd, cru) = (
        col("t")?,
        col("f")?,
        col("r")?,
        col("fq")?,
        col("rq")?,
        col("fd")?,
        col("ru")?,
    );
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| CliError::Report(e.to_string()))?;
        let num = |i: usize| -> Result<f64, CliError> {
            rec.get(i)
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| CliError::Report(format!("bad metrics row: {rec:?}")))
        };
        out.push(MetricsRow {
            t: num(ct)?,
            f: num(cf)?,
            r: num(cr)?,
            fq: num(cfq)?,
            rq: num(crq)?,
            fd: num(cfd)?,
            ru: num(cru)?,
        });
    }
    if out.is_empty() {
        return Err(CliError::Report("metrics.csv has no checkpoint rows".into()));
    }
    Ok(out)
}

pub fn parse_selection_counts(text: &str, n_blocks: Option<usize>) -> Result<Vec<usize>, CliError> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| CliError::Report(e.to_string()))?;
        let block = rec.get(1).unwrap_or("").trim();
        let selected = rec.get(3).unwrap_or("").trim();
        if block.is_empty() {
            continue; // filtered-to-empty request rows carry no block
        }
        let b: usize = block
            .parse()
            .map_err(|_| CliError::Report(format!("bad attribution row: {rec:?}")))?;
        *counts.entry(b).or_default() += usize::from(selected == "true");
    }
    let n = n_blocks
        .or_else(|| counts.keys().max().map(|&b| b + 1))
        .ok_or_else(|| CliError::Report("attribution.csv has no block rows".into()))?;
    Ok((0..n).map(|b| counts.get(&b).copied().unwrap_or(0)).collect())
}

pub fn read_run_dir(dir: &Path) -> Result<RunDirData, CliError> {
    let metrics = parse_metrics_csv(&required(dir, "metrics.csv")?)?;
    let n_blocks = std::fs::read_to_string(dir.join("config.json"))
        .ok()
        .and_then(|s| serde_json::from_str::<serde_json::Value>(&s).ok())
        .and_then(|v| v.pointer("/model/n_blocks").and_then(|n| n.as_u64()))
        .map(|n| n as usize);
    let selections = parse_selection_counts(&required(dir, "attribution.csv")?, n_blocks)?;
    Ok(RunDirData { metrics, selections })
}

pub struct Report {
    pub markdown: String,
    pub curves_svg: String,
    pub hist_svg: String,
}

pub fn render(data: &RunDirData) -> Report {
    let fd: Vec<(f64, f64)> = data.metrics.iter().map(|m| (m.t, m.fd)).collect();
    let ru: Vec<(f64, f64)> = data.metrics.iter().map(|m| (m.t, m.ru)).collect();
    let yhi = fd
        .iter()
        .chain(&ru)
        .map(|p| p.1)
        .fold(1.0f64, f64::max);
    let curves_svg = svg::line_chart(
        "Forget degree and retain utility over the request stream",
        "requests processed",
        "score",
        (0.0, yhi),
        &[("F.D.", "crimson", fd), ("R.U.", "steelblue", ru)],
    );
    let bars: Vec<(String, f64)> = data
        .selections
        .iter()
        .enumerate()
        .map(|(b, &c)| (b.to_string(), c as f64))
        .collect();
    let hist_svg = svg::bar_chart(
        "Blocks selected for update",
        "block",
        "times selected",
        &bars,
    );

    let last = data.metrics.last().unwrap();
    let mut md = String::from("# Run report\n\n");
    md.push_str(&format!(
        "{} checkpoints over t = {:.0} … {:.0}. Final F.D. **{:.4}**, final R.U. **{:.4}**.\n\n",
        data.metrics.len(),
        data.metrics.first().unwrap().t,
        last.t,
        last.fd,
        last.ru
    ));
    md.push_str("| t | F.D. | R.U. | F | R | FQ | RQ |\n|--:|--:|--:|--:|--:|--:|--:|\n");
    for m in &data.metrics {
        md.push_str(&format!(
            "| {:.0} | {:.4} | {:.4} | {:.4} | {:.4} | {:.4} | {:.4} |\n",
            m.t, m.fd, m.ru, m.f, m.r, m.fq, m.rq
        ));
    }
    md.push_str("\n![score curves](fd_ru.svg)\n\n## Layer selections\n\n");
    md.push_str("| block | times selected |\n|--:|--:|\n");
    for (b, c) in data.selections.iter().enumerate() {
        md.push_str(&format!("| {b} | {c} |\n"));
    }
    md.push_str("\n![selection histogram](selection_hist.svg)\n");
    Report { markdown: md, curves_svg, hist_svg }
}

/// Build the full report from `run`, then write it into `out` (defaults to
/// the run dir). Nothing is written until every piece has rendered.
pub fn emit(run: &Path, out: Option<&Path>) -> Result<(), CliError> {
    let data = read_run_dir(run)?;
    let report = render(&data);
    let out = out.unwrap_or(run);
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("report.md"), &report.markdown)?;
    std::fs::write(out.join("fd_ru.svg"), &report.curves_svg)?;
    std::fs::write(out.join("selection_hist.svg"), &report.hist_svg)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const METRICS: &str = "\
t,f,r,fq,rq,fd,ru,uf_prob,uf_rouge,uf_acc,ur_prob,ur_rouge,ur_acc,bf_prob,bf_rouge,bf_acc,br_prob,br_rouge,br_acc
0,0.9,0.92,0.91,0.93,1,1,0,0,0,0,0,0,0,0,0,0,0,0
5,0.4,0.9,0.89,0.93,0.55,0.968,0,0,0,0,0,0,0,0,0,0,0,0
";

    const ATTRIBUTION: &str = "\
request_id,block,score,selected
r1,0,0.5,true
r1,1,0.1,false
r2,0,0.2,false
r2,1,0.9,true
r3,,,skipped-empty
";

    #[test]
    fn metrics_rows_parse_by_header_name() {
        let rows = parse_metrics_csv(METRICS).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[1].t, 5.0);
        assert_eq!(rows[1].fd, 0.55);
        assert_eq!(rows[1].ru, 0.968);
    }

    #[test]
    fn selection_counts_skip_empty_requests_and_cover_all_blocks() {
        let counts = parse_selection_counts(ATTRIBUTION, Some(3)).unwrap();
        assert_eq!(counts, vec![1, 1, 0]);
        let counts = parse_selection_counts(ATTRIBUTION, None).unwrap();
        assert_eq!(counts, vec![1, 1]);
    }

    #[test]
    fn rendered_series_match_the_csv_through_the_pixel_transform() {
        let data = RunDirData {
            metrics: parse_metrics_csv(METRICS).unwrap(),
            selections: vec![1, 1, 0],
        };
        let rep = render(&data);
        for m in &data.metrics {
            let coord = format!(
                "{},{}",
                svg::fmt_px(svg::px_x(m.t, 0.0, 5.0)),
                svg::fmt_px(svg::px_y(m.fd, 0.0, 1.0)),
            );
            assert!(rep.curves_svg.contains(&coord), "fd point {coord} missing");
        }
        assert!(rep.hist_svg.contains("data-value=\"1\""));
        assert!(rep.markdown.contains("| 5 | 0.5500 | 0.9680 |"));
    }

    #[test]
    fn rendering_is_deterministic() {
        let data = RunDirData {
            metrics: parse_metrics_csv(METRICS).unwrap(),
            selections: vec![2, 0],
        };
        let a = render(&data);
        let b = render(&data);
        assert_eq!(a.markdown, b.markdown);
        assert_eq!(a.curves_svg, b.curves_svg);
        assert_eq!(a.hist_svg, b.hist_svg);
    }

    #[test]
    fn missing_inputs_error_before_any_file_is_written() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("out");
        let err = emit(dir.path(), Some(&out)).unwrap_err();
        assert!(err.to_string().contains("metrics.csv"), "{err}");
        assert!(!out.exists(), "no partial report files");
    }
}
