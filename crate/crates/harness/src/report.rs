//! Sweep outputs.
//!
//! `records.csv` has one row per run:
//! `framework,samples_per_class,repetition,seed,accuracy,kappa,macro_f1,f1_0,...`.
//! `aggregate.csv` has one row per (framework, grid entry, metric):
//! `framework,samples_per_class,metric,mean,std,n`.
//! `manifest.csv` lists the pool indices of every run:
//! `framework,samples_per_class,repetition,role,indices` with indices separated
//! by spaces. One `<metric>.svg` chart per metric. Floats are written in
//! shortest round-trip form, so files are byte-identical across reruns.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::config::Framework;
use crate::error::{io_error, HarnessError, Result};
use crate::experiment::SweepResult;

pub const RECORDS_FILE: &str = "records.csv";
pub const AGGREGATE_FILE: &str = "aggregate.csv";
pub const MANIFEST_FILE: &str = "manifest.csv";
pub const METRICS: [&str; 3] = ["accuracy", "kappa", "macro_f1"];
pub const AGGREGATE_HEADER: &str = "framework,samples_per_class,metric,mean,std,n";

/// The persisted part of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct RecordRow {
    pub framework: Framework,
    pub samples_per_class: usize,
    pub repetition: usize,
    pub seed: u64,
    pub accuracy: f64,
    pub kappa: f64,
    pub f1: Vec<f64>,
}

impl RecordRow {
    pub fn macro_f1(&self) -> f64 {
        mean(&self.f1)
    }

    pub fn metric(&self, name: &str) -> Option<f64> {
        match name {
            "accuracy" => Some(self.accuracy),
            "kappa" => Some(self.kappa),
            "macro_f1" => Some(self.macro_f1()),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Aggregate {
    pub framework: Framework,
    pub samples_per_class: usize,
    pub metric: &'static str,
    pub mean: f64,
    /// Sample standard deviation (n - 1); 0 for a single record.
    pub std: f64,
    pub n: usize,
}

pub fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn sample_std(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

/// Mean and deviation per (framework, grid entry, metric), in first-seen order.
pub fn aggregate(rows: &[RecordRow]) -> Vec<Aggregate> {
    let mut cells: Vec<(Framework, usize)> = Vec::new();
    for r in rows {
        if !cells.contains(&(r.framework, r.samples_per_class)) {
            cells.push((r.framework, r.samples_per_class));
        }
    }
    let mut out = Vec::new();
    for (framework, n) in cells {
        let members: Vec<&RecordRow> =
            rows.iter().filter(|r| r.framework == framework && r.samples_per_class == n).collect();
        for metric in METRICS {
            let vals: Vec<f64> = members.iter().filter_map(|r| r.metric(metric)).collect();
            out.push(Aggregate {
                framework,
                samples_per_class: n,
                metric,
                mean: mean(&vals),
                std: sample_std(&vals),
                n: vals.len(),
            });
        }
    }
    out
}

pub fn records_header(n_classes: usize) -> String {
    let mut h = String::from("framework,samples_per_class,repetition,seed,accuracy,kappa,macro_f1");
    for i in 0..n_classes {
        let _ = write!(h, ",f1_{i}");
    }
    h
}

pub fn records_csv(rows: &[RecordRow]) -> String {
    let n_classes = rows.first().map_or(0, |r| r.f1.len());
    let mut s = records_header(n_classes);
    s.push('\n');
    for r in rows {
        let _ = write!(
            s,
            "{},{},{},{},{},{},{}",
            r.framework,
            r.samples_per_class,
            r.repetition,
            r.seed,
            r.accuracy,
            r.kappa,
            r.macro_f1()
        );
        for v in &r.f1 {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    s
}

pub fn aggregate_csv(aggs: &[Aggregate]) -> String {
    let mut s = format!("{AGGREGATE_HEADER}\n");
    for a in aggs {
        let _ = writeln!(s, "{},{},{},{},{},{}", a.framework, a.samples_per_class, a.metric, a.mean, a.std, a.n);
    }
    s
}

pub fn manifest_csv(result: &SweepResult) -> String {
    let mut s = String::from("framework,samples_per_class,repetition,role,indices\n");
    for r in &result.records {
        for (role, idx) in [("train", &r.train), ("test", &r.test)] {
            let list: Vec<String> = idx.iter().map(usize::to_string).collect();
            let _ = writeln!(s, "{},{},{},{role},{}", r.framework, r.samples_per_class, r.repetition, list.join(" "));
        }
    }
    s
}

fn parse_err(path: &Path, line: usize, what: &str) -> HarnessError {
    HarnessError::Core(segxfer::Error::Format(format!("{}:{line}: {what}", path.display())))
}

pub fn read_records(path: &Path) -> Result<Vec<RecordRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| parse_err(path, 1, "empty file"))?;
    let n_classes = header.split(',').count().saturating_sub(7);
    if header != records_header(n_classes) {
        return Err(parse_err(path, 1, "unexpected header"));
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let ln = i + 2;
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 + n_classes {
            return Err(parse_err(path, ln, "wrong number of fields"));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| parse_err(path, ln, &format!("bad number `{s}`")));
        let int = |s: &str| s.parse::<u64>().map_err(|_| parse_err(path, ln, &format!("bad integer `{s}`")));
        rows.push(RecordRow {
            framework: f[0].parse()?,
            samples_per_class: int(f[1])? as usize,
            repetition: int(f[2])? as usize,
            seed: int(f[3])?,
            accuracy: num(f[4])?,
            kappa: num(f[5])?,
            f1: f[7..].iter().map(|s| num(s)).collect::<Result<_>>()?,
        });
    }
    Ok(rows)
}

fn color(f: Framework) -> &'static str {
    match f {
        Framework::Manual => "#1f77b4",
        Framework::Threshold => "#2ca02c",
        Framework::Scratch => "#d62728",
    }
}

/// Line chart of one metric: x = samples per class, y = mean, bars = +-std.
pub fn render_svg(aggs: &[Aggregate], metric: &str) -> String {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const L: f64 = 60.0;
    const R: f64 = 130.0;
    const T: f64 = 30.0;
    const B: f64 = 50.0;
    let pts: Vec<&Aggregate> = aggs.iter().filter(|a| a.metric == metric).collect();
    let xs: Vec<usize> = pts.iter().map(|a| a.samples_per_class).collect();
    let (xmin, xmax) = (
        xs.iter().copied().min().unwrap_or(0) as f64,
        xs.iter().copied().max().unwrap_or(1) as f64,
    );
    let xspan = if xmax > xmin { xmax - xmin } else { 1.0 };
    let (ymin, ymax) = if metric == "kappa" { (-1.0, 1.0) } else { (0.0, 1.0) };
    let px = |x: f64| L + (x - xmin) / xspan * (W - L - R);
    let py = |y: f64| H - B - (y.clamp(ymin, ymax) - ymin) / (ymax - ymin) * (H - T - B);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    );
    let _ = writeln!(s, r#"<title>{metric}</title>"#);
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let (x0, y0, x1, y1) = (L, H - B, W - R, T);
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>"#);
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>"#);
    let mut ticks = xs.clone();
    ticks.sort_unstable();
    ticks.dedup();
    for t in ticks {
        let x = px(t as f64);
        let _ = writeln!(s, r#"<text x="{x:.1}" y="{:.1}" font-size="11" text-anchor="middle">{t}</text>"#, y0 + 16.0);
    }
    for k in 0..=4 {
        let v = ymin + (ymax - ymin) * k as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" font-size="11" text-anchor="end">{v:.2}</text>"#,
            x0 - 6.0,
            py(v) + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" font-size="12" text-anchor="middle">samples per class</text>"#,
        (x0 + x1) / 2.0,
        H - 12.0
    );
    let mut frameworks: Vec<Framework> = Vec::new();
    for a in &pts {
        if !frameworks.contains(&a.framework) {
            frameworks.push(a.framework);
        }
    }
    for (i, f) in frameworks.iter().enumerate() {
        let mut line: Vec<&&Aggregate> = pts.iter().filter(|a| a.framework == *f).collect();
        line.sort_by_key(|a| a.samples_per_class);
        let points: Vec<String> = line
            .iter()
            .map(|a| format!("{:.2},{:.2}", px(a.samples_per_class as f64), py(a.mean)))
            .collect();
        let c = color(*f);
        let _ = writeln!(
            s,
            r#"<polyline data-framework="{f}" fill="none" stroke="{c}" stroke-width="2" points="{}"/>"#,
            points.join(" ")
        );
        for a in line {
            let x = px(a.samples_per_class as f64);
            let _ = writeln!(
                s,
                r#"<line class="error-bar" x1="{x:.2}" y1="{:.2}" x2="{x:.2}" y2="{:.2}" stroke="{c}"/>"#,
                py(a.mean - a.std),
                py(a.mean + a.std)
            );
        }
        let ly = T + 18.0 * i as f64 + 10.0;
        let _ = writeln!(
            s,
            r#"<line x1="{:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{c}" stroke-width="2"/>"#,
            x1 + 10.0,
            x1 + 30.0
        );
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" font-size="12">{f}</text>"#, x1 + 36.0, ly + 4.0);
    }
    s.push_str("</svg>\n");
    s
}

fn write(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| io_error(path, e))
}

pub fn write_records(path: &Path, result: &SweepResult) -> Result<()> {
    write(path, &records_csv(&result.rows()))
}

/// Write aggregate CSV and charts for `rows` into `dir`; returns the paths written.
pub fn emit_summary(rows: &[RecordRow], dir: &Path) -> Result<Vec<PathBuf>> {
    if rows.is_empty() {
        return Err(HarnessError::Core(segxfer::Error::Data("no records to report".into())));
    }
    std::fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    let aggs = aggregate(rows);
    let mut out = vec![dir.join(AGGREGATE_FILE)];
    write(&out[0], &aggregate_csv(&aggs))?;
    for m in METRICS {
        let p = dir.join(format!("{m}.svg"));
        write(&p, &render_svg(&aggs, m))?;
        out.push(p);
    }
    Ok(out)
}

/// Write every report file for a sweep into `dir`.
pub fn emit_report(result: &SweepResult, dir: &Path) -> Result<Vec<PathBuf>> {
    if result.records.is_empty() {
        return Err(HarnessError::Core(segxfer::Error::Data("no records to report".into())));
    }
    std::fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    let records = dir.join(RECORDS_FILE);
    write_records(&records, result)?;
    let manifest = dir.join(MANIFEST_FILE);
    write(&manifest, &manifest_csv(result))?;
    let mut out = vec![records, manifest];
    out.extend(emit_summary(&result.rows(), dir)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(f: Framework, n: usize, rep: usize, acc: f64) -> RecordRow {
        RecordRow {
            framework: f,
            samples_per_class: n,
            repetition: rep,
            seed: 7,
            accuracy: acc,
            kappa: acc - 0.5,
            f1: vec![acc, 1.0 - acc],
        }
    }

    #[test]
    fn std_uses_n_minus_one() {
        assert_eq!(sample_std(&[1.0, 3.0]), 2f64.sqrt());
        assert_eq!(sample_std(&[5.0]), 0.0);
        assert_eq!(mean(&[0.25, 0.75]), 0.5);
    }

    #[test]
    fn identical_records_aggregate_to_themselves() {
        let rows = vec![row(Framework::Manual, 2, 0, 0.625), row(Framework::Manual, 2, 1, 0.625)];
        let a = aggregate(&rows);
        assert_eq!(a.len(), 3);
        assert_eq!(a[0].mean, 0.625);
        assert_eq!(a[0].std, 0.0);
        assert_eq!(a[0].n, 2);
    }

    #[test]
    fn records_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![row(Framework::Scratch, 4, 0, 0.1), row(Framework::Threshold, 4, 1, 1.0 / 3.0)];
        let p = dir.path().join("r.csv");
        std::fs::write(&p, records_csv(&rows)).unwrap();
        assert_eq!(read_records(&p).unwrap(), rows);
    }
}
