//! Tables shaped like the published ones and loss-curve plots, rendered
//! from run directories only, so regeneration is byte-stable.
//!
//! * `table2.csv`: rows are models, columns FID / IS mean / IS std per dataset
//! * `table4.csv`: per-class deviation, one row per (model, dataset)
//! * `table5.csv`: scaled per-class FID, one row per (model, dataset)
//! * `tables.md`, `report.json`, `loss-<model>-<dataset>.svg`

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use dgan::data::longtail::{DatasetManifest, DatasetRequest, Profile};
use dgan::data::store;
use dgan::trainer::run::{read_losses, LossRecord, RunDir};
use dgan::trainer::{TrainConfig, Variant};

use crate::records::{self, MetricRecord, Timing};
use crate::{CliError, CliResult, VERSION};

/// One run directory, loaded.
pub struct Run {
    pub id: String,
    pub variant: Variant,
    /// Column key: profile name, or the manifest name for custom datasets.
    pub dataset: String,
    pub config: TrainConfig,
    pub manifest: DatasetManifest,
    pub metrics: Vec<MetricRecord>,
    pub losses: Vec<LossRecord>,
    pub timings: Vec<Timing>,
}

fn dataset_key(m: &DatasetManifest) -> String {
    match &m.request {
        DatasetRequest::Profile { profile, .. } => profile.name().to_string(),
        DatasetRequest::Custom(_) => m.name.clone(),
    }
}

fn dataset_order(key: &str) -> (usize, String) {
    let rank = Profile::ALL.iter().position(|p| p.name() == key).unwrap_or(Profile::ALL.len());
    (rank, key.to_string())
}

fn dataset_label(key: &str) -> String {
    let mut c = key.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

pub fn load_run(path: &Path) -> CliResult<Run> {
    let dir = RunDir::new(path);
    if !dir.config().exists() {
        return Err(CliError::Runtime(format!("{} holds no run records (config.json missing)", path.display())));
    }
    let config = TrainConfig::load(&dir.config())?;
    if !dir.manifest().exists() {
        return Err(CliError::Runtime(format!("{} holds no dataset manifest", path.display())));
    }
    let manifest = store::read_manifest(&dir.manifest())?;
    let id = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string());
    Ok(Run {
        id,
        variant: config.variant,
        dataset: dataset_key(&manifest),
        losses: if dir.losses().exists() { read_losses(&dir.losses())? } else { Vec::new() },
        metrics: records::read_metrics(&dir)?,
        timings: records::read_timings(&dir)?,
        config,
        manifest,
    })
}

impl Run {
    /// The latest value of an aggregate metric; at equal steps the record
    /// written last wins.
    pub fn latest(&self, name: &str) -> Option<&MetricRecord> {
        self.metrics
            .iter()
            .filter(|r| r.name == name && r.class.is_none())
            .fold(None, |best: Option<&MetricRecord>, r| match best {
                Some(b) if b.step > r.step => Some(b),
                _ => Some(r),
            })
    }

    /// Latest per-class values of `name`, keyed by class name.
    pub fn latest_per_class(&self, name: &str) -> BTreeMap<String, f64> {
        let rows: Vec<&MetricRecord> = self.metrics.iter().filter(|r| r.name == name && r.class.is_some()).collect();
        let Some(step) = rows.iter().map(|r| r.step).max() else {
            return BTreeMap::new();
        };
        rows.into_iter()
            .filter(|r| r.step == step)
            .map(|r| (r.class.clone().expect("filtered"), r.value))
            .collect()
    }

    pub fn label(&self) -> &'static str {
        self.variant.label()
    }
}

#[derive(Serialize)]
struct RunSummary<'a> {
    run_id: &'a str,
    variant: &'a str,
    dataset: &'a str,
    dataset_hash: String,
    config: &'a TrainConfig,
    metrics: &'a [MetricRecord],
    timings: &'a [Timing],
}

#[derive(Serialize)]
struct ReportFile<'a> {
    version: &'a str,
    artifacts: &'a [String],
    runs: Vec<RunSummary<'a>>,
}

/// Render every table and plot into `out`; returns the written file names.
pub fn render(run_dirs: &[PathBuf], out: &Path) -> CliResult<Vec<String>> {
    if run_dirs.is_empty() {
        return Err(CliError::Usage("report needs at least one run directory".into()));
    }
    let runs: Vec<Run> = run_dirs.iter().map(|p| load_run(p)).collect::<CliResult<_>>()?;
    let mut cells: BTreeMap<(Variant, (usize, String)), &Run> = BTreeMap::new();
    for r in &runs {
        if let Some(prev) = cells.insert((r.variant, dataset_order(&r.dataset)), r) {
            log::warn!("runs {} and {} share the cell ({}, {}); using {}", prev.id, r.id, r.label(), r.dataset, r.id);
        }
    }
    let variants: Vec<Variant> = Variant::ALL.into_iter().filter(|v| runs.iter().any(|r| r.variant == *v)).collect();
    let datasets: Vec<(usize, String)> = runs.iter().map(|r| dataset_order(&r.dataset)).collect::<BTreeSet<_>>().into_iter().collect();

    let mut t2_csv = String::from("model");
    for (_, d) in &datasets {
        write!(t2_csv, ",{d}_fid,{d}_is_mean,{d}_is_std").expect("string write");
    }
    t2_csv.push('\n');
    let mut t2_md = String::from("| Model |");
    for (_, d) in &datasets {
        write!(t2_md, " {} FID | {} IS |", dataset_label(d), dataset_label(d)).expect("string write");
    }
    t2_md.push_str("\n|---|");
    t2_md.push_str(&"---:|---:|".repeat(datasets.len()));
    t2_md.push('\n');
    for v in &variants {
        let mut csv = v.label().to_string();
        let mut md = format!("| {} |", v.label());
        for d in &datasets {
            let run = cells
                .get(&(*v, d.clone()))
                .ok_or_else(|| CliError::Runtime(format!("missing cell ({}, {}, fid): no run", v.label(), d.1)))?;
            let get = |name: &str| {
                run.latest(name)
                    .ok_or_else(|| CliError::Runtime(format!("missing cell ({}, {}, {name}) in run {}", v.label(), d.1, run.id)))
            };
            let fid = get("fid")?.value;
            let is = get("is")?;
            let (is_mean, is_std) = (is.value, is.std.unwrap_or(0.0));
            write!(csv, ",{fid:.4},{is_mean:.4},{is_std:.4}").expect("string write");
            write!(md, " {fid:.2} | {is_mean:.2} ± {is_std:.2} |").expect("string write");
        }
        t2_csv.push_str(&csv);
        t2_csv.push('\n');
        t2_md.push_str(&md);
        t2_md.push('\n');
    }

    let ordered: Vec<&Run> = cells.values().copied().collect();
    let t4 = class_table(&ordered, "deviation", Some("deviation_mean"));
    let t5 = class_table(&ordered, "per_class_fid", None);

    fs::create_dir_all(out).map_err(|e| dgan::Error::io(format!("creating {}", out.display()), e))?;
    let mut written = Vec::new();
    let mut put = |name: &str, body: &str| -> CliResult<()> {
        let p = out.join(name);
        fs::write(&p, body).map_err(|e| dgan::Error::io(format!("writing {}", p.display()), e))?;
        written.push(name.to_string());
        Ok(())
    };
    put("table2.csv", &t2_csv)?;
    let mut md = format!("# Results\n\nGenerated by dgan {VERSION}.\n\n## FID and IS\n\n{t2_md}");
    if let Some((csv, table)) = &t4 {
        put("table4.csv", csv)?;
        write!(md, "\n## Class distribution deviation\n\n{table}").expect("string write");
    }
    if let Some((csv, table)) = &t5 {
        put("table5.csv", csv)?;
        write!(md, "\n## Per-class FID (scaled)\n\n{table}").expect("string write");
    }
    put("tables.md", &md)?;
    for r in &ordered {
        let name = format!("loss-{}-{}.svg", r.variant.name(), r.dataset);
        put(&name, &loss_plot(r))?;
    }
    let summary = ReportFile {
        version: VERSION,
        artifacts: &written,
        runs: ordered
            .iter()
            .map(|r| RunSummary {
                run_id: &r.id,
                variant: r.variant.name(),
                dataset: &r.dataset,
                dataset_hash: r.manifest.hash(),
                config: &r.config,
                metrics: &r.metrics,
                timings: &r.timings,
            })
            .collect(),
    };
    let json = serde_json::to_string_pretty(&summary).map_err(|e| dgan::Error::json("report", e))?;
    let p = out.join("report.json");
    fs::write(&p, json).map_err(|e| dgan::Error::io(format!("writing {}", p.display()), e))?;
    written.push("report.json".into());
    Ok(written)
}

/// CSV and markdown of a per-class metric, or `None` when no run has it.
fn class_table(runs: &[&Run], name: &str, mean: Option<&str>) -> Option<(String, String)> {
    let rows: Vec<(&Run, BTreeMap<String, f64>)> = runs
        .iter()
        .map(|r| (*r, r.latest_per_class(name)))
        .filter(|(_, m)| !m.is_empty())
        .collect();
    if rows.is_empty() {
        return None;
    }
    let names = &rows[0].0.manifest.class_names;
    let classes: Vec<&String> = names.iter().filter(|c| rows.iter().any(|(_, m)| m.contains_key(*c))).collect();
    let mut csv = String::from("model,dataset");
    let mut md = String::from("| Model | Dataset |");
    for c in &classes {
        write!(csv, ",{c}").expect("string write");
        write!(md, " {c} |").expect("string write");
    }
    if mean.is_some() {
        csv.push_str(",mean");
        md.push_str(" mean |");
    }
    csv.push('\n');
    md.push_str("\n|---|---|");
    md.push_str(&"---:|".repeat(classes.len() + mean.is_some() as usize));
    md.push('\n');
    for (r, m) in &rows {
        write!(csv, "{},{}", r.label(), r.dataset).expect("string write");
        write!(md, "| {} | {} |", r.label(), dataset_label(&r.dataset)).expect("string write");
        for c in &classes {
            match m.get(*c) {
                Some(v) => {
                    write!(csv, ",{v:.4}").expect("string write");
                    write!(md, " {v:.2} |").expect("string write");
                }
                None => {
                    csv.push(',');
                    md.push_str(" |");
                }
            }
        }
        if let Some(mn) = mean {
            match r.latest(mn) {
                Some(x) => {
                    write!(csv, ",{:.4}", x.value).expect("string write");
                    write!(md, " {:.2} |", x.value).expect("string write");
                }
                None => {
                    csv.push(',');
                    md.push_str(" |");
                }
            }
        }
        csv.push('\n');
        md.push('\n');
    }
    Some((csv, md))
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];
const MAX_POINTS: usize = 400;

/// Loss curves of one run as an SVG line plot; long series are averaged
/// into at most 400 points.
pub fn loss_plot(run: &Run) -> String {
    let (w, h, left, right, top, bottom) = (720.0, 400.0, 60.0, 150.0, 30.0, 40.0);
    let mut series: BTreeMap<&str, Vec<(f64, f64)>> = BTreeMap::new();
    let mut order: Vec<&str> = Vec::new();
    for r in &run.losses {
        if !series.contains_key(r.name.as_str()) {
            order.push(&r.name);
        }
        series.entry(&r.name).or_default().push((r.step as f64, r.value));
    }
    let reduced: Vec<(&str, Vec<(f64, f64)>)> = order
        .iter()
        .map(|n| {
            let pts = &series[n];
            let k = pts.len().div_ceil(MAX_POINTS).max(1);
            let avg = pts
                .chunks(k)
                .map(|c| {
                    let m = c.len() as f64;
                    (c.iter().map(|p| p.0).sum::<f64>() / m, c.iter().map(|p| p.1).sum::<f64>() / m)
                })
                .collect();
            (*n, avg)
        })
        .collect();
    let all = reduced.iter().flat_map(|(_, p)| p.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in all {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x0 > x1 {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 - x0 < 1e-12 {
        x1 = x0 + 1.0;
    }
    if y1 - y0 < 1e-12 {
        (y0, y1) = (y0 - 0.5, y1 + 0.5);
    }
    let (pw, ph) = (w - left - right, h - top - bottom);
    let sx = |x: f64| left + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| top + (1.0 - (y - y0) / (y1 - y0)) * ph;

    let mut s = String::new();
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="11">"#).expect("string write");
    writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#).expect("string write");
    writeln!(
        s,
        r#"<text x="{left}" y="18" font-size="13">{} / {} losses</text>"#,
        run.label(),
        dataset_label(&run.dataset)
    )
    .expect("string write");
    writeln!(
        s,
        r##"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>"##
    )
    .expect("string write");
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let (yv, xv) = (y0 + f * (y1 - y0), x0 + f * (x1 - x0));
        writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{yv:.3}</text>"#, left - 4.0, sy(yv) + 4.0).expect("string write");
        writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{xv:.0}</text>"#, sx(xv), h - bottom + 16.0).expect("string write");
    }
    writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">step</text>"#, left + pw / 2.0, h - 6.0).expect("string write");
    for (i, (name, pts)) in reduced.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="1.2" points="{}"/>"#, path.join(" ")).expect("string write");
        let ly = top + 14.0 + 16.0 * i as f64;
        writeln!(
            s,
            r#"<line x1="{:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"/><text x="{:.1}" y="{:.1}">{name}</text>"#,
            w - right + 10.0,
            w - right + 30.0,
            w - right + 35.0,
            ly + 4.0
        )
        .expect("string write");
    }
    s.push_str("</svg>\n");
    s
}
