//! Summary tables over evaluation record files.
//!
//! Controllers named `variant@sN` are pooled by variant, so one table row
//! covers every training seed of that variant.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::{Path, PathBuf};

use mpcrrl_core::envsim::PERTURBATION_NAMES;

use crate::error::{CliError, Result};
use crate::eval::{read_accels, read_records, AccelRecord, EvalRecord, Summary, RECORD_HEADER};

pub const REPORT_DIR: &str = "report";

#[derive(Clone, Debug, PartialEq)]
pub struct GoalRow {
    pub controller: String,
    pub perturbation: String,
    pub value: String,
    pub goal: Summary,
    pub route_error_mean: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankRow {
    pub family: String,
    pub controller: String,
    pub median_goal_error: f64,
    pub rank: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AccelRow {
    pub controller: String,
    pub perturbation: String,
    pub value: String,
    pub episodes: usize,
    pub mean_abs_accel: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Report {
    pub goal: Vec<GoalRow>,
    pub ranks: Vec<RankRow>,
    /// Mean rank over the families each controller was evaluated on.
    pub avg_rank: BTreeMap<String, f64>,
    pub accel: Vec<AccelRow>,
}

/// Controller id with any `@seed` suffix removed.
pub fn variant_of(controller: &str) -> &str {
    controller.split('@').next().unwrap_or(controller)
}

/// 1-based ranks, ascending; tied values share the mean of their positions.
pub fn mid_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Sort key: family in table order, then numeric value.
fn cell_key(perturbation: &str, value: &str) -> (usize, String, u64, String) {
    let fam = PERTURBATION_NAMES
        .iter()
        .position(|n| *n == perturbation)
        .map_or(if perturbation == "none" { 0 } else { usize::MAX }, |i| i + 1);
    let num = value.parse::<f64>().map_or(u64::MAX, |v| {
        let b = v.to_bits();
        if v.is_sign_negative() { !b } else { b | 1 << 63 }
    });
    (fam, perturbation.to_string(), num, value.to_string())
}

pub fn build_report(records: &[EvalRecord], accels: &[AccelRecord]) -> Result<Report> {
    if records.is_empty() {
        return Err(CliError::Usage("no evaluation records to report".into()));
    }
    let mut cells: BTreeMap<(String, (usize, String, u64, String)), Vec<&EvalRecord>> = BTreeMap::new();
    for r in records {
        cells
            .entry((variant_of(&r.controller).to_string(), cell_key(&r.perturbation, &r.value)))
            .or_default()
            .push(r);
    }
    let goal = cells
        .iter()
        .map(|((c, key), rs)| {
            let g: Vec<f64> = rs.iter().map(|r| r.goal_error).collect();
            let re: Vec<f64> = rs.iter().map(|r| r.route_error_mean).collect();
            GoalRow {
                controller: c.clone(),
                perturbation: key.1.clone(),
                value: key.3.clone(),
                goal: Summary::of(&g).expect("non-empty group"),
                route_error_mean: Summary::of(&re).expect("non-empty group").median,
            }
        })
        .collect();

    let mut families: BTreeMap<(usize, String), BTreeMap<String, Vec<f64>>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.perturbation != "none") {
        let k = cell_key(&r.perturbation, &r.value);
        families
            .entry((k.0, k.1))
            .or_default()
            .entry(variant_of(&r.controller).to_string())
            .or_default()
            .push(r.goal_error);
    }
    let mut ranks = Vec::new();
    let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for ((_, fam), by_ctl) in &families {
        let names: Vec<&String> = by_ctl.keys().collect();
        let medians: Vec<f64> = by_ctl.values().map(|g| Summary::of(g).expect("non-empty").median).collect();
        for ((name, m), rk) in names.iter().zip(&medians).zip(mid_ranks(&medians)) {
            ranks.push(RankRow {
                family: fam.clone(),
                controller: (*name).clone(),
                median_goal_error: *m,
                rank: rk,
            });
            let e = sums.entry((*name).clone()).or_default();
            e.0 += rk;
            e.1 += 1;
        }
    }
    let avg_rank = sums.into_iter().map(|(c, (s, n))| (c, s / n as f64)).collect();

    let mut acc: BTreeMap<(String, (usize, String, u64, String)), Vec<f64>> = BTreeMap::new();
    for a in accels {
        acc.entry((variant_of(&a.controller).to_string(), cell_key(&a.perturbation, &a.value)))
            .or_default()
            .push(a.mean_abs_accel);
    }
    let accel = acc
        .into_iter()
        .map(|((c, key), v)| AccelRow {
            controller: c,
            perturbation: key.1,
            value: key.3,
            episodes: v.len(),
            mean_abs_accel: v.iter().sum::<f64>() / v.len() as f64,
        })
        .collect();
    Ok(Report {
        goal,
        ranks,
        avg_rank,
        accel,
    })
}

/// Record files under `dir`, skipping the report output directory.
fn find_csvs(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| CliError::Usage(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    entries.sort();
    for p in entries {
        if p.is_dir() {
            if p.file_name().is_some_and(|n| n != REPORT_DIR) {
                find_csvs(&p, out)?;
            }
        } else if p.extension().is_some_and(|e| e == "csv") {
            out.push(p);
        }
    }
    Ok(())
}

fn is_record_file(path: &Path) -> bool {
    csv::Reader::from_path(path)
        .and_then(|mut r| r.headers().map(|h| h.iter().eq(RECORD_HEADER.iter().copied())))
        .unwrap_or(false)
}

/// Load every record and acceleration file below `dir`.
pub fn load_results(dir: &Path) -> Result<(Vec<EvalRecord>, Vec<AccelRecord>)> {
    let mut files = Vec::new();
    find_csvs(dir, &mut files)?;
    let mut records = Vec::new();
    let mut accels = Vec::new();
    for f in files {
        if f.to_string_lossy().ends_with(".accel.csv") {
            accels.extend(read_accels(&f)?);
        } else if is_record_file(&f) {
            records.extend(read_records(&f)?);
        }
    }
    if records.is_empty() {
        return Err(CliError::Usage(format!("no evaluation records found under {}", dir.display())));
    }
    Ok((records, accels))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| CliError::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| CliError::io(path, e))
}

/// Write `goal_error.csv`, `ranks.csv`, `avg_rank.csv` and `acceleration.csv`
/// into `<dir>/report`.
pub fn write_report(dir: &Path, report: &Report) -> Result<PathBuf> {
    let out = dir.join(REPORT_DIR);
    std::fs::create_dir_all(&out).map_err(|e| CliError::io(&out, e))?;

    let mut s = String::from("controller,perturbation,value,episodes,median_goal_error,mean_goal_error,iqr_goal_error,median_route_error_mean\n");
    for r in &report.goal {
        s += &format!(
            "{},{},{},{},{},{},{},{}\n",
            r.controller,
            r.perturbation,
            r.value,
            r.goal.n,
            r.goal.median,
            r.goal.mean,
            r.goal.iqr(),
            r.route_error_mean
        );
    }
    write_file(&out.join("goal_error.csv"), &s)?;

    let mut s = String::from("family,controller,median_goal_error,rank\n");
    for r in &report.ranks {
        s += &format!("{},{},{},{}\n", r.family, r.controller, r.median_goal_error, r.rank);
    }
    write_file(&out.join("ranks.csv"), &s)?;

    let mut fams_ordered: Vec<&String> = report.ranks.iter().map(|r| &r.family).collect::<BTreeSet<_>>().into_iter().collect();
    fams_ordered.sort_by_key(|f| cell_key(f, ""));
    let mut s = String::from("controller");
    for f in &fams_ordered {
        s += &format!(",{f}");
    }
    s += ",avg_rank\n";
    for (c, avg) in &report.avg_rank {
        s += c;
        for f in &fams_ordered {
            let m = report.ranks.iter().find(|r| &r.family == *f && &r.controller == c);
            s += &m.map_or(",".to_string(), |r| format!(",{}", r.median_goal_error));
        }
        s += &format!(",{avg}\n");
    }
    write_file(&out.join("avg_rank.csv"), &s)?;

    let mut s = String::from("controller,perturbation,value,episodes,mean_abs_accel\n");
    for r in &report.accel {
        s += &format!("{},{},{},{},{}\n", r.controller, r.perturbation, r.value, r.episodes, r.mean_abs_accel);
    }
    write_file(&out.join("acceleration.csv"), &s)?;
    Ok(out)
}
