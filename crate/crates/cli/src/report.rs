//! Reducers over finished training runs: model selection and the
//! mean/std comparison tables.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use subpop_core::eval::{select_model, Candidate, CheckpointId};
use subpop_core::EvalReport;

use crate::args::{ReportArgs, SelectArgs};
use crate::commands::{write_file, write_manifest};
use crate::error::{CliError, Result};
use crate::manifest::{self, stamp, MANIFEST_FILE};

/// One evaluated row of a `metrics.tsv` log.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub epoch: usize,
    pub split: String,
    pub average_acc: f64,
    pub worst_group_acc: f64,
}

pub fn parse_metrics(text: &str) -> Result<Vec<MetricRow>> {
    let mut rows = Vec::new();
    let mut lines = text.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty());
    match lines.next() {
        Some(h) if h.starts_with("epoch\tsplit\t") => {}
        _ => return Err(CliError::Consistency("metric log without header".into())),
    }
    for line in lines {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() < 4 || f[2].is_empty() {
            continue;
        }
        let bad = || CliError::Consistency(format!("malformed metric row {line:?}"));
        rows.push(MetricRow {
            epoch: f[0].parse().map_err(|_| bad())?,
            split: f[1].to_string(),
            average_acc: f[2].parse().map_err(|_| bad())?,
            worst_group_acc: f[3].parse().map_err(|_| bad())?,
        });
    }
    Ok(rows)
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

/// `rep{r}` subdirectories in repeat order.
pub fn repeat_dirs(run: &Path) -> Result<Vec<PathBuf>> {
    let mut reps: Vec<(usize, PathBuf)> = fs::read_dir(run)
        .map_err(|e| CliError::io(run, e))?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().to_string_lossy().into_owned();
            let r = name.strip_prefix("rep")?.parse().ok()?;
            Some((r, e.path()))
        })
        .collect();
    reps.sort();
    if reps.is_empty() {
        return Err(CliError::Consistency(format!("{} has no completed repeats", run.display())));
    }
    Ok(reps.into_iter().map(|(_, p)| p).collect())
}

/// Population mean and standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Percent mean and std as `xx.x±y.y`.
pub fn pm(values: &[f64]) -> String {
    let (m, s) = mean_std(values);
    format!("{:.1}±{:.1}", 100.0 * m, 100.0 * s)
}

fn label(p: &Path) -> String {
    p.display().to_string()
}

pub fn select(args: &SelectArgs, pairs: &[(&str, String)], hash: &str) -> Result<()> {
    let mut per_run = Vec::new();
    for run in &args.runs {
        let reps = repeat_dirs(run)?;
        let logs = reps
            .iter()
            .map(|d| parse_metrics(&read_text(&d.join("metrics.tsv"))?))
            .collect::<Result<Vec<_>>>()?;
        per_run.push(logs);
    }
    let repeats = per_run[0].len();
    if per_run.iter().any(|l| l.len() != repeats) {
        return Err(CliError::Consistency("runs have different repeat counts".into()));
    }

    let mut out = String::from("repeat\trun\tepoch\tval_avg\tval_worst\ttest_avg\ttest_worst\n");
    for r in 0..repeats {
        let candidates: Vec<Candidate> = per_run
            .iter()
            .enumerate()
            .flat_map(|(i, logs)| {
                logs[r].iter().filter(|row| row.split == args.split).map(move |row| Candidate {
                    id: CheckpointId {
                        config: i,
                        epoch: row.epoch,
                    },
                    validation: EvalReport {
                        average_acc: row.average_acc,
                        group_acc: Vec::new(),
                        worst_group_acc: row.worst_group_acc,
                        counts: Vec::new(),
                        correct: Vec::new(),
                    },
                })
            })
            .collect();
        let best = select_model(&candidates).ok_or_else(|| {
            CliError::Consistency(format!("no {:?} rows to select from in repeat {r}", args.split))
        })?;
        let (i, epoch) = (best.id.config, best.id.epoch);
        let test = per_run[i][r].iter().find(|row| row.epoch == epoch && row.split == "test");
        let (ta, tw) = test.map_or((String::new(), String::new()), |t| {
            (format!("{:.6}", t.average_acc), format!("{:.6}", t.worst_group_acc))
        });
        out.push_str(&format!(
            "{r}\t{}\t{epoch}\t{:.6}\t{:.6}\t{ta}\t{tw}\n",
            label(&args.runs[i]),
            best.validation.average_acc,
            best.validation.worst_group_acc
        ));
    }
    fs::create_dir_all(&args.out).map_err(|e| CliError::io(&args.out, e))?;
    write_manifest(&args.out, "select", pairs, hash, None)?;
    write_file(&args.out.join("select.tsv"), stamp(hash) + &out)
}

#[derive(Default)]
struct MethodRuns {
    average: Vec<f64>,
    worst: Vec<f64>,
    /// Worst-group accuracy per epoch, one vector per repeat.
    series: Vec<BTreeMap<usize, f64>>,
}

pub fn report(args: &ReportArgs, pairs: &[(&str, String)], hash: &str) -> Result<()> {
    let mut dataset: Option<(String, PathBuf)> = None;
    let mut methods: BTreeMap<String, MethodRuns> = BTreeMap::new();
    for run in &args.runs {
        let m = manifest::read(&run.join(MANIFEST_FILE))?;
        let fp = m.comments.get("dataset").cloned().unwrap_or_default();
        match &dataset {
            Some((d, first)) if *d != fp => {
                return Err(CliError::Consistency(format!(
                    "mixed datasets: {} ({d}) vs {} ({fp})",
                    first.display(),
                    run.display()
                )))
            }
            Some(_) => {}
            None => dataset = Some((fp, run.clone())),
        }
        let method = m
            .get("method")
            .ok_or_else(|| CliError::Manifest(format!("{} records no method", run.display())))?
            .to_string();
        let entry = methods.entry(method).or_default();
        for rep in repeat_dirs(run)? {
            let rep_report = EvalReport::from_kv(&read_text(&rep.join(format!("report_{}.txt", args.split)))?)?;
            entry.average.push(rep_report.average_acc);
            entry.worst.push(rep_report.worst_group_acc);
            let rows = parse_metrics(&read_text(&rep.join("metrics.tsv"))?)?;
            entry.series.push(
                rows.iter()
                    .filter(|row| row.split == args.split)
                    .map(|row| (row.epoch, row.worst_group_acc))
                    .collect(),
            );
        }
    }

    let mut order: Vec<(&String, &MethodRuns)> = methods.iter().collect();
    order.sort_by(|a, b| {
        mean_std(&b.1.worst).0.total_cmp(&mean_std(&a.1.worst).0).then(a.0.cmp(b.0))
    });
    let mut table = String::from("method\trepeats\tavg_acc\tworst_acc\n");
    let mut stability = String::from("method\tepoch\tworst_mean\tworst_std\n");
    for (name, runs) in order {
        table.push_str(&format!(
            "{name}\t{}\t{}\t{}\n",
            runs.average.len(),
            pm(&runs.average),
            pm(&runs.worst)
        ));
        let epochs: std::collections::BTreeSet<usize> =
            runs.series.iter().flat_map(|s| s.keys().copied()).collect();
        for e in epochs {
            let vals: Vec<f64> = runs.series.iter().filter_map(|s| s.get(&e).copied()).collect();
            let (m, s) = mean_std(&vals);
            stability.push_str(&format!("{name}\t{e}\t{m:.6}\t{s:.6}\n"));
        }
    }
    fs::create_dir_all(&args.out).map_err(|e| CliError::io(&args.out, e))?;
    write_manifest(&args.out, "report", pairs, hash, dataset.as_ref().map(|(d, _)| d.as_str()))?;
    write_file(&args.out.join("table.tsv"), stamp(hash) + &table)?;
    write_file(&args.out.join("stability.tsv"), stamp(hash) + &stability)?;
    print!("{table}");
    Ok(())
}
