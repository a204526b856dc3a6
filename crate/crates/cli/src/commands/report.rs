use std::collections::BTreeMap;
use std::fmt::Write as _;

use anyhow::Result;
use log::{info, warn};

use metashift_core::eval::{
    aggregate, best_accuracy, finetune_speed, qq_residuals, AccuracyRecord, FinetuneResult,
};
use metashift_core::meta::{Algorithm, Sampling};
use metashift_core::nn::ArchName;

use crate::artifacts::{config_hash, read_csv_body, recorded_hash, write_svg, write_text, Layout};
use crate::config::Global;
use crate::failure;
use crate::plot::{line_chart, Point, Series};

type GroupKey = (Algorithm, ArchName, Sampling, usize, usize);

fn field<T: std::str::FromStr>(parts: &[&str], i: usize, line: usize) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    let raw = parts
        .get(i)
        .ok_or_else(|| failure::validation(format!("results line {line}: expected 9 columns")))?;
    raw.parse()
        .map_err(|e| failure::validation(format!("results line {line}, column {}: {e}", i + 1)))
}

pub fn parse_results(body: &str) -> Result<Vec<AccuracyRecord>> {
    let mut lines = body.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == AccuracyRecord::CSV_HEADER => {}
        _ => {
            return Err(failure::validation(
                "results file is empty or has an unexpected header",
            ))
        }
    }
    lines
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            let p: Vec<&str> = l.split(',').collect();
            let line = i + 1;
            Ok(AccuracyRecord {
                algorithm: field::<Algorithm>(&p, 0, line)?,
                architecture: field::<ArchName>(&p, 1, line)?,
                sampling: field::<Sampling>(&p, 2, line)?,
                n: field(&p, 3, line)?,
                k: field(&p, 4, line)?,
                task_id: field(&p, 5, line)?,
                ensemble: field(&p, 6, line)?,
                ft_epoch: field(&p, 7, line)?,
                accuracy: field(&p, 8, line)?,
            })
        })
        .collect()
}

/// Curves per group, keyed by (task, ensemble).
fn curves(records: &[AccuracyRecord]) -> BTreeMap<GroupKey, BTreeMap<(usize, usize), Vec<f64>>> {
    let mut out: BTreeMap<GroupKey, BTreeMap<(usize, usize), Vec<f64>>> = BTreeMap::new();
    for r in records {
        let curve = out
            .entry((r.algorithm, r.architecture, r.sampling, r.n, r.k))
            .or_default()
            .entry((r.task_id, r.ensemble))
            .or_default();
        if curve.len() <= r.ft_epoch {
            curve.resize(r.ft_epoch + 1, f64::NAN);
        }
        curve[r.ft_epoch] = r.accuracy;
    }
    out
}

/// `[task][ensemble]` table of `value(curve)`.
fn table(
    group: &BTreeMap<(usize, usize), Vec<f64>>,
    value: impl Fn(&[f64]) -> f64,
) -> Vec<Vec<f64>> {
    let mut by_task: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for (&(task, _), c) in group {
        by_task.entry(task).or_default().push(value(c));
    }
    by_task.into_values().collect()
}

fn key_prefix(k: &GroupKey) -> String {
    format!("{},{},{},{},{}", k.0, k.1, k.2, k.3, k.4)
}

fn label(k: &GroupKey) -> String {
    format!("{} ({})", k.0, k.2)
}

/// Aggregate tables, QQ pairs and line plots from the results file.
pub fn run(global: &Global, ood: bool) -> Result<()> {
    let layout = Layout::new(&global.out);
    let results = layout.results(ood);
    if !results.exists() {
        return Err(failure::missing(format!(
            "no results at {}; run `metashift eval` first",
            results.display()
        )));
    }
    let records = parse_results(&read_csv_body(&results)?)?;
    if records.is_empty() {
        return Err(failure::validation(format!(
            "{} contains no result rows",
            results.display()
        )));
    }
    let hash = config_hash(&(recorded_hash(&results), ood));
    let dir = layout.report(ood);
    let groups = curves(&records);

    let mut agg =
        String::from("algorithm,architecture,sampling,N,K,ft_epoch,mean,variance,ci_low,ci_high\n");
    let mut speed = String::from(
        "algorithm,architecture,sampling,N,K,speed,best_mean,best_ci_low,best_ci_high\n",
    );
    let mut qq = String::from("algorithm,architecture,sampling,N,K,theoretical,sample\n");
    let mut epoch_series: BTreeMap<(ArchName, usize, usize), Vec<Series>> = BTreeMap::new();
    let mut k_series: BTreeMap<
        (ArchName, usize),
        BTreeMap<(Algorithm, Sampling), (Series, Series)>,
    > = BTreeMap::new();

    for (key, group) in &groups {
        let epochs = group.values().map(Vec::len).max().unwrap_or(0);
        let mut points = Vec::with_capacity(epochs);
        for e in 0..epochs {
            let a = aggregate(&table(group, |c| c.get(e).copied().unwrap_or(f64::NAN)))
                .map_err(|err| failure::validation(format!("{}: {err}", key_prefix(key))))?;
            let _ = writeln!(
                agg,
                "{},{e},{:.9},{:.9e},{:.9},{:.9}",
                key_prefix(key),
                a.alpha,
                a.sigma2,
                a.ci_low,
                a.ci_high
            );
            points.push(Point {
                x: e as f64,
                y: a.alpha,
                band: Some((a.ci_low, a.ci_high)),
            });
        }
        epoch_series
            .entry((key.1, key.3, key.4))
            .or_default()
            .push(Series {
                label: label(key),
                points,
            });

        let results: Vec<FinetuneResult> = group
            .iter()
            .map(|(&(task, ensemble), c)| FinetuneResult {
                task,
                ensemble,
                k: key.4,
                accuracy: c.clone(),
            })
            .collect();
        let sp = finetune_speed(&results)?;
        let best = table(group, |c| {
            best_accuracy(&FinetuneResult {
                task: 0,
                ensemble: 0,
                k: 0,
                accuracy: c.to_vec(),
            })
            .0
        });
        let b = aggregate(&best)
            .map_err(|err| failure::validation(format!("{}: {err}", key_prefix(key))))?;
        let _ = writeln!(
            speed,
            "{},{sp:.9},{:.9},{:.9},{:.9}",
            key_prefix(key),
            b.alpha,
            b.ci_low,
            b.ci_high
        );
        let entry = k_series
            .entry((key.1, key.3))
            .or_default()
            .entry((key.0, key.2))
            .or_insert_with(|| {
                let s = Series {
                    label: label(key),
                    points: Vec::new(),
                };
                (s.clone(), s)
            });
        entry.0.points.push(Point {
            x: key.4 as f64,
            y: b.alpha,
            band: Some((b.ci_low, b.ci_high)),
        });
        entry.1.points.push(Point {
            x: key.4 as f64,
            y: sp,
            band: None,
        });

        match qq_residuals(&best) {
            Ok(q) => {
                if q.skipped_tasks > 0 {
                    warn!(
                        "{}: {} zero-variance tasks left out of the QQ pairs",
                        key_prefix(key),
                        q.skipped_tasks
                    );
                }
                for (t, s) in q.pairs {
                    let _ = writeln!(qq, "{},{t:.9},{s:.9}", key_prefix(key));
                }
            }
            Err(e) => warn!("{}: no QQ pairs ({e})", key_prefix(key)),
        }
    }

    write_text(&dir.join("aggregates.csv"), &hash, &agg)?;
    write_text(&dir.join("speed.csv"), &hash, &speed)?;
    write_text(&dir.join("qq.csv"), &hash, &qq)?;
    for ((arch, n, k), series) in &epoch_series {
        let svg = line_chart(
            &format!("{arch}, N={n}, K={k}"),
            "fine-tuning epoch",
            "accuracy",
            series,
        );
        write_svg(
            &dir.join(format!("accuracy_vs_epoch_{arch}_n{n}_k{k}.svg")),
            &hash,
            &svg,
        )?;
    }
    for ((arch, n), by_alg) in &k_series {
        let acc: Vec<Series> = by_alg.values().map(|v| v.0.clone()).collect();
        let spd: Vec<Series> = by_alg.values().map(|v| v.1.clone()).collect();
        write_svg(
            &dir.join(format!("accuracy_vs_k_{arch}_n{n}.svg")),
            &hash,
            &line_chart(&format!("{arch}, N={n}"), "K", "best accuracy", &acc),
        )?;
        write_svg(
            &dir.join(format!("speed_vs_k_{arch}_n{n}.svg")),
            &hash,
            &line_chart(
                &format!("{arch}, N={n}"),
                "K",
                "epochs to best accuracy",
                &spd,
            ),
        )?;
    }
    info!(
        "wrote report for {} groups to {}",
        groups.len(),
        dir.display()
    );
    Ok(())
}
