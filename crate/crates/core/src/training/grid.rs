use std::fmt::Write as _;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use super::run::{run_experiment, RunOutcome};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};

/// One swept config key and its values.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GridAxis {
    pub key: String,
    pub values: Vec<String>,
}

/// Parses `section.key=v1,v2,...`. Values are split on `|` when one is
/// present (for values that themselves contain commas), otherwise on `,`.
pub fn parse_grid_axis(s: &str) -> Result<GridAxis> {
    let (key, vals) = s
        .split_once('=')
        .ok_or_else(|| Error::InvalidArgument(format!("grid axis `{s}` must look like section.key=v1,v2")))?;
    let sep = if vals.contains('|') { '|' } else { ',' };
    let values: Vec<String> = vals
        .split(sep)
        .map(|v| v.trim().to_string())
        .filter(|v| !v.is_empty())
        .collect();
    if values.is_empty() {
        return Err(Error::EmptyGrid);
    }
    Ok(GridAxis {
        key: key.trim().to_string(),
        values,
    })
}

/// Cartesian product of the axes; the first axis varies slowest.
pub fn grid_points(axes: &[GridAxis]) -> Result<Vec<Vec<(String, String)>>> {
    if axes.is_empty() || axes.iter().any(|a| a.values.is_empty()) {
        return Err(Error::EmptyGrid);
    }
    let mut points = vec![Vec::new()];
    for axis in axes {
        points = points
            .into_iter()
            .flat_map(|p: Vec<(String, String)>| {
                axis.values.iter().map(move |v| {
                    let mut q = p.clone();
                    q.push((axis.key.clone(), v.clone()));
                    q
                })
            })
            .collect();
    }
    Ok(points)
}

#[derive(Debug, Clone)]
pub struct GridResult {
    /// Position in the Cartesian enumeration.
    pub index: usize,
    pub assignments: Vec<(String, String)>,
    pub outcome: RunOutcome,
}

impl GridResult {
    pub fn status(&self) -> String {
        match &self.outcome.divergence {
            None => "ok".into(),
            Some(e) => e.to_string(),
        }
    }
}

/// Trains every grid point, at most `jobs` at a time, and returns the
/// results ranked by best dev perplexity. A diverging point is recorded and
/// ranked after the points that produced a finite dev perplexity.
pub fn grid_search(
    base: &ExperimentConfig,
    axes: &[GridAxis],
    jobs: usize,
    out: Option<&Path>,
) -> Result<Vec<GridResult>> {
    let points = grid_points(axes)?;
    let configs: Vec<ExperimentConfig> = points
        .iter()
        .map(|p| {
            let mut c = base.clone();
            for (k, v) in p {
                c.set(k, v)?;
            }
            Ok(c)
        })
        .collect::<Result<_>>()?;

    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<RunOutcome>>>> = Mutex::new((0..points.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..jobs.clamp(1, points.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= configs.len() {
                    break;
                }
                let dir = out.map(|o| o.join(format!("point-{:03}", i + 1)));
                let r = run_experiment(&configs[i], dir.as_deref());
                slots.lock().expect("no worker panics while holding the lock")[i] = Some(r);
            });
        }
    });

    let mut results = Vec::with_capacity(points.len());
    for (index, (slot, assignments)) in slots
        .into_inner()
        .expect("workers joined")
        .into_iter()
        .zip(points)
        .enumerate()
    {
        let outcome = slot.expect("every point ran")?;
        results.push(GridResult {
            index,
            assignments,
            outcome,
        });
    }
    results.sort_by(|a, b| {
        let key = |r: &GridResult| {
            let p = r.outcome.best_dev_ppl;
            (!p.is_finite(), if p.is_finite() { p } else { 0.0 })
        };
        let (fa, pa) = key(a);
        let (fb, pb) = key(b);
        fa.cmp(&fb).then(pa.total_cmp(&pb)).then(a.index.cmp(&b.index))
    });
    if let Some(o) = out {
        std::fs::create_dir_all(o)?;
        std::fs::write(o.join("grid.tsv"), render_grid_table(&results))?;
    }
    Ok(results)
}

/// Tab-separated ranked table with one row per grid point.
pub fn render_grid_table(results: &[GridResult]) -> String {
    let mut out = String::from("rank\tpoint");
    if let Some(first) = results.first() {
        for (k, _) in &first.assignments {
            let _ = write!(out, "\t{k}");
        }
    }
    out.push_str("\tdev_ppl\tpi_variance\tbest_epoch\tepochs\tstatus\n");
    for (rank, r) in results.iter().enumerate() {
        let _ = write!(out, "{}\t{}", rank + 1, r.index + 1);
        for (_, v) in &r.assignments {
            let _ = write!(out, "\t{v}");
        }
        let _ = writeln!(
            out,
            "\t{}\t{}\t{}\t{}\t{}",
            r.outcome.best_dev_ppl,
            r.outcome.dev_pi_variance,
            r.outcome.best_epoch,
            r.outcome.metrics.len(),
            r.status()
        );
    }
    out
}
