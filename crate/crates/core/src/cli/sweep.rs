//! Alignment-weight sweep: gap and downstream metrics per (lambda, seed).

use rayon::prelude::*;
use serde::Serialize;

use super::config::SweepSpec;
use super::project::project_2d;
use super::svg::paired_scatter;
use super::train::{train, TrainOutcome};
use crate::error::{Error, Result};
use crate::synthdata::PairedDataset;

pub const SWEEP_HEADER: &str =
    "lambda_align,seed,paired_gap,centroid_gap,r_at_1_i2t,r_at_1_t2i,zero_shot_acc,linear_probe_acc";

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub lambda_align: f64,
    pub seed: u64,
    pub paired_gap: f64,
    pub centroid_gap: f64,
    pub r_at_1_i2t: f64,
    pub r_at_1_t2i: f64,
    pub zero_shot_acc: f64,
    pub linear_probe_acc: f64,
}

pub struct SweepOutcome {
    /// Ordered by lambda, then seed.
    pub rows: Vec<SweepRow>,
    /// `(file name, markup)` for the smallest and largest lambda.
    pub figures: Vec<(String, String)>,
}

impl SweepOutcome {
    pub fn csv(&self) -> String {
        let mut s = String::from(SWEEP_HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.lambda_align,
                r.seed,
                r.paired_gap,
                r.centroid_gap,
                r.r_at_1_i2t,
                r.r_at_1_t2i,
                r.zero_shot_acc,
                r.linear_probe_acc
            ));
        }
        s
    }

    /// Mean of `f` over the rows with the given lambda.
    pub fn mean_at(&self, lambda: f64, f: impl Fn(&SweepRow) -> f64) -> Option<f64> {
        let vals: Vec<f64> = self.rows.iter().filter(|r| r.lambda_align == lambda).map(f).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

/// Runs every cell on a pool of `jobs` threads. Cells are independent and
/// results come back in (lambda, seed) order regardless of scheduling.
pub fn run_sweep(spec: &SweepSpec, data: &PairedDataset, jobs: usize) -> Result<SweepOutcome> {
    spec.validate()?;
    let cells: Vec<(f64, u64)> = spec
        .lambda_align
        .iter()
        .flat_map(|&l| spec.seeds.iter().map(move |&s| (l, s)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::config(format!("cannot start worker pool: {e}")))?;

    let outcomes: Vec<Result<TrainOutcome>> = pool.install(|| {
        cells
            .par_iter()
            .map(|&(lambda, seed)| {
                let mut cfg = spec.base.clone();
                cfg.loss.lambda_align = lambda;
                cfg.seed = seed;
                train(&cfg, data).map_err(|e| name_cell(e, lambda, seed))
            })
            .collect()
    });

    let lo = spec.lambda_align[0];
    let hi = *spec.lambda_align.last().expect("validated nonempty");
    let first_seed = spec.seeds[0];
    let mut rows = Vec::with_capacity(cells.len());
    let mut figures = Vec::new();
    for (&(lambda, seed), outcome) in cells.iter().zip(outcomes) {
        let o = outcome?;
        let m = &o.metrics;
        rows.push(SweepRow {
            lambda_align: lambda,
            seed,
            paired_gap: m.paired_gap,
            centroid_gap: m.centroid_gap,
            r_at_1_i2t: m.r_at_1_i2t,
            r_at_1_t2i: m.r_at_1_t2i,
            zero_shot_acc: m.zero_shot_accuracy,
            linear_probe_acc: m.linear_probe_accuracy,
        });
        if seed == first_seed && (lambda == lo || lambda == hi) {
            let pooled = o.test_text.vconcat(&o.test_image)?;
            let proj = project_2d(&pooled)?;
            let n = o.test_text.rows();
            let idx: Vec<usize> = (0..n).collect();
            let tail: Vec<usize> = (n..2 * n).collect();
            let title = format!("lambda_align = {lambda}, paired gap = {:.4}", m.paired_gap);
            figures.push((
                format!("gap_lambda_{lambda}.svg"),
                paired_scatter(&title, &proj.select_rows(&idx), &proj.select_rows(&tail)),
            ));
        }
    }
    Ok(SweepOutcome { rows, figures })
}

fn name_cell(e: Error, lambda: f64, seed: u64) -> Error {
    let cell = format!("sweep cell lambda_align={lambda}, seed={seed}");
    match e {
        Error::Numeric(m) => Error::Numeric(format!("{cell}: {m}")),
        Error::Config(m) => Error::Config(format!("{cell}: {m}")),
        other => other,
    }
}
