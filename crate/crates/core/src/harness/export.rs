//! CSV and JSON files for plotting and inspection.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::harness::{TrialMetrics, TrialResult};

fn csv_error(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

#[derive(Serialize)]
struct PatientRow {
    patient: usize,
    class: usize,
    cycle: usize,
    dose_mg: f64,
    dose_per_m2: f64,
    nadir: f64,
    grade: u8,
    reported_grade: u8,
    expected_nadir_grade: Option<u8>,
    map_grade: Option<u8>,
}

#[derive(Serialize)]
struct BandRow {
    source: &'static str,
    day: f64,
    n: usize,
    p05: f64,
    p50: f64,
    p95: f64,
}

#[derive(Serialize)]
struct GradeRow {
    cycle: usize,
    grade0: f64,
    grade1: f64,
    grade2: f64,
    grade3: f64,
    grade4: f64,
}

#[derive(Serialize)]
struct HistogramRow {
    cycle: usize,
    lower: f64,
    upper: f64,
    count: usize,
}

pub fn write_patients_csv<W: Write>(result: &TrialResult, w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for o in &result.outcomes {
        for c in 0..o.nadirs.len() {
            let est = o.estimated_grades.get(c);
            out.serialize(PatientRow {
                patient: o.index,
                class: o.class,
                cycle: c + 1,
                dose_mg: o.doses_mg[c],
                dose_per_m2: o.doses_mg[c] / o.covariates.bsa,
                nadir: o.nadirs[c],
                grade: o.grades[c],
                reported_grade: o.policy_grades[c],
                expected_nadir_grade: est.map(|e| e[0]),
                map_grade: est.map(|e| e[1]),
            })
            .map_err(csv_error)?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn write_bands_csv<W: Write>(metrics: &TrialMetrics, w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for (source, bands) in [("true", &metrics.true_bands), ("observed", &metrics.observed_bands)] {
        for b in bands {
            out.serialize(BandRow {
                source,
                day: b.day,
                n: b.n,
                p05: b.band.p05,
                p50: b.band.p50,
                p95: b.band.p95,
            })
            .map_err(csv_error)?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn write_grades_csv<W: Write>(metrics: &TrialMetrics, w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for (c, g) in metrics.grade_occurrence.iter().enumerate() {
        out.serialize(GradeRow {
            cycle: c + 1,
            grade0: g[0],
            grade1: g[1],
            grade2: g[2],
            grade3: g[3],
            grade4: g[4],
        })
        .map_err(csv_error)?;
    }
    out.flush()?;
    Ok(())
}

/// Nadir counts per cycle in bins of `width` from 0.
pub fn write_nadir_histogram_csv<W: Write>(result: &TrialResult, width: f64, w: W) -> Result<()> {
    let cycles = result.metrics.grade_occurrence.len();
    let mut out = csv::Writer::from_writer(w);
    for c in 0..cycles {
        let values: Vec<f64> = result.outcomes.iter().map(|o| o.nadirs[c]).collect();
        let top = values.iter().copied().fold(0.0, f64::max);
        let bins = ((top / width).floor() as usize) + 1;
        let mut counts = vec![0usize; bins];
        for v in values {
            counts[((v.max(0.0) / width).floor() as usize).min(bins - 1)] += 1;
        }
        for (k, n) in counts.into_iter().enumerate() {
            out.serialize(HistogramRow {
                cycle: c + 1,
                lower: k as f64 * width,
                upper: (k + 1) as f64 * width,
                count: n,
            })
            .map_err(csv_error)?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Writes metrics.json, patients.csv, bands.csv, grades.csv and
/// nadir_histogram.csv into `dir`.
pub fn write_all(result: &TrialResult, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let metrics = serde_json::json!({
        "policy": result.policy,
        "metrics": result.metrics,
        "failures": result.failures,
    });
    let mut f = BufWriter::new(File::create(dir.join("metrics.json"))?);
    serde_json::to_writer_pretty(&mut f, &metrics)?;
    f.flush()?;
    write_patients_csv(result, File::create(dir.join("patients.csv"))?)?;
    write_bands_csv(&result.metrics, File::create(dir.join("bands.csv"))?)?;
    write_grades_csv(&result.metrics, File::create(dir.join("grades.csv"))?)?;
    write_nadir_histogram_csv(result, 0.25, File::create(dir.join("nadir_histogram.csv"))?)?;
    Ok(())
}
