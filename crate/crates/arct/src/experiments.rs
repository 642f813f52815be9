//! Multi-seed sweeps and the statistics used to compare them: means,
//! percentage differences, overfit percentages, Welch's unequal-variance
//! t-test, histogram binning, and a two-section report file that
//! round-trips losslessly.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;

use crate::error::{Error, Result};
use crate::heads::ModelKind;
use crate::tensor::Tensor;
use crate::training::{train_model, ArctSplits, EncoderSource, RunResult, TrainConfig};

/// All runs of one configuration across distinct seeds, ordered by seed.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepResult {
    pub label: String,
    pub runs: Vec<RunResult>,
    /// The configuration the sweep ran with; each run overrides only the
    /// seed.
    pub config: TrainConfig,
}

/// Welch's test output.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WelchTest {
    pub t: f64,
    pub df: f64,
    /// Two-sided.
    pub p: f64,
}

/// A two-sweep comparison row: means, their percentage difference, and the
/// significance of the gap.
#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonReport {
    pub label_a: String,
    pub label_b: String,
    pub mean_a: f64,
    pub mean_b: f64,
    /// `pct_change(mean_a, mean_b)` — the change of b relative to a.
    pub pct_difference: f64,
    pub t: f64,
    pub df: f64,
    pub p: f64,
    pub n_a: usize,
    pub n_b: usize,
}

/// Which accuracy of a run a statistic reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AccField {
    Train,
    Dev,
    Test,
}

impl AccField {
    pub fn of(&self, run: &RunResult) -> f64 {
        match self {
            AccField::Train => run.train_acc,
            AccField::Dev => run.dev_acc,
            AccField::Test => run.test_acc,
        }
    }
}

/// Percentage change of `new` relative to `base`: 100 (new − base) / base.
pub fn pct_change(base: f64, new: f64) -> Result<f64> {
    if !(base > 0.0) {
        return Err(Error::Numerical(format!("percentage change against base {base}")));
    }
    Ok(100.0 * (new - base) / base)
}

/// Overfit percentage: 100 (train − test) / test.
pub fn overfit_pct(train_acc: f64, test_acc: f64) -> Result<f64> {
    if !(test_acc > 0.0) {
        return Err(Error::Numerical(format!("overfit against test accuracy {test_acc}")));
    }
    Ok(100.0 * (train_acc - test_acc) / test_acc)
}

/// Arithmetic mean of one accuracy field over a non-empty run list.
pub fn mean_accuracy(runs: &[RunResult], field: AccField) -> Result<f64> {
    if runs.is_empty() {
        return Err(Error::Empty("mean of no runs".into()));
    }
    Ok(runs.iter().map(|r| field.of(r)).sum::<f64>() / runs.len() as f64)
}

fn sample_stats(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

/// Two-sided Welch's t-test.
///
/// The p-value comes from the exact relation P(|T| > t) = I_x(ν/2, 1/2)
/// with x = ν/(ν + t²), where I is the regularized incomplete beta
/// function evaluated by its continued fraction. Two constant, equal
/// samples compare as indistinguishable (t = 0, p = 1); constant samples
/// with different means have no defensible scale and are an error.
pub fn welch_t_test(a: &[f64], b: &[f64]) -> Result<WelchTest> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Empty(format!(
            "test needs at least two values per sample, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (ma, va) = sample_stats(a);
    let (mb, vb) = sample_stats(b);
    let sea = va / a.len() as f64;
    let seb = vb / b.len() as f64;
    if sea + seb == 0.0 {
        if ma == mb {
            return Ok(WelchTest { t: 0.0, df: (a.len() + b.len() - 2) as f64, p: 1.0 });
        }
        return Err(Error::Numerical(
            "zero variance in both samples with unequal means".into(),
        ));
    }
    let t = (ma - mb) / (sea + seb).sqrt();
    let df = (sea + seb) * (sea + seb)
        / (sea * sea / (a.len() as f64 - 1.0) + seb * seb / (b.len() as f64 - 1.0));
    let p = reg_inc_beta(df / 2.0, 0.5, df / (df + t * t)).min(1.0);
    Ok(WelchTest { t, df, p })
}

/// Natural log of the gamma function (Lanczos approximation, g = 7),
/// accurate to ~1e-14 over the positive reals used here.
fn ln_gamma(x: f64) -> f64 {
    const COEFFS: [f64; 8] = [
        676.5203681218851,
        -1259.1392167224028,
        771.32342877765313,
        -176.61502916214059,
        12.507343278686905,
        -0.13857109526572012,
        9.9843695780195716e-6,
        1.5056327351493116e-7,
    ];
    if x < 0.5 {
        // Reflection for the left half-plane.
        return std::f64::consts::PI.ln()
            - (std::f64::consts::PI * x).sin().ln()
            - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = 0.99999999999980993;
    for (i, c) in COEFFS.iter().enumerate() {
        acc += c / (x + i as f64 + 1.0);
    }
    let t = x + 7.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// Continued fraction for the incomplete beta function (modified Lentz).
fn betacf(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-15;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..300 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Regularized incomplete beta I_x(a, b).
fn reg_inc_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let front =
        (ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln()).exp();
    // The continued fraction converges fast only below the distribution's
    // mean; use the symmetry I_x(a,b) = 1 - I_{1-x}(b,a) above it.
    if x < (a + 1.0) / (a + b + 2.0) {
        front * betacf(a, b, x) / a
    } else {
        1.0 - front * betacf(b, a, 1.0 - x) / b
    }
}

/// One histogram bin; `lo..hi` half-open except the last bin, which also
/// holds the maximum value.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

/// Equal-width bins over [min, max]. An all-equal sample has no range, so
/// the span is forced to one unit and everything lands in the first bin.
pub fn histogram_bins(values: &[f64], n_bins: usize) -> Result<Vec<Bin>> {
    if values.is_empty() {
        return Err(Error::Empty("histogram of no values".into()));
    }
    if n_bins == 0 {
        return Err(Error::Parameter("histogram with zero bins".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite value in histogram input".into()));
    }
    let min = values.iter().fold(f64::INFINITY, |a, &b| a.min(b));
    let max = values.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let span = if max > min { max - min } else { 1.0 };
    let width = span / n_bins as f64;
    let mut bins: Vec<Bin> = (0..n_bins)
        .map(|i| Bin {
            lo: min + i as f64 * width,
            hi: if i + 1 == n_bins { min + span } else { min + (i + 1) as f64 * width },
            count: 0,
        })
        .collect();
    for &v in values {
        let idx = (((v - min) / span) * n_bins as f64) as usize;
        bins[idx.min(n_bins - 1)].count += 1;
    }
    Ok(bins)
}

/// Train one configuration across several seeds, up to `jobs` runs in
/// parallel. Seeds must be distinct; results come back in ascending seed
/// order regardless of input order or scheduling, and a repeat sweep
/// reproduces them exactly.
pub fn run_sweep(
    kind: ModelKind,
    label: &str,
    splits: &ArctSplits,
    config: &TrainConfig,
    encoder_source: &EncoderSource,
    word_vectors: Option<&(Vec<String>, Tensor)>,
    seeds: &[u64],
    jobs: usize,
) -> Result<SweepResult> {
    if seeds.is_empty() {
        return Err(Error::Empty("sweep with no seeds".into()));
    }
    if label.is_empty() || label.contains(',') || label.contains('\n') {
        return Err(Error::Parameter(format!(
            "sweep label {label:?} must be non-empty and free of commas and newlines"
        )));
    }
    if jobs == 0 {
        return Err(Error::Parameter("sweep with zero worker threads".into()));
    }
    let mut ordered = seeds.to_vec();
    ordered.sort_unstable();
    if ordered.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Parameter("duplicate seeds in sweep".into()));
    }

    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<RunResult>>> = Mutex::new(vec![None; ordered.len()]);
    let failure: Mutex<Option<Error>> = Mutex::new(None);
    let workers = jobs.min(ordered.len());
    thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= ordered.len() || failure.lock().unwrap().is_some() {
                    break;
                }
                let run_config = TrainConfig { seed: ordered[i], ..config.clone() };
                match train_model(kind, splits, &run_config, encoder_source, word_vectors, |_| {})
                {
                    Ok(out) => slots.lock().unwrap()[i] = Some(out.result),
                    Err(e) => {
                        let mut f = failure.lock().unwrap();
                        if f.is_none() {
                            *f = Some(e);
                        }
                        break;
                    }
                }
            });
        }
    });
    if let Some(e) = failure.into_inner().unwrap() {
        return Err(e);
    }
    let runs: Vec<RunResult> = slots
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|r| r.expect("every slot filled when no worker failed"))
        .collect();
    Ok(SweepResult { label: label.to_string(), runs, config: config.clone() })
}

/// Compare two sweeps on one accuracy field (the headline tables read test
/// accuracy): means, the percentage change of `b` relative to `a`, and
/// Welch's test over the per-run values.
pub fn compare_sweeps(
    a: &SweepResult,
    b: &SweepResult,
    field: AccField,
) -> Result<ComparisonReport> {
    let mean_a = mean_accuracy(&a.runs, field)?;
    let mean_b = mean_accuracy(&b.runs, field)?;
    let xs: Vec<f64> = a.runs.iter().map(|r| field.of(r)).collect();
    let ys: Vec<f64> = b.runs.iter().map(|r| field.of(r)).collect();
    let test = welch_t_test(&xs, &ys)?;
    Ok(ComparisonReport {
        label_a: a.label.clone(),
        label_b: b.label.clone(),
        mean_a,
        mean_b,
        pct_difference: pct_change(mean_a, mean_b)?,
        t: test.t,
        df: test.df,
        p: test.p,
        n_a: a.runs.len(),
        n_b: b.runs.len(),
    })
}

/// One parsed row of the `[sweeps]` section.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub label: String,
    pub seed: u64,
    pub train_acc: f64,
    pub dev_acc: f64,
    pub test_acc: f64,
    pub epochs: usize,
}

/// A parsed report file.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Report {
    pub sweeps: Vec<SweepRow>,
    pub comparisons: Vec<ComparisonReport>,
}

/// Render the report text: a `[sweeps]` section, then — only when there are
/// comparisons — a `[comparisons]` section. Floats use shortest-round-trip
/// formatting, so parsing back reproduces every value bit for bit.
pub fn render_report(sweeps: &[SweepResult], comparisons: &[ComparisonReport]) -> String {
    let mut out = String::new();
    out.push_str("[sweeps]\n");
    out.push_str("label,seed,train_acc,dev_acc,test_acc,epochs\n");
    for sweep in sweeps {
        for run in &sweep.runs {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                sweep.label, run.seed, run.train_acc, run.dev_acc, run.test_acc, run.epochs_run
            )
            .expect("writing to a String cannot fail");
        }
    }
    if !comparisons.is_empty() {
        out.push_str("[comparisons]\n");
        out.push_str("label_a,label_b,mean_a,mean_b,pct_difference,t,df,p\n");
        for c in comparisons {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                c.label_a, c.label_b, c.mean_a, c.mean_b, c.pct_difference, c.t, c.df, c.p
            )
            .expect("writing to a String cannot fail");
        }
    }
    out
}

pub fn write_report(
    sweeps: &[SweepResult],
    comparisons: &[ComparisonReport],
    path: &Path,
) -> Result<()> {
    fs::write(path, render_report(sweeps, comparisons))
        .map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

fn parse_float(field: &str, lineno: usize) -> Result<f64> {
    field
        .parse::<f64>()
        .map_err(|_| Error::Format(format!("line {lineno}: bad number {field:?}")))
}

fn parse_int(field: &str, lineno: usize) -> Result<usize> {
    field
        .parse::<usize>()
        .map_err(|_| Error::Format(format!("line {lineno}: bad count {field:?}")))
}

/// Parse report text written by [`render_report`].
pub fn parse_report(text: &str) -> Result<Report> {
    #[derive(PartialEq)]
    enum Section {
        None,
        Sweeps,
        Comparisons,
    }
    let mut section = Section::None;
    let mut expect_header = false;
    let mut report = Report::default();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.is_empty() {
            continue;
        }
        match line {
            "[sweeps]" => {
                section = Section::Sweeps;
                expect_header = true;
                continue;
            }
            "[comparisons]" => {
                section = Section::Comparisons;
                expect_header = true;
                continue;
            }
            _ => {}
        }
        if expect_header {
            let want = match section {
                Section::Sweeps => "label,seed,train_acc,dev_acc,test_acc,epochs",
                Section::Comparisons => "label_a,label_b,mean_a,mean_b,pct_difference,t,df,p",
                Section::None => unreachable!("header expected only inside a section"),
            };
            if line != want {
                return Err(Error::Format(format!(
                    "line {lineno}: expected header {want:?}, found {line:?}"
                )));
            }
            expect_header = false;
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        match section {
            Section::None => {
                return Err(Error::Format(format!(
                    "line {lineno}: data before any section marker"
                )));
            }
            Section::Sweeps => {
                if fields.len() != 6 {
                    return Err(Error::Format(format!(
                        "line {lineno}: expected 6 fields, found {}",
                        fields.len()
                    )));
                }
                report.sweeps.push(SweepRow {
                    label: fields[0].to_string(),
                    seed: fields[1].parse::<u64>().map_err(|_| {
                        Error::Format(format!("line {lineno}: bad seed {:?}", fields[1]))
                    })?,
                    train_acc: parse_float(fields[2], lineno)?,
                    dev_acc: parse_float(fields[3], lineno)?,
                    test_acc: parse_float(fields[4], lineno)?,
                    epochs: parse_int(fields[5], lineno)?,
                });
            }
            Section::Comparisons => {
                if fields.len() != 8 {
                    return Err(Error::Format(format!(
                        "line {lineno}: expected 8 fields, found {}",
                        fields.len()
                    )));
                }
                report.comparisons.push(ComparisonReport {
                    label_a: fields[0].to_string(),
                    label_b: fields[1].to_string(),
                    mean_a: parse_float(fields[2], lineno)?,
                    mean_b: parse_float(fields[3], lineno)?,
                    pct_difference: parse_float(fields[4], lineno)?,
                    t: parse_float(fields[5], lineno)?,
                    df: parse_float(fields[6], lineno)?,
                    p: parse_float(fields[7], lineno)?,
                    n_a: 0,
                    n_b: 0,
                });
            }
        }
    }
    // Sample sizes are not serialized; recover them from the sweep rows
    // when the labels are present.
    for c in &mut report.comparisons {
        c.n_a = report.sweeps.iter().filter(|s| s.label == c.label_a).count();
        c.n_b = report.sweeps.iter().filter(|s| s.label == c.label_b).count();
    }
    Ok(report)
}
