//! Rate-distortion sweeps, rate-savings analytics and report emission.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::classifier::TaskClassifier;
use crate::codec::Codec;
use crate::distortion::{ms_ssim, ms_ssim_db, mse, psnr};
use crate::image::Image;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Psnr,
    MsSsim,
    MsSsimDb,
    Mse,
    /// Top-1 classification accuracy; only produced by [`task_accuracy_curve`].
    Top1,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Psnr => "psnr",
            Metric::MsSsim => "ms_ssim",
            Metric::MsSsimDb => "ms_ssim_db",
            Metric::Mse => "mse",
            Metric::Top1 => "top1",
        }
    }

    pub fn higher_is_better(self) -> bool {
        self != Metric::Mse
    }

    /// Quality of `decoded` with respect to `reference`.
    pub fn measure(self, reference: &Image, decoded: &Image) -> Result<f64> {
        match self {
            Metric::Psnr => psnr(reference, decoded),
            Metric::MsSsim => ms_ssim(reference, decoded),
            Metric::MsSsimDb => ms_ssim(reference, decoded).map(ms_ssim_db),
            Metric::Mse => mse(reference, decoded),
            Metric::Top1 => Err(Error::Evaluation("top-1 accuracy is not a per-image metric".into())),
        }
    }

    /// Value mapped so that larger is always better.
    fn score(self, value: f64) -> f64 {
        if self.higher_is_better() {
            value
        } else {
            -value
        }
    }
}

impl std::fmt::Display for Metric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Metric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "psnr" => Ok(Metric::Psnr),
            "ms_ssim" | "msssim" => Ok(Metric::MsSsim),
            "ms_ssim_db" | "msssim_db" => Ok(Metric::MsSsimDb),
            "mse" => Ok(Metric::Mse),
            "top1" | "accuracy" => Ok(Metric::Top1),
            other => Err(Error::Config(format!("unknown metric `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RdPoint {
    pub quality: i32,
    pub bpp: f64,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RdCurve {
    pub dataset: String,
    pub codec: String,
    pub filtered: bool,
    pub metric: Metric,
    pub points: Vec<RdPoint>,
}

/// One line of the evaluation CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub dataset: String,
    pub codec: String,
    pub filtered: bool,
    pub quality: i32,
    pub bpp: f64,
    pub metric: Metric,
    pub value: f64,
}

impl RdCurve {
    /// Sorts by rate and drops every point that another point beats or
    /// matches at no higher rate, leaving rates strictly increasing and
    /// quality strictly improving.
    pub fn new(dataset: &str, codec: &str, filtered: bool, metric: Metric, mut points: Vec<RdPoint>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Evaluation("an RD curve needs at least one point".into()));
        }
        if points.iter().any(|p| !p.bpp.is_finite() || p.bpp <= 0.0 || p.value.is_nan()) {
            return Err(Error::Evaluation(format!("{codec}: RD points need a positive finite rate and a value")));
        }
        points.sort_by(|a, b| a.bpp.total_cmp(&b.bpp).then(metric.score(b.value).total_cmp(&metric.score(a.value))));
        let mut kept: Vec<RdPoint> = Vec::with_capacity(points.len());
        for p in points {
            match kept.last() {
                Some(last) if p.bpp <= last.bpp || metric.score(p.value) <= metric.score(last.value) => {
                    log::debug!("{codec}: dropping dominated point q={} ({} bpp)", p.quality, p.bpp);
                }
                _ => kept.push(p),
            }
        }
        Ok(RdCurve { dataset: dataset.into(), codec: codec.into(), filtered, metric, points: kept })
    }

    /// Keeps every point, sorted by rate. Used for accuracy curves, which
    /// need not be monotone.
    pub fn unpruned(dataset: &str, codec: &str, filtered: bool, metric: Metric, mut points: Vec<RdPoint>) -> Self {
        points.sort_by(|a, b| a.bpp.total_cmp(&b.bpp));
        RdCurve { dataset: dataset.into(), codec: codec.into(), filtered, metric, points }
    }

    pub fn rows(&self) -> Vec<CurveRow> {
        self.points
            .iter()
            .map(|p| CurveRow {
                dataset: self.dataset.clone(),
                codec: self.codec.clone(),
                filtered: self.filtered,
                quality: p.quality,
                bpp: p.bpp,
                metric: self.metric,
                value: p.value,
            })
            .collect()
    }

    /// Value at `bpp` by linear interpolation in log rate; `None` outside the
    /// curve's rate range.
    pub fn value_at_rate(&self, bpp: f64) -> Option<f64> {
        let pts = &self.points;
        let (first, last) = (pts.first()?, pts.last()?);
        if bpp < first.bpp || bpp > last.bpp {
            return None;
        }
        let i = pts.partition_point(|p| p.bpp < bpp);
        if pts[i].bpp == bpp {
            return Some(pts[i].value);
        }
        let (a, b) = (pts[i - 1], pts[i]);
        let t = (bpp.ln() - a.bpp.ln()) / (b.bpp.ln() - a.bpp.ln());
        Some(a.value + t * (b.value - a.value))
    }

    fn label(&self) -> String {
        format!("{} {}", self.codec, if self.filtered { "filtered" } else { "unfiltered" })
    }

    fn file_stem(&self) -> String {
        sanitize(&format!(
            "{}_{}_{}_{}",
            self.dataset,
            self.codec,
            if self.filtered { "filtered" } else { "unfiltered" },
            self.metric
        ))
    }
}

fn sanitize(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || c == '_' || c == '-' { c } else { '_' }).collect()
}

/// Transforms an image before encoding (a trained filter, or a test double).
pub type Prefilter<'a> = &'a dyn Fn(&Image) -> Result<Image>;

/// Per-quality mean rate and mean metric over `corpus`. The metric always
/// compares the decoded image with the unfiltered original. Any failing
/// image aborts the curve with an error naming every failure.
pub fn build_rd_curve(
    dataset: &str,
    corpus: &[Image],
    codec: &dyn Codec,
    qualities: &[i32],
    metric: Metric,
    filter: Option<Prefilter<'_>>,
) -> Result<RdCurve> {
    if corpus.is_empty() {
        return Err(Error::Evaluation("cannot build an RD curve from an empty corpus".into()));
    }
    if qualities.is_empty() {
        return Err(Error::Evaluation("empty quality sweep".into()));
    }
    let inputs = prefiltered(corpus, filter)?;
    let mut failures = Vec::new();
    let mut points = Vec::with_capacity(qualities.len());
    for &q in qualities {
        let (mut bpp, mut value) = (0.0, 0.0);
        for (i, (orig, input)) in corpus.iter().zip(&inputs).enumerate() {
            match codec.encode_decode(input, q).and_then(|r| Ok((r.bpp, metric.measure(orig, &r.decoded)?))) {
                Ok((b, v)) => {
                    bpp += b;
                    value += v;
                }
                Err(e) => failures.push(format!("image {i} at quality {q}: {e}")),
            }
        }
        let n = corpus.len() as f64;
        points.push(RdPoint { quality: q, bpp: bpp / n, value: value / n });
    }
    if !failures.is_empty() {
        return Err(Error::Evaluation(format!(
            "{} of {} encodes failed for `{}`: {}",
            failures.len(),
            corpus.len() * qualities.len(),
            codec.name(),
            failures.join("; ")
        )));
    }
    RdCurve::new(dataset, codec.name(), filter.is_some(), metric, points)
}

/// Single-image sweep over at least two qualities.
pub fn quality_sweep(image: &Image, codec: &dyn Codec, qualities: &[i32], metric: Metric) -> Result<RdCurve> {
    if qualities.len() < 2 {
        return Err(Error::Evaluation(format!("a quality sweep needs at least two qualities, got {}", qualities.len())));
    }
    build_rd_curve("single", std::slice::from_ref(image), codec, qualities, metric, None)
}

fn prefiltered(corpus: &[Image], filter: Option<Prefilter<'_>>) -> Result<Vec<Image>> {
    match filter {
        Some(f) => corpus.iter().map(f).collect(),
        None => Ok(corpus.to_vec()),
    }
}

/// Top-1 accuracy and mean rate per quality.
pub fn task_accuracy_curve(
    dataset: &str,
    data: &[(Image, usize)],
    classifier: Option<&dyn TaskClassifier>,
    codec: &dyn Codec,
    qualities: &[i32],
    filter: Option<Prefilter<'_>>,
) -> Result<RdCurve> {
    let classifier = classifier.ok_or_else(|| Error::Config("task evaluation needs a classifier".into()))?;
    if data.is_empty() || qualities.is_empty() {
        return Err(Error::Evaluation("task evaluation needs labeled images and qualities".into()));
    }
    let (images, labels): (Vec<Image>, Vec<usize>) = data.iter().cloned().unzip();
    let inputs = prefiltered(&images, filter)?;
    let mut points = Vec::with_capacity(qualities.len());
    for &q in qualities {
        let results = inputs.iter().map(|im| codec.encode_decode(im, q)).collect::<Result<Vec<_>>>()?;
        let bpp = results.iter().map(|r| r.bpp).sum::<f64>() / results.len() as f64;
        let decoded: Vec<Image> = results.into_iter().map(|r| r.decoded).collect();
        let accuracy = crate::classifier::top1_accuracy(classifier, &decoded, &labels)?;
        points.push(RdPoint { quality: q, bpp, value: accuracy });
    }
    Ok(RdCurve::unpruned(dataset, codec.name(), filter.is_some(), Metric::Top1, points))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BdMethod {
    /// Piecewise-linear log rate as a function of distortion.
    #[default]
    PiecewiseLinear,
    /// Least-squares cubic fit of log rate, the classical Bjontegaard form.
    Cubic,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SavingsPoint {
    pub value: f64,
    pub baseline_bpp: f64,
    pub filtered_bpp: f64,
    /// `1 - filtered_bpp / baseline_bpp`.
    pub savings: f64,
    /// `ln(baseline_bpp / filtered_bpp)`, antisymmetric under swapping the curves.
    pub log_savings: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateSavings {
    pub metric: Metric,
    pub points: Vec<SavingsPoint>,
    /// Average rate difference over the shared distortion range; negative
    /// means the filtered curve is cheaper.
    pub bd_rate: f64,
    pub method: BdMethod,
}

impl RateSavings {
    /// Savings at a distortion inside the overlap.
    pub fn savings_at(&self, value: f64) -> Option<f64> {
        let f = self.points.iter().map(|p| (p.value, p.log_savings)).collect::<Vec<_>>();
        interp(&f, value).map(|l| 1.0 - (-l).exp())
    }
}

/// Linear interpolation on `(x, y)` knots with increasing `x`.
fn interp(knots: &[(f64, f64)], x: f64) -> Option<f64> {
    let (first, last) = (knots.first()?, knots.last()?);
    if x < first.0 || x > last.0 {
        return None;
    }
    let i = knots.partition_point(|k| k.0 < x);
    if knots[i].0 == x {
        return Some(knots[i].1);
    }
    let (a, b) = (knots[i - 1], knots[i]);
    Some(a.1 + (x - a.0) / (b.0 - a.0) * (b.1 - a.1))
}

fn log_rate_knots(curve: &RdCurve) -> Vec<(f64, f64)> {
    curve.points.iter().map(|p| (curve.metric.score(p.value), p.bpp.ln())).collect()
}

pub fn rate_savings(filtered: &RdCurve, baseline: &RdCurve) -> Result<RateSavings> {
    rate_savings_with(filtered, baseline, BdMethod::PiecewiseLinear)
}

/// Rate savings of `filtered` over `baseline` at every distortion both
/// curves reach, on the union of their knots.
pub fn rate_savings_with(filtered: &RdCurve, baseline: &RdCurve, method: BdMethod) -> Result<RateSavings> {
    if filtered.metric != baseline.metric {
        return Err(Error::Evaluation(format!("cannot compare {} with {}", filtered.metric, baseline.metric)));
    }
    let metric = filtered.metric;
    let (kf, kb) = (log_rate_knots(filtered), log_rate_knots(baseline));
    if kf.len() < 2 || kb.len() < 2 {
        return Err(Error::Evaluation("rate savings need at least two points per curve".into()));
    }
    for k in [&kf, &kb] {
        if k.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(Error::Evaluation("curve distortion must strictly improve with rate".into()));
        }
    }
    let lo = kf[0].0.max(kb[0].0);
    let hi = kf[kf.len() - 1].0.min(kb[kb.len() - 1].0);
    if !(hi > lo) {
        return Err(Error::Evaluation("the curves share no distortion range".into()));
    }
    let mut grid: Vec<f64> = kf.iter().chain(&kb).map(|k| k.0).filter(|&d| d > lo && d < hi).collect();
    grid.push(lo);
    grid.push(hi);
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    let unscore = |s: f64| if metric.higher_is_better() { s } else { -s };
    let points: Vec<SavingsPoint> = grid
        .iter()
        .map(|&d| {
            let (lf, lb) = (interp(&kf, d).expect("in overlap"), interp(&kb, d).expect("in overlap"));
            SavingsPoint {
                value: unscore(d),
                baseline_bpp: lb.exp(),
                filtered_bpp: lf.exp(),
                savings: 1.0 - (lf - lb).exp(),
                log_savings: lb - lf,
            }
        })
        .collect();
    let mean_log_diff = match method {
        BdMethod::PiecewiseLinear => {
            let area: f64 = grid
                .windows(2)
                .zip(points.windows(2))
                .map(|(d, p)| 0.5 * (d[1] - d[0]) * (p[0].log_savings + p[1].log_savings))
                .sum();
            -area / (hi - lo)
        }
        BdMethod::Cubic => {
            let (pf, pb) = (cubic_fit(&kf)?, cubic_fit(&kb)?);
            (poly_integral(&pf, lo, hi) - poly_integral(&pb, lo, hi)) / (hi - lo)
        }
    };
    Ok(RateSavings { metric, points, bd_rate: mean_log_diff.exp() - 1.0, method })
}

/// Least-squares polynomial of degree `min(3, n - 1)` through the knots.
fn cubic_fit(knots: &[(f64, f64)]) -> Result<Vec<f64>> {
    let degree = 3.min(knots.len() - 1);
    let m = degree + 1;
    let mut a = vec![vec![0.0; m + 1]; m];
    for &(x, y) in knots {
        let pows: Vec<f64> = (0..m).map(|k| x.powi(k as i32)).collect();
        for r in 0..m {
            for c in 0..m {
                a[r][c] += pows[r] * pows[c];
            }
            a[r][m] += pows[r] * y;
        }
    }
    for col in 0..m {
        let pivot = (col..m).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).expect("nonempty");
        if a[pivot][col].abs() < 1e-300 {
            return Err(Error::Evaluation("degenerate curve for the cubic fit".into()));
        }
        a.swap(col, pivot);
        for r in 0..m {
            if r != col {
                let f = a[r][col] / a[col][col];
                for c in col..=m {
                    a[r][c] -= f * a[col][c];
                }
            }
        }
    }
    Ok((0..m).map(|k| a[k][m] / a[k][k]).collect())
}

fn poly_integral(coeffs: &[f64], lo: f64, hi: f64) -> f64 {
    let anti = |x: f64| coeffs.iter().enumerate().map(|(k, c)| c * x.powi(k as i32 + 1) / (k + 1) as f64).sum::<f64>();
    anti(hi) - anti(lo)
}

pub fn write_curves_csv(path: &Path, curves: &[RdCurve]) -> Result<()> {
    let rows: Vec<CurveRow> = curves.iter().flat_map(RdCurve::rows).collect();
    crate::trainer::write_csv(path, &rows)
}

/// Reads evaluation CSVs back into curves, grouped by
/// `(dataset, codec, filtered, metric)` in first-seen order.
pub fn read_curves_csv(path: &Path) -> Result<Vec<RdCurve>> {
    let io = |e: csv::Error| Error::Io { path: path.to_path_buf(), source: e.into() };
    let mut reader = csv::Reader::from_path(path).map_err(io)?;
    let mut curves: Vec<RdCurve> = Vec::new();
    for row in reader.deserialize() {
        let r: CurveRow = row.map_err(io)?;
        let point = RdPoint { quality: r.quality, bpp: r.bpp, value: r.value };
        match curves
            .iter_mut()
            .find(|c| c.dataset == r.dataset && c.codec == r.codec && c.filtered == r.filtered && c.metric == r.metric)
        {
            Some(c) => c.points.push(point),
            None => curves.push(RdCurve::unpruned(&r.dataset, &r.codec, r.filtered, r.metric, vec![point])),
        }
    }
    for c in &mut curves {
        c.points.sort_by(|a, b| a.bpp.total_cmp(&b.bpp));
    }
    Ok(curves)
}

#[derive(Clone, Debug, Serialize)]
struct ReportJson<'a> {
    curves: &'a [RdCurve],
    savings: Vec<SavingsEntry>,
}

#[derive(Clone, Debug, Serialize)]
struct SavingsEntry {
    dataset: String,
    codec: String,
    metric: Metric,
    bd_rate: f64,
    points: Vec<SavingsPoint>,
}

/// Writes one CSV per curve, `report.json`, an RD plot per metric, and for
/// every filtered/unfiltered pair a savings CSV and plot. Returns the
/// written paths in creation order.
pub fn emit_report(curves: &[RdCurve], out_dir: &Path) -> Result<Vec<PathBuf>> {
    if curves.is_empty() {
        return Err(Error::Evaluation("no curves to report".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();
    for c in curves {
        let path = out_dir.join(format!("{}.csv", c.file_stem()));
        write_curves_csv(&path, std::slice::from_ref(c))?;
        written.push(path);
    }

    let mut savings = Vec::new();
    for f in curves.iter().filter(|c| c.filtered && c.metric != Metric::Top1) {
        let Some(b) = curves
            .iter()
            .find(|b| !b.filtered && b.dataset == f.dataset && b.codec == f.codec && b.metric == f.metric)
        else {
            continue;
        };
        match rate_savings(f, b) {
            Ok(s) => {
                let stem = sanitize(&format!("savings_{}_{}_{}", f.dataset, f.codec, f.metric));
                let path = out_dir.join(format!("{stem}.csv"));
                crate::trainer::write_csv(&path, &s.points)?;
                written.push(path);
                let path = out_dir.join(format!("{stem}.svg"));
                plot_savings(&path, &s, &f.codec)?;
                written.push(path);
                savings.push(SavingsEntry {
                    dataset: f.dataset.clone(),
                    codec: f.codec.clone(),
                    metric: f.metric,
                    bd_rate: s.bd_rate,
                    points: s.points,
                });
            }
            Err(e) => log::warn!("no rate savings for {} on {}: {e}", f.codec, f.dataset),
        }
    }

    let path = out_dir.join("report.json");
    let json = serde_json::to_string_pretty(&ReportJson { curves, savings }).map_err(|e| Error::Evaluation(e.to_string()))?;
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    written.push(path);

    let mut by_metric: BTreeMap<Metric, Vec<&RdCurve>> = BTreeMap::new();
    for c in curves {
        by_metric.entry(c.metric).or_default().push(c);
    }
    for (metric, group) in by_metric {
        let path = out_dir.join(format!("rd_{metric}.svg"));
        plot_curves(&path, metric, &group)?;
        written.push(path);
    }
    Ok(written)
}

fn plot_err(path: &Path) -> impl Fn(String) -> Error + '_ {
    move |e| Error::Evaluation(format!("plotting {}: {e}", path.display()))
}

fn padded_range(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let finite = values.filter(|v| v.is_finite());
    let lo = finite.clone().fold(f64::INFINITY, f64::min);
    let hi = finite.fold(f64::NEG_INFINITY, f64::max);
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = ((hi - lo) * 0.05).max(1e-6);
    (lo - pad, hi + pad)
}

fn plot_curves(path: &Path, metric: Metric, curves: &[&RdCurve]) -> Result<()> {
    use plotters::prelude::*;
    let err = plot_err(path);
    let pts = || curves.iter().flat_map(|c| c.points.iter());
    let (x0, x1) = padded_range(pts().map(|p| p.bpp));
    let (y0, y1) = padded_range(pts().map(|p| p.value));
    let root = SVGBackend::new(path, (800, 560)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| err(e.to_string()))?;
    let mut chart = ChartBuilder::on(&root)
        .margin(16)
        .x_label_area_size(40)
        .y_label_area_size(56)
        .build_cartesian_2d(x0..x1, y0..y1)
        .map_err(|e| err(e.to_string()))?;
    chart
        .configure_mesh()
        .x_desc("bpp")
        .y_desc(metric.name())
        .draw()
        .map_err(|e| err(e.to_string()))?;
    for (i, c) in curves.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        let series: Vec<(f64, f64)> = c.points.iter().filter(|p| p.value.is_finite()).map(|p| (p.bpp, p.value)).collect();
        chart
            .draw_series(LineSeries::new(series, color.stroke_width(2)))
            .map_err(|e| err(e.to_string()))?
            .label(c.label())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(|e| err(e.to_string()))?;
    root.present().map_err(|e| err(e.to_string()))
}

fn plot_savings(path: &Path, s: &RateSavings, codec: &str) -> Result<()> {
    use plotters::prelude::*;
    let err = plot_err(path);
    let series: Vec<(f64, f64)> = s.points.iter().map(|p| (p.baseline_bpp, 100.0 * p.savings)).collect();
    let (x0, x1) = padded_range(series.iter().map(|p| p.0));
    let (y0, y1) = padded_range(series.iter().map(|p| p.1).chain([0.0]));
    let root = SVGBackend::new(path, (800, 400)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| err(e.to_string()))?;
    let mut chart = ChartBuilder::on(&root)
        .margin(16)
        .x_label_area_size(40)
        .y_label_area_size(56)
        .build_cartesian_2d(x0..x1, y0..y1)
        .map_err(|e| err(e.to_string()))?;
    chart
        .configure_mesh()
        .x_desc("baseline bpp")
        .y_desc("rate savings (%)")
        .draw()
        .map_err(|e| err(e.to_string()))?;
    chart
        .draw_series(LineSeries::new(series, BLUE.stroke_width(2)))
        .map_err(|e| err(e.to_string()))?
        .label(format!("{codec}, BD-rate {:.2}%", 100.0 * s.bd_rate))
        .legend(|(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], BLUE));
    chart.configure_series_labels().border_style(BLACK).draw().map_err(|e| err(e.to_string()))?;
    root.present().map_err(|e| err(e.to_string()))
}

/// Spearman rank correlation, with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::Evaluation("spearman needs two equally long samples of at least two values".into()));
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let mean = (a.len() as f64 + 1.0) / 2.0;
    let (mut num, mut da, mut db) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        num += (x - mean) * (y - mean);
        da += (x - mean) * (x - mean);
        db += (y - mean) * (y - mean);
    }
    if da == 0.0 || db == 0.0 {
        return Err(Error::Evaluation("spearman is undefined for a constant sample".into()));
    }
    Ok(num / (da * db).sqrt())
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{IdentityCodec, JpegCodec};
    use crate::synth;

    fn curve(filtered: bool, pts: &[(f64, f64)]) -> RdCurve {
        let points = pts.iter().enumerate().map(|(i, &(bpp, value))| RdPoint { quality: i as i32, bpp, value }).collect();
        RdCurve::new("d", "c", filtered, Metric::Psnr, points).unwrap()
    }

    #[test]
    fn dominated_points_are_dropped() {
        let c = curve(false, &[(1.0, 30.0), (0.5, 28.0), (1.5, 29.0), (2.0, 33.0), (2.0, 32.0)]);
        let bpps: Vec<f64> = c.points.iter().map(|p| p.bpp).collect();
        assert_eq!(bpps, vec![0.5, 1.0, 2.0]);
        assert_eq!(c.points[2].value, 33.0);
        let m = RdCurve::new("d", "c", false, Metric::Mse, vec![
            RdPoint { quality: 1, bpp: 1.0, value: 0.01 },
            RdPoint { quality: 2, bpp: 2.0, value: 0.02 },
        ])
        .unwrap();
        assert_eq!(m.points.len(), 1);
    }

    #[test]
    fn savings_oracles() {
        let base = curve(false, &[(0.2, 25.0), (0.5, 29.0), (1.0, 32.0), (2.0, 36.0)]);
        let same = rate_savings(&base, &base).unwrap();
        assert!(same.points.iter().all(|p| p.savings == 0.0));
        assert_eq!(same.bd_rate, 0.0);
        let cheaper = curve(true, &base.points.iter().map(|p| (0.9 * p.bpp, p.value)).collect::<Vec<_>>());
        let s = rate_savings(&cheaper, &base).unwrap();
        assert!(s.points.iter().all(|p| (p.savings - 0.1).abs() < 1e-9));
        assert!((s.bd_rate + 0.1).abs() < 1e-9);
        let cubic = rate_savings_with(&cheaper, &base, BdMethod::Cubic).unwrap();
        assert!((cubic.bd_rate + 0.1).abs() < 1e-9);
        let disjoint = curve(true, &[(0.1, 40.0), (0.2, 41.0)]);
        assert!(rate_savings(&disjoint, &base).is_err());
    }

    #[test]
    fn identity_filter_leaves_the_curve_unchanged() {
        let corpus = synth::corpus(2, 48, 48, 1);
        let id = |im: &Image| Ok(im.clone());
        let a = build_rd_curve("s", &corpus, &JpegCodec, &[20, 60], Metric::MsSsim, None).unwrap();
        let b = build_rd_curve("s", &corpus, &JpegCodec, &[20, 60], Metric::MsSsim, Some(&id)).unwrap();
        assert_eq!(a.points, b.points);
        assert!(b.filtered);
        assert!(quality_sweep(&corpus[0], &JpegCodec, &[50], Metric::Psnr).is_err());
        let c = quality_sweep(&corpus[0], &IdentityCodec, &[1, 2], Metric::Mse).unwrap();
        assert_eq!(c.points.len(), 1);
    }

    #[test]
    fn report_files_and_determinism() {
        let a = curve(false, &[(0.2, 25.0), (0.5, 29.0), (1.0, 32.0)]);
        let b = curve(true, &[(0.18, 25.0), (0.45, 29.0), (0.9, 32.0)]);
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let w1 = emit_report(&[a.clone(), b.clone()], d1.path()).unwrap();
        emit_report(&[a.clone(), b.clone()], d2.path()).unwrap();
        assert_eq!(w1.iter().filter(|p| p.extension().unwrap() == "csv").count(), 3);
        assert!(d1.path().join("rd_psnr.svg").exists());
        for p in &w1 {
            let name = p.file_name().unwrap();
            assert_eq!(std::fs::read(p).unwrap(), std::fs::read(d2.path().join(name)).unwrap(), "{name:?}");
        }
        let back = read_curves_csv(&d1.path().join("d_c_unfiltered_psnr.csv")).unwrap();
        assert_eq!(back, vec![a]);
        assert!(emit_report(&[], d1.path()).is_err());
    }

    #[test]
    fn spearman_matches_hand_values() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap(), 1.0);
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), -1.0);
        assert!((spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap() - 0.8).abs() < 1e-12);
    }
}
