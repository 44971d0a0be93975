//! Rate-distortion bookkeeping: bpp, PSNR / MS-SSIM, BD-rate, bit
//! allocation maps and simple RD plots.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub mod probe;

/// Bits per pixel of a stream of `bytes` for an `height x width` image.
pub fn bpp(bytes: usize, height: usize, width: usize) -> f64 {
    8.0 * bytes as f64 / (height * width) as f64
}

/// PSNR cap reported for identical inputs.
pub const PSNR_CAP: f64 = 99.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Psnr {
    pub db: f64,
    /// Set when the error was zero and `db` is [`PSNR_CAP`].
    pub capped: bool,
}

/// PSNR between two images with values in `[0, peak]`.
pub fn psnr(a: &Array3<f64>, b: &Array3<f64>, peak: f64) -> Result<Psnr> {
    if a.dim() != b.dim() || a.is_empty() {
        return Err(Error::Shape(format!("psnr of {:?} and {:?}", a.dim(), b.dim())));
    }
    let mse = ndarray::Zip::from(a).and(b).fold(0.0, |s, x, y| s + (x - y) * (x - y)) / a.len() as f64;
    if mse == 0.0 {
        return Ok(Psnr {
            db: PSNR_CAP,
            capped: true,
        });
    }
    // amplitude form: exact for constant offsets, where sqrt(mse) == |c|
    let db = 20.0 * (peak / mse.sqrt()).log10();
    Ok(Psnr {
        db: db.min(PSNR_CAP),
        capped: db >= PSNR_CAP,
    })
}

const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let w: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering of one plane.
fn filter_valid(x: &Array2<f64>, win: &[f64]) -> Array2<f64> {
    let k = win.len();
    let (h, w) = x.dim();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut tmp = Array2::<f64>::zeros((h, ow));
    for i in 0..h {
        for j in 0..ow {
            tmp[[i, j]] = (0..k).map(|t| win[t] * x[[i, j + t]]).sum();
        }
    }
    let mut out = Array2::<f64>::zeros((oh, ow));
    for i in 0..oh {
        for j in 0..ow {
            out[[i, j]] = (0..k).map(|t| win[t] * tmp[[i + t, j]]).sum();
        }
    }
    out
}

/// Mean SSIM and mean contrast-structure term of one plane pair.
fn ssim_terms(a: &Array2<f64>, b: &Array2<f64>, peak: f64) -> (f64, f64) {
    let size = 11.min(a.nrows()).min(a.ncols());
    let win = gaussian_window(size, 1.5);
    let (c1, c2) = ((0.01 * peak).powi(2), (0.03 * peak).powi(2));
    let mu_a = filter_valid(a, &win);
    let mu_b = filter_valid(b, &win);
    let saa = filter_valid(&(a * a), &win) - &mu_a * &mu_a;
    let sbb = filter_valid(&(b * b), &win) - &mu_b * &mu_b;
    let sab = filter_valid(&(a * b), &win) - &mu_a * &mu_b;
    let cs = ndarray::Zip::from(&sab).and(&saa).and(&sbb).map_collect(|&ab, &aa, &bb| (2.0 * ab + c2) / (aa + bb + c2));
    let l = ndarray::Zip::from(&mu_a).and(&mu_b).map_collect(|&x, &y| (2.0 * x * y + c1) / (x * x + y * y + c1));
    let n = cs.len() as f64;
    ((&l * &cs).sum() / n, cs.sum() / n)
}

fn downsample2(x: &Array2<f64>) -> Array2<f64> {
    let (h, w) = (x.nrows() / 2, x.ncols() / 2);
    Array2::from_shape_fn((h, w), |(i, j)| {
        0.25 * (x[[2 * i, 2 * j]] + x[[2 * i + 1, 2 * j]] + x[[2 * i, 2 * j + 1]] + x[[2 * i + 1, 2 * j + 1]])
    })
}

/// Multi-scale SSIM of `[C, H, W]` images in `[0, peak]`, averaged over
/// channels. Images too small for five scales use as many as fit, with the
/// scale weights renormalized.
pub fn ms_ssim(a: &Array3<f64>, b: &Array3<f64>, peak: f64) -> Result<f64> {
    if a.dim() != b.dim() || a.is_empty() {
        return Err(Error::Shape(format!("ms-ssim of {:?} and {:?}", a.dim(), b.dim())));
    }
    let (_, h, w) = a.dim();
    let mut scales = 1;
    while scales < 5 && (h.min(w) >> scales) >= 11 {
        scales += 1;
    }
    let weights = &MS_SSIM_WEIGHTS[..scales];
    let wsum: f64 = weights.iter().sum();
    let mut total = 0.0;
    for (pa, pb) in a.axis_iter(Axis(0)).zip(b.axis_iter(Axis(0))) {
        let (mut x, mut y) = (pa.to_owned(), pb.to_owned());
        let mut v = 1.0;
        for (s, wgt) in weights.iter().enumerate() {
            let (full, cs) = ssim_terms(&x, &y, peak);
            let term = if s + 1 == scales { full } else { cs };
            v *= term.max(0.0).powf(wgt / wsum);
            if s + 1 < scales {
                x = downsample2(&x);
                y = downsample2(&y);
            }
        }
        total += v;
    }
    Ok(total / a.dim().0 as f64)
}

// ---------------------------------------------------------------------------
// RD curves and BD-rate

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RdPoint {
    pub bpp: f64,
    pub metric: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RdCurve {
    pub label: String,
    pub points: Vec<RdPoint>,
}

impl RdCurve {
    /// Sorts by rate; rates must be positive and distinct.
    pub fn new(label: impl Into<String>, mut points: Vec<RdPoint>) -> Result<Self> {
        if points.iter().any(|p| !(p.bpp > 0.0) || !p.metric.is_finite()) {
            return Err(Error::InvalidArgument("RD points need positive rates and finite metrics".into()));
        }
        points.sort_by(|a, b| a.bpp.total_cmp(&b.bpp));
        if points.windows(2).any(|w| w[0].bpp == w[1].bpp) {
            return Err(Error::InvalidArgument("duplicate rate in RD curve".into()));
        }
        Ok(RdCurve {
            label: label.into(),
            points,
        })
    }

    fn is_monotone(&self) -> bool {
        self.points.windows(2).all(|w| w[1].metric > w[0].metric)
    }
}

/// Least-squares polynomial coefficients (lowest order first).
pub fn polyfit(x: &[f64], y: &[f64], degree: usize) -> Result<Vec<f64>> {
    let n = x.len();
    if n != y.len() || n <= degree {
        return Err(Error::InvalidArgument(format!("{n} points cannot fit degree {degree}")));
    }
    let a = DMatrix::from_fn(n, degree + 1, |i, j| x[i].powi(j as i32));
    let b = DVector::from_column_slice(y);
    let svd = a.svd(true, true);
    let sol = svd
        .solve(&b, 1e-14)
        .map_err(|e| Error::Numerical(format!("polynomial fit failed: {e}")))?;
    Ok(sol.iter().copied().collect())
}

fn poly_integral(c: &[f64], lo: f64, hi: f64) -> f64 {
    c.iter()
        .enumerate()
        .map(|(j, &cj)| cj * (hi.powi(j as i32 + 1) - lo.powi(j as i32 + 1)) / (j as f64 + 1.0))
        .sum()
}

/// Bjontegaard delta rate in percent of `test` against `anchor`, using a
/// cubic fit of log-rate over the metric (lower degree with fewer points).
/// Negative values are savings.
pub fn bd_rate(anchor: &RdCurve, test: &RdCurve) -> Result<f64> {
    for c in [anchor, test] {
        if c.points.len() < 2 {
            return Err(Error::InsufficientOverlap(format!("curve '{}' has fewer than 2 points", c.label)));
        }
        if !c.is_monotone() {
            log::warn!("RD curve '{}' is not monotone in its metric", c.label);
        }
    }
    // fit in a centred, unit-scaled metric so the cubic's normal equations
    // stay well conditioned at metric values in the tens
    let all: Vec<f64> = anchor.points.iter().chain(&test.points).map(|p| p.metric).collect();
    let centre = all.iter().sum::<f64>() / all.len() as f64;
    let spread = all.iter().map(|m| (m - centre).abs()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let fit = |c: &RdCurve| -> Result<(Vec<f64>, f64, f64)> {
        let m: Vec<f64> = c.points.iter().map(|p| (p.metric - centre) / spread).collect();
        let r: Vec<f64> = c.points.iter().map(|p| p.bpp.ln()).collect();
        let deg = 3.min(m.len() - 1);
        let lo = m.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = m.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Ok((polyfit(&m, &r, deg)?, lo, hi))
    };
    let (pa, alo, ahi) = fit(anchor)?;
    let (pt, tlo, thi) = fit(test)?;
    let (lo, hi) = (alo.max(tlo), ahi.min(thi));
    if !(hi > lo) {
        let back = |v: f64| v * spread + centre;
        return Err(Error::InsufficientOverlap(format!(
            "metric ranges [{}, {}] and [{}, {}] do not overlap",
            back(alo),
            back(ahi),
            back(tlo),
            back(thi)
        )));
    }
    let diff = (poly_integral(&pt, lo, hi) - poly_integral(&pa, lo, hi)) / (hi - lo);
    Ok(100.0 * diff.exp_m1())
}

/// Reads `label,bpp,metric` rows into one curve per label, in first-seen order.
pub fn read_rd_csv(text: &str) -> Result<Vec<RdCurve>> {
    let mut labels: Vec<String> = Vec::new();
    let mut pts: Vec<Vec<RdPoint>> = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (ln == 0 && line.starts_with("label")) {
            continue;
        }
        let cols: Vec<&str> = line.split(',').map(str::trim).collect();
        if cols.len() != 3 {
            return Err(Error::InvalidArgument(format!("line {}: expected label,bpp,metric", ln + 1)));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| Error::InvalidArgument(format!("line {}: {e}", ln + 1)));
        let p = RdPoint {
            bpp: num(cols[1])?,
            metric: num(cols[2])?,
        };
        match labels.iter().position(|l| l == cols[0]) {
            Some(i) => pts[i].push(p),
            None => {
                labels.push(cols[0].to_string());
                pts.push(vec![p]);
            }
        }
    }
    labels.into_iter().zip(pts).map(|(l, p)| RdCurve::new(l, p)).collect()
}

pub fn write_rd_csv(curves: &[RdCurve]) -> String {
    let mut s = String::from("label,bpp,metric\n");
    for c in curves {
        for p in &c.points {
            writeln!(s, "{},{},{}", c.label, p.bpp, p.metric).unwrap();
        }
    }
    s
}

/// RD curves as a standalone SVG line chart.
pub fn rd_plot_svg(curves: &[RdCurve], metric_name: &str) -> String {
    const W: f64 = 640.0;
    const H: f64 = 420.0;
    const M: f64 = 56.0;
    let all: Vec<&RdPoint> = curves.iter().flat_map(|c| &c.points).collect();
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for p in &all {
        x0 = x0.min(p.bpp);
        x1 = x1.max(p.bpp);
        y0 = y0.min(p.metric);
        y1 = y1.max(p.metric);
    }
    if all.is_empty() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y1 = y0 + 1.0;
    }
    let sx = |v: f64| M + (v - x0) / (x1 - x0) * (W - 2.0 * M);
    let sy = |v: f64| H - M - (v - y0) / (y1 - y0) * (H - 2.0 * M);
    let colors = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];
    let mut s = String::new();
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">"#).unwrap();
    writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#).unwrap();
    writeln!(
        s,
        r#"<path d="M{M} {} L{M} {} L{} {}" stroke="black" fill="none"/>"#,
        M,
        H - M,
        W - M,
        H - M
    )
    .unwrap();
    writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">bpp</text>"#, W / 2.0, H - 16.0).unwrap();
    writeln!(s, r#"<text x="16" y="{}" transform="rotate(-90 16 {})" text-anchor="middle">{}</text>"#, H / 2.0, H / 2.0, xml_escape(metric_name)).unwrap();
    for t in 0..=4 {
        let fx = x0 + (x1 - x0) * t as f64 / 4.0;
        let fy = y0 + (y1 - y0) * t as f64 / 4.0;
        writeln!(s, r#"<text x="{:.1}" y="{}" text-anchor="middle">{:.3}</text>"#, sx(fx), H - M + 16.0, fx).unwrap();
        writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end">{:.3}</text>"#, M - 6.0, sy(fy) + 4.0, fy).unwrap();
    }
    for (i, c) in curves.iter().enumerate() {
        let col = colors[i % colors.len()];
        let pts: Vec<String> = c.points.iter().map(|p| format!("{:.2},{:.2}", sx(p.bpp), sy(p.metric))).collect();
        writeln!(s, r#"<polyline points="{}" stroke="{col}" stroke-width="2" fill="none"/>"#, pts.join(" ")).unwrap();
        for p in &c.points {
            writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{col}"/>"#, sx(p.bpp), sy(p.metric)).unwrap();
        }
        writeln!(s, r#"<text x="{}" y="{}" fill="{col}">{}</text>"#, W - M - 120.0, M + 16.0 * i as f64, xml_escape(&c.label)).unwrap();
    }
    s.push_str("</svg>\n");
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

// ---------------------------------------------------------------------------
// Bit allocation

/// Channel-summed spatial map of per-element bits `[C, H, W]`.
pub fn bit_allocation_map(element_bits: &Array3<f64>) -> Array2<f64> {
    element_bits.sum_axis(Axis(0))
}

/// Writes `map` as an 8-bit grayscale PNG, min-max normalized and enlarged
/// by `upscale` with nearest-neighbour sampling.
pub fn save_bit_map_png(map: &Array2<f64>, upscale: usize, path: &Path) -> Result<()> {
    let (h, w) = map.dim();
    let up = upscale.max(1);
    let lo = map.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = map.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let img = image::GrayImage::from_fn((w * up) as u32, (h * up) as u32, |x, y| {
        let v = (map[[y as usize / up, x as usize / up]] - lo) / span;
        image::Luma([(v * 255.0).round() as u8])
    });
    img.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}
