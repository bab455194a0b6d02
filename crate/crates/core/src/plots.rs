//! Figures rendered purely from the analysis CSV and JSON files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use ndarray::Array2;

use crate::analysis::CorrelationGrid;
use crate::error::{Error, Result};

const W: f64 = 480.0;
const H: f64 = 320.0;
const PAD: f64 = 44.0;

struct BinPoint {
    center: f64,
    mean: f64,
    std: f64,
}

/// `(group, metric) -> head -> points`, from `bins.csv`.
type Curves = BTreeMap<(String, String), BTreeMap<String, Vec<BinPoint>>>;

fn parse_bins(csv: &str) -> Result<Curves> {
    let mut lines = csv.lines();
    let header = lines.next().unwrap_or_default();
    if header != "group,metric,head,bin,lo,hi,count,mean,std" {
        return Err(Error::schema("bins.csv", format!("unexpected header `{header}`")));
    }
    let mut out = Curves::new();
    for (i, line) in lines.enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 9 {
            return Err(Error::schema(format!("bins.csv line {}", i + 2), "expected 9 fields"));
        }
        if f[7].is_empty() {
            continue;
        }
        let num = |s: &str| {
            s.parse::<f64>()
                .map_err(|e| Error::schema(format!("bins.csv line {}", i + 2), e.to_string()))
        };
        out.entry((f[0].to_string(), f[1].to_string()))
            .or_default()
            .entry(f[2].to_string())
            .or_default()
            .push(BinPoint {
                center: 0.5 * (num(f[4])? + num(f[5])?),
                mean: num(f[7])?,
                std: num(f[8])?,
            });
    }
    Ok(out)
}

fn colour(head: &str) -> &'static str {
    match head {
        "fc" => "#1f77b4",
        "conv" => "#d62728",
        _ => "#444444",
    }
}

fn x_px(v: f64) -> f64 {
    PAD + v * (W - 2.0 * PAD)
}

fn y_px(v: f64) -> f64 {
    H - PAD - v.clamp(0.0, 1.0) * (H - 2.0 * PAD)
}

/// Mean curve with a one-std band per head, against proposal IoU.
fn curve_svg(title: &str, heads: &BTreeMap<String, Vec<BinPoint>>) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="18" text-anchor="middle">{title}</text>"#, W / 2.0);
    let (x0, x1, y0, y1) = (x_px(0.0), x_px(1.0), y_px(0.0), y_px(1.0));
    let _ = writeln!(s, r#"<path d="M{x0},{y1} L{x0},{y0} L{x1},{y0}" stroke="black" fill="none"/>"#);
    for k in 0..=5 {
        let v = k as f64 / 5.0;
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{v:.1}</text>"#, x_px(v), y0 + 14.0);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{v:.1}</text>"#, x0 - 4.0, y_px(v) + 4.0);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">proposal IoU</text>"#, W / 2.0, H - 8.0);
    for (i, (head, pts)) in heads.iter().enumerate() {
        let c = colour(head);
        let upper: Vec<String> = pts.iter().map(|p| format!("{:.2},{:.2}", x_px(p.center), y_px(p.mean + p.std))).collect();
        let lower: Vec<String> = pts
            .iter()
            .rev()
            .map(|p| format!("{:.2},{:.2}", x_px(p.center), y_px(p.mean - p.std)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polygon points="{} {}" fill="{c}" fill-opacity="0.15" stroke="none"/>"#,
            upper.join(" "),
            lower.join(" ")
        );
        let line: Vec<String> = pts.iter().map(|p| format!("{:.2},{:.2}", x_px(p.center), y_px(p.mean))).collect();
        let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{c}" stroke-width="2"/>"#, line.join(" "));
        let ly = 34.0 + 14.0 * i as f64;
        let _ = writeln!(s, r#"<text x="{:.1}" y="{ly}" fill="{c}">{head}-head</text>"#, x0 + 8.0);
    }
    s.push_str("</svg>\n");
    s
}

/// One SVG per `(group, metric)` in `bins.csv`, keyed by file name.
pub fn bin_plots(bins_csv: &str) -> Result<Vec<(String, String)>> {
    Ok(parse_bins(bins_csv)?
        .iter()
        .map(|((group, metric), heads)| {
            (format!("bins_{group}_{metric}.svg"), curve_svg(&format!("{metric} ({group})"), heads))
        })
        .collect())
}

/// Diverging colour for a value in `[-1, 1]`; grey for undefined.
fn diverging(v: f64) -> [u8; 3] {
    if !v.is_finite() {
        return [128, 128, 128];
    }
    let t = v.clamp(-1.0, 1.0);
    let fade = |a: f64| (255.0 * (1.0 - a)).round() as u8;
    if t >= 0.0 {
        [255, fade(t), fade(t)]
    } else {
        [fade(-t), fade(-t), 255]
    }
}

/// Tiled grid as an RGB image, `scale` pixels per entry, with a one pixel
/// separator between tiles.
pub fn heatmap_png(grid: &CorrelationGrid, scale: usize, path: &Path) -> Result<()> {
    let tiled: Array2<f64> = grid.tiled();
    let k = grid.side;
    let n = tiled.nrows();
    let side = n * scale + (k - 1);
    let mut bytes = vec![0u8; side * side * 3];
    for ((r, c), &v) in tiled.indexed_iter() {
        let (oy, ox) = (r * scale + r / k, c * scale + c / k);
        let rgb = diverging(v);
        for dy in 0..scale {
            for dx in 0..scale {
                let at = ((oy + dy) * side + ox + dx) * 3;
                bytes[at..at + 3].copy_from_slice(&rgb);
            }
        }
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), side as u32, side as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let png_err = |e: png::EncodingError| Error::Png(e.to_string());
    let mut w = enc.write_header().map_err(png_err)?;
    w.write_image_data(&bytes).map_err(png_err)?;
    w.finish().map_err(png_err)
}
