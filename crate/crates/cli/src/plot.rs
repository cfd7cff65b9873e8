//! Minimal raster plots for the static report: line charts and image strips.
//! No text rendering; legends and axis ranges go into the accompanying JSON.

use image::{GrayImage, Luma, Rgb, RgbImage};

use selfcal_core::tensor::SaliencyMap;

#[derive(Debug, Clone)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
    pub color: [u8; 3],
}

pub const SC_COLOR: [u8; 3] = [200, 40, 40];
pub const BASELINE_COLOR: [u8; 3] = [40, 80, 200];

const MARGIN: i64 = 24;

/// Axis ranges of a plot, `(x_min, x_max, y_min, y_max)`.
pub fn bounds(series: &[Series]) -> Option<(f64, f64, f64, f64)> {
    let pts = series
        .iter()
        .flat_map(|s| s.points.iter())
        .filter(|(x, y)| x.is_finite() && y.is_finite());
    let mut b: Option<(f64, f64, f64, f64)> = None;
    for &(x, y) in pts {
        b = Some(match b {
            None => (x, x, y, y),
            Some((a, c, d, e)) => (a.min(x), c.max(x), d.min(y), e.max(y)),
        });
    }
    b.map(|(x0, x1, y0, y1)| {
        let (x0, x1) = if x1 > x0 { (x0, x1) } else { (x0 - 0.5, x1 + 0.5) };
        let (y0, y1) = if y1 > y0 { (y0, y1) } else { (y0 - 0.5, y1 + 0.5) };
        (x0, x1, y0, y1)
    })
}

fn put(img: &mut RgbImage, x: i64, y: i64, c: [u8; 3]) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, Rgb(c));
    }
}

fn line(img: &mut RgbImage, (mut x0, mut y0): (i64, i64), (x1, y1): (i64, i64), c: [u8; 3]) {
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let mut err = dx + dy;
    loop {
        put(img, x0, y0, c);
        put(img, x0, y0 + 1, c);
        if x0 == x1 && y0 == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x0 += sx;
        }
        if e2 <= dx {
            err += dx;
            y0 += sy;
        }
    }
}

/// Draws every series into one chart with light grid lines at quarters.
pub fn line_plot(series: &[Series], width: u32, height: u32) -> RgbImage {
    let mut img = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
    let (w, h) = (width as i64, height as i64);
    let (left, right, top, bottom) = (MARGIN, w - MARGIN, MARGIN, h - MARGIN);
    for q in 0..=4 {
        let gy = top + (bottom - top) * q / 4;
        let gx = left + (right - left) * q / 4;
        line(&mut img, (left, gy), (right, gy), [225, 225, 225]);
        line(&mut img, (gx, top), (gx, bottom), [225, 225, 225]);
    }
    line(&mut img, (left, bottom), (right, bottom), [0, 0, 0]);
    line(&mut img, (left, top), (left, bottom), [0, 0, 0]);
    let Some((x0, x1, y0, y1)) = bounds(series) else {
        return img;
    };
    let to_px = |(x, y): (f64, f64)| {
        let px = left as f64 + (x - x0) / (x1 - x0) * (right - left) as f64;
        let py = bottom as f64 - (y - y0) / (y1 - y0) * (bottom - top) as f64;
        (px.round() as i64, py.round() as i64)
    };
    for s in series {
        let pts: Vec<(i64, i64)> = s
            .points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&p| to_px(p))
            .collect();
        for pair in pts.windows(2) {
            line(&mut img, pair[0], pair[1], s.color);
        }
        for &(px, py) in &pts {
            for dy in -2..=2 {
                for dx in -2..=2 {
                    put(&mut img, px + dx, py + dy, s.color);
                }
            }
        }
    }
    img
}

/// Grid of maps, one row per entry of `rows`, each cell `cell`×`cell`,
/// separated by 2-pixel white gutters.
pub fn strip(rows: &[Vec<SaliencyMap>], cell: usize) -> GrayImage {
    const GAP: usize = 2;
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let w = cols * cell + cols.saturating_sub(1) * GAP;
    let h = rows.len() * cell + rows.len().saturating_sub(1) * GAP;
    let mut img = GrayImage::from_pixel(w.max(1) as u32, h.max(1) as u32, Luma([255]));
    for (r, row) in rows.iter().enumerate() {
        for (c, map) in row.iter().enumerate() {
            let bytes = map.resized(cell, cell).to_u8();
            let (ox, oy) = (c * (cell + GAP), r * (cell + GAP));
            for y in 0..cell {
                for x in 0..cell {
                    img.put_pixel((ox + x) as u32, (oy + y) as u32, Luma([bytes[y * cell + x]]));
                }
            }
        }
    }
    img
}
