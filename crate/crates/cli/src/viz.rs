//! SVG rendering of a learned scan path over its input image.

use std::fmt::Write as _;

use damamba::sampler::norm_to_pixel;
use damamba::Tensor;

use crate::pnm::Image;

/// One slot of the scan, in raster order.
#[derive(Clone, Debug, PartialEq)]
pub struct ScanPoint {
    /// Patch `(row, col)` the sampled position rounds to.
    pub patch: (usize, usize),
    /// Sampling position in feature-map pixels, after clamping.
    pub pixel: (f64, f64),
    /// The unclamped position left `[-1, 1]²`.
    pub outside: bool,
}

/// Nearest lattice index on an axis of extent `size`.
pub fn nearest_patch(p: f64, size: usize) -> usize {
    let i = (p + 0.5).floor();
    if i <= 0.0 {
        0
    } else {
        (i as usize).min(size - 1)
    }
}

/// Reads a `[1, h, w, 2]` (or `[h, w, 2]`) pair of coordinate tensors.
pub fn scan_points(coords: &Tensor, raw_coords: &Tensor) -> damamba::Result<Vec<ScanPoint>> {
    let s = coords.shape();
    let (h, w) = match s {
        [1, h, w, 2] | [h, w, 2] => (*h, *w),
        _ => return Err(damamba::Error::Shape(format!("expected [1, H, W, 2] coordinates, got {s:?}"))),
    };
    if raw_coords.shape() != s {
        return Err(damamba::Error::Shape("raw and clamped coordinates disagree in shape".into()));
    }
    let (c, r) = (coords.data(), raw_coords.data());
    Ok((0..h * w)
        .map(|k| {
            let px = norm_to_pixel(c[2 * k], w);
            let py = norm_to_pixel(c[2 * k + 1], h);
            ScanPoint {
                patch: (nearest_patch(py, h), nearest_patch(px, w)),
                pixel: (px, py),
                outside: r[2 * k].abs() > 1.0 || r[2 * k + 1].abs() > 1.0,
            }
        })
        .collect())
}

/// Canvas pixels per image pixel, aiming for roughly 512 px on the long side.
fn zoom(img: &Image) -> f64 {
    (512.0 / img.width.max(img.height) as f64).max(1.0).floor()
}

/// Draws the image, the sampled patches and the raster-order path.
///
/// Markers carry `class="point"`, path pieces `class="segment"`; the start is
/// a star (`class="start"`) and the end a ring (`class="end"`).
pub fn render_svg(img: &Image, grid: (usize, usize), points: &[ScanPoint]) -> String {
    let (gh, gw) = grid;
    let z = zoom(img);
    let (cw, ch) = (img.width as f64 * z, img.height as f64 * z);
    // patch centre in canvas units
    let centre = |(r, c): (usize, usize)| -> (f64, f64) {
        ((c as f64 + 0.5) * cw / gw as f64, (r as f64 + 0.5) * ch / gh as f64)
    };
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{cw}" height="{ch}" viewBox="0 0 {cw} {ch}">"#
    );
    s.push_str("<g id=\"image\" shape-rendering=\"crispEdges\">\n");
    for y in 0..img.height {
        for x in 0..img.width {
            let [r, g, b] = img.pixel(x, y);
            let _ = writeln!(
                s,
                r##"<rect x="{}" y="{}" width="{z}" height="{z}" fill="#{r:02x}{g:02x}{b:02x}"/>"##,
                x as f64 * z,
                y as f64 * z
            );
        }
    }
    s.push_str("</g>\n<g id=\"path\" stroke=\"#ffd400\" stroke-width=\"2\" stroke-opacity=\"0.8\">\n");
    for pair in points.windows(2) {
        let (x1, y1) = centre(pair[0].patch);
        let (x2, y2) = centre(pair[1].patch);
        let _ = writeln!(s, r#"<line class="segment" x1="{x1:.2}" y1="{y1:.2}" x2="{x2:.2}" y2="{y2:.2}"/>"#);
    }
    s.push_str("</g>\n<g id=\"points\">\n");
    let radius = (0.18 * cw.min(ch) / gw.max(gh) as f64).clamp(2.0, 10.0);
    for p in points {
        let (x, y) = centre(p.patch);
        let fill = if p.outside { "#9a9a9a" } else { "#ff4f00" };
        let _ = writeln!(s, r#"<circle class="point" cx="{x:.2}" cy="{y:.2}" r="{radius:.2}" fill="{fill}"/>"#);
    }
    s.push_str("</g>\n");
    if let (Some(first), Some(last)) = (points.first(), points.last()) {
        let (x, y) = centre(first.patch);
        let star: Vec<String> = (0..10)
            .map(|k| {
                let rad = if k % 2 == 0 { 2.5 * radius } else { radius };
                let a = std::f64::consts::PI * (k as f64 / 5.0 - 0.5);
                format!("{:.2},{:.2}", x + rad * a.cos(), y + rad * a.sin())
            })
            .collect();
        let _ = writeln!(s, r##"<polygon class="start" points="{}" fill="#00c853" stroke="black"/>"##, star.join(" "));
        let (x, y) = centre(last.patch);
        let _ = writeln!(
            s,
            r##"<circle class="end" cx="{x:.2}" cy="{y:.2}" r="{:.2}" fill="none" stroke="#2962ff" stroke-width="3"/>"##,
            2.0 * radius
        );
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_patch_rounds_half_up_and_clamps() {
        assert_eq!(nearest_patch(0.49, 4), 0);
        assert_eq!(nearest_patch(0.5, 4), 1);
        assert_eq!(nearest_patch(-0.7, 4), 0);
        assert_eq!(nearest_patch(3.6, 4), 3);
    }

    #[test]
    fn identity_coordinates_give_raster_patches() {
        let g = damamba::sampler::identity_grid(3, 4).unwrap().coords;
        let pts = scan_points(&g, &g).unwrap();
        let patches: Vec<_> = pts.iter().map(|p| p.patch).collect();
        let raster: Vec<_> = (0..3).flat_map(|r| (0..4).map(move |c| (r, c))).collect();
        assert_eq!(patches, raster);
        assert!(pts.iter().all(|p| !p.outside));
    }

    #[test]
    fn svg_counts_match_slots() {
        let img = Image { width: 8, height: 8, rgb: vec![40; 8 * 8 * 3] };
        let g = damamba::sampler::identity_grid(2, 2).unwrap().coords;
        let svg = render_svg(&img, (2, 2), &scan_points(&g, &g).unwrap());
        assert_eq!(svg.matches(r#"class="point""#).count(), 4);
        assert_eq!(svg.matches(r#"class="segment""#).count(), 3);
        assert_eq!(svg.matches("<polygon").count(), 1);
    }
}
