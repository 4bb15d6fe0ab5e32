//! Bilinear feature sampling at normalized coordinates.
//!
//! Coordinates live in `[-1, 1]²` with `(-1, -1)` the upper-left patch and
//! `(1, 1)` the lower-right one; the first component runs along the width.
//! A normalized value `t` on an axis of extent `S` maps to pixel
//! `(t + 1) / 2 · (S − 1)`. Lattice points outside the map contribute zero.

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Pixel positions this close to an integer are treated as lying on it.
const LATTICE_SNAP: f64 = 1e-9;

/// `H × W × 2` normalized coordinates, `(x, y)` per location.
#[derive(Clone, Debug)]
pub struct CoordGrid {
    pub coords: Tensor,
}

impl CoordGrid {
    pub fn new(coords: Tensor) -> Result<Self> {
        let s = coords.shape();
        if s.len() != 3 || s[2] != 2 {
            return Err(shape_err!("coordinate grid must be [H, W, 2], got {:?}", s));
        }
        Ok(Self { coords })
    }

    pub fn height(&self) -> usize {
        self.coords.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.coords.shape()[1]
    }

    /// `(x, y)` at row `h`, column `w`.
    pub fn at(&self, h: usize, w: usize) -> (f64, f64) {
        let i = (h * self.width() + w) * 2;
        (self.coords.data()[i], self.coords.data()[i + 1])
    }
}

/// `H × W × C` features.
pub type FeatureMap = Tensor;

/// Normalized position of lattice index `i` on an axis of extent `size`.
pub fn lattice_to_norm(i: usize, size: usize) -> f64 {
    if size <= 1 {
        0.0
    } else {
        2.0 * i as f64 / (size - 1) as f64 - 1.0
    }
}

/// Pixel position of a normalized coordinate, snapped onto the lattice when
/// within rounding distance of it.
pub fn norm_to_pixel(t: f64, size: usize) -> f64 {
    let p = (t + 1.0) * 0.5 * size.saturating_sub(1) as f64;
    let r = p.round();
    if (p - r).abs() <= LATTICE_SNAP * r.abs().max(1.0) {
        r
    } else {
        p
    }
}

/// Corner-aligned grid mapping every location to its own patch.
pub fn identity_grid(h: usize, w: usize) -> Result<CoordGrid> {
    if h == 0 || w == 0 {
        return Err(shape_err!("identity grid needs positive extents, got {}x{}", h, w));
    }
    let mut v = Vec::with_capacity(h * w * 2);
    for r in 0..h {
        for c in 0..w {
            v.push(lattice_to_norm(c, w));
            v.push(lattice_to_norm(r, h));
        }
    }
    CoordGrid::new(Tensor::new(&[h, w, 2], v)?)
}

/// Bilinear weight `max(0, 1 − |c − d|) · max(0, 1 − |e − f|)` in pixel units.
pub fn bilinear_weight(c: f64, d: f64, e: f64, f: f64) -> f64 {
    (1.0 - (c - d).abs()).max(0.0) * (1.0 - (e - f).abs()).max(0.0)
}

/// Lower corner index and fractional weight of the upper corner.
///
/// Uses the cell `[ceil(p) − 1, ceil(p)]`, so a point exactly on lattice
/// line `k` belongs to the cell below it and carries weight 1 on `k`.
#[inline]
fn cell(p: f64) -> (isize, f64) {
    let c0 = p.ceil() - 1.0;
    (c0 as isize, p - c0)
}

struct Corner {
    /// Flat offset of the lattice point in the source map, if inside.
    src: Option<usize>,
    w: f64,
    /// ∂w/∂px and ∂w/∂py.
    dwx: f64,
    dwy: f64,
}

#[inline]
fn corners(px: f64, py: f64, h: usize, w: usize) -> [Corner; 4] {
    let (x0, fx) = cell(px);
    let (y0, fy) = cell(py);
    let at = |yy: isize, xx: isize| -> Option<usize> {
        (yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w).then(|| yy as usize * w + xx as usize)
    };
    [
        Corner { src: at(y0, x0), w: (1.0 - fx) * (1.0 - fy), dwx: -(1.0 - fy), dwy: -(1.0 - fx) },
        Corner { src: at(y0, x0 + 1), w: fx * (1.0 - fy), dwx: 1.0 - fy, dwy: -fx },
        Corner { src: at(y0 + 1, x0), w: (1.0 - fx) * fy, dwx: -fy, dwy: 1.0 - fx },
        Corner { src: at(y0 + 1, x0 + 1), w: fx * fy, dwx: fy, dwy: fx },
    ]
}

/// Samples `x: [B, H, W, C]` at `coords: [B, Ho, Wo, 2]`, giving `[B, Ho, Wo, C]`.
///
/// Differentiable in both the features and the coordinates.
pub fn grid_sample(x: &Tensor, coords: &Tensor) -> Result<Tensor> {
    let (xs, cs) = (x.shape(), coords.shape());
    if xs.len() != 4 || cs.len() != 4 || cs[3] != 2 || cs[0] != xs[0] {
        return Err(shape_err!("grid_sample of features {:?} at coords {:?}", xs, cs));
    }
    if !coords.all_finite() {
        return Err(Error::Numerics("non-finite sampling coordinates".into()));
    }
    let (b, h, w, c) = (xs[0], xs[1], xs[2], xs[3]);
    let (ho, wo) = (cs[1], cs[2]);
    let (xv, cv) = (x.data(), coords.data());
    let sx = 0.5 * w.saturating_sub(1) as f64;
    let sy = 0.5 * h.saturating_sub(1) as f64;
    let mut out = vec![0.0; b * ho * wo * c];
    for bi in 0..b {
        let src = &xv[bi * h * w * c..(bi + 1) * h * w * c];
        for o in 0..ho * wo {
            let loc = bi * ho * wo + o;
            let px = norm_to_pixel(cv[loc * 2], w);
            let py = norm_to_pixel(cv[loc * 2 + 1], h);
            let dst = &mut out[loc * c..(loc + 1) * c];
            for k in corners(px, py, h, w) {
                let Some(s) = k.src else { continue };
                if k.w == 0.0 {
                    continue;
                }
                let row = &src[s * c..(s + 1) * c];
                if k.w == 1.0 {
                    dst.copy_from_slice(row);
                } else {
                    for (d, v) in dst.iter_mut().zip(row) {
                        *d += k.w * v;
                    }
                }
            }
        }
    }
    let (xt, ct) = (x.clone(), coords.clone());
    Ok(Tensor::from_op(vec![b, ho, wo, c], out, vec![x.clone(), coords.clone()], move |ctx| {
        let (xv, cv) = (xt.data(), ct.data());
        let mut gx = ctx.needs[0].then(|| vec![0.0; xv.len()]);
        let mut gc = ctx.needs[1].then(|| vec![0.0; cv.len()]);
        for bi in 0..b {
            let base = bi * h * w * c;
            for o in 0..ho * wo {
                let loc = bi * ho * wo + o;
                let px = norm_to_pixel(cv[loc * 2], w);
                let py = norm_to_pixel(cv[loc * 2 + 1], h);
                let g = &ctx.grad[loc * c..(loc + 1) * c];
                let (mut dpx, mut dpy) = (0.0, 0.0);
                for k in corners(px, py, h, w) {
                    let Some(s) = k.src else { continue };
                    let row = base + s * c;
                    if let Some(gx) = gx.as_mut() {
                        if k.w != 0.0 {
                            for (d, gv) in gx[row..row + c].iter_mut().zip(g) {
                                *d += k.w * gv;
                            }
                        }
                    }
                    if gc.is_some() {
                        let dot: f64 = g.iter().zip(&xv[row..row + c]).map(|(a, b)| a * b).sum();
                        dpx += k.dwx * dot;
                        dpy += k.dwy * dot;
                    }
                }
                if let Some(gc) = gc.as_mut() {
                    gc[loc * 2] = dpx * sx;
                    gc[loc * 2 + 1] = dpy * sy;
                }
            }
        }
        vec![gx, gc]
    }))
}

/// Resamples one `[H, W, C]` map at a `[Ho, Wo, 2]` grid.
pub fn sample(coords: &CoordGrid, x: &FeatureMap) -> Result<FeatureMap> {
    let xs = x.shape();
    if xs.len() != 3 {
        return Err(shape_err!("feature map must be [H, W, C], got {:?}", xs));
    }
    let (ho, wo) = (coords.height(), coords.width());
    let y = grid_sample(&x.reshape(&[1, xs[0], xs[1], xs[2]])?, &coords.coords.reshape(&[1, ho, wo, 2])?)?;
    y.reshape(&[ho, wo, xs[2]])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::GradCheck;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_map(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> Tensor {
        Tensor::new(&[h, w, c], (0..h * w * c).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
    }

    fn grid_of(points: &[(f64, f64)]) -> CoordGrid {
        let v = points.iter().flat_map(|&(x, y)| [x, y]).collect();
        CoordGrid::new(Tensor::new(&[1, points.len(), 2], v).unwrap()).unwrap()
    }

    /// Literal sum of weight × feature over every lattice point.
    fn brute_force(x: &Tensor, tx: f64, ty: f64) -> Vec<f64> {
        let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let ax = (tx + 1.0) / 2.0 * (w - 1) as f64;
        let ay = (ty + 1.0) / 2.0 * (h - 1) as f64;
        let mut out = vec![0.0; c];
        for ry in 0..h {
            for rx in 0..w {
                let g = bilinear_weight(ax, rx as f64, ay, ry as f64);
                for k in 0..c {
                    out[k] += g * x.data()[(ry * w + rx) * c + k];
                }
            }
        }
        out
    }

    #[test]
    fn identity_grid_columns() {
        let g = identity_grid(2, 4).unwrap();
        let xs: Vec<f64> = (0..4).map(|c| g.at(0, c).0).collect();
        let want = [-1.0, -1.0 / 3.0, 1.0 / 3.0, 1.0];
        for (a, b) in xs.iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(g.at(0, 0), (-1.0, -1.0));
        assert_eq!(g.at(1, 3), (1.0, 1.0));
    }

    #[test]
    fn degenerate_grid() {
        let g = identity_grid(1, 1).unwrap();
        assert_eq!(g.at(0, 0), (0.0, 0.0));
        assert!(matches!(identity_grid(0, 3), Err(Error::Shape(_))));
    }

    #[test]
    fn weight_values() {
        assert_eq!(bilinear_weight(2.0, 2.0, 3.0, 3.0), 1.0);
        assert_eq!(bilinear_weight(2.5, 2.0, 3.5, 3.0), 0.25);
        assert_eq!(bilinear_weight(2.0, 4.0, 1.0, 1.0), 0.0);
    }

    #[test]
    fn identity_sampling_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for (h, w) in [(1, 1), (1, 5), (3, 3), (4, 7), (6, 5), (7, 7)] {
            let x = rand_map(&mut rng, h, w, 3);
            let y = sample(&identity_grid(h, w).unwrap(), &x).unwrap();
            let a: Vec<u64> = x.data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = y.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b, "{h}x{w}");
        }
    }

    #[test]
    fn centre_of_two_by_two() {
        let x = Tensor::new(&[2, 2, 1], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let y = sample(&grid_of(&[(0.0, 0.0)]), &x).unwrap();
        assert_eq!(y.to_vec(), vec![1.5]);
    }

    #[test]
    fn half_pixel_on_a_row() {
        let x = Tensor::new(&[1, 3, 1], vec![0.0, 6.0, 0.0]).unwrap();
        // pixel x = 0.5 on a width-3 axis is normalized -0.5
        let y = sample(&grid_of(&[(-0.5, 0.0)]), &x).unwrap();
        assert_eq!(y.to_vec(), vec![3.0]);
    }

    #[test]
    fn non_finite_coordinates() {
        let x = Tensor::zeros(&[2, 2, 1]);
        assert!(matches!(sample(&grid_of(&[(f64::NAN, 0.0)]), &x), Err(Error::Numerics(_))));
    }

    #[test]
    fn agrees_with_literal_weight_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_map(&mut rng, 5, 6, 2);
        for _ in 0..200 {
            let (tx, ty) = (rng.random_range(-1.6..1.6), rng.random_range(-1.6..1.6));
            let got = sample(&grid_of(&[(tx, ty)]), &x).unwrap();
            for (a, b) in got.data().iter().zip(brute_force(&x, tx, ty)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn constant_map_has_flat_coordinate_gradient() {
        let x = Tensor::full(&[1, 4, 4, 2], 3.0);
        let coords = Tensor::param(&[1, 1, 3, 2], vec![-0.3, 0.2, 0.45, -0.9, 0.1, 0.7]).unwrap();
        grid_sample(&x, &coords).unwrap().sum().backward().unwrap();
        assert!(coords.grad_tensor().data().iter().all(|g| g.abs() < 1e-12));
    }

    #[test]
    fn ramp_gradient_is_one_per_pixel() {
        let (h, w) = (3, 5);
        let x = Tensor::new(&[1, h, w, 1], (0..h * w).map(|i| (i % w) as f64).collect()).unwrap();
        let coords = Tensor::param(&[1, 1, 1, 2], vec![0.13, -0.41]).unwrap();
        grid_sample(&x, &coords).unwrap().sum().backward().unwrap();
        let g = coords.grad_tensor().to_vec();
        // d out / d pixel_x = 1, and d pixel_x / d t = (W-1)/2
        assert!((g[0] / ((w - 1) as f64 / 2.0) - 1.0).abs() < 1e-12);
        assert!(g[1].abs() < 1e-12);
    }

    #[test]
    fn lattice_crossing_uses_lower_cell() {
        let x = Tensor::new(&[1, 1, 3, 1], vec![0.0, 1.0, 5.0]).unwrap();
        let coords = Tensor::param(&[1, 1, 1, 2], vec![0.0, 0.0]).unwrap();
        grid_sample(&x, &coords).unwrap().sum().backward().unwrap();
        // pixel x = 1 belongs to cell [0, 1]: slope 1 - 0, times (W-1)/2 = 1
        assert_eq!(coords.grad_tensor().to_vec()[0], 1.0);
    }

    #[test]
    fn gradcheck_random_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_map(&mut rng, 5, 5, 2).reshape(&[1, 5, 5, 2]).unwrap();
        let mut pts = vec![];
        while pts.len() < 24 {
            let t: f64 = rng.random_range(-1.2..1.2);
            // keep probes well away from lattice lines
            let p = (t + 1.0) * 2.0;
            if (p - p.round()).abs() > 1e-3 {
                pts.push(t);
            }
        }
        let coords = Tensor::new(&[1, 3, 4, 2], pts).unwrap();
        let wts = rand_map(&mut rng, 3, 4, 2).reshape(&[1, 3, 4, 2]).unwrap();
        let r = GradCheck::default()
            .run(&[x, coords], |t| Ok(grid_sample(&t[0], &t[1])?.mul(&wts)?.sum()))
            .unwrap();
        assert!(r.max_rel_err < 1e-4, "{}", r.max_rel_err);
    }
}
