//! Scan strategies: fixed orderings of the patch grid and the dynamic
//! adaptive scan, which keeps raster order but resamples every slot at a
//! learned offset from its own patch.

use std::fmt::Write as _;

use crate::error::{shape_err, Error, Result};
use crate::sampler::{grid_sample, identity_grid, CoordGrid, FeatureMap};
use crate::tensor::{Conv2dSpec, Tensor};

/// A traversal of the `H × W` grid plus where each slot reads its content from.
#[derive(Clone, Debug)]
pub struct ScanPlan {
    pub height: usize,
    pub width: usize,
    /// `order[k]` is the raster index of the slot visited at step `k`.
    pub order: Vec<usize>,
    pub source: CoordGrid,
}

impl ScanPlan {
    fn fixed(height: usize, width: usize, order: Vec<usize>) -> Result<Self> {
        let plan = Self {
            height,
            width,
            order,
            source: identity_grid(height, width)?,
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Checks that `order` is a permutation of the grid's slots.
    pub fn validate(&self) -> Result<()> {
        let n = self.height * self.width;
        if self.order.len() != n {
            return Err(Error::Contract(format!("plan visits {} of {} slots", self.order.len(), n)));
        }
        let mut seen = vec![false; n];
        for &i in &self.order {
            if i >= n || std::mem::replace(&mut seen[i], true) {
                return Err(Error::Contract(format!("slot {i} repeated or out of range")));
            }
        }
        if self.source.height() != self.height || self.source.width() != self.width {
            return Err(Error::Contract("source grid does not match plan extents".into()));
        }
        Ok(())
    }

    /// `inverse()[slot]` is the step at which `slot` is visited.
    pub fn inverse(&self) -> Vec<usize> {
        let mut inv = vec![0; self.order.len()];
        for (k, &s) in self.order.iter().enumerate() {
            inv[s] = k;
        }
        inv
    }

    /// One line per step: `slot_index, src_x_norm, src_y_norm`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for &slot in &self.order {
            let (x, y) = self.source.at(slot / self.width, slot % self.width);
            let _ = writeln!(s, "{slot}, {x}, {y}");
        }
        s
    }

    pub fn from_text(text: &str, height: usize, width: usize) -> Result<Self> {
        let n = height * width;
        let mut order = Vec::with_capacity(n);
        let mut coords = vec![0.0; n * 2];
        for (ln, line) in text.lines().filter(|l| !l.trim().is_empty()).enumerate() {
            let parts: Vec<&str> = line.split(',').map(str::trim).collect();
            let bad = || Error::Format(format!("plan line {}: {:?}", ln + 1, line));
            if parts.len() != 3 {
                return Err(bad());
            }
            let slot: usize = parts[0].parse().map_err(|_| bad())?;
            if slot >= n {
                return Err(bad());
            }
            coords[slot * 2] = parts[1].parse().map_err(|_| bad())?;
            coords[slot * 2 + 1] = parts[2].parse().map_err(|_| bad())?;
            order.push(slot);
        }
        let plan = Self {
            height,
            width,
            order,
            source: CoordGrid::new(Tensor::new(&[height, width, 2], coords)?)?,
        };
        plan.validate()?;
        Ok(plan)
    }
}

fn check_extents(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 {
        return Err(Error::Domain(format!("scan grid must be non-empty, got {h}x{w}")));
    }
    Ok(())
}

/// Row by row, left to right.
pub fn sweeping_scan(h: usize, w: usize) -> Result<ScanPlan> {
    check_extents(h, w)?;
    ScanPlan::fixed(h, w, (0..h * w).collect())
}

/// Boustrophedon: even rows left to right, odd rows right to left.
pub fn continuous_scan(h: usize, w: usize) -> Result<ScanPlan> {
    check_extents(h, w)?;
    let order = (0..h)
        .flat_map(|r| {
            let row: Box<dyn Iterator<Item = usize>> =
                if r % 2 == 0 { Box::new(0..w) } else { Box::new((0..w).rev()) };
            row.map(move |c| r * w + c)
        })
        .collect();
    ScanPlan::fixed(h, w, order)
}

/// Windows of `window × window` patches visited in raster order, raster order
/// inside each window. Edge windows may be smaller.
pub fn local_scan(h: usize, w: usize, window: usize) -> Result<ScanPlan> {
    check_extents(h, w)?;
    if window == 0 || window > h.max(w) {
        return Err(Error::Domain(format!("window {window} invalid for a {h}x{w} grid")));
    }
    let mut order = Vec::with_capacity(h * w);
    for wy in (0..h).step_by(window) {
        for wx in (0..w).step_by(window) {
            for r in wy..(wy + window).min(h) {
                for c in wx..(wx + window).min(w) {
                    order.push(r * w + c);
                }
            }
        }
    }
    ScanPlan::fixed(h, w, order)
}

fn feature_dims(x: &Tensor) -> Result<(usize, usize, usize, usize)> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(shape_err!("expected [B, H, W, C] features, got {:?}", s));
    }
    Ok((s[0], s[1], s[2], s[3]))
}

/// Flattens `[B, H, W, C]` features into `[B, L, C]` following the plan's order.
pub fn apply_plan(x: &Tensor, plan: &ScanPlan) -> Result<Tensor> {
    plan.validate()?;
    let (b, h, w, c) = feature_dims(x)?;
    if (h, w) != (plan.height, plan.width) {
        return Err(shape_err!("plan for {}x{} applied to {}x{}", plan.height, plan.width, h, w));
    }
    x.reshape(&[b, h * w, c])?.index_select(1, &plan.order)
}

/// Scatters a `[B, L, C]` sequence back onto the `[B, H, W, C]` grid.
pub fn unapply_plan(y: &Tensor, plan: &ScanPlan) -> Result<Tensor> {
    plan.validate()?;
    let s = y.shape();
    if s.len() != 3 || s[1] != plan.len() {
        return Err(shape_err!("sequence {:?} does not match plan of length {}", s, plan.len()));
    }
    y.index_select(1, &plan.inverse())?.reshape(&[s[0], plan.height, plan.width, s[2]])
}

/// Offset prediction network: depthwise 3×3 conv, layer norm, GELU and a
/// linear map to two channels, bounded by `range · tanh`.
#[derive(Clone, Debug)]
pub struct Opn {
    /// `[3, 3, 1, C]`.
    pub dw_weight: Tensor,
    pub dw_bias: Tensor,
    pub norm_gamma: Tensor,
    pub norm_beta: Tensor,
    /// `[C, 2]`, zero at initialization.
    pub head_weight: Tensor,
    pub head_bias: Tensor,
    pub offset_range: f64,
}

pub const DEFAULT_OFFSET_RANGE: f64 = 0.5;

impl Opn {
    /// Fresh network whose offsets start at exactly zero.
    pub fn init<R: rand::Rng>(channels: usize, offset_range: f64, rng: &mut R) -> Result<Self> {
        use rand_distr::{Distribution, Normal};
        let dist = Normal::new(0.0, 1.0 / 3.0).unwrap();
        Ok(Self {
            dw_weight: Tensor::param(&[3, 3, 1, channels], (0..9 * channels).map(|_| dist.sample(rng)).collect())?,
            dw_bias: Tensor::param(&[channels], vec![0.0; channels])?,
            norm_gamma: Tensor::param(&[channels], vec![1.0; channels])?,
            norm_beta: Tensor::param(&[channels], vec![0.0; channels])?,
            head_weight: Tensor::param(&[channels, 2], vec![0.0; channels * 2])?,
            head_bias: Tensor::param(&[2], vec![0.0; 2])?,
            offset_range,
        })
    }
}

/// Predicts normalized offsets `[B, H, W, 2]` from `[B, H, W, C]` features.
pub fn opn_forward(x: &Tensor, opn: &Opn) -> Result<Tensor> {
    let (_, _, _, c) = feature_dims(x)?;
    let y = x.conv2d(&opn.dw_weight, Some(&opn.dw_bias), Conv2dSpec::new(1, 1, c))?;
    let y = y.layer_norm_affine(&opn.norm_gamma, &opn.norm_beta)?.gelu();
    Ok(y.linear(&opn.head_weight, Some(&opn.head_bias))?.tanh().scale(opn.offset_range))
}

/// Result of resampling a batch with the dynamic adaptive scan.
#[derive(Clone, Debug)]
pub struct DasResample {
    /// Predicted offsets `[B, H, W, 2]`.
    pub offsets: Tensor,
    /// `p + Δp` before clamping.
    pub raw_coords: Tensor,
    /// Clamped sampling positions `[B, H, W, 2]`.
    pub coords: Tensor,
    /// Resampled features `[B, H, W, C]`.
    pub features: Tensor,
}

/// Samples each slot at `clamp(p + Δp, [-1, 1])`.
pub fn das_resample(x: &Tensor, opn: &Opn) -> Result<DasResample> {
    let (_, h, w, _) = feature_dims(x)?;
    let offsets = opn_forward(x, opn)?;
    let raw_coords = offsets.add(&identity_grid(h, w)?.coords)?;
    let coords = raw_coords.clamp(-1.0, 1.0);
    let features = grid_sample(x, &coords)?;
    Ok(DasResample { offsets, raw_coords, coords, features })
}

/// Single-image dynamic adaptive scan over an `[H, W, C]` map.
///
/// The returned plan keeps raster order; its source grid holds the
/// resampling positions.
pub fn dynamic_adaptive_scan(x: &FeatureMap, opn: &Opn) -> Result<(ScanPlan, FeatureMap)> {
    let s = x.shape();
    if s.len() != 3 {
        return Err(shape_err!("feature map must be [H, W, C], got {:?}", s));
    }
    let (h, w, c) = (s[0], s[1], s[2]);
    let r = das_resample(&x.reshape(&[1, h, w, c])?, opn)?;
    let plan = ScanPlan {
        height: h,
        width: w,
        order: (0..h * w).collect(),
        source: CoordGrid::new(r.coords.reshape(&[h, w, 2])?)?,
    };
    Ok((plan, r.features.reshape(&[h, w, c])?))
}
