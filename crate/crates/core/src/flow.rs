//! Flow fields, backward warping, forward-backward occlusion detection and a
//! small block-matching flow estimator.
//!
//! Convention: for a flow `f` from frame `t` to frame `s`, the warped frame
//! at pixel `p` samples frame `s` at `p + f(p)`.

use rigid_tensor::{kernels, Tape, Tensor, Var};

use crate::error::{shape_err, Error, Result};
use crate::imaging::{Frame, FrameShape, Mask};

/// Planar `[2, H, W]` displacement field, channel 0 = dx, channel 1 = dy.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    data: Tensor,
}

impl FlowField {
    pub fn from_tensor(t: Tensor) -> Result<Self> {
        let t = match t.shape() {
            [1, 2, h, w] => {
                let (h, w) = (*h, *w);
                t.reshape(&[2, h, w])
            }
            [2, _, _] => t,
            s => return Err(shape_err(format!("flow must be [2, H, W], got {s:?}"))),
        };
        if !t.all_finite() {
            return Err(Error::NonFinite("flow".into()));
        }
        Ok(Self { data: t })
    }

    pub fn zeros(shape: FrameShape) -> Self {
        Self::constant(shape, 0.0, 0.0)
    }

    pub fn constant(shape: FrameShape, dx: f64, dy: f64) -> Self {
        let n = shape.height * shape.width;
        let mut data = vec![dx; 2 * n];
        data[n..].fill(dy);
        Self {
            data: Tensor::new(&[2, shape.height, shape.width], data),
        }
    }

    /// Builds a field from a per-pixel function of `(x, y)`.
    pub fn from_fn(shape: FrameShape, f: impl Fn(usize, usize) -> (f64, f64)) -> Self {
        let n = shape.height * shape.width;
        let mut data = vec![0.0; 2 * n];
        for y in 0..shape.height {
            for x in 0..shape.width {
                let (dx, dy) = f(x, y);
                data[y * shape.width + x] = dx;
                data[n + y * shape.width + x] = dy;
            }
        }
        Self {
            data: Tensor::new(&[2, shape.height, shape.width], data),
        }
    }

    pub fn shape(&self) -> FrameShape {
        FrameShape::new(self.data.shape()[1], self.data.shape()[2])
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn batched(&self) -> Tensor {
        let s = self.shape();
        self.data.reshaped(&[1, 2, s.height, s.width])
    }

    pub fn get(&self, y: usize, x: usize) -> (f64, f64) {
        let s = self.shape();
        let n = s.height * s.width;
        let i = y * s.width + x;
        (self.data.data()[i], self.data.data()[n + i])
    }

    pub fn negated(&self) -> FlowField {
        Self {
            data: self.data.map(|v| -v),
        }
    }

    pub fn max_magnitude(&self) -> f64 {
        let s = self.shape();
        (0..s.height)
            .flat_map(|y| (0..s.width).map(move |x| (y, x)))
            .map(|(y, x)| {
                let (dx, dy) = self.get(y, x);
                dx.hypot(dy)
            })
            .fold(0.0, f64::max)
    }
}

/// `[1, 2, H, W]` integer pixel grid (x then y).
pub fn base_grid(shape: FrameShape) -> Tensor {
    FlowField::from_fn(shape, |x, y| (x as f64, y as f64)).batched()
}

/// Warps a `[C, H, W]` or `[N, C, H, W]` tensor (batch 1) with `flow`.
pub fn warp_tensor(source: &Tensor, flow: &FlowField) -> Result<Tensor> {
    let src = match source.shape() {
        [c, h, w] => source.reshaped(&[1, *c, *h, *w]),
        [1, _, _, _] => source.clone(),
        s => return Err(shape_err(format!("cannot warp tensor of shape {s:?}"))),
    };
    let (_, c, h, w) = src.dims4();
    if FrameShape::new(h, w) != flow.shape() {
        return Err(shape_err(format!(
            "warp: source {h}x{w} vs flow {:?}",
            flow.shape()
        )));
    }
    let mut coords = base_grid(flow.shape());
    coords.add_assign(&flow.batched());
    let out = kernels::sample_bilinear(&src, &coords);
    Ok(if source.rank() == 3 { out.reshape(&[c, h, w]) } else { out })
}

/// Backward warp of an RGB frame.
pub fn warp(source: &Frame, flow: &FlowField) -> Result<Frame> {
    Frame::from_tensor(warp_tensor(source.tensor(), flow)?)
}

/// Differentiable warp; `source` is `[1, C, H, W]`, `flow` is `[1, 2, H, W]`.
pub fn warp_var(tape: &mut Tape, source: Var, flow: Var) -> Var {
    let s = tape.shape(flow);
    let grid = tape.constant(base_grid(FrameShape::new(s[2], s[3])));
    let coords = tape.add(grid, flow);
    tape.sample_bilinear(source, coords)
}

/// [`warp_var`] with a constant flow.
pub fn warp_var_const(tape: &mut Tape, source: Var, flow: &FlowField) -> Var {
    let mut coords = base_grid(flow.shape());
    coords.add_assign(&flow.batched());
    let c = tape.constant(coords);
    tape.sample_bilinear(source, c)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OcclusionThresholds {
    pub tau_rel: f64,
    pub tau_abs: f64,
}

impl Default for OcclusionThresholds {
    fn default() -> Self {
        Self {
            tau_rel: 0.01,
            tau_abs: 0.5,
        }
    }
}

/// Forward-backward consistency check. Returns a hard mask that is 1 where
/// `forward` and the warped `backward` flow cancel out.
pub fn occlusion_mask(forward: &FlowField, backward: &FlowField, th: OcclusionThresholds) -> Result<Mask> {
    if forward.shape() != backward.shape() {
        return Err(shape_err(format!(
            "occlusion_mask: {:?} vs {:?}",
            forward.shape(),
            backward.shape()
        )));
    }
    let s = forward.shape();
    let bw = warp_tensor(backward.tensor(), forward)?;
    let n = s.height * s.width;
    let (f, b) = (forward.tensor().data(), bw.data());
    let values = (0..n)
        .map(|i| {
            let (fx, fy, bx, by) = (f[i], f[n + i], b[i], b[n + i]);
            let sum = (fx + bx).powi(2) + (fy + by).powi(2);
            let mags = fx * fx + fy * fy + bx * bx + by * by;
            if sum < th.tau_rel * mags + th.tau_abs {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    Mask::from_values(s, values)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EstimatorParams {
    pub levels: usize,
    pub block: usize,
    /// Distance between block centres.
    pub step: usize,
    /// Integer search radius at the coarsest level.
    pub coarse_radius: i64,
    /// Integer search radius around the upsampled estimate at finer levels.
    pub refine_radius: i64,
}

impl Default for EstimatorParams {
    fn default() -> Self {
        Self {
            levels: 3,
            block: 8,
            step: 4,
            coarse_radius: 3,
            refine_radius: 2,
        }
    }
}

struct Gray {
    w: usize,
    h: usize,
    v: Vec<f64>,
}

impl Gray {
    fn from_frame(f: &Frame) -> Self {
        let (h, w) = (f.height(), f.width());
        let d = f.tensor().data();
        let n = h * w;
        let v = (0..n).map(|i| (d[i] + d[n + i] + d[2 * n + i]) / 3.0).collect();
        Self { w, h, v }
    }

    #[inline]
    fn at(&self, x: i64, y: i64) -> f64 {
        let x = x.clamp(0, self.w as i64 - 1) as usize;
        let y = y.clamp(0, self.h as i64 - 1) as usize;
        self.v[y * self.w + x]
    }

    fn downsample(&self) -> Self {
        let (w, h) = (self.w.div_ceil(2), self.h.div_ceil(2));
        let mut v = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                let (sx, sy) = (2 * x as i64, 2 * y as i64);
                v[y * w + x] = 0.25 * (self.at(sx, sy) + self.at(sx + 1, sy) + self.at(sx, sy + 1) + self.at(sx + 1, sy + 1));
            }
        }
        Self { w, h, v }
    }
}

/// Sparse flow samples on a regular grid of block centres.
struct GridFlow {
    step: usize,
    gw: usize,
    gh: usize,
    dx: Vec<f64>,
    dy: Vec<f64>,
}

impl GridFlow {
    fn centre(&self, g: usize) -> i64 {
        (g * self.step + self.step / 2) as i64
    }

    /// Bilinear interpolation of the grid samples at pixel `(x, y)`.
    fn sample(&self, x: f64, y: f64) -> (f64, f64) {
        let half = (self.step / 2) as f64;
        let gx = (x - half) / self.step as f64;
        let gy = (y - half) / self.step as f64;
        let (x0, x1, fx, _) = kernels::bilinear_taps(gx, self.gw);
        let (y0, y1, fy, _) = kernels::bilinear_taps(gy, self.gh);
        let lerp = |v: &[f64]| {
            let top = v[y0 * self.gw + x0] * (1.0 - fx) + v[y0 * self.gw + x1] * fx;
            let bot = v[y1 * self.gw + x0] * (1.0 - fx) + v[y1 * self.gw + x1] * fx;
            top * (1.0 - fy) + bot * fy
        };
        (lerp(&self.dx), lerp(&self.dy))
    }
}

fn block_ssd(t: &Gray, s: &Gray, cx: i64, cy: i64, dx: i64, dy: i64, block: usize) -> f64 {
    let half = (block / 2) as i64;
    let mut acc = 0.0;
    for oy in -half..block as i64 - half {
        for ox in -half..block as i64 - half {
            let d = t.at(cx + ox, cy + oy) - s.at(cx + ox + dx, cy + oy + dy);
            acc += d * d;
        }
    }
    acc
}

/// Vertex offset of the parabola through `(-1, a), (0, b), (1, c)`.
fn parabolic(a: f64, b: f64, c: f64) -> f64 {
    let denom = a - 2.0 * b + c;
    if denom <= 1e-12 {
        0.0
    } else {
        (0.5 * (a - c) / denom).clamp(-0.5, 0.5)
    }
}

fn match_level(t: &Gray, s: &Gray, prior: Option<&GridFlow>, p: &EstimatorParams, radius: i64) -> GridFlow {
    let step = p.step;
    let gw = t.w.div_ceil(step).max(1);
    let gh = t.h.div_ceil(step).max(1);
    let mut out = GridFlow {
        step,
        gw,
        gh,
        dx: vec![0.0; gw * gh],
        dy: vec![0.0; gw * gh],
    };
    for gy in 0..gh {
        for gx in 0..gw {
            let (cx, cy) = (out.centre(gx), out.centre(gy));
            let (px, py) = prior.map_or((0.0, 0.0), |g| {
                let (dx, dy) = g.sample(cx as f64 / 2.0, cy as f64 / 2.0);
                (2.0 * dx, 2.0 * dy)
            });
            let (bx, by) = (px.round() as i64, py.round() as i64);
            let mut best = (f64::INFINITY, 0i64, 0i64);
            for dy in by - radius..=by + radius {
                for dx in bx - radius..=bx + radius {
                    let cost = block_ssd(t, s, cx, cy, dx, dy, p.block);
                    // ties go to the smaller displacement so static content stays at zero
                    let closer = dx * dx + dy * dy < best.1 * best.1 + best.2 * best.2;
                    if cost < best.0 || (cost == best.0 && closer) {
                        best = (cost, dx, dy);
                    }
                }
            }
            let (c0, dx, dy) = best;
            let (mut fx, mut fy) = (dx as f64, dy as f64);
            if c0 > 1e-12 {
                let cost = |ddx: i64, ddy: i64| block_ssd(t, s, cx, cy, dx + ddx, dy + ddy, p.block);
                fx += parabolic(cost(-1, 0), c0, cost(1, 0));
                fy += parabolic(cost(0, -1), c0, cost(0, 1));
            }
            out.dx[gy * gw + gx] = fx;
            out.dy[gy * gw + gx] = fy;
        }
    }
    out
}

/// Estimates `f_{target => source}` by coarse-to-fine block matching with
/// parabolic sub-pixel refinement. Deterministic.
pub fn estimate_flow(target: &Frame, source: &Frame, params: &EstimatorParams) -> Result<FlowField> {
    if target.shape() != source.shape() {
        return Err(shape_err(format!(
            "estimate_flow: {:?} vs {:?}",
            target.shape(),
            source.shape()
        )));
    }
    if params.levels == 0 || params.block == 0 || params.step == 0 {
        return Err(Error::InvalidParameter("estimator levels, block and step must be positive".into()));
    }
    let mut pyr_t = vec![Gray::from_frame(target)];
    let mut pyr_s = vec![Gray::from_frame(source)];
    for _ in 1..params.levels {
        let (t, s) = (pyr_t.last().unwrap(), pyr_s.last().unwrap());
        if t.w < 2 * params.block || t.h < 2 * params.block {
            break;
        }
        let (t2, s2) = (t.downsample(), s.downsample());
        pyr_t.push(t2);
        pyr_s.push(s2);
    }
    let mut grid: Option<GridFlow> = None;
    for lvl in (0..pyr_t.len()).rev() {
        let radius = if grid.is_none() {
            params.coarse_radius
        } else {
            params.refine_radius
        };
        grid = Some(match_level(&pyr_t[lvl], &pyr_s[lvl], grid.as_ref(), params, radius));
    }
    let grid = grid.expect("at least one level");
    let shape = target.shape();
    Ok(FlowField::from_fn(shape, |x, y| grid.sample(x as f64, y as f64)))
}
