//! Procedural "face" videos with exact ground truth, and generator-native
//! oracle episodes.
//!
//! A face is an ellipse with two eyes and a mouth curve, drawn in a
//! canonical frame and moved by a similarity transform per frame over a
//! static value-noise background. An optional square occluder slides over
//! everything. Because every layer moves rigidly, flows, masks and
//! visibility follow analytically.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rigid_tensor::{sigmoid, Tensor};

use crate::composition::Triplet;
use crate::error::{shape_err, Error, Result};
use crate::flow::{estimate_flow, occlusion_mask, EstimatorParams, FlowField, OcclusionThresholds};
use crate::generator::{Generator, LatentCode, NoiseMap};
use crate::imaging::{AffineTransform, Frame, FrameShape, Mask};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Attributes {
    /// "chubby"
    pub face_width: f64,
    /// "smile"
    pub mouth_curvature: f64,
    pub eye_openness: f64,
}

impl Attributes {
    pub fn neutral() -> Self {
        Self {
            face_width: 0.5,
            mouth_curvature: 0.5,
            eye_openness: 0.5,
        }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.face_width, self.mouth_curvature, self.eye_openness]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Occluder {
    pub half_size: f64,
    pub start: (f64, f64),
    pub velocity: (f64, f64),
    pub color: [f64; 3],
    /// Edge softness in pixels.
    pub edge_px: f64,
}

/// Face trajectory: `centre(t) = centre + velocity * t + wobble * sin(freq * t)`,
/// `scale(t) = scale * (1 + growth * t)`, `angle(t) = angle + spin * t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Trajectory {
    pub centre: (f64, f64),
    pub velocity: (f64, f64),
    pub wobble: (f64, f64),
    pub wobble_freq: f64,
    pub scale: f64,
    pub growth: f64,
    pub angle: f64,
    pub spin: f64,
}

impl Trajectory {
    pub fn still(centre: (f64, f64), scale: f64) -> Self {
        Self {
            centre,
            velocity: (0.0, 0.0),
            wobble: (0.0, 0.0),
            wobble_freq: 0.0,
            scale,
            growth: 0.0,
            angle: 0.0,
            spin: 0.0,
        }
    }

    /// Canonical face coordinates -> frame pixels at time `t`.
    pub fn pose(&self, t: f64) -> Pose {
        let w = (self.wobble_freq * t).sin();
        Pose {
            cx: self.centre.0 + self.velocity.0 * t + self.wobble.0 * w,
            cy: self.centre.1 + self.velocity.1 * t + self.wobble.1 * w,
            scale: self.scale * (1.0 + self.growth * t),
            angle: self.angle + self.spin * t,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub cx: f64,
    pub cy: f64,
    pub scale: f64,
    pub angle: f64,
}

impl Pose {
    pub fn to_frame(&self, u: f64, v: f64) -> (f64, f64) {
        let (s, c) = self.angle.sin_cos();
        (
            self.cx + self.scale * (c * u - s * v),
            self.cy + self.scale * (s * u + c * v),
        )
    }

    pub fn to_face(&self, x: f64, y: f64) -> (f64, f64) {
        let (s, c) = self.angle.sin_cos();
        let (dx, dy) = ((x - self.cx) / self.scale, (y - self.cy) / self.scale);
        (c * dx + s * dy, -s * dx + c * dy)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneParams {
    pub frame_resolution: usize,
    pub crop_resolution: usize,
    pub frames: usize,
    pub trajectory: Trajectory,
    pub attributes: Attributes,
    pub background_seed: u64,
    pub occluder: Option<Occluder>,
    /// Draw the face. Off for the occlusion-only scenes.
    pub face: bool,
}

/// Largest per-frame displacement of any face point before a trajectory
/// counts as discontinuous.
pub const MAX_STEP_PX: f64 = 6.0;

/// Edge softness of all drawn shapes, in pixels.
const EDGE_PX: f64 = 1.5;

impl SceneParams {
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 {
            return Err(Error::InvalidParameter("episode needs at least one frame".into()));
        }
        if self.frame_resolution < 8 || self.crop_resolution < 4 {
            return Err(Error::InvalidParameter("resolution too small".into()));
        }
        let a = self.attributes.as_array();
        if a.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidParameter(format!("attributes must lie in [0, 1], got {a:?}")));
        }
        if self.trajectory.scale <= 0.0 {
            return Err(Error::InvalidParameter("face scale must be positive".into()));
        }
        // probe the face outline between consecutive frames
        for t in 1..self.frames {
            let (p0, p1) = (self.trajectory.pose(t as f64 - 1.0), self.trajectory.pose(t as f64));
            if p1.scale <= 0.0 {
                return Err(Error::InvalidParameter(format!("face scale collapses at frame {t}")));
            }
            for k in 0..16 {
                let ang = k as f64 * std::f64::consts::TAU / 16.0;
                let (u, v) = (ang.cos(), ang.sin());
                let (a, b) = (p0.to_frame(u, v), p1.to_frame(u, v));
                let step = (a.0 - b.0).hypot(a.1 - b.1);
                if step > MAX_STEP_PX {
                    return Err(Error::InvalidParameter(format!(
                        "trajectory jumps {step:.2} px between frames {} and {t}",
                        t - 1
                    )));
                }
            }
            if let Some(o) = &self.occluder {
                if o.velocity.0.hypot(o.velocity.1) > MAX_STEP_PX {
                    return Err(Error::InvalidParameter("occluder moves too fast".into()));
                }
            }
        }
        Ok(())
    }

    /// Random scene centred in the frame with mild motion.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, frame_resolution: usize, crop_resolution: usize, frames: usize, occluder: bool) -> Self {
        let r = frame_resolution as f64;
        let scale = r * rng.random_range(0.2..0.26);
        let mid = (r - 1.0) / 2.0;
        let trajectory = Trajectory {
            centre: (mid + rng.random_range(-0.06..0.06) * r, mid + rng.random_range(-0.06..0.06) * r),
            velocity: (rng.random_range(-1.0..1.0), rng.random_range(-0.8..0.8)),
            wobble: (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)),
            wobble_freq: rng.random_range(0.3..0.9),
            scale,
            growth: rng.random_range(-0.015..0.015),
            angle: rng.random_range(-0.15..0.15),
            spin: rng.random_range(-0.03..0.03),
        };
        let attributes = Attributes {
            face_width: rng.random_range(0.0..1.0),
            mouth_curvature: rng.random_range(0.0..1.0),
            eye_openness: rng.random_range(0.0..1.0),
        };
        let occluder = occluder.then(|| {
            let from_left = rng.random_bool(0.5);
            let speed = rng.random_range(1.5..3.0);
            let half = r * rng.random_range(0.1..0.16);
            let y = mid + rng.random_range(-0.2..0.2) * r;
            let x = if from_left { mid - 0.35 * r } else { mid + 0.35 * r };
            Occluder {
                half_size: half,
                start: (x, y),
                velocity: (if from_left { speed } else { -speed }, rng.random_range(-0.5..0.5)),
                color: [rng.random_range(0.05..0.3), rng.random_range(0.2..0.5), rng.random_range(0.6..0.95)],
                edge_px: EDGE_PX,
            }
        });
        Self {
            frame_resolution,
            crop_resolution,
            frames,
            trajectory,
            attributes,
            background_seed: rng.random(),
            occluder,
            face: true,
        }
    }

    /// No face: a square slides across the textured background at a whole
    /// number of pixels per frame, so visibility labels are exact.
    pub fn sliding_occluder<R: Rng + ?Sized>(rng: &mut R, frame_resolution: usize, frames: usize) -> Self {
        let mut p = Self::random(rng, frame_resolution, frame_resolution, frames, false);
        let r = frame_resolution as f64;
        let mid = (r - 1.0) / 2.0;
        let from_left = rng.random_bool(0.5);
        let speed = rng.random_range(2..=3) as f64;
        let x = if from_left { mid - 0.3 * r } else { mid + 0.3 * r };
        p.occluder = Some(Occluder {
            half_size: r * rng.random_range(0.15..0.22),
            start: (x, mid + rng.random_range(-0.2..0.2) * r),
            velocity: (if from_left { speed } else { -speed }, rng.random_range(-1..=1) as f64),
            color: [rng.random(), rng.random(), rng.random()],
            edge_px: 0.25,
        });
        p.face = false;
        p
    }

    /// Full-frame -> aligned crop transform at frame `t`: undoes the face
    /// pose and maps the canonical head into the crop.
    pub fn alignment(&self, t: usize) -> Result<AffineTransform> {
        let p = self.trajectory.pose(t as f64);
        let c = self.crop_resolution as f64;
        let k = c / 2.6 / p.scale;
        let (s, co) = (-p.angle).sin_cos();
        let (a, b) = (k * co, k * s);
        // crop = k R(-angle) (x - centre) + (c - 1) / 2
        let mid = (c - 1.0) / 2.0;
        let tx = mid - (a * p.cx - b * p.cy);
        let ty = mid - (b * p.cx + a * p.cy);
        AffineTransform::new([[a, -b, tx], [b, a, ty]])
    }
}

/// Static value-noise background, two octaves per channel.
struct Background {
    cells: usize,
    lattice: Vec<[f64; 3]>,
    fine: Vec<[f64; 3]>,
    cell_px: f64,
}

impl Background {
    fn new(seed: u64, resolution: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cell_px = 8.0;
        let cells = (resolution as f64 / cell_px).ceil() as usize + 2;
        let fine_cells = 2 * cells;
        let mut draw = |n: usize, amp: f64| -> Vec<[f64; 3]> {
            (0..n)
                .map(|_| {
                    [
                        rng.random_range(-amp..amp),
                        rng.random_range(-amp..amp),
                        rng.random_range(-amp..amp),
                    ]
                })
                .collect()
        };
        let lattice = draw(cells * cells, 0.55);
        let fine = draw(fine_cells * fine_cells, 0.2);
        Self {
            cells,
            lattice,
            fine,
            cell_px,
        }
    }

    fn octave(grid: &[[f64; 3]], n: usize, x: f64, y: f64) -> [f64; 3] {
        let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
        let (x0, y0) = (x.floor().max(0.0) as usize, y.floor().max(0.0) as usize);
        let (x0, y0) = (x0.min(n - 2), y0.min(n - 2));
        let (fx, fy) = (smooth((x - x0 as f64).clamp(0.0, 1.0)), smooth((y - y0 as f64).clamp(0.0, 1.0)));
        let g = |i: usize, j: usize| grid[j * n + i];
        let mut out = [0.0; 3];
        for (c, o) in out.iter_mut().enumerate() {
            let top = g(x0, y0)[c] * (1.0 - fx) + g(x0 + 1, y0)[c] * fx;
            let bot = g(x0, y0 + 1)[c] * (1.0 - fx) + g(x0 + 1, y0 + 1)[c] * fx;
            *o = top * (1.0 - fy) + bot * fy;
        }
        out
    }

    fn at(&self, x: f64, y: f64) -> [f64; 3] {
        let a = Self::octave(&self.lattice, self.cells, x / self.cell_px, y / self.cell_px);
        let b = Self::octave(&self.fine, 2 * self.cells, 2.0 * x / self.cell_px, 2.0 * y / self.cell_px);
        [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layer {
    Background,
    Face,
    Occluder,
}

fn cover(signed_px: f64) -> f64 {
    sigmoid(-signed_px / EDGE_PX)
}

/// Face colour (in [0, 1]) and coverage at canonical `(u, v)`; `px` is the
/// number of pixels per canonical unit.
fn face_sample(a: &Attributes, u: f64, v: f64, px: f64) -> ([f64; 3], f64) {
    let ax = 0.62 + 0.3 * a.face_width;
    let ay = 1.0;
    let rho = ((u / ax).powi(2) + (v / ay).powi(2)).sqrt();
    let head = cover((rho - 1.0) * ax.min(ay) * px);
    let shade = 1.0 + 0.12 * (4.0 * u + 1.0).sin() * (3.0 * v).cos() - 0.08 * v;
    let mut col = [0.88 * shade, 0.64 * shade, 0.5 * shade];
    let mut over = |c: [f64; 3], alpha: f64| {
        for k in 0..3 {
            col[k] = alpha * c[k] + (1.0 - alpha) * col[k];
        }
    };
    let (ex, ey) = (0.14, 0.03 + 0.11 * a.eye_openness);
    for side in [-1.0, 1.0] {
        let (du, dv) = (u - side * 0.36 * ax / 0.77, v + 0.25);
        let r = ((du / ex).powi(2) + (dv / ey).powi(2)).sqrt();
        over([0.12, 0.08, 0.1], cover((r - 1.0) * ey * px));
    }
    let half = 0.35;
    let curve = |x: f64| 0.45 + (a.mouth_curvature - 0.5) * 0.3 * (1.0 - (x / half).powi(2));
    let d = if u.abs() <= half {
        (v - curve(u)).abs()
    } else {
        let ex = half * u.signum();
        (u - ex).hypot(v - curve(ex))
    };
    over([0.62, 0.14, 0.2], cover((d - 0.06) * px));
    (col, head)
}

fn occluder_cover(o: &Occluder, t: f64, x: f64, y: f64) -> f64 {
    let (ox, oy) = (o.start.0 + o.velocity.0 * t, o.start.1 + o.velocity.1 * t);
    let d = (x - ox).abs().max((y - oy).abs()) - o.half_size;
    sigmoid(-d / o.edge_px)
}

/// Ground truth carried by an episode.
#[derive(Clone, Debug, Default)]
pub struct GroundTruth {
    pub transforms: Vec<AffineTransform>,
    pub masks: Vec<Mask>,
    /// `flows_prev[t - 1] = f_{t => t-1}` for `t = 1..T`.
    pub flows_prev: Vec<FlowField>,
    /// `flows_next[t] = f_{t => t+1}` for `t = 0..T-1`.
    pub flows_next: Vec<FlowField>,
    /// `visibility[t - 1] = V_{t <= t-1}`: 1 where the pixel of frame `t`
    /// shows the same surface point in frame `t - 1`.
    pub visibility: Vec<Mask>,
    pub latents: Option<Vec<LatentCode>>,
    pub noises: Option<Vec<NoiseMap>>,
    pub attributes: Option<Attributes>,
}

#[derive(Clone, Debug)]
pub struct Episode {
    pub frames: Vec<Frame>,
    pub gt: Option<GroundTruth>,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn shape(&self) -> Option<FrameShape> {
        self.frames.first().map(|f| f.shape())
    }

    pub fn validate(&self) -> Result<()> {
        let shape = self.shape().ok_or(Error::Empty("episode"))?;
        if self.frames.iter().any(|f| f.shape() != shape) {
            return Err(shape_err("episode frames differ in shape"));
        }
        if let Some(gt) = &self.gt {
            let t = self.len();
            let check = |n: usize, want: usize, what: &str| {
                if n != want && n != 0 {
                    Err(shape_err(format!("episode has {n} {what}, expected {want}")))
                } else {
                    Ok(())
                }
            };
            check(gt.transforms.len(), t, "transforms")?;
            check(gt.masks.len(), t, "masks")?;
            check(gt.flows_prev.len(), t - 1, "backward flows")?;
            check(gt.flows_next.len(), t - 1, "forward flows")?;
            check(gt.visibility.len(), t - 1, "visibility maps")?;
            if let Some(l) = &gt.latents {
                check(l.len(), t, "latent codes")?;
            }
            if gt.masks.iter().any(|m| m.shape() != shape)
                || gt.flows_prev.iter().chain(&gt.flows_next).any(|f| f.shape() != shape)
            {
                return Err(shape_err("ground-truth maps differ from frame shape"));
            }
        }
        Ok(())
    }

    /// Composition training samples for every interior frame.
    pub fn triplets(&self) -> Result<Vec<Triplet>> {
        let gt = self
            .gt
            .as_ref()
            .ok_or_else(|| Error::MissingPrerequisite("episode has no flows".into()))?;
        if gt.flows_prev.len() + 1 != self.len() || gt.flows_next.len() + 1 != self.len() {
            return Err(Error::MissingPrerequisite("episode flows incomplete".into()));
        }
        Ok((1..self.len().saturating_sub(1))
            .map(|t| Triplet {
                prev: self.frames[t - 1].clone(),
                cur: self.frames[t].clone(),
                next: self.frames[t + 1].clone(),
                flow_prev: gt.flows_prev[t - 1].clone(),
                flow_next: gt.flows_next[t].clone(),
            })
            .collect())
    }
}

struct Scene<'a> {
    p: &'a SceneParams,
    bg: Background,
}

impl Scene<'_> {
    /// Colour in [-1, 1] and the dominant layer at pixel `(x, y)`, time `t`.
    fn sample(&self, t: f64, x: f64, y: f64) -> ([f64; 3], Layer, f64) {
        let pose = self.p.trajectory.pose(t);
        let (u, v) = pose.to_face(x, y);
        // edge softness is fixed in face units so the face moves rigidly
        let (face_col, face_a) = if self.p.face {
            face_sample(&self.p.attributes, u, v, self.p.trajectory.scale)
        } else {
            ([0.0; 3], 0.0)
        };
        let bg = self.bg.at(x, y);
        let mut col = [0.0; 3];
        for k in 0..3 {
            col[k] = face_a * (2.0 * face_col[k] - 1.0) + (1.0 - face_a) * bg[k];
        }
        let mut layer = if face_a > 0.5 { Layer::Face } else { Layer::Background };
        let mut face_visible = face_a;
        if let Some(o) = &self.p.occluder {
            let oa = occluder_cover(o, t, x, y);
            for k in 0..3 {
                col[k] = oa * (2.0 * o.color[k] - 1.0) + (1.0 - oa) * col[k];
            }
            if oa > 0.5 {
                layer = Layer::Occluder;
            }
            face_visible *= 1.0 - oa;
        }
        (col, layer, face_visible)
    }

    /// Displacement from time `t` to time `s` of the surface point shown at
    /// `(x, y)` in frame `t`.
    fn displacement(&self, layer: Layer, t: f64, s: f64, x: f64, y: f64) -> (f64, f64) {
        match layer {
            Layer::Background => (0.0, 0.0),
            Layer::Face => {
                let (u, v) = self.p.trajectory.pose(t).to_face(x, y);
                let (qx, qy) = self.p.trajectory.pose(s).to_frame(u, v);
                (qx - x, qy - y)
            }
            Layer::Occluder => {
                let o = self.p.occluder.as_ref().expect("occluder layer without occluder");
                (o.velocity.0 * (s - t), o.velocity.1 * (s - t))
            }
        }
    }
}

/// Renders frames plus exact flows, masks, transforms and visibility.
pub fn render_episode(params: &SceneParams) -> Result<Episode> {
    params.validate()?;
    let scene = Scene {
        p: params,
        bg: Background::new(params.background_seed, params.frame_resolution),
    };
    let r = params.frame_resolution;
    let shape = FrameShape::square(r);
    let n = r * r;
    let mut frames = Vec::with_capacity(params.frames);
    let mut masks = Vec::with_capacity(params.frames);
    let mut layers: Vec<Vec<Layer>> = Vec::with_capacity(params.frames);
    for t in 0..params.frames {
        let mut data = vec![0.0; 3 * n];
        let mut mask = vec![0.0; n];
        let mut lay = Vec::with_capacity(n);
        for y in 0..r {
            for x in 0..r {
                let (col, layer, face) = scene.sample(t as f64, x as f64, y as f64);
                let i = y * r + x;
                for k in 0..3 {
                    data[k * n + i] = col[k].clamp(-1.0, 1.0);
                }
                mask[i] = face.clamp(0.0, 1.0);
                lay.push(layer);
            }
        }
        frames.push(Frame::from_planar(shape, data)?);
        masks.push(Mask::from_values(shape, mask)?);
        layers.push(lay);
    }
    let flow_between = |t: usize, s: usize| {
        FlowField::from_fn(shape, |x, y| {
            scene.displacement(layers[t][y * r + x], t as f64, s as f64, x as f64, y as f64)
        })
    };
    let flows_prev: Vec<FlowField> = (1..params.frames).map(|t| flow_between(t, t - 1)).collect();
    let flows_next: Vec<FlowField> = (0..params.frames.saturating_sub(1)).map(|t| flow_between(t, t + 1)).collect();
    let visibility = (1..params.frames)
        .map(|t| {
            let f = &flows_prev[t - 1];
            let values = (0..n)
                .map(|i| {
                    let (x, y) = ((i % r) as f64, (i / r) as f64);
                    let (dx, dy) = f.get(i / r, i % r);
                    let (qx, qy) = ((x + dx).round(), (y + dy).round());
                    let inside = qx >= 0.0 && qy >= 0.0 && qx <= (r - 1) as f64 && qy <= (r - 1) as f64;
                    let same = inside && layers[t - 1][qy as usize * r + qx as usize] == layers[t][i];
                    if same {
                        1.0
                    } else {
                        0.0
                    }
                })
                .collect();
            Mask::from_values(shape, values)
        })
        .collect::<Result<Vec<_>>>()?;
    let transforms = (0..params.frames).map(|t| params.alignment(t)).collect::<Result<Vec<_>>>()?;
    Ok(Episode {
        frames,
        gt: Some(GroundTruth {
            transforms,
            masks,
            flows_prev,
            flows_next,
            visibility,
            latents: None,
            noises: None,
            attributes: Some(params.attributes),
        }),
    })
}

/// Episode whose frames are generator outputs. Alignment is the identity,
/// masks are full, flows come from the estimator and visibility from the
/// forward-backward check.
pub fn render_oracle_episode(gen: &Generator, codes: &[LatentCode], noises: &[NoiseMap]) -> Result<Episode> {
    if codes.is_empty() {
        return Err(Error::Empty("code trajectory"));
    }
    if noises.len() != codes.len() {
        return Err(shape_err(format!("{} codes but {} noise maps", codes.len(), noises.len())));
    }
    let frames = codes
        .iter()
        .zip(noises)
        .map(|(c, n)| gen.synthesize(c, n))
        .collect::<Result<Vec<_>>>()?;
    let shape = gen.config().frame_shape();
    let est = EstimatorParams::default();
    let t = frames.len();
    let flows_prev = (1..t)
        .map(|i| estimate_flow(&frames[i], &frames[i - 1], &est))
        .collect::<Result<Vec<_>>>()?;
    let flows_next = (0..t.saturating_sub(1))
        .map(|i| estimate_flow(&frames[i], &frames[i + 1], &est))
        .collect::<Result<Vec<_>>>()?;
    let visibility = (1..t)
        .map(|i| {
            // V_{t <= t-1}: forward flow t -> t-1 checked against t-1 -> t
            occlusion_mask(&flows_prev[i - 1], &flows_next[i - 1], OcclusionThresholds::default())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Episode {
        frames,
        gt: Some(GroundTruth {
            transforms: vec![AffineTransform::identity(); t],
            masks: vec![Mask::ones(shape); t],
            flows_prev,
            flows_next,
            visibility,
            latents: Some(codes.to_vec()),
            noises: Some(noises.to_vec()),
            attributes: None,
        }),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CodeTrajectoryParams {
    /// Spread of the per-episode offset from the prior mean.
    pub spread: f64,
    /// Per-frame drift of the former rows.
    pub step: f64,
    pub noise_std: f64,
}

impl Default for CodeTrajectoryParams {
    fn default() -> Self {
        Self {
            spread: 0.5,
            step: 0.12,
            noise_std: 1.0,
        }
    }
}

/// Smooth code trajectory around the prior mean: one random offset per
/// episode, a constant-velocity drift on the former rows, constant latter
/// rows, and one noise map per episode.
pub fn sample_code_trajectory<R: Rng + ?Sized>(
    gen: &Generator,
    frames: usize,
    params: &CodeTrajectoryParams,
    rng: &mut R,
) -> Result<(Vec<LatentCode>, Vec<NoiseMap>)> {
    let cfg = gen.config();
    let (l, d, k) = (cfg.latent_layers, cfg.latent_dim, cfg.split_index);
    let base = gen
        .mean_code()
        .rows()
        .zip_map(&Tensor::randn(&[l, d], params.spread, rng), |a, b| a + b);
    let mut velocity = Tensor::randn(&[l, d], params.step, rng);
    velocity.data_mut()[k * d..].fill(0.0);
    let noise = NoiseMap::new(Tensor::randn(&[1, cfg.noise_resolution, cfg.noise_resolution], params.noise_std, rng))?;
    let codes = (0..frames)
        .map(|t| LatentCode::new(base.zip_map(&velocity, |b, v| b + v * t as f64), k))
        .collect::<Result<Vec<_>>>()?;
    Ok((codes, vec![noise; frames]))
}

/// Sliding-square episodes for scene seeds `seeds`.
pub fn occlusion_episodes(seeds: std::ops::Range<u64>, resolution: usize, frames: usize) -> Result<Vec<Episode>> {
    seeds
        .map(|s| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            render_episode(&SceneParams::sliding_occluder(&mut rng, resolution, frames))
        })
        .collect()
}

/// Seeds `[0, n)` split 85 / 15 into training and evaluation ranges.
pub fn split_seeds(n: usize) -> (std::ops::Range<u64>, std::ops::Range<u64>) {
    let train = ((n as f64) * 0.85).round() as u64;
    (0..train, train..n as u64)
}
