//! Image containers, similarity alignment and mask blending.
//!
//! Frames are stored planar (`[3, H, W]`, channel-major) with values in
//! `[-1, 1]`. Pixel centres sit on integer coordinates and all resampling
//! clamps to the edge.

use rigid_tensor::{kernels, Tape, Tensor, Var};

use crate::error::{shape_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct FrameShape {
    pub height: usize,
    pub width: usize,
}

impl FrameShape {
    pub fn new(height: usize, width: usize) -> Self {
        Self { height, width }
    }

    pub fn square(size: usize) -> Self {
        Self::new(size, size)
    }
}

/// An RGB frame, `[3, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    data: Tensor,
}

impl Frame {
    pub const CHANNELS: usize = 3;

    pub fn from_tensor(t: Tensor) -> Result<Self> {
        let t = match t.shape() {
            [1, 3, h, w] => {
                let (h, w) = (*h, *w);
                t.reshape(&[3, h, w])
            }
            [3, _, _] => t,
            s => return Err(shape_err(format!("frame must be [3, H, W], got {s:?}"))),
        };
        if t.shape()[1] == 0 || t.shape()[2] == 0 {
            return Err(shape_err("frame dimensions must be positive"));
        }
        if !t.all_finite() {
            return Err(Error::NonFinite("frame pixels".into()));
        }
        Ok(Self { data: t })
    }

    /// Planar `[3, H, W]` data.
    pub fn from_planar(shape: FrameShape, data: Vec<f64>) -> Result<Self> {
        if data.len() != 3 * shape.height * shape.width {
            return Err(shape_err(format!(
                "expected {} values for a {}x{} frame, got {}",
                3 * shape.height * shape.width,
                shape.height,
                shape.width,
                data.len()
            )));
        }
        Self::from_tensor(Tensor::new(&[3, shape.height, shape.width], data))
    }

    pub fn constant(shape: FrameShape, value: f64) -> Self {
        Self {
            data: Tensor::full(&[3, shape.height, shape.width], value),
        }
    }

    pub fn zeros(shape: FrameShape) -> Self {
        Self::constant(shape, 0.0)
    }

    pub fn shape(&self) -> FrameShape {
        FrameShape::new(self.data.shape()[1], self.data.shape()[2])
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor {
        self.data
    }

    /// `[1, 3, H, W]` copy for the tape.
    pub fn batched(&self) -> Tensor {
        self.data.reshaped(&[1, 3, self.height(), self.width()])
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data.data()[(c * self.height() + y) * self.width() + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        let (h, w) = (self.height(), self.width());
        self.data.data_mut()[(c * h + y) * w + x] = v;
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Frame {
        Frame {
            data: self.data.map(f),
        }
    }
}

/// Single-channel map in `[0, 1]`, `[1, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    data: Tensor,
}

impl Mask {
    pub fn from_tensor(t: Tensor) -> Result<Self> {
        let t = match t.shape() {
            [1, 1, h, w] => {
                let (h, w) = (*h, *w);
                t.reshape(&[1, h, w])
            }
            [1, _, _] => t,
            s => return Err(shape_err(format!("mask must be [1, H, W], got {s:?}"))),
        };
        if t.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidParameter("mask values must lie in [0, 1]".into()));
        }
        Ok(Self { data: t })
    }

    pub fn from_values(shape: FrameShape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.height * shape.width {
            return Err(shape_err("mask value count does not match shape"));
        }
        Self::from_tensor(Tensor::new(&[1, shape.height, shape.width], data))
    }

    pub fn full(shape: FrameShape, value: f64) -> Self {
        assert!((0.0..=1.0).contains(&value));
        Self {
            data: Tensor::full(&[1, shape.height, shape.width], value),
        }
    }

    pub fn ones(shape: FrameShape) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn zeros(shape: FrameShape) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn shape(&self) -> FrameShape {
        FrameShape::new(self.data.shape()[1], self.data.shape()[2])
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn values(&self) -> &[f64] {
        self.data.data()
    }

    pub fn batched(&self) -> Tensor {
        let s = self.shape();
        self.data.reshaped(&[1, 1, s.height, s.width])
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data.data()[y * self.shape().width + x]
    }

    /// True when every value is exactly 0 or 1.
    pub fn is_hard(&self) -> bool {
        self.data.data().iter().all(|&v| v == 0.0 || v == 1.0)
    }

    /// Pixels with value at least `threshold` become 1, the rest 0.
    pub fn threshold(&self, threshold: f64) -> Mask {
        Mask {
            data: self.data.map(|v| if v >= threshold { 1.0 } else { 0.0 }),
        }
    }
}

/// 2x3 similarity transform from full-frame coordinates to aligned-crop
/// coordinates: `p_aligned = M * [x, y, 1]^T`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineTransform {
    m: [[f64; 3]; 2],
}

impl AffineTransform {
    /// Validates invertibility and the similarity structure
    /// `[[a, -b, tx], [b, a, ty]]`.
    pub fn new(m: [[f64; 3]; 2]) -> Result<Self> {
        if m.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("transform".into()));
        }
        let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
        if det.abs() < 1e-12 {
            return Err(Error::InvalidTransform(det));
        }
        let scale = det.abs().sqrt();
        let tol = 1e-6 * scale.max(1.0);
        if (m[0][0] - m[1][1]).abs() > tol || (m[0][1] + m[1][0]).abs() > tol {
            return Err(Error::NotSimilarity(format!("{m:?}")));
        }
        Ok(Self { m })
    }

    pub fn identity() -> Self {
        Self {
            m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
        }
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self {
            m: [[1.0, 0.0, tx], [0.0, 1.0, ty]],
        }
    }

    /// `p -> scale * R(angle) * p + t`.
    pub fn similarity(scale: f64, angle: f64, tx: f64, ty: f64) -> Result<Self> {
        let (s, c) = angle.sin_cos();
        Self::new([[scale * c, -scale * s, tx], [scale * s, scale * c, ty]])
    }

    pub fn matrix(&self) -> [[f64; 3]; 2] {
        self.m
    }

    /// Row-major six numbers.
    pub fn to_row_major(&self) -> [f64; 6] {
        let m = self.m;
        [m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2]]
    }

    pub fn from_row_major(v: [f64; 6]) -> Result<Self> {
        Self::new([[v[0], v[1], v[2]], [v[3], v[4], v[5]]])
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let m = &self.m;
        (
            m[0][0] * x + m[0][1] * y + m[0][2],
            m[1][0] * x + m[1][1] * y + m[1][2],
        )
    }

    pub fn inverse(&self) -> AffineTransform {
        let m = &self.m;
        let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
        let (a, b, c, d) = (m[1][1] / det, -m[0][1] / det, -m[1][0] / det, m[0][0] / det);
        AffineTransform {
            m: [
                [a, b, -(a * m[0][2] + b * m[1][2])],
                [c, d, -(c * m[0][2] + d * m[1][2])],
            ],
        }
    }

    /// `self` after `first`: `p -> self(first(p))`.
    pub fn compose(&self, first: &AffineTransform) -> AffineTransform {
        let (a, b) = (&self.m, &first.m);
        let mut m = [[0.0; 3]; 2];
        for (i, row) in m.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = a[i][0] * b[0][j] + a[i][1] * b[1][j] + if j == 2 { a[i][2] } else { 0.0 };
            }
        }
        AffineTransform { m }
    }
}

/// A face crop at generator resolution plus the transform it was cut with.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignedFrame {
    pub pixels: Frame,
    pub transform: AffineTransform,
}

/// Sampling coordinates `[1, 2, h, w]` in frame space for each aligned pixel.
pub fn align_coords(transform: &AffineTransform, out: FrameShape) -> Tensor {
    let inv = transform.inverse();
    let npix = out.height * out.width;
    let mut data = vec![0.0; 2 * npix];
    for y in 0..out.height {
        for x in 0..out.width {
            let (fx, fy) = inv.apply(x as f64, y as f64);
            data[y * out.width + x] = fx;
            data[npix + y * out.width + x] = fy;
        }
    }
    Tensor::new(&[1, 2, out.height, out.width], data)
}

/// Sampling coordinates into the aligned crop for each canvas pixel, and the
/// `[1, 1, H, W]` indicator of canvas pixels that land inside the crop.
pub fn unalign_coords(transform: &AffineTransform, crop: FrameShape, canvas: FrameShape) -> (Tensor, Tensor) {
    let npix = canvas.height * canvas.width;
    let mut coords = vec![0.0; 2 * npix];
    let mut valid = vec![0.0; npix];
    let (xmax, ymax) = ((crop.width - 1) as f64, (crop.height - 1) as f64);
    for y in 0..canvas.height {
        for x in 0..canvas.width {
            let (ax, ay) = transform.apply(x as f64, y as f64);
            let i = y * canvas.width + x;
            coords[i] = ax;
            coords[npix + i] = ay;
            if (0.0..=xmax).contains(&ax) && (0.0..=ymax).contains(&ay) {
                valid[i] = 1.0;
            }
        }
    }
    (
        Tensor::new(&[1, 2, canvas.height, canvas.width], coords),
        Tensor::new(&[1, 1, canvas.height, canvas.width], valid),
    )
}

/// Pulls the aligned crop out of `frame`: the output pixel `p` is the
/// bilinear sample of `frame` at `transform^-1(p)`.
pub fn align(frame: &Frame, transform: &AffineTransform, out: FrameShape) -> Result<AlignedFrame> {
    let t = AffineTransform::new(transform.matrix())?;
    let coords = align_coords(&t, out);
    let pixels = kernels::sample_bilinear(&frame.batched(), &coords);
    Ok(AlignedFrame {
        pixels: Frame::from_tensor(pixels)?,
        transform: t,
    })
}

/// Pastes an aligned crop back onto a zero canvas; the inverse resampling
/// of [`align`].
pub fn unalign(aligned: &Frame, transform: &AffineTransform, canvas: FrameShape) -> Result<Frame> {
    let t = AffineTransform::new(transform.matrix())?;
    let mut tape = Tape::new();
    let a = tape.constant(aligned.batched());
    let out = unalign_var(&mut tape, a, &t, aligned.shape(), canvas);
    Frame::from_tensor(tape.value(out).clone())
}

/// Differentiable [`unalign`] on a `[1, 3, h, w]` crop.
pub fn unalign_var(tape: &mut Tape, aligned: Var, transform: &AffineTransform, crop: FrameShape, canvas: FrameShape) -> Var {
    let (coords, valid) = unalign_coords(transform, crop, canvas);
    let c = tape.constant(coords);
    let v = tape.constant(valid);
    let sampled = tape.sample_bilinear(aligned, c);
    tape.mul(sampled, v)
}

/// `mask * generated + (1 - mask) * original`, per channel.
pub fn blend(generated: &Frame, original: &Frame, mask: &Mask) -> Result<Frame> {
    if generated.shape() != original.shape() || generated.shape() != mask.shape() {
        return Err(shape_err(format!(
            "blend inputs differ: generated {:?}, original {:?}, mask {:?}",
            generated.shape(),
            original.shape(),
            mask.shape()
        )));
    }
    let mut tape = Tape::new();
    let g = tape.constant(generated.batched());
    let o = tape.constant(original.batched());
    let m = tape.constant(mask.batched());
    let out = blend_var(&mut tape, g, o, m);
    Frame::from_tensor(tape.value(out).clone())
}

/// Differentiable [`blend`]; `mask` is `[1, 1, H, W]`. Exact at mask values
/// 0 and 1 and wherever the two images agree.
pub fn blend_var(tape: &mut Tape, generated: Var, original: Var, mask: Var) -> Var {
    tape.lerp(mask, generated, original)
}

/// Pointwise maximum; set union on hard masks.
pub fn mask_union(a: &Mask, b: &Mask) -> Result<Mask> {
    if a.shape() != b.shape() {
        return Err(shape_err(format!("mask_union: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(Mask {
        data: a.data.zip_map(&b.data, f64::max),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(shape: FrameShape) -> Frame {
        let mut f = Frame::zeros(shape);
        for c in 0..3 {
            for y in 0..shape.height {
                for x in 0..shape.width {
                    f.set(c, y, x, (x as f64 + 10.0 * y as f64 + 100.0 * c as f64) / 200.0 - 0.9);
                }
            }
        }
        f
    }

    fn smooth(shape: FrameShape) -> Frame {
        let mut f = Frame::zeros(shape);
        for c in 0..3 {
            for y in 0..shape.height {
                for x in 0..shape.width {
                    let v = 0.6 * (0.15 * x as f64 + 0.7 * c as f64).sin() * (0.12 * y as f64 - 0.3).cos();
                    f.set(c, y, x, v);
                }
            }
        }
        f
    }

    #[test]
    fn identity_alignment_is_exact() {
        let s = FrameShape::square(8);
        let f = ramp(s);
        let a = align(&f, &AffineTransform::identity(), s).unwrap();
        assert_eq!(a.pixels, f);
    }

    #[test]
    fn translated_crop_shifts_left_with_clamp() {
        // crop window origin at full-frame x = 2: aligned x = full x - 2
        let s = FrameShape::square(8);
        let f = ramp(s);
        let t = AffineTransform::translation(-2.0, 0.0);
        let a = align(&f, &t, s).unwrap();
        for c in 0..3 {
            for y in 0..8 {
                for x in 0..8 {
                    assert_eq!(a.pixels.get(c, y, x), f.get(c, y, (x + 2).min(7)));
                }
            }
        }
    }

    #[test]
    fn scaled_crop_of_constant_is_constant() {
        let f = Frame::constant(FrameShape::square(16), 0.37);
        let t = AffineTransform::similarity(2.0, 0.0, -3.0, 1.0).unwrap();
        let a = align(&f, &t, FrameShape::square(8)).unwrap();
        assert!(a.pixels.tensor().data().iter().all(|&v| (v - 0.37).abs() < 1e-15));
    }

    #[test]
    fn singular_and_non_similarity_transforms_are_rejected() {
        let f = Frame::zeros(FrameShape::square(4));
        let sing = AffineTransform::new([[0.0, 0.0, 1.0], [0.0, 0.0, 0.0]]);
        assert!(matches!(sing, Err(Error::InvalidTransform(_))));
        let shear = AffineTransform::new([[1.0, 0.5, 0.0], [0.0, 1.0, 0.0]]);
        assert!(matches!(shear, Err(Error::NotSimilarity(_))));
        let _ = f;
    }

    #[test]
    fn unalign_identity_pads_and_crops() {
        let crop = FrameShape::square(4);
        let f = ramp(crop);
        let big = unalign(&f, &AffineTransform::identity(), FrameShape::square(6)).unwrap();
        for c in 0..3 {
            for y in 0..6 {
                for x in 0..6 {
                    let want = if x < 4 && y < 4 { f.get(c, y, x) } else { 0.0 };
                    assert_eq!(big.get(c, y, x), want);
                }
            }
        }
        let small = unalign(&f, &AffineTransform::identity(), FrameShape::square(3)).unwrap();
        assert_eq!(small.get(1, 2, 2), f.get(1, 2, 2));
    }

    #[test]
    fn unalign_of_zero_is_zero() {
        let t = AffineTransform::similarity(0.8, 0.3, 2.0, -1.0).unwrap();
        let z = unalign(&Frame::zeros(FrameShape::square(8)), &t, FrameShape::square(12)).unwrap();
        assert_eq!(z.tensor().max_abs(), 0.0);
    }

    #[test]
    fn align_unalign_round_trip_on_smooth_image() {
        let full = FrameShape::square(40);
        let f = smooth(full);
        // face-sized crop: full -> crop scales by 1.1 and rotates
        let t = AffineTransform::similarity(1.1, 0.2, -8.0, -12.0).unwrap();
        let crop = FrameShape::square(24);
        let a = align(&f, &t, crop).unwrap();
        let back = unalign(&a.pixels, &t, full).unwrap();
        let mut worst: f64 = 0.0;
        for y in 0..40 {
            for x in 0..40 {
                let (ax, ay) = t.apply(x as f64, y as f64);
                if ax > 1.0 && ay > 1.0 && ax < 22.0 && ay < 22.0 {
                    for c in 0..3 {
                        worst = worst.max((back.get(c, y, x) - f.get(c, y, x)).abs());
                    }
                }
            }
        }
        assert!(worst <= 1e-2, "round trip error {worst}");
    }

    #[test]
    fn blend_endpoints_and_midpoint() {
        let s = FrameShape::square(3);
        let g = Frame::constant(s, 1.0);
        let o = Frame::constant(s, 0.0);
        assert_eq!(blend(&g, &o, &Mask::ones(s)).unwrap(), g);
        assert_eq!(blend(&g, &o, &Mask::zeros(s)).unwrap(), o);
        let half = blend(&g, &o, &Mask::full(s, 0.5)).unwrap();
        assert!(half.tensor().data().iter().all(|&v| v == 0.5));
        let bad = blend(&g, &Frame::zeros(FrameShape::square(2)), &Mask::ones(s));
        assert!(matches!(bad, Err(Error::Shape(_))));
    }

    #[test]
    fn union_examples() {
        let s = FrameShape::new(1, 2);
        let a = Mask::from_values(s, vec![1.0, 0.3]).unwrap();
        let b = Mask::from_values(s, vec![0.0, 0.7]).unwrap();
        assert_eq!(mask_union(&a, &b).unwrap().values(), &[1.0, 0.7]);
        assert_eq!(mask_union(&a, &a).unwrap(), a);
        assert!(mask_union(&a, &Mask::ones(FrameShape::square(2))).is_err());
    }

    fn mask_strategy() -> impl Strategy<Value = Mask> {
        prop::collection::vec(0.0f64..=1.0, 12)
            .prop_map(|v| Mask::from_values(FrameShape::new(3, 4), v).unwrap())
    }

    proptest! {
        #[test]
        fn union_is_a_semilattice(a in mask_strategy(), b in mask_strategy(), c in mask_strategy()) {
            let ab = mask_union(&a, &b).unwrap();
            prop_assert_eq!(&ab, &mask_union(&b, &a).unwrap());
            prop_assert_eq!(mask_union(&ab, &c).unwrap(), mask_union(&a, &mask_union(&b, &c).unwrap()).unwrap());
            prop_assert_eq!(&mask_union(&a, &a).unwrap(), &a);
            for ((u, x), y) in ab.values().iter().zip(a.values()).zip(b.values()) {
                prop_assert!(u >= x && u >= y);
            }
        }

        #[test]
        fn blend_fixes_identical_inputs(vals in prop::collection::vec(-1.0f64..1.0, 36), m in mask_strategy()) {
            let s = FrameShape::new(3, 4);
            let x = Frame::from_planar(s, vals).unwrap();
            let out = blend(&x, &x, &m).unwrap();
            prop_assert_eq!(out, x);
        }
    }
}
