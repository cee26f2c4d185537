use rand::Rng;

use crate::error::{dim_err, invalid, Result};
use crate::tensor::Tensor;

/// A randomized geometric op: applied with `probability`, with a magnitude
/// drawn uniformly from `[-magnitude, magnitude]` (rotate and shear in
/// degrees, translate as a fraction of the side). For crop, `magnitude` is the
/// fraction of each side kept.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeometricOp {
    pub probability: f64,
    pub magnitude: f64,
}

impl GeometricOp {
    pub const fn new(probability: f64, magnitude: f64) -> Self {
        GeometricOp { probability, magnitude }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentPolicy {
    pub horizontal_flip: f64,
    pub vertical_flip: f64,
    pub rotate: GeometricOp,
    pub shear: GeometricOp,
    pub crop: GeometricOp,
    pub translate: GeometricOp,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy {
            horizontal_flip: 0.5,
            vertical_flip: 0.5,
            rotate: GeometricOp::new(0.5, 15.0),
            shear: GeometricOp::new(0.5, 10.0),
            crop: GeometricOp::new(0.5, 0.9),
            translate: GeometricOp::new(0.5, 0.1),
        }
    }
}

impl AugmentPolicy {
    /// Every probability zero: augmentation is the identity.
    pub fn none() -> Self {
        let mut p = AugmentPolicy::default();
        p.horizontal_flip = 0.0;
        p.vertical_flip = 0.0;
        for op in [&mut p.rotate, &mut p.shear, &mut p.crop, &mut p.translate] {
            op.probability = 0.0;
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [
            ("horizontal_flip", self.horizontal_flip),
            ("vertical_flip", self.vertical_flip),
            ("rotate", self.rotate.probability),
            ("shear", self.shear.probability),
            ("crop", self.crop.probability),
            ("translate", self.translate.probability),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(invalid!("{name} probability must be in [0, 1], got {p}"));
            }
        }
        if !(0.0..90.0).contains(&self.rotate.magnitude) {
            return Err(invalid!("rotation range must be in [0, 90) degrees, got {}", self.rotate.magnitude));
        }
        if !(0.0..45.0).contains(&self.shear.magnitude) {
            return Err(invalid!("shear range must be in [0, 45) degrees, got {}", self.shear.magnitude));
        }
        if !(self.crop.magnitude > 0.5 && self.crop.magnitude <= 1.0) {
            return Err(invalid!("crop fraction must be in (0.5, 1], got {}", self.crop.magnitude));
        }
        if !(0.0..=0.5).contains(&self.translate.magnitude) {
            return Err(invalid!("translate fraction must be in [0, 0.5], got {}", self.translate.magnitude));
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        self.horizontal_flip == 0.0
            && self.vertical_flip == 0.0
            && [self.rotate, self.shear, self.crop, self.translate]
                .iter()
                .all(|op| op.probability == 0.0)
    }
}

/// 2×3 affine map on pixel-centre coordinates.
#[derive(Clone, Copy, Debug)]
struct Affine([f64; 6]);

impl Affine {
    const IDENTITY: Affine = Affine([1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);

    fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let m = &self.0;
        (m[0] * x + m[1] * y + m[2], m[3] * x + m[4] * y + m[5])
    }

    /// `self` after `inner`.
    fn after(&self, inner: &Affine) -> Affine {
        let (a, b) = (&self.0, &inner.0);
        Affine([
            a[0] * b[0] + a[1] * b[3],
            a[0] * b[1] + a[1] * b[4],
            a[0] * b[2] + a[1] * b[5] + a[2],
            a[3] * b[0] + a[4] * b[3],
            a[3] * b[1] + a[4] * b[4],
            a[3] * b[2] + a[4] * b[5] + a[5],
        ])
    }

    /// Linear map about the image centre.
    fn centred(m: [f64; 4], cx: f64, cy: f64) -> Affine {
        let t = Affine([1.0, 0.0, cx, 0.0, 1.0, cy]);
        let lin = Affine([m[0], m[1], 0.0, m[2], m[3], 0.0]);
        let back = Affine([1.0, 0.0, -cx, 0.0, 1.0, -cy]);
        t.after(&lin).after(&back)
    }
}

struct Image<'a> {
    h: usize,
    w: usize,
    c: usize,
    data: &'a [f32],
}

fn image_of(x: &Tensor) -> Result<Image<'_>> {
    match *x.shape() {
        [1, h, w, c] => Ok(Image { h, w, c, data: x.data() }),
        _ => Err(dim_err!("augment expects a single 1×h×w×c image, got {:?}", x.shape())),
    }
}

fn reflect(v: f64, n: usize) -> f64 {
    if n == 1 {
        return 0.0;
    }
    let period = 2.0 * (n - 1) as f64;
    let m = v.rem_euclid(period);
    if m > (n - 1) as f64 {
        period - m
    } else {
        m
    }
}

/// Inverse-maps every output pixel through `inv` and samples bilinearly, with
/// reflect padding outside the source.
fn resample(img: &Image, inv: &Affine) -> Vec<f32> {
    let mut out = Vec::with_capacity(img.data.len());
    for y in 0..img.h {
        for x in 0..img.w {
            let (sx, sy) = inv.apply(x as f64, y as f64);
            let (sx, sy) = (reflect(sx, img.w), reflect(sy, img.h));
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(img.w - 1), (y0 + 1).min(img.h - 1));
            let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
            for ch in 0..img.c {
                let p = |yy: usize, xx: usize| img.data[(yy * img.w + xx) * img.c + ch] as f64;
                let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                let bottom = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                out.push((top * (1.0 - fy) + bottom * fy) as f32);
            }
        }
    }
    out
}

fn rotation_inverse(degrees: f64, img: &Image) -> Affine {
    let (s, c) = degrees.to_radians().sin_cos();
    Affine::centred([c, s, -s, c], (img.w - 1) as f64 / 2.0, (img.h - 1) as f64 / 2.0)
}

/// Rotates by `degrees` about the image centre.
pub fn rotate(x: &Tensor, degrees: f64) -> Result<Tensor> {
    let img = image_of(x)?;
    let data = resample(&img, &rotation_inverse(degrees, &img));
    Tensor::new(x.shape().to_vec(), data)
}

fn flip(x: &mut Tensor, horizontal: bool) {
    let s = x.shape().to_vec();
    let (h, w, c) = (s[1], s[2], s[3]);
    let src = x.data().to_vec();
    let dst = x.data_mut();
    for y in 0..h {
        for xx in 0..w {
            let (sy, sx) = if horizontal { (y, w - 1 - xx) } else { (h - 1 - y, xx) };
            let (d, s) = ((y * w + xx) * c, (sy * w + sx) * c);
            dst[d..d + c].copy_from_slice(&src[s..s + c]);
        }
    }
}

/// Applies each enabled op independently with its probability. Flips are
/// exact; the geometric ops are composed into one affine resample.
pub fn augment(x: &Tensor, policy: &AugmentPolicy, rng: &mut impl Rng) -> Result<Tensor> {
    augment_impl(x, policy, false, rng)
}

/// Like [`augment`], but when no op fires one enabled op is picked uniformly
/// and applied, so the output is never a plain copy unless the policy is the
/// identity.
pub fn augment_forced(x: &Tensor, policy: &AugmentPolicy, rng: &mut impl Rng) -> Result<Tensor> {
    augment_impl(x, policy, true, rng)
}

#[derive(Clone, Copy, PartialEq)]
enum Which {
    HFlip,
    VFlip,
    Rotate,
    Shear,
    Crop,
    Translate,
}

fn augment_impl(x: &Tensor, policy: &AugmentPolicy, force: bool, rng: &mut impl Rng) -> Result<Tensor> {
    image_of(x)?;
    let table = [
        (Which::HFlip, policy.horizontal_flip),
        (Which::VFlip, policy.vertical_flip),
        (Which::Rotate, policy.rotate.probability),
        (Which::Shear, policy.shear.probability),
        (Which::Crop, policy.crop.probability),
        (Which::Translate, policy.translate.probability),
    ];
    let mut fired: Vec<Which> = table
        .iter()
        .filter(|(_, p)| rng.random::<f64>() < *p)
        .map(|(w, _)| *w)
        .collect();
    if force && fired.is_empty() {
        let enabled: Vec<Which> = table.iter().filter(|(_, p)| *p > 0.0).map(|(w, _)| *w).collect();
        if !enabled.is_empty() {
            fired.push(enabled[rng.random_range(0..enabled.len())]);
        }
    }

    let mut out = x.clone();
    for w in [Which::HFlip, Which::VFlip] {
        if fired.contains(&w) {
            flip(&mut out, w == Which::HFlip);
        }
    }

    let img = image_of(&out)?;
    let (wf, hf) = (img.w as f64, img.h as f64);
    let (cx, cy) = ((wf - 1.0) / 2.0, (hf - 1.0) / 2.0);
    let mut inv = Affine::IDENTITY;
    let mut geometric = false;
    let mut sym = |m: f64| rng.random_range(-m..=m);
    // Output → input: undo translate, then crop, then shear, then rotate.
    if fired.contains(&Which::Translate) {
        let (tx, ty) = (sym(policy.translate.magnitude) * wf, sym(policy.translate.magnitude) * hf);
        inv = Affine([1.0, 0.0, -tx, 0.0, 1.0, -ty]).after(&inv);
        geometric = true;
    }
    if fired.contains(&Which::Crop) {
        let f = policy.crop.magnitude;
        let (ox, oy) = ((wf - f * wf) * (sym(0.5) + 0.5), (hf - f * hf) * (sym(0.5) + 0.5));
        inv = Affine([f, 0.0, ox + 0.5 * f - 0.5, 0.0, f, oy + 0.5 * f - 0.5]).after(&inv);
        geometric = true;
    }
    if fired.contains(&Which::Shear) {
        let t = sym(policy.shear.magnitude).to_radians().tan();
        inv = Affine::centred([1.0, -t, 0.0, 1.0], cx, cy).after(&inv);
        geometric = true;
    }
    if fired.contains(&Which::Rotate) {
        inv = rotation_inverse(sym(policy.rotate.magnitude), &img).after(&inv);
        geometric = true;
    }
    if geometric {
        let data = resample(&img, &inv);
        out = Tensor::new(out.shape().to_vec(), data)?;
    }
    Ok(out)
}
