//! Color transform and multi-level orthonormal Haar analysis/synthesis.
//!
//! Images are split into zero-centered YCbCr, then each channel is decomposed
//! independently. A level works on disjoint 2x2 blocks `{a b; c d}`:
//!
//! ```text
//! ll = (a + b + c + d) / 2      lh = (a + b - c - d) / 2
//! hl = (a - b + c - d) / 2      hh = (a - b - c + d) / 2
//! ```
//!
//! The transform is orthonormal, so it preserves energy and inverts exactly
//! up to rounding. Dimensions must be divisible by `2^levels`; there is no
//! padding.

use crate::error::{Error, Result};
use crate::numerics::Scalar;

/// One channel of an image, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePlane<T> {
    height: usize,
    width: usize,
    values: Vec<T>,
}

impl<T: Scalar> ImagePlane<T> {
    pub fn new(height: usize, width: usize, values: Vec<T>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Dimension(format!("empty plane {height}x{width}")));
        }
        if values.len() != height * width {
            return Err(Error::Dimension(format!(
                "{height}x{width} plane needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite pixel value".into()));
        }
        Ok(ImagePlane {
            height,
            width,
            values,
        })
    }

    pub fn filled(height: usize, width: usize, value: T) -> Self {
        ImagePlane {
            height,
            width,
            values: vec![value; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.values[r * self.width + c]
    }

    pub fn max_abs_diff(&self, other: &ImagePlane<T>) -> T {
        self.values
            .iter()
            .zip(&other.values)
            .fold(T::zero(), |m, (a, b)| m.max((*a - *b).abs()))
    }

    pub fn energy(&self) -> f64 {
        self.values.iter().map(|v| v.as_f64() * v.as_f64()).sum()
    }

    fn zip_with(&self, other: &ImagePlane<T>, f: impl Fn(T, T) -> T) -> ImagePlane<T> {
        ImagePlane {
            height: self.height,
            width: self.width,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }
}

/// Three planes stacked along the channel axis (Y, Cb, Cr or R, G, B).
pub type ChannelStack<T> = [ImagePlane<T>; 3];

fn check_stack<T: Scalar>(stack: &ChannelStack<T>) -> Result<()> {
    let d = stack[0].dims();
    if stack[1].dims() != d || stack[2].dims() != d {
        return Err(Error::Dimension(format!(
            "channel planes differ: {:?}, {:?}, {:?}",
            d,
            stack[1].dims(),
            stack[2].dims()
        )));
    }
    Ok(())
}

/// RGB image with values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage<T> {
    pub r: ImagePlane<T>,
    pub g: ImagePlane<T>,
    pub b: ImagePlane<T>,
}

impl<T: Scalar> RgbImage<T> {
    pub fn new(r: ImagePlane<T>, g: ImagePlane<T>, b: ImagePlane<T>) -> Result<Self> {
        let img = RgbImage { r, g, b };
        check_stack(&[img.r.clone(), img.g.clone(), img.b.clone()])?;
        Ok(img)
    }

    pub fn dims(&self) -> (usize, usize) {
        self.r.dims()
    }

    pub fn cast<U: Scalar>(&self) -> RgbImage<U> {
        let c = |p: &ImagePlane<T>| ImagePlane {
            height: p.height,
            width: p.width,
            values: p.values.iter().map(|v| U::of(v.as_f64())).collect(),
        };
        RgbImage {
            r: c(&self.r),
            g: c(&self.g),
            b: c(&self.b),
        }
    }
}

/// Zero-centered YCbCr image.
#[derive(Debug, Clone, PartialEq)]
pub struct YCbCrImage<T> {
    pub y: ImagePlane<T>,
    pub cb: ImagePlane<T>,
    pub cr: ImagePlane<T>,
}

impl<T: Scalar> YCbCrImage<T> {
    pub fn new(y: ImagePlane<T>, cb: ImagePlane<T>, cr: ImagePlane<T>) -> Result<Self> {
        let stack = [y, cb, cr];
        check_stack(&stack)?;
        Ok(Self::from_stack(stack))
    }

    pub fn dims(&self) -> (usize, usize) {
        self.y.dims()
    }

    pub fn channels(&self) -> [&ImagePlane<T>; 3] {
        [&self.y, &self.cb, &self.cr]
    }

    fn from_stack(stack: ChannelStack<T>) -> Self {
        let [y, cb, cr] = stack;
        YCbCrImage { y, cb, cr }
    }

    pub fn max_abs_diff(&self, other: &YCbCrImage<T>) -> T {
        self.y
            .max_abs_diff(&other.y)
            .max(self.cb.max_abs_diff(&other.cb))
            .max(self.cr.max_abs_diff(&other.cr))
    }

    pub fn energy(&self) -> f64 {
        self.y.energy() + self.cb.energy() + self.cr.energy()
    }
}

const KR: f64 = 0.299;
const KG: f64 = 0.587;
const KB: f64 = 0.114;

pub fn rgb_to_ycbcr<T: Scalar>(rgb: &RgbImage<T>) -> Result<YCbCrImage<T>> {
    check_stack(&[rgb.r.clone(), rgb.g.clone(), rgb.b.clone()])?;
    let (h, w) = rgb.dims();
    let (kr, kg, kb) = (T::of(KR), T::of(KG), T::of(KB));
    let cb_scale = T::of(0.5 / (1.0 - KB));
    let cr_scale = T::of(0.5 / (1.0 - KR));
    let n = h * w;
    let (mut y, mut cb, mut cr) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for i in 0..n {
        let (r, g, b) = (rgb.r.values[i], rgb.g.values[i], rgb.b.values[i]);
        let luma = kr * r + kg * g + kb * b;
        y.push(luma);
        cb.push(cb_scale * (b - luma));
        cr.push(cr_scale * (r - luma));
    }
    YCbCrImage::new(
        ImagePlane::new(h, w, y)?,
        ImagePlane::new(h, w, cb)?,
        ImagePlane::new(h, w, cr)?,
    )
}

pub fn ycbcr_to_rgb<T: Scalar>(img: &YCbCrImage<T>) -> RgbImage<T> {
    let (h, w) = img.dims();
    let n = h * w;
    let cb_inv = T::of((1.0 - KB) / 0.5);
    let cr_inv = T::of((1.0 - KR) / 0.5);
    let (mut r, mut g, mut b) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for i in 0..n {
        let y = img.y.values[i];
        let rv = y + cr_inv * img.cr.values[i];
        let bv = y + cb_inv * img.cb.values[i];
        let gv = (y - T::of(KR) * rv - T::of(KB) * bv) / T::of(KG);
        r.push(rv);
        g.push(gv);
        b.push(bv);
    }
    let mk = |values| ImagePlane {
        height: h,
        width: w,
        values,
    };
    RgbImage {
        r: mk(r),
        g: mk(g),
        b: mk(b),
    }
}

/// The four outputs of one analysis level.
#[derive(Debug, Clone, PartialEq)]
pub struct Subbands<T> {
    pub ll: ImagePlane<T>,
    pub lh: ImagePlane<T>,
    pub hl: ImagePlane<T>,
    pub hh: ImagePlane<T>,
}

pub fn dwt2_level<T: Scalar>(plane: &ImagePlane<T>) -> Result<Subbands<T>> {
    let (h, w) = plane.dims();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Dimension(format!(
            "Haar level needs even dimensions, got {h}x{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let half = T::of(0.5);
    let n = oh * ow;
    let (mut ll, mut lh, mut hl, mut hh) = (
        Vec::with_capacity(n),
        Vec::with_capacity(n),
        Vec::with_capacity(n),
        Vec::with_capacity(n),
    );
    for r in 0..oh {
        for c in 0..ow {
            let a = plane.get(2 * r, 2 * c);
            let b = plane.get(2 * r, 2 * c + 1);
            let cc = plane.get(2 * r + 1, 2 * c);
            let d = plane.get(2 * r + 1, 2 * c + 1);
            ll.push((a + b + cc + d) * half);
            lh.push((a + b - cc - d) * half);
            hl.push((a - b + cc - d) * half);
            hh.push((a - b - cc + d) * half);
        }
    }
    let mk = |values| ImagePlane {
        height: oh,
        width: ow,
        values,
    };
    Ok(Subbands {
        ll: mk(ll),
        lh: mk(lh),
        hl: mk(hl),
        hh: mk(hh),
    })
}

pub fn idwt2_level<T: Scalar>(bands: &Subbands<T>) -> Result<ImagePlane<T>> {
    let d = bands.ll.dims();
    if bands.lh.dims() != d || bands.hl.dims() != d || bands.hh.dims() != d {
        return Err(Error::Dimension(format!(
            "subband dims differ: ll {:?}, lh {:?}, hl {:?}, hh {:?}",
            d,
            bands.lh.dims(),
            bands.hl.dims(),
            bands.hh.dims()
        )));
    }
    let (h, w) = d;
    let half = T::of(0.5);
    let mut out = vec![T::zero(); 4 * h * w];
    let ow = 2 * w;
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            let (ll, lh, hl, hh) = (
                bands.ll.values[i],
                bands.lh.values[i],
                bands.hl.values[i],
                bands.hh.values[i],
            );
            out[2 * r * ow + 2 * c] = (ll + lh + hl + hh) * half;
            out[2 * r * ow + 2 * c + 1] = (ll + lh - hl - hh) * half;
            out[(2 * r + 1) * ow + 2 * c] = (ll - lh + hl - hh) * half;
            out[(2 * r + 1) * ow + 2 * c + 1] = (ll - lh - hl + hh) * half;
        }
    }
    Ok(ImagePlane {
        height: 2 * h,
        width: 2 * w,
        values: out,
    })
}

/// Detail subbands of one level, each a Y/Cb/Cr stack.
#[derive(Debug, Clone, PartialEq)]
pub struct DetailLevel<T> {
    pub lh: ChannelStack<T>,
    pub hl: ChannelStack<T>,
    pub hh: ChannelStack<T>,
}

/// Multi-level decomposition of a YCbCr image.
///
/// `details[0]` is level 1 (finest, half resolution); `details[levels - 1]`
/// sits next to `ll` at the coarsest scale.
#[derive(Debug, Clone, PartialEq)]
pub struct SubbandPyramid<T> {
    levels: usize,
    height: usize,
    width: usize,
    ll: ChannelStack<T>,
    details: Vec<DetailLevel<T>>,
}

impl<T: Scalar> SubbandPyramid<T> {
    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn source_dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn ll(&self) -> &ChannelStack<T> {
        &self.ll
    }

    /// Details at level `level` (1 = finest).
    pub fn details(&self, level: usize) -> &DetailLevel<T> {
        &self.details[level - 1]
    }

    pub fn details_mut(&mut self, level: usize) -> &mut DetailLevel<T> {
        &mut self.details[level - 1]
    }

    pub fn ll_mut(&mut self) -> &mut ChannelStack<T> {
        &mut self.ll
    }

    /// Sum of squared coefficients across every subband.
    pub fn energy(&self) -> f64 {
        let stack = |s: &ChannelStack<T>| s.iter().map(ImagePlane::energy).sum::<f64>();
        stack(&self.ll)
            + self
                .details
                .iter()
                .map(|d| stack(&d.lh) + stack(&d.hl) + stack(&d.hh))
                .sum::<f64>()
    }

    /// All-zero pyramid with the given geometry.
    pub fn zeros(height: usize, width: usize, levels: usize) -> Result<Self> {
        check_levels(height, width, levels)?;
        let z = |l: usize| ImagePlane::filled(height >> l, width >> l, T::zero());
        let stack = |l: usize| [z(l), z(l), z(l)];
        Ok(SubbandPyramid {
            levels,
            height,
            width,
            ll: stack(levels),
            details: (1..=levels)
                .map(|l| DetailLevel {
                    lh: stack(l),
                    hl: stack(l),
                    hh: stack(l),
                })
                .collect(),
        })
    }
}

fn check_levels(height: usize, width: usize, levels: usize) -> Result<()> {
    if levels == 0 {
        return Err(Error::Config("decomposition needs at least one level".into()));
    }
    if levels >= usize::BITS as usize {
        return Err(Error::Config(format!("{levels} levels is too deep")));
    }
    let m = 1usize << levels;
    if !height.is_multiple_of(m) || !width.is_multiple_of(m) || height == 0 || width == 0 {
        return Err(Error::Config(format!(
            "{height}x{width} image is not divisible by 2^{levels} = {m}"
        )));
    }
    Ok(())
}

pub fn decompose<T: Scalar>(image: &YCbCrImage<T>, levels: usize) -> Result<SubbandPyramid<T>> {
    let (height, width) = image.dims();
    check_levels(height, width, levels)?;
    let mut current: ChannelStack<T> = [image.y.clone(), image.cb.clone(), image.cr.clone()];
    let mut details = Vec::with_capacity(levels);
    for _ in 0..levels {
        let [y, cb, cr] = current;
        let [by, bcb, bcr] = [dwt2_level(&y)?, dwt2_level(&cb)?, dwt2_level(&cr)?];
        details.push(DetailLevel {
            lh: [by.lh, bcb.lh, bcr.lh],
            hl: [by.hl, bcb.hl, bcr.hl],
            hh: [by.hh, bcb.hh, bcr.hh],
        });
        current = [by.ll, bcb.ll, bcr.ll];
    }
    Ok(SubbandPyramid {
        levels,
        height,
        width,
        ll: current,
        details,
    })
}

pub fn reconstruct<T: Scalar>(pyramid: &SubbandPyramid<T>) -> Result<YCbCrImage<T>> {
    let mut current = pyramid.ll.clone();
    for level in (1..=pyramid.levels).rev() {
        let d = pyramid.details(level);
        let mut next = Vec::with_capacity(3);
        for (c, ll) in current.into_iter().enumerate() {
            next.push(idwt2_level(&Subbands {
                ll,
                lh: d.lh[c].clone(),
                hl: d.hl[c].clone(),
                hh: d.hh[c].clone(),
            })?);
        }
        current = next.try_into().expect("three channels");
    }
    if current[0].dims() != (pyramid.height, pyramid.width) {
        return Err(Error::Dimension(format!(
            "reconstructed {:?}, expected {:?}",
            current[0].dims(),
            (pyramid.height, pyramid.width)
        )));
    }
    Ok(YCbCrImage::from_stack(current))
}

/// `alpha * x + beta * y` channel-wise. Used for linearity checks.
pub fn combine<T: Scalar>(x: &YCbCrImage<T>, alpha: T, y: &YCbCrImage<T>, beta: T) -> YCbCrImage<T> {
    let f = |a: T, b: T| alpha * a + beta * b;
    YCbCrImage {
        y: x.y.zip_with(&y.y, f),
        cb: x.cb.zip_with(&y.cb, f),
        cr: x.cr.zip_with(&y.cr, f),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plane(h: usize, w: usize, v: &[f64]) -> ImagePlane<f64> {
        ImagePlane::new(h, w, v.to_vec()).unwrap()
    }

    fn rgb_pixel(r: f64, g: f64, b: f64) -> RgbImage<f64> {
        RgbImage::new(plane(1, 1, &[r]), plane(1, 1, &[g]), plane(1, 1, &[b])).unwrap()
    }

    fn pixel(img: &YCbCrImage<f64>) -> (f64, f64, f64) {
        (img.y.values[0], img.cb.values[0], img.cr.values[0])
    }

    #[test]
    fn color_transform_cases() {
        let (y, cb, cr) = pixel(&rgb_to_ycbcr(&rgb_pixel(0.4, 0.4, 0.4)).unwrap());
        assert!((y - 0.4).abs() < 1e-15 && cb.abs() < 1e-15 && cr.abs() < 1e-15);

        let (y, cb, cr) = pixel(&rgb_to_ycbcr(&rgb_pixel(1.0, 0.0, 0.0)).unwrap());
        // Cb = 0.5 * (0 - 0.299) / 0.886, Cr = 0.5 * (1 - 0.299) / 0.701
        assert!((y - 0.299).abs() < 1e-15);
        assert!((cb + 0.168_735_891_647_855_5).abs() < 1e-12);
        assert!((cr - 0.5).abs() < 1e-15);

        assert_eq!(pixel(&rgb_to_ycbcr(&rgb_pixel(0.0, 0.0, 0.0)).unwrap()), (0.0, 0.0, 0.0));
    }

    #[test]
    fn color_transform_rejects_mismatched_planes() {
        let bad = RgbImage {
            r: plane(1, 2, &[0.0, 0.0]),
            g: plane(1, 1, &[0.0]),
            b: plane(1, 1, &[0.0]),
        };
        assert!(matches!(rgb_to_ycbcr(&bad), Err(Error::Dimension(_))));
    }

    #[test]
    fn color_round_trip() {
        let img = rgb_pixel(0.2, 0.7, 0.9);
        let back = ycbcr_to_rgb(&rgb_to_ycbcr(&img).unwrap());
        assert!(back.r.max_abs_diff(&img.r) < 1e-14);
        assert!(back.g.max_abs_diff(&img.g) < 1e-14);
        assert!(back.b.max_abs_diff(&img.b) < 1e-14);
    }

    #[test]
    fn haar_two_by_two() {
        // a=1 b=2 c=3 d=4: ll=10/2, lh=(3-7)/2, hl=(4-6)/2, hh=(5-5)/2
        let s = dwt2_level(&plane(2, 2, &[1.0, 2.0, 3.0, 4.0])).unwrap();
        assert_eq!(
            (s.ll.values[0], s.lh.values[0], s.hl.values[0], s.hh.values[0]),
            (5.0, -2.0, -1.0, 0.0)
        );
        let back = idwt2_level(&s).unwrap();
        assert_eq!(back.values(), &[1.0, 2.0, 3.0, 4.0]);

        let s = Subbands {
            ll: plane(1, 1, &[5.0]),
            lh: plane(1, 1, &[-2.0]),
            hl: plane(1, 1, &[-1.0]),
            hh: plane(1, 1, &[1.0]),
        };
        // inverse butterfly: a=(5-2-1+1)/2, b=(5-2+1-1)/2, c=(5+2-1-1)/2, d=(5+2+1+1)/2
        let back = idwt2_level(&s).unwrap();
        assert_eq!(back.values(), &[1.5, 1.5, 2.5, 4.5]);
        let again = dwt2_level(&back).unwrap();
        assert_eq!(again.hh.values[0], 1.0);
    }

    #[test]
    fn haar_constant_plane() {
        let s = dwt2_level(&ImagePlane::filled(4, 6, 0.75f64)).unwrap();
        assert!(s.ll.values.iter().all(|&v| v == 1.5));
        for d in [&s.lh, &s.hl, &s.hh] {
            assert!(d.values.iter().all(|&v| v == 0.0));
        }
        let s = Subbands {
            ll: ImagePlane::filled(2, 2, 1.5f64),
            lh: ImagePlane::filled(2, 2, 0.0),
            hl: ImagePlane::filled(2, 2, 0.0),
            hh: ImagePlane::filled(2, 2, 0.0),
        };
        assert!(idwt2_level(&s).unwrap().values.iter().all(|&v| v == 0.75));
    }

    #[test]
    fn haar_dimension_errors() {
        assert!(matches!(
            dwt2_level(&ImagePlane::filled(3, 4, 0.0f32)),
            Err(Error::Dimension(_))
        ));
        let s = Subbands {
            ll: ImagePlane::filled(2, 2, 0.0f32),
            lh: ImagePlane::filled(2, 2, 0.0),
            hl: ImagePlane::filled(2, 1, 0.0),
            hh: ImagePlane::filled(2, 2, 0.0),
        };
        assert!(matches!(idwt2_level(&s), Err(Error::Dimension(_))));
    }

    #[test]
    fn decompose_geometry() {
        let c = 0.3f64;
        let img = YCbCrImage::new(
            ImagePlane::filled(4, 4, c),
            ImagePlane::filled(4, 4, c),
            ImagePlane::filled(4, 4, c),
        )
        .unwrap();
        let p = decompose(&img, 1).unwrap();
        for ch in p.ll() {
            assert_eq!(ch.dims(), (2, 2));
            assert!(ch.values.iter().all(|&v| (v - 2.0 * c).abs() < 1e-15));
        }
        let d = p.details(1);
        for stack in [&d.lh, &d.hl, &d.hh] {
            assert!(stack.iter().all(|p| p.values.iter().all(|&v| v == 0.0)));
        }

        let img8 = YCbCrImage::new(
            ImagePlane::filled(8, 8, 0.0f32),
            ImagePlane::filled(8, 8, 0.0),
            ImagePlane::filled(8, 8, 0.0),
        )
        .unwrap();
        let p = decompose(&img8, 2).unwrap();
        assert_eq!(p.ll()[0].dims(), (2, 2));
        assert_eq!(p.details(1).lh[0].dims(), (4, 4));
        assert_eq!(p.details(2).hh[2].dims(), (2, 2));
    }

    #[test]
    fn decompose_rejects_bad_divisibility() {
        let img = YCbCrImage::new(
            ImagePlane::filled(12, 8, 0.0f32),
            ImagePlane::filled(12, 8, 0.0),
            ImagePlane::filled(12, 8, 0.0),
        )
        .unwrap();
        assert!(decompose(&img, 2).is_ok());
        assert!(matches!(decompose(&img, 3), Err(Error::Config(_))));
        assert!(matches!(decompose(&img, 0), Err(Error::Config(_))));
    }

    #[test]
    fn zero_pyramid_reconstructs_to_zero() {
        let p = SubbandPyramid::<f32>::zeros(16, 8, 3).unwrap();
        let img = reconstruct(&p).unwrap();
        assert_eq!(img.dims(), (16, 8));
        assert!(img.channels().iter().all(|c| c.values.iter().all(|&v| v == 0.0)));
    }
}
