//! Differentiable backward warping between two calibrated views.
//!
//! A source pixel `c₁` with depth `d` maps to `c₂ = π(K_dst · E_dst⁻¹E_src · d·K_src⁻¹·c₁)`.
//! Backward warping gathers the destination image at `c₂` with bilinear weights, which
//! re-renders the source view. Because each output pixel depends only on the depth at the
//! same pixel, the derivative with respect to the depth map is diagonal and is returned as
//! one value per pixel and channel.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::scene::{relative_transform, CameraView, DepthMap, Image, ViewPair};

/// Coordinates closer than this to a pixel center sample that pixel exactly.
pub const NODE_SNAP: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WarpOptions {
    /// Coordinates closer than this many pixels to the image border are out of bounds.
    pub border_margin: f64,
}

impl Default for WarpOptions {
    fn default() -> Self {
        Self { border_margin: 0.0 }
    }
}

/// Source/destination cameras plus the destination image size.
#[derive(Debug, Clone)]
pub struct PairGeometry<'a> {
    pub src: &'a CameraView,
    pub dst: &'a CameraView,
    pub dst_width: usize,
    pub dst_height: usize,
}

/// Per-pixel target coordinates and their derivative with respect to the source depth.
#[derive(Debug, Clone)]
pub struct CorrespondenceField {
    pub width: usize,
    pub height: usize,
    pub coords: Vec<[f64; 2]>,
    pub in_bounds: Vec<bool>,
    /// `∂c₂/∂d` at each pixel.
    pub depth_derivative: Vec<[f64; 2]>,
}

impl CorrespondenceField {
    /// Field whose coordinates are the pixel grid itself.
    pub fn identity(width: usize, height: usize) -> Self {
        let mut coords = Vec::with_capacity(width * height);
        for i in 0..height {
            for j in 0..width {
                coords.push([j as f64, i as f64]);
            }
        }
        Self {
            width,
            height,
            coords,
            in_bounds: vec![true; width * height],
            depth_derivative: vec![[0.0; 2]; width * height],
        }
    }
}

pub fn map_coordinates(
    geometry: &PairGeometry<'_>,
    depth: &DepthMap,
    options: &WarpOptions,
) -> CorrespondenceField {
    let (w, h) = (depth.width(), depth.height());
    let t = relative_transform(geometry.src, geometry.dst);
    let rot: Matrix3<f64> = t.fixed_view::<3, 3>(0, 0).into_owned();
    let trans: Vector3<f64> = t.fixed_view::<3, 1>(0, 3).into_owned();
    let ks = geometry.src.intrinsics();
    let kd = geometry.dst.intrinsics();
    let margin = options.border_margin;
    let max_x = geometry.dst_width as f64 - 1.0 - margin;
    let max_y = geometry.dst_height as f64 - 1.0 - margin;

    let mut coords = vec![[0.0; 2]; w * h];
    let mut in_bounds = vec![false; w * h];
    let mut deriv = vec![[0.0; 2]; w * h];
    for i in 0..h {
        for j in 0..w {
            let k = i * w + j;
            if !depth.valid()[k] {
                continue;
            }
            let d = depth.data()[k];
            let ray = Vector3::new((j as f64 - ks.cx) / ks.fx, (i as f64 - ks.cy) / ks.fy, 1.0);
            let a = rot * ray;
            let p = a * d + trans;
            if !(p.z > 0.0) {
                continue;
            }
            let inv_z = 1.0 / p.z;
            let u = kd.fx * p.x * inv_z + kd.cx;
            let v = kd.fy * p.y * inv_z + kd.cy;
            let inv_z2 = inv_z * inv_z;
            let du = kd.fx * (a.x * p.z - p.x * a.z) * inv_z2;
            let dv = kd.fy * (a.y * p.z - p.y * a.z) * inv_z2;
            coords[k] = [u, v];
            deriv[k] = [du, dv];
            in_bounds[k] = u.is_finite()
                && v.is_finite()
                && u >= margin - NODE_SNAP
                && u <= max_x + NODE_SNAP
                && v >= margin - NODE_SNAP
                && v <= max_y + NODE_SNAP;
        }
    }
    CorrespondenceField {
        width: w,
        height: h,
        coords,
        in_bounds,
        depth_derivative: deriv,
    }
}

/// Bilinearly sampled image with validity and the derivative of each value with respect to
/// the sampling coordinate.
#[derive(Debug, Clone)]
pub struct Sampled {
    pub image: Image,
    pub valid: Vec<bool>,
    /// `(∂value/∂x, ∂value/∂y)` per pixel and channel.
    pub coord_gradient: Vec<[f64; 2]>,
}

/// Cell lookup along one axis: lower index, upper index, fractional weight of the upper.
#[inline]
fn cell(coord: f64, size: usize) -> Option<(usize, usize, f64)> {
    let max = size as f64 - 1.0;
    if !(coord >= -NODE_SNAP && coord <= max + NODE_SNAP) {
        return None;
    }
    let nearest = coord.round();
    let c = if (coord - nearest).abs() < NODE_SNAP {
        nearest
    } else {
        coord
    };
    if size == 1 {
        return Some((0, 0, 0.0));
    }
    let lo = (c.floor() as usize).min(size - 2);
    Some((lo, lo + 1, c - lo as f64))
}

pub fn bilinear_sample(img: &Image, field: &CorrespondenceField) -> Sampled {
    let (w, h, ch) = (img.width(), img.height(), img.channels());
    let n = field.width * field.height;
    let mut out = vec![0.0; n * ch];
    let mut grad = vec![[0.0; 2]; n * ch];
    let mut valid = vec![false; n];
    for k in 0..n {
        if !field.in_bounds[k] {
            continue;
        }
        let [u, v] = field.coords[k];
        let (Some((x0, x1, fx)), Some((y0, y1, fy))) = (cell(u, w), cell(v, h)) else {
            continue;
        };
        valid[k] = true;
        for c in 0..ch {
            let i00 = img.get(y0, x0, c);
            let i01 = img.get(y0, x1, c);
            let i10 = img.get(y1, x0, c);
            let i11 = img.get(y1, x1, c);
            let top = (1.0 - fx) * i00 + fx * i01;
            let bottom = (1.0 - fx) * i10 + fx * i11;
            out[k * ch + c] = (1.0 - fy) * top + fy * bottom;
            grad[k * ch + c] = [
                (1.0 - fy) * (i01 - i00) + fy * (i11 - i10),
                bottom - top,
            ];
        }
    }
    let image = Image::new(field.width, field.height, ch, out)
        .expect("bilinear blend of [0,1] values stays in [0,1]");
    Sampled {
        image,
        valid,
        coord_gradient: grad,
    }
}

/// Re-rendered left view plus validity and `∂output/∂depth` per pixel and channel.
#[derive(Debug, Clone)]
pub struct WarpResult {
    pub image: Image,
    pub valid: Vec<bool>,
    pub depth_jacobian: Vec<f64>,
}

impl WarpResult {
    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

pub fn backward_warp(pair: &ViewPair, depth_left: &DepthMap) -> Result<WarpResult> {
    backward_warp_with(pair, depth_left, &WarpOptions::default())
}

pub fn backward_warp_with(
    pair: &ViewPair,
    depth_left: &DepthMap,
    options: &WarpOptions,
) -> Result<WarpResult> {
    if depth_left.width() != pair.width() || depth_left.height() != pair.height() {
        return Err(Error::DimensionMismatch(format!(
            "depth {}x{} vs left image {}x{}",
            depth_left.width(),
            depth_left.height(),
            pair.width(),
            pair.height()
        )));
    }
    let geometry = PairGeometry {
        src: &pair.left,
        dst: &pair.right,
        dst_width: pair.right_image.width(),
        dst_height: pair.right_image.height(),
    };
    let field = map_coordinates(&geometry, depth_left, options);
    let sampled = bilinear_sample(&pair.right_image, &field);
    let ch = pair.right_image.channels();
    let mut jac = vec![0.0; sampled.coord_gradient.len()];
    for (k, ok) in sampled.valid.iter().enumerate() {
        if !ok {
            continue;
        }
        let [du, dv] = field.depth_derivative[k];
        for c in 0..ch {
            let [gx, gy] = sampled.coord_gradient[k * ch + c];
            jac[k * ch + c] = gx * du + gy * dv;
        }
    }
    Ok(WarpResult {
        image: sampled.image,
        valid: sampled.valid,
        depth_jacobian: jac,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::Intrinsics;
    use approx::assert_abs_diff_eq;

    fn k() -> Intrinsics {
        Intrinsics::new(100.0, 100.0, 15.5, 11.5)
    }

    fn rectified() -> (CameraView, CameraView) {
        (
            CameraView::at_origin(k()).unwrap(),
            CameraView::translated(k(), Vector3::new(0.5, 0.0, 0.0)).unwrap(),
        )
    }

    fn ramp(w: usize, h: usize) -> Image {
        Image::from_fn(w, h, 1, |_, j, _| j as f64 / (w as f64 - 1.0)).unwrap()
    }

    #[test]
    fn identity_views_map_to_self() {
        let v = CameraView::at_origin(k()).unwrap();
        let depth = DepthMap::from_fn(32, 24, |i, j| 2.0 + 0.1 * (i + j) as f64).unwrap();
        let geo = PairGeometry {
            src: &v,
            dst: &v,
            dst_width: 32,
            dst_height: 24,
        };
        let f = map_coordinates(&geo, &depth, &WarpOptions::default());
        for i in 0..24 {
            for j in 0..32 {
                let [u, vv] = f.coords[i * 32 + j];
                assert_abs_diff_eq!(u, j as f64, epsilon = 1e-12);
                assert_abs_diff_eq!(vv, i as f64, epsilon = 1e-12);
                assert!(f.in_bounds[i * 32 + j]);
            }
        }
    }

    #[test]
    fn rectified_shift_is_fb_over_d() {
        let (l, r) = rectified();
        let depth = DepthMap::constant(32, 24, 10.0).unwrap();
        let geo = PairGeometry {
            src: &l,
            dst: &r,
            dst_width: 32,
            dst_height: 24,
        };
        let f = map_coordinates(&geo, &depth, &WarpOptions::default());
        for i in 0..24 {
            for j in 0..32 {
                let k = i * 32 + j;
                assert_abs_diff_eq!(f.coords[k][0], j as f64 - 5.0, epsilon = 1e-12);
                assert_abs_diff_eq!(f.coords[k][1], i as f64, epsilon = 1e-12);
                assert_eq!(f.in_bounds[k], j >= 5);
            }
        }
        let far = DepthMap::constant(32, 24, 1e9).unwrap();
        let f = map_coordinates(&geo, &far, &WarpOptions::default());
        for (k, c) in f.coords.iter().enumerate() {
            let (i, j) = (k / 32, k % 32);
            assert!(((c[0] - j as f64).powi(2) + (c[1] - i as f64).powi(2)).sqrt() < 1e-6);
        }
    }

    #[test]
    fn border_margin_shrinks_valid_region() {
        let v = CameraView::at_origin(k()).unwrap();
        let depth = DepthMap::constant(8, 8, 3.0).unwrap();
        let geo = PairGeometry {
            src: &v,
            dst: &v,
            dst_width: 8,
            dst_height: 8,
        };
        let f = map_coordinates(&geo, &depth, &WarpOptions { border_margin: 1.0 });
        let n = f.in_bounds.iter().filter(|&&b| b).count();
        assert_eq!(n, 36);
    }

    #[test]
    fn behind_camera_is_masked() {
        let v = CameraView::at_origin(k()).unwrap();
        // Destination 5 m ahead: points at 2 m depth land behind it.
        let dst = CameraView::translated(k(), Vector3::new(0.0, 0.0, 5.0)).unwrap();
        let depth = DepthMap::constant(4, 4, 2.0).unwrap();
        let geo = PairGeometry {
            src: &v,
            dst: &dst,
            dst_width: 4,
            dst_height: 4,
        };
        let f = map_coordinates(&geo, &depth, &WarpOptions::default());
        assert!(f.in_bounds.iter().all(|&b| !b));
    }

    #[test]
    fn bilinear_at_nodes_is_exact() {
        let img = Image::from_fn(7, 5, 3, |i, j, c| ((i * 7 + j) * 3 + c) as f64 / 105.0).unwrap();
        let f = CorrespondenceField::identity(7, 5);
        let s = bilinear_sample(&img, &f);
        assert_eq!(s.image, img);
        assert!(s.valid.iter().all(|&v| v));
    }

    #[test]
    fn bilinear_half_pixel_shift_averages_ramp() {
        let img = ramp(9, 3);
        let mut f = CorrespondenceField::identity(9, 3);
        for c in &mut f.coords {
            c[0] += 0.5;
        }
        let s = bilinear_sample(&img, &f);
        for i in 0..3 {
            for j in 0..9 {
                let k = i * 9 + j;
                if j == 8 {
                    assert!(!s.valid[k]);
                } else {
                    assert!(s.valid[k]);
                    let expect = 0.5 * (img.get(i, j, 0) + img.get(i, j + 1, 0));
                    assert_abs_diff_eq!(s.image.get(i, j, 0), expect, epsilon = 1e-15);
                }
            }
        }
    }

    #[test]
    fn bilinear_outside_is_invalid() {
        let img = ramp(4, 4);
        let mut f = CorrespondenceField::identity(4, 4);
        f.coords[0] = [-0.01, 0.0];
        f.coords[1] = [1.0, 3.5];
        f.coords[2] = [f64::NAN, 1.0];
        let s = bilinear_sample(&img, &f);
        assert!(!s.valid[0] && !s.valid[1] && !s.valid[2]);
        assert!(s.valid[3]);
    }

    #[test]
    fn identity_warp_reproduces_image_bitwise() {
        let v = CameraView::at_origin(Intrinsics::new(87.3, 91.1, 13.37, 9.21)).unwrap();
        let img = Image::from_fn(27, 19, 3, |i, j, c| {
            0.5 + 0.4 * ((i as f64 * 0.7 + j as f64 * 0.3 + c as f64).sin())
        })
        .unwrap();
        let pair = ViewPair::new(v.clone(), img.clone(), v, img.clone()).unwrap();
        let depth = DepthMap::from_fn(27, 19, |i, j| 1.0 + 0.37 * (i * j) as f64).unwrap();
        let out = backward_warp(&pair, &depth).unwrap();
        assert!(out.valid.iter().all(|&b| b));
        assert_eq!(out.image, img);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let (l, r) = rectified();
        let img = ramp(8, 8);
        let pair = ViewPair::new(l, img.clone(), r, img).unwrap();
        let depth = DepthMap::constant(7, 8, 1.0).unwrap();
        assert!(matches!(
            backward_warp(&pair, &depth),
            Err(Error::DimensionMismatch(_))
        ));
    }
}
