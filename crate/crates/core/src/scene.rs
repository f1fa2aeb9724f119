//! Images, depth maps and pinhole cameras shared by every stage of the pipeline.
//!
//! Conventions: pixel `(row i, col j)` sits at continuous coordinate `(x = j, y = i)`,
//! the camera frame is right-handed with `+z` forward, `+x` right and `+y` down, and
//! extrinsics map camera coordinates to world coordinates.

use nalgebra::{Matrix3, Matrix4, Vector2, Vector3};

use crate::error::{Error, Result};

/// Tolerance on `RᵀR = I` and `det R = 1` for a camera's rotation block.
pub const ROTATION_TOLERANCE: f64 = 1e-9;

/// Row-major interleaved intensity image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    /// Builds an image, clamping every value into `[0, 1]`.
    pub fn new(width: usize, height: usize, channels: usize, mut data: Vec<f64>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidValue(format!(
                "image must have 1 or 3 channels, got {channels}"
            )));
        }
        if width == 0 || height == 0 {
            return Err(Error::InvalidValue("image must be non-empty".into()));
        }
        if data.len() != width * height * channels {
            return Err(Error::DimensionMismatch(format!(
                "image data has {} values, expected {}x{}x{}",
                data.len(),
                width,
                height,
                channels
            )));
        }
        if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidValue(format!(
                "non-finite intensity at index {bad}"
            )));
        }
        for v in &mut data {
            *v = v.clamp(0.0, 1.0);
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn constant(width: usize, height: usize, channels: usize, value: f64) -> Result<Self> {
        Self::new(width, height, channels, vec![value; width * height * channels])
    }

    /// Builds an image from a per-pixel function returning one value per channel.
    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height * channels);
        for i in 0..height {
            for j in 0..width {
                for c in 0..channels {
                    data.push(f(i, j, c));
                }
            }
        }
        Self::new(width, height, channels, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, c: usize) -> f64 {
        self.data[(i * self.width + j) * self.channels + c]
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }
}

/// Row-major depth map in meters with a per-pixel validity mask.
///
/// Invalid pixels carry a stored value of `0.0`.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    width: usize,
    height: usize,
    data: Vec<f64>,
    valid: Vec<bool>,
}

impl DepthMap {
    /// Dense depth map; every value must be finite and strictly positive.
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        let valid = vec![true; data.len()];
        Self::with_mask(width, height, data, valid)
    }

    /// Depth map with an explicit mask. Values under a `false` mask entry are ignored.
    pub fn with_mask(
        width: usize,
        height: usize,
        mut data: Vec<f64>,
        valid: Vec<bool>,
    ) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidValue("depth map must be non-empty".into()));
        }
        if data.len() != width * height || valid.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "depth map {}x{} given {} values and {} mask entries",
                width,
                height,
                data.len(),
                valid.len()
            )));
        }
        for (k, (d, &ok)) in data.iter_mut().zip(&valid).enumerate() {
            if ok {
                if !d.is_finite() {
                    return Err(Error::InvalidValue(format!("non-finite depth at index {k}")));
                }
                if *d <= 0.0 {
                    return Err(Error::NonPositiveDepth(*d));
                }
            } else {
                *d = 0.0;
            }
        }
        Ok(Self {
            width,
            height,
            data,
            valid,
        })
    }

    pub fn constant(width: usize, height: usize, depth: f64) -> Result<Self> {
        Self::new(width, height, vec![depth; width * height])
    }

    /// Dense depth map from a `(row, col)` function.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height);
        for i in 0..height {
            for j in 0..width {
                data.push(f(i, j));
            }
        }
        Self::new(width, height, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.width + j]
    }

    #[inline]
    pub fn is_valid(&self, i: usize, j: usize) -> bool {
        self.valid[i * self.width + j]
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub fn same_shape(&self, other: &DepthMap) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Applies `f` to every valid depth, keeping the mask.
    pub fn map_valid(&self, mut f: impl FnMut(f64) -> f64) -> Result<Self> {
        let data = self
            .data
            .iter()
            .zip(&self.valid)
            .map(|(&d, &ok)| if ok { f(d) } else { 0.0 })
            .collect();
        Self::with_mask(self.width, self.height, data, self.valid.clone())
    }
}

/// Pinhole intrinsics in pixels (zero skew).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Self {
        Self { fx, fy, cx, cy }
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }
}

/// One calibrated view: intrinsics plus camera-to-world extrinsic.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraView {
    intrinsics: Intrinsics,
    extrinsic: Matrix4<f64>,
}

impl CameraView {
    pub fn new(intrinsics: Intrinsics, extrinsic: Matrix4<f64>) -> Result<Self> {
        let Intrinsics { fx, fy, cx, cy } = intrinsics;
        if !(fx.is_finite() && fy.is_finite() && cx.is_finite() && cy.is_finite()) {
            return Err(Error::InvalidValue("intrinsics must be finite".into()));
        }
        if fx <= 0.0 || fy <= 0.0 {
            return Err(Error::InvalidValue(format!(
                "focal lengths must be positive, got fx={fx} fy={fy}"
            )));
        }
        check_rigid(&extrinsic, ROTATION_TOLERANCE)?;
        Ok(Self {
            intrinsics,
            extrinsic,
        })
    }

    /// Camera at the world origin looking down `+z`.
    pub fn at_origin(intrinsics: Intrinsics) -> Result<Self> {
        Self::new(intrinsics, Matrix4::identity())
    }

    /// Camera translated by `offset` (world frame) with identity rotation.
    pub fn translated(intrinsics: Intrinsics, offset: Vector3<f64>) -> Result<Self> {
        let mut e = Matrix4::identity();
        e.fixed_view_mut::<3, 1>(0, 3).copy_from(&offset);
        Self::new(intrinsics, e)
    }

    pub fn intrinsics(&self) -> &Intrinsics {
        &self.intrinsics
    }

    pub fn k(&self) -> Matrix3<f64> {
        self.intrinsics.matrix()
    }

    pub fn extrinsic(&self) -> &Matrix4<f64> {
        &self.extrinsic
    }
}

/// Checks that the upper-left 3×3 block is a proper rotation and the last row is `[0 0 0 1]`.
pub fn check_rigid(e: &Matrix4<f64>, tol: f64) -> Result<()> {
    if e.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonRigidExtrinsic("non-finite entry".into()));
    }
    let bottom = e.fixed_view::<1, 4>(3, 0);
    if (bottom[0].abs() + bottom[1].abs() + bottom[2].abs() + (bottom[3] - 1.0).abs()) > tol {
        return Err(Error::NonRigidExtrinsic(format!(
            "last row must be [0 0 0 1], got {bottom}"
        )));
    }
    let r: Matrix3<f64> = e.fixed_view::<3, 3>(0, 0).into_owned();
    let ortho = (r.transpose() * r - Matrix3::identity()).abs().max();
    if ortho > tol {
        return Err(Error::NonRigidExtrinsic(format!(
            "rotation not orthonormal (max |RᵀR - I| = {ortho:.3e})"
        )));
    }
    let det = r.determinant();
    if (det - 1.0).abs() > tol {
        return Err(Error::NonRigidExtrinsic(format!(
            "rotation determinant {det:.6} != +1"
        )));
    }
    Ok(())
}

/// Inverse of a rigid transform without a general matrix inversion.
pub fn rigid_inverse(e: &Matrix4<f64>) -> Matrix4<f64> {
    let r = e.fixed_view::<3, 3>(0, 0);
    let t = e.fixed_view::<3, 1>(0, 3);
    let rt = r.transpose();
    let ti = -(rt * t);
    let mut out = Matrix4::identity();
    out.fixed_view_mut::<3, 3>(0, 0).copy_from(&rt);
    out.fixed_view_mut::<3, 1>(0, 3).copy_from(&ti);
    out
}

/// Left and right views with their images.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewPair {
    pub left: CameraView,
    pub left_image: Image,
    pub right: CameraView,
    pub right_image: Image,
}

impl ViewPair {
    pub fn new(
        left: CameraView,
        left_image: Image,
        right: CameraView,
        right_image: Image,
    ) -> Result<Self> {
        if !left_image.same_shape(&right_image) {
            return Err(Error::DimensionMismatch(format!(
                "left image {}x{}x{} vs right image {}x{}x{}",
                left_image.width(),
                left_image.height(),
                left_image.channels(),
                right_image.width(),
                right_image.height(),
                right_image.channels()
            )));
        }
        Ok(Self {
            left,
            left_image,
            right,
            right_image,
        })
    }

    pub fn width(&self) -> usize {
        self.left_image.width()
    }

    pub fn height(&self) -> usize {
        self.left_image.height()
    }
}

/// Transform taking `src` camera coordinates to `dst` camera coordinates: `E_dst⁻¹ · E_src`.
pub fn relative_transform(src: &CameraView, dst: &CameraView) -> Matrix4<f64> {
    rigid_inverse(dst.extrinsic()) * src.extrinsic()
}

/// Projects a camera-frame point; returns pixel coordinates and depth.
pub fn project_point(view: &CameraView, p_cam: &Vector3<f64>) -> Result<(Vector2<f64>, f64)> {
    let z = p_cam.z;
    if !(z > 0.0) {
        return Err(Error::NonPositiveDepth(z));
    }
    let k = view.intrinsics();
    Ok((
        Vector2::new(k.fx * p_cam.x / z + k.cx, k.fy * p_cam.y / z + k.cy),
        z,
    ))
}

/// Back-projects pixel `c` at `depth` into the camera frame.
pub fn unproject_pixel(view: &CameraView, c: &Vector2<f64>, depth: f64) -> Result<Vector3<f64>> {
    if !(depth > 0.0) {
        return Err(Error::NonPositiveDepth(depth));
    }
    let k = view.intrinsics();
    Ok(Vector3::new(
        (c.x - k.cx) / k.fx * depth,
        (c.y - k.cy) / k.fy * depth,
        depth,
    ))
}
