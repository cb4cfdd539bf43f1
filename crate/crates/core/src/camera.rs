//! Pinhole cameras and ray generation.
//!
//! Camera frame convention: `+x` right, `+y` down, `+z` forward. A pose's
//! rotation maps camera-frame vectors to world space, so its columns are the
//! camera's right, down and forward axes expressed in world coordinates.

use std::f64::consts::PI;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Purpose};
use crate::voxgrid::Bounds;

pub type Vec3 = [f64; 3];

#[inline]
pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
pub fn normalize(a: Vec3) -> Vec3 {
    let n = norm(a);
    [a[0] / n, a[1] / n, a[2] / n]
}

/// Rigid camera-to-world transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    /// Row-major 3×3 rotation.
    pub rotation: [[f64; 3]; 3],
    pub position: Vec3,
}

impl CameraPose {
    pub fn new(rotation: [[f64; 3]; 3], position: Vec3) -> Result<Self> {
        let pose = Self { rotation, position };
        pose.validate()?;
        Ok(pose)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.position.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("camera position must be finite"));
        }
        let r = &self.rotation;
        for i in 0..3 {
            for j in 0..3 {
                let rtr: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                if !((rtr - want).abs() <= 1e-9) {
                    return Err(Error::invalid("camera rotation is not orthonormal"));
                }
            }
        }
        let det = dot(
            [r[0][0], r[1][0], r[2][0]],
            cross([r[0][1], r[1][1], r[2][1]], [r[0][2], r[1][2], r[2][2]]),
        );
        if (det - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("camera rotation must have determinant +1"));
        }
        Ok(())
    }

    /// Camera at `position` looking at `target`, with world up `+z`
    /// (falling back to `+x` when looking straight along the z axis).
    pub fn look_at(position: Vec3, target: Vec3) -> Result<Self> {
        let d = [
            target[0] - position[0],
            target[1] - position[1],
            target[2] - position[2],
        ];
        if !(norm(d) > 0.0) {
            return Err(Error::invalid("look_at: position equals target"));
        }
        let forward = normalize(d);
        let mut side = cross(forward, [0.0, 0.0, 1.0]);
        if norm(side) < 1e-6 {
            side = cross(forward, [1.0, 0.0, 0.0]);
        }
        let right = normalize(side);
        let down = cross(forward, right);
        let rotation = [
            [right[0], down[0], forward[0]],
            [right[1], down[1], forward[1]],
            [right[2], down[2], forward[2]],
        ];
        Ok(Self { rotation, position })
    }

    pub fn forward(&self) -> Vec3 {
        self.column(2)
    }

    pub fn column(&self, j: usize) -> Vec3 {
        [self.rotation[0][j], self.rotation[1][j], self.rotation[2][j]]
    }

    /// Camera-frame vector to world frame.
    pub fn to_world(&self, v: Vec3) -> Vec3 {
        let r = &self.rotation;
        [dot(r[0], v), dot(r[1], v), dot(r[2], v)]
    }

    /// Rotation flattened row-major, as stored in dataset manifests.
    pub fn rotation_flat(&self) -> [f64; 9] {
        let r = &self.rotation;
        [
            r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2],
        ]
    }

    pub fn from_flat(rotation: &[f64], position: &[f64]) -> Result<Self> {
        if rotation.len() != 9 || position.len() != 3 {
            return Err(Error::invalid(
                "pose needs 9 rotation values and 3 position values",
            ));
        }
        let r = [
            [rotation[0], rotation[1], rotation[2]],
            [rotation[3], rotation[4], rotation[5]],
            [rotation[6], rotation[7], rotation[8]],
        ];
        Self::new(r, [position[0], position[1], position[2]])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    /// Principal point at the image center.
    pub fn new(width: usize, height: usize, focal: f64) -> Result<Self> {
        let intr = Self {
            width,
            height,
            focal,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
        };
        intr.validate()?;
        Ok(intr)
    }

    /// Focal length at which the `[-1,1]^3` cube, seen from `radius`, spans
    /// about 70% of the image height.
    pub fn framing_unit_cube(width: usize, height: usize, radius: f64) -> Result<Self> {
        Self::new(width, height, 0.7 * height as f64 * radius / 2.0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("image dimensions must be at least 1"));
        }
        if !(self.focal.is_finite() && self.focal > 0.0) {
            return Err(Error::invalid("focal length must be positive"));
        }
        if !(self.cx.is_finite() && self.cy.is_finite()) {
            return Err(Error::invalid("principal point must be finite"));
        }
        Ok(())
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
    pub t_near: f64,
    pub t_far: f64,
}

impl Ray {
    pub fn at(&self, t: f64) -> Vec3 {
        [
            self.origin[0] + t * self.direction[0],
            self.origin[1] + t * self.direction[1],
            self.origin[2] + t * self.direction[2],
        ]
    }

    /// True when the ray misses the grid bounds.
    pub fn is_degenerate(&self) -> bool {
        !(self.t_far > self.t_near)
    }

    /// A ray with its `[t_near, t_far]` clipped to the bounds via the slab
    /// test. Misses produce `t_near == t_far == 0`.
    pub fn clipped(origin: Vec3, direction: Vec3, bounds: &Bounds) -> Self {
        let mut t0 = 0.0f64;
        let mut t1 = f64::INFINITY;
        for a in 0..3 {
            let inv = 1.0 / direction[a];
            let mut ta = (bounds.min[a] - origin[a]) * inv;
            let mut tb = (bounds.max[a] - origin[a]) * inv;
            if ta > tb {
                std::mem::swap(&mut ta, &mut tb);
            }
            // 0 * inf yields NaN for axis-parallel rays grazing a face.
            if ta.is_nan() || tb.is_nan() {
                continue;
            }
            t0 = t0.max(ta);
            t1 = t1.min(tb);
        }
        if t1 > t0 && t1.is_finite() {
            Self {
                origin,
                direction,
                t_near: t0,
                t_far: t1,
            }
        } else {
            Self {
                origin,
                direction,
                t_near: 0.0,
                t_far: 0.0,
            }
        }
    }
}

/// Ray through the center of pixel `(px, py)`, clipped to `bounds`.
pub fn generate_ray(
    pose: &CameraPose,
    intr: &Intrinsics,
    px: usize,
    py: usize,
    bounds: &Bounds,
) -> Result<Ray> {
    if px >= intr.width || py >= intr.height {
        return Err(Error::invalid(format!(
            "pixel ({px}, {py}) outside {}x{} image",
            intr.width, intr.height
        )));
    }
    let cam = [
        (px as f64 + 0.5 - intr.cx) / intr.focal,
        (py as f64 + 0.5 - intr.cy) / intr.focal,
        1.0,
    ];
    let dir = normalize(pose.to_world(cam));
    Ok(Ray::clipped(pose.position, dir, bounds))
}

/// All rays of an image in row-major pixel order.
pub fn image_rays(pose: &CameraPose, intr: &Intrinsics, bounds: &Bounds) -> Vec<Ray> {
    let mut rays = Vec::with_capacity(intr.pixel_count());
    for py in 0..intr.height {
        for px in 0..intr.width {
            rays.push(generate_ray(pose, intr, px, py, bounds).expect("pixel in range"));
        }
    }
    rays
}

/// `n` cameras at uniformly random points of the sphere of `radius`, each
/// looking at the origin.
pub fn sample_spherical_poses(n: usize, radius: f64, seed: u64) -> Result<Vec<CameraPose>> {
    if n == 0 {
        return Err(Error::invalid("pose count must be at least 1"));
    }
    if !(radius.is_finite() && radius > 0.0) {
        return Err(Error::invalid("sphere radius must be positive"));
    }
    let mut rng = rng::stream(seed, Purpose::Poses, 0);
    (0..n)
        .map(|_| {
            let z: f64 = 1.0 - 2.0 * rng.random::<f64>();
            let phi = 2.0 * PI * rng.random::<f64>();
            let rho = (1.0 - z * z).max(0.0).sqrt();
            let p = [radius * rho * phi.cos(), radius * rho * phi.sin(), radius * z];
            CameraPose::look_at(p, [0.0; 3])
        })
        .collect()
}

/// `n` cameras on an Archimedean spiral over the sphere, from near the
/// north pole to near the south pole, winding `turns` times.
pub fn spiral_poses(n: usize, radius: f64, turns: f64) -> Result<Vec<CameraPose>> {
    if n == 0 || !(radius > 0.0) {
        return Err(Error::invalid("spiral needs n >= 1 and radius > 0"));
    }
    (0..n)
        .map(|k| {
            let s = (k as f64 + 0.5) / n as f64;
            let polar = 0.1 * PI + 0.8 * PI * s;
            let phi = 2.0 * PI * turns * s;
            let p = [
                radius * polar.sin() * phi.cos(),
                radius * polar.sin() * phi.sin(),
                radius * polar.cos(),
            ];
            CameraPose::look_at(p, [0.0; 3])
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spherical_poses_are_deterministic_and_on_sphere() {
        let a = sample_spherical_poses(1, 4.0, 11).unwrap();
        let b = sample_spherical_poses(1, 4.0, 11).unwrap();
        assert_eq!(a, b);
        for pose in sample_spherical_poses(200, 4.0, 3).unwrap() {
            pose.validate().unwrap();
            assert!((norm(pose.position) - 4.0).abs() < 1e-9);
            let want = pose.position.map(|v| -v / 4.0);
            let f = pose.forward();
            for a in 0..3 {
                assert!((f[a] - want[a]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn spherical_poses_reject_bad_input() {
        assert!(sample_spherical_poses(0, 4.0, 1).is_err());
        assert!(sample_spherical_poses(3, 0.0, 1).is_err());
        assert!(sample_spherical_poses(3, -1.0, 1).is_err());
    }

    #[test]
    fn look_at_handles_poles() {
        let p = CameraPose::look_at([0.0, 0.0, 4.0], [0.0; 3]).unwrap();
        p.validate().unwrap();
        assert_eq!(p.forward(), [0.0, 0.0, -1.0]);
    }

    #[test]
    fn principal_ray_is_forward_axis() {
        let pose = CameraPose::look_at([1.0, 2.0, 3.0], [0.0; 3]).unwrap();
        let intr = Intrinsics::new(8, 8, 10.0).unwrap();
        // pixel (3,3) center is at 3.5; shift principal point onto it
        let intr = Intrinsics {
            cx: 3.5,
            cy: 3.5,
            ..intr
        };
        let ray = generate_ray(&pose, &intr, 3, 3, &Bounds::unit_cube()).unwrap();
        let f = pose.forward();
        for a in 0..3 {
            assert!((ray.direction[a] - f[a]).abs() < 1e-9);
        }
    }

    #[test]
    fn mirrored_pixels_give_mirrored_directions() {
        let pose = CameraPose::look_at([0.3, -4.0, 1.0], [0.0; 3]).unwrap();
        let intr = Intrinsics::new(10, 6, 7.0).unwrap();
        let b = Bounds::unit_cube();
        for (px, py) in [(0, 0), (2, 5), (9, 1)] {
            let r1 = generate_ray(&pose, &intr, px, py, &b).unwrap();
            let r2 = generate_ray(&pose, &intr, intr.width - 1 - px, intr.height - 1 - py, &b).unwrap();
            // back to camera frame: R^T d
            let cam = |d: Vec3| [0, 1, 2].map(|j| dot(pose.column(j), d));
            let (c1, c2) = (cam(r1.direction), cam(r2.direction));
            assert!((c1[0] + c2[0]).abs() < 1e-9);
            assert!((c1[1] + c2[1]).abs() < 1e-9);
            assert!((c1[2] - c2[2]).abs() < 1e-9);
        }
    }

    #[test]
    fn directions_are_unit_and_clipped() {
        let pose = CameraPose::look_at([0.0, 4.0, 0.0], [0.0; 3]).unwrap();
        let intr = Intrinsics::framing_unit_cube(16, 16, 4.0).unwrap();
        let rays = image_rays(&pose, &intr, &Bounds::unit_cube());
        assert_eq!(rays.len(), 256);
        let mut hits = 0;
        for r in &rays {
            assert!((norm(r.direction) - 1.0).abs() < 1e-9);
            if !r.is_degenerate() {
                hits += 1;
                let p = r.at(0.5 * (r.t_near + r.t_far));
                assert!(Bounds::unit_cube().contains(p));
            }
        }
        assert!(hits > 64);
        assert!(generate_ray(&pose, &intr, 16, 0, &Bounds::unit_cube()).is_err());
    }

    #[test]
    fn miss_is_degenerate() {
        let r = Ray::clipped([0.0, 5.0, 0.0], [0.0, 1.0, 0.0], &Bounds::unit_cube());
        assert!(r.is_degenerate());
        let r = Ray::clipped([-3.0, 0.0, 0.0], [1.0, 0.0, 0.0], &Bounds::unit_cube());
        assert_eq!((r.t_near, r.t_far), (2.0, 4.0));
    }

    #[test]
    fn flat_round_trip() {
        let p = sample_spherical_poses(1, 4.0, 5).unwrap()[0];
        let q = CameraPose::from_flat(&p.rotation_flat(), &p.position).unwrap();
        assert_eq!(p, q);
        assert!(CameraPose::from_flat(&[1.0; 9], &[0.0; 3]).is_err());
    }

    #[test]
    fn spiral_poses_are_valid() {
        let poses = spiral_poses(251, 4.0, 4.0).unwrap();
        assert_eq!(poses.len(), 251);
        for p in poses {
            p.validate().unwrap();
            assert!((norm(p.position) - 4.0).abs() < 1e-9);
        }
    }
}
