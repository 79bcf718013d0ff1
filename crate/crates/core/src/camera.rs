//! Pinhole camera with orbit construction, ray generation and projection.
//! Extrinsics are camera-to-world in the object frame; the camera looks
//! along +z of its own frame with image y pointing down.

use serde::{Deserialize, Serialize};

pub type Vec3 = [f64; 3];

pub fn sub3(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn add3(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn scale3(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn dot3(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross3(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn norm3(a: Vec3) -> f64 {
    dot3(a, a).sqrt()
}

pub fn normalize3(a: Vec3) -> Vec3 {
    let n = norm3(a);
    assert!(n > 0.0, "cannot normalize zero vector");
    scale3(a, 1.0 / n)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Columns are the camera x (image right), y (image down) and z
    /// (viewing direction) axes expressed in the object frame.
    pub rotation: [[f64; 3]; 3],
    /// Camera center in the object frame.
    pub position: Vec3,
}

impl Camera {
    /// Orbit camera on a sphere around the origin. Azimuth/elevation in
    /// radians; `fov_fraction` sets the focal length so that a sphere of
    /// radius `subject_radius` at the origin spans that fraction of the
    /// image half-extent.
    pub fn orbit(
        azimuth: f64,
        elevation: f64,
        radius: f64,
        resolution: usize,
        subject_radius: f64,
        fov_fraction: f64,
    ) -> Camera {
        assert!(radius > 0.0, "orbit radius must be positive");
        let position = [
            radius * elevation.cos() * azimuth.cos(),
            radius * elevation.cos() * azimuth.sin(),
            radius * elevation.sin(),
        ];
        let forward = normalize3(scale3(position, -1.0));
        let up = [0.0, 0.0, 1.0];
        let right = {
            let c = cross3(forward, up);
            let n = norm3(c);
            if n < 1e-9 {
                // Looking straight down/up; pick x as right.
                [1.0, 0.0, 0.0]
            } else {
                scale3(c, 1.0 / n)
            }
        };
        let down = cross3(forward, right);
        let half = resolution as f64 / 2.0;
        let focal = half * radius / (subject_radius / fov_fraction.min(1.0).max(1e-6));
        Camera {
            width: resolution,
            height: resolution,
            fx: focal,
            fy: focal,
            cx: half,
            cy: half,
            rotation: columns(right, down, forward),
            position,
        }
    }

    /// Unit-norm world-space direction through pixel center (px+0.5, py+0.5).
    pub fn ray_dir(&self, px: usize, py: usize) -> Vec3 {
        self.ray_dir_at(px as f64 + 0.5, py as f64 + 0.5)
    }

    pub fn ray_dir_at(&self, x: f64, y: f64) -> Vec3 {
        let dc = normalize3([(x - self.cx) / self.fx, (y - self.cy) / self.fy, 1.0]);
        self.rotate(dc)
    }

    fn rotate(&self, v: Vec3) -> Vec3 {
        let r = &self.rotation;
        [
            r[0][0] * v[0] + r[0][1] * v[1] + r[0][2] * v[2],
            r[1][0] * v[0] + r[1][1] * v[1] + r[1][2] * v[2],
            r[2][0] * v[0] + r[2][1] * v[1] + r[2][2] * v[2],
        ]
    }

    fn rotate_transpose(&self, v: Vec3) -> Vec3 {
        let r = &self.rotation;
        [
            r[0][0] * v[0] + r[1][0] * v[1] + r[2][0] * v[2],
            r[0][1] * v[0] + r[1][1] * v[1] + r[2][1] * v[2],
            r[0][2] * v[0] + r[1][2] * v[1] + r[2][2] * v[2],
        ]
    }

    /// Projects an object-frame point; returns (px, py, z_cam).
    pub fn project(&self, p: Vec3) -> (f64, f64, f64) {
        let pc = self.rotate_transpose(sub3(p, self.position));
        (
            self.fx * pc[0] / pc[2] + self.cx,
            self.fy * pc[1] / pc[2] + self.cy,
            pc[2],
        )
    }

    /// Point at Euclidean distance `t` along the ray through pixel (px,py).
    pub fn backproject(&self, px: usize, py: usize, t: f64) -> Vec3 {
        add3(self.position, scale3(self.ray_dir(px, py), t))
    }

    /// Same view at a different pixel resolution (intrinsics rescaled).
    pub fn with_resolution(&self, resolution: usize) -> Camera {
        let sx = resolution as f64 / self.width as f64;
        let sy = resolution as f64 / self.height as f64;
        Camera {
            width: resolution,
            height: resolution,
            fx: self.fx * sx,
            fy: self.fy * sy,
            cx: self.cx * sx,
            cy: self.cy * sy,
            ..self.clone()
        }
    }

    /// Same camera rotated by `yaw` radians about the object z axis.
    pub fn rotated_about_z(&self, yaw: f64) -> Camera {
        let (s, c) = yaw.sin_cos();
        let rot = |v: Vec3| -> Vec3 { [c * v[0] - s * v[1], s * v[0] + c * v[1], v[2]] };
        let r = &self.rotation;
        let col = |i: usize| -> Vec3 { [r[0][i], r[1][i], r[2][i]] };
        let (x, y, z) = (rot(col(0)), rot(col(1)), rot(col(2)));
        Camera {
            rotation: columns(x, y, z),
            position: rot(self.position),
            ..self.clone()
        }
    }
}

fn columns(x: Vec3, y: Vec3, z: Vec3) -> [[f64; 3]; 3] {
    [[x[0], y[0], z[0]], [x[1], y[1], z[1]], [x[2], y[2], z[2]]]
}
