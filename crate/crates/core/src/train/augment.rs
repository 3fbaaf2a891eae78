use rand::Rng;

use crate::cloud::Point3;
use crate::data::SceneSample;
use crate::error::{Error, Result};
use crate::model::{wrap_angle, Box3D};

/// Global augmentation ranges.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentConfig {
    pub scale: [f64; 2],
    /// Rotation about +z, degrees.
    pub rotate_deg: [f64; 2],
    /// Probability of mirroring across the x axis.
    pub flip_p: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            scale: [0.95, 1.05],
            rotate_deg: [-45.0, 45.0],
            flip_p: 0.5,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale[0] > 0.0 && self.scale[0] <= self.scale[1]) {
            return Err(Error::Config(format!("augment scale range {:?} is not ordered and positive", self.scale)));
        }
        if self.rotate_deg[0] > self.rotate_deg[1] {
            return Err(Error::Config(format!("augment rotation range {:?} is not ordered", self.rotate_deg)));
        }
        if !(0.0..=1.0).contains(&self.flip_p) {
            return Err(Error::Config(format!("flip probability {} outside [0, 1]", self.flip_p)));
        }
        Ok(())
    }
}

/// A concrete draw of the augmentation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Transform {
    pub scale: f64,
    /// Radians.
    pub rotation: f64,
    pub flip: bool,
}

impl Transform {
    pub const IDENTITY: Transform = Transform {
        scale: 1.0,
        rotation: 0.0,
        flip: false,
    };

    /// Draws scale, rotation and flip in that order.
    pub fn sample<R: Rng + ?Sized>(cfg: &AugmentConfig, rng: &mut R) -> Self {
        let scale = if cfg.scale[0] < cfg.scale[1] {
            rng.random_range(cfg.scale[0]..cfg.scale[1])
        } else {
            cfg.scale[0]
        };
        let deg = if cfg.rotate_deg[0] < cfg.rotate_deg[1] {
            rng.random_range(cfg.rotate_deg[0]..cfg.rotate_deg[1])
        } else {
            cfg.rotate_deg[0]
        };
        let flip = rng.random::<f64>() < cfg.flip_p;
        Self {
            scale,
            rotation: deg.to_radians(),
            flip,
        }
    }

    /// Scale, then rotate about +z, then mirror `y ← −y`.
    pub fn point(&self, p: &Point3) -> Point3 {
        let (s, c) = self.rotation.sin_cos();
        let (x, y, z) = (p[0] * self.scale, p[1] * self.scale, p[2] * self.scale);
        let (x, y) = (c * x - s * y, s * x + c * y);
        [x, if self.flip { -y } else { y }, z]
    }

    pub fn boxed(&self, b: &Box3D) -> Box3D {
        let yaw = b.yaw + self.rotation;
        Box3D {
            center: self.point(&b.center),
            size: b.size.map(|v| v * self.scale),
            yaw: wrap_angle(if self.flip { -yaw } else { yaw }),
            ..*b
        }
    }
}

/// Applies one random global transform to points and boxes; labels and
/// features are untouched.
pub fn augment<R: Rng + ?Sized>(scene: &SceneSample, rng: &mut R, cfg: &AugmentConfig) -> SceneSample {
    apply_transform(scene, &Transform::sample(cfg, rng))
}

pub fn apply_transform(scene: &SceneSample, t: &Transform) -> SceneSample {
    let mut out = scene.clone();
    for p in out.cloud.coords_mut() {
        *p = t.point(p);
    }
    for b in &mut out.boxes {
        *b = t.boxed(b);
    }
    out
}

/// One extra training query per box, at the box center plus independent
/// uniform noise of at most `noise_scale * size` along each axis.
pub fn noisy_gt_queries<R: Rng + ?Sized>(boxes: &[Box3D], noise_scale: f64, rng: &mut R) -> Vec<Point3> {
    boxes
        .iter()
        .map(|b| {
            let mut c = b.center;
            for a in 0..3 {
                let u: f64 = rng.random_range(-1.0..=1.0);
                c[a] += u * noise_scale * b.size[a];
            }
            c
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn rotation_and_flip() {
        let t = Transform {
            scale: 1.0,
            rotation: FRAC_PI_2,
            flip: false,
        };
        let p = t.point(&[1.0, 0.0, 0.0]);
        assert!(p[0].abs() < 1e-15 && (p[1] - 1.0).abs() < 1e-15);
        let b = t.boxed(&Box3D::new([0.0; 3], [1.0; 3], 0.3, 0));
        assert!((b.yaw - (0.3 + FRAC_PI_2)).abs() < 1e-15);

        let f = Transform {
            flip: true,
            ..Transform::IDENTITY
        };
        assert_eq!(f.point(&[2.0, 3.0, 1.0]), [2.0, -3.0, 1.0]);
        assert_eq!(f.boxed(&Box3D::new([0.0; 3], [1.0; 3], 0.7, 0)).yaw, -0.7);
        assert_eq!(Transform::IDENTITY.point(&[1.5, -2.0, 0.25]), [1.5, -2.0, 0.25]);
    }
}
