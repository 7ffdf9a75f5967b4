//! Versioned text serialization of [`Scene`].

use nalgebra::{DVector, Quaternion, UnitQuaternion, Vector3};

use super::{Gaussian, Keypoint, Scene, SceneConfig};
use crate::error::{Error, Result};
use crate::geometry::{Camera, Intrinsics, PixelPoint, Pose};
use crate::textio::{push_all, push_f64, Lines};

pub const SCENE_MAGIC: &str = "gsloc-scene";
pub const SCENE_VERSION: u32 = 1;

const HEADER: &str = "\
# gsloc scene file. Records, in order:
#   config n_gaussians n_cameras feature_dim sigma extent clutter_fraction textured_fraction view_correlation width height focal
#   seed <u64>
#   noise_cov <feature_dim variances>
#   gaussians <count>
#   g cx cy cz sx sy sz qw qx qy qz opacity textured(0|1) has_stored(0|1) true_feature[D] [stored_feature[D]]
#   cameras <count>
#   c fx fy cx cy width height qw qx qy qz tx ty tz      (world-to-camera)
#   keypoints <view> <count>
#   k u v source(-1 = clutter) descriptor[D]
#   end
";

impl Scene {
    pub fn to_text(&self) -> String {
        let c = &self.config;
        let mut out = format!("{SCENE_MAGIC} {SCENE_VERSION}\n{HEADER}");
        out.push_str(&format!("config {} {} {}", c.n_gaussians, c.n_cameras, c.feature_dim));
        push_all(&mut out, [c.sigma, c.extent, c.clutter_fraction, c.textured_fraction, c.view_correlation]);
        out.push_str(&format!(" {} {}", c.width, c.height));
        push_f64(&mut out, c.focal);
        out.push_str(&format!("\nseed {}\nnoise_cov", self.seed));
        push_all(&mut out, self.noise_cov.iter().copied());
        out.push_str(&format!("\ngaussians {}\n", self.gaussians.len()));
        for (g, textured) in self.gaussians.iter().zip(&self.textured) {
            out.push('g');
            push_all(&mut out, g.center.iter().copied());
            push_all(&mut out, g.scales.iter().copied());
            push_quaternion(&mut out, &g.orientation);
            push_f64(&mut out, g.opacity);
            out.push_str(&format!(" {} {}", *textured as u8, g.stored_feature.is_some() as u8));
            push_all(&mut out, g.true_feature.iter().copied());
            if let Some(s) = &g.stored_feature {
                push_all(&mut out, s.iter().copied());
            }
            out.push('\n');
        }
        out.push_str(&format!("cameras {}\n", self.cameras.len()));
        for cam in &self.cameras {
            let k = &cam.intrinsics;
            out.push('c');
            push_all(&mut out, [k.fx, k.fy, k.cx, k.cy]);
            out.push_str(&format!(" {} {}", k.width, k.height));
            push_quaternion(&mut out, cam.pose.quaternion());
            push_all(&mut out, cam.pose.translation().iter().copied());
            out.push('\n');
        }
        for (view, kps) in self.keypoints_per_view.iter().enumerate() {
            out.push_str(&format!("keypoints {view} {}\n", kps.len()));
            for kp in kps {
                out.push('k');
                push_all(&mut out, [kp.pixel.u, kp.pixel.v]);
                out.push_str(&format!(" {}", kp.source.map_or(-1, |s| s as i64)));
                push_all(&mut out, kp.descriptor.iter().copied());
                out.push('\n');
            }
        }
        out.push_str("end\n");
        out
    }

    pub fn from_text(text: &str) -> Result<Scene> {
        let mut lines = Lines::new(text);
        let mut rec = lines.expect(SCENE_MAGIC)?;
        let version: u32 = rec.parse()?;
        if version != SCENE_VERSION {
            return Err(rec.error(format!("unsupported scene version {version}")));
        }
        rec.finish()?;

        let mut rec = lines.expect("config")?;
        let config = SceneConfig {
            n_gaussians: rec.parse()?,
            n_cameras: rec.parse()?,
            feature_dim: rec.parse()?,
            sigma: rec.parse()?,
            extent: rec.parse()?,
            clutter_fraction: rec.parse()?,
            textured_fraction: rec.parse()?,
            view_correlation: rec.parse()?,
            width: rec.parse()?,
            height: rec.parse()?,
            focal: rec.parse()?,
        };
        rec.finish()?;
        config.validate()?;
        let d = config.feature_dim;

        let mut rec = lines.expect("seed")?;
        let seed: u64 = rec.parse()?;
        rec.finish()?;
        let mut rec = lines.expect("noise_cov")?;
        let noise_cov = rec.floats(d)?;
        rec.finish()?;
        if noise_cov.iter().any(|v| !(*v >= 0.0)) {
            return Err(rec.error("noise variances must be non-negative"));
        }

        let mut rec = lines.expect("gaussians")?;
        let n: usize = rec.parse()?;
        rec.finish()?;
        let mut gaussians = Vec::with_capacity(n);
        let mut textured = Vec::with_capacity(n);
        for _ in 0..n {
            let mut rec = lines.expect("g")?;
            let center = Vector3::from_vec(rec.floats(3)?);
            let scales = Vector3::from_vec(rec.floats(3)?);
            let q = rec.floats(4)?;
            let opacity: f64 = rec.parse()?;
            let is_textured: u8 = rec.parse()?;
            let has_stored: u8 = rec.parse()?;
            let true_feature = DVector::from_vec(rec.floats(d)?);
            let stored_feature = match has_stored {
                0 => None,
                _ => Some(DVector::from_vec(rec.floats(d)?)),
            };
            rec.finish()?;
            let g = Gaussian { center, scales, orientation: quaternion(&q), opacity, true_feature, stored_feature };
            g.validate().map_err(|e| rec.error(e.to_string()))?;
            gaussians.push(g);
            textured.push(is_textured != 0);
        }

        let mut rec = lines.expect("cameras")?;
        let m: usize = rec.parse()?;
        rec.finish()?;
        let mut cameras = Vec::with_capacity(m);
        for _ in 0..m {
            let mut rec = lines.expect("c")?;
            let f = rec.floats(4)?;
            let (w, h): (u32, u32) = (rec.parse()?, rec.parse()?);
            let q = rec.floats(4)?;
            let t = Vector3::from_vec(rec.floats(3)?);
            rec.finish()?;
            let k = Intrinsics::new(f[0], f[1], f[2], f[3], w, h).map_err(|e| rec.error(e.to_string()))?;
            cameras.push(Camera::new(k, Pose::from_quaternion(quaternion(&q), t))?);
        }

        let mut keypoints_per_view = Vec::with_capacity(m);
        for view in 0..m {
            let mut rec = lines.expect("keypoints")?;
            let idx: usize = rec.parse()?;
            let count: usize = rec.parse()?;
            rec.finish()?;
            if idx != view {
                return Err(rec.error(format!("expected keypoints for view {view}")));
            }
            let mut kps = Vec::with_capacity(count);
            for _ in 0..count {
                let mut rec = lines.expect("k")?;
                let uv = rec.floats(2)?;
                let source: i64 = rec.parse()?;
                let descriptor = DVector::from_vec(rec.floats(d)?);
                rec.finish()?;
                let source = match source {
                    -1 => None,
                    s if s >= 0 && (s as usize) < n => Some(s as usize),
                    s => return Err(rec.error(format!("keypoint source {s} out of range"))),
                };
                kps.push(Keypoint { pixel: PixelPoint::new(uv[0], uv[1]), descriptor, source });
            }
            keypoints_per_view.push(kps);
        }
        lines.expect("end")?.finish()?;
        if gaussians.is_empty() || cameras.is_empty() {
            return Err(Error::InvalidConfig("scene without gaussians or cameras".into()));
        }
        Ok(Scene { config, seed, gaussians, cameras, noise_cov, textured, keypoints_per_view })
    }
}

fn push_quaternion(out: &mut String, q: &UnitQuaternion<f64>) {
    let q = q.quaternion();
    push_all(out, [q.w, q.i, q.j, q.k]);
}

/// Rebuilds the stored quaternion verbatim (no renormalization).
fn quaternion(q: &[f64]) -> UnitQuaternion<f64> {
    UnitQuaternion::new_unchecked(Quaternion::new(q[0], q[1], q[2], q[3]))
}
