//! Scene frame: the reflector is the segment y = 0, x in [-A/2, A/2], the BS
//! sits at (-D_x, D_y) and every angle is measured from the reflector normal,
//! positive toward +x.

use nalgebra::Vector2;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::C0;

pub type Vec2 = Vector2<f64>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneGeometry {
    pub bs_position: Vec2,
    pub reflector_half_length: f64,
    pub roi_center: Vec2,
    pub roi_size: Vec2,
}

impl SceneGeometry {
    pub fn new(
        bs_position: Vec2,
        reflector_length: f64,
        roi_center: Vec2,
        roi_size: Vec2,
    ) -> Result<Self> {
        let g = Self {
            bs_position,
            reflector_half_length: reflector_length / 2.0,
            roi_center,
            roi_size,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.bs_position.y > 0.0) {
            return Err(invalid("bs_position", "BS must sit strictly above the reflector plane (D_y > 0)"));
        }
        if !(self.reflector_half_length > 0.0) {
            return Err(invalid("reflector_length", "must be positive"));
        }
        if self.roi_size.x < 0.0 || self.roi_size.y < 0.0 {
            return Err(invalid("roi_size", "must be non-negative"));
        }
        let y_min = self.roi_center.y - self.roi_size.y / 2.0;
        if !(y_min > 0.0) {
            return Err(invalid("roi_center", "ROI must lie strictly in y > 0"));
        }
        Ok(())
    }

    /// Horizontal BS offset, with the BS at x = -D_x.
    pub fn dx(&self) -> f64 {
        -self.bs_position.x
    }

    pub fn dy(&self) -> f64 {
        self.bs_position.y
    }

    pub fn reflector_length(&self) -> f64 {
        2.0 * self.reflector_half_length
    }

    pub fn contains_reflector_point(&self, x: f64) -> bool {
        x.abs() <= self.reflector_half_length
    }

    /// BS to reflector-point distance.
    pub fn incoming_distance(&self, x: f64) -> f64 {
        (Vec2::new(x, 0.0) - self.bs_position).norm()
    }

    pub fn roi_corners(&self) -> [Vec2; 4] {
        let (hx, hy) = (self.roi_size.x / 2.0, self.roi_size.y / 2.0);
        let c = self.roi_center;
        [
            c + Vec2::new(-hx, -hy),
            c + Vec2::new(hx, -hy),
            c + Vec2::new(hx, hy),
            c + Vec2::new(-hx, hy),
        ]
    }

    /// Corners followed by edge midpoints.
    pub fn roi_probe_points(&self) -> [Vec2; 8] {
        let k = self.roi_corners();
        [
            k[0],
            k[1],
            k[2],
            k[3],
            (k[0] + k[1]) / 2.0,
            (k[1] + k[2]) / 2.0,
            (k[2] + k[3]) / 2.0,
            (k[3] + k[0]) / 2.0,
        ]
    }

    pub fn roi_contains(&self, p: Vec2) -> bool {
        let d = p - self.roi_center;
        d.x.abs() <= self.roi_size.x / 2.0 + 1e-12 && d.y.abs() <= self.roi_size.y / 2.0 + 1e-12
    }

    /// Same scene shifted rigidly; only used to check translation invariance.
    pub fn translated(&self, shift: Vec2) -> TranslatedScene {
        TranslatedScene {
            geom: self.clone(),
            shift,
        }
    }
}

/// A scene shifted off the canonical frame. Distances computed through it must
/// match the canonical ones.
#[derive(Debug, Clone)]
pub struct TranslatedScene {
    geom: SceneGeometry,
    shift: Vec2,
}

impl TranslatedScene {
    pub fn two_way_delay(&self, beam_incidence_x: f64, pixel: Vec2) -> f64 {
        let p = Vec2::new(beam_incidence_x, 0.0) + self.shift;
        let bs = self.geom.bs_position + self.shift;
        let px = pixel + self.shift;
        2.0 * ((p - bs).norm() + (px - p).norm()) / C0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolarPoint {
    pub radius: f64,
    pub angle: f64,
}

impl PolarPoint {
    pub fn new(radius: f64, angle: f64) -> Self {
        Self { radius, angle }
    }

    pub fn from_xy(p: Vec2) -> Self {
        Self {
            radius: p.norm(),
            angle: p.x.atan2(p.y),
        }
    }

    pub fn to_xy(self) -> Vec2 {
        Vec2::new(self.radius * self.angle.sin(), self.radius * self.angle.cos())
    }

    pub fn radial_unit(self) -> Vec2 {
        Vec2::new(self.angle.sin(), self.angle.cos())
    }

    /// Transverse unit vector. It points toward decreasing ψ, which makes a
    /// positive v_T raise the Doppler magnitude at positive x on the reflector.
    pub fn transverse_unit(self) -> Vec2 {
        Vec2::new(-self.angle.cos(), self.angle.sin())
    }

    pub fn is_valid(self) -> bool {
        self.radius > 0.0 && self.angle.abs() < std::f64::consts::FRAC_PI_2
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetState {
    pub position: PolarPoint,
    /// Positive means receding from the reflector center.
    pub velocity_radial: f64,
    /// Along [`PolarPoint::transverse_unit`].
    pub velocity_transverse: f64,
    pub rcs: f64,
    pub scattering_phase: f64,
    pub reflection_coefficient: Complex64,
}

impl TargetState {
    pub fn stationary(position: PolarPoint, rcs: f64) -> Self {
        Self {
            position,
            velocity_radial: 0.0,
            velocity_transverse: 0.0,
            rcs,
            scattering_phase: 0.0,
            reflection_coefficient: Complex64::new(1.0, 0.0),
        }
    }

    pub fn with_velocity(mut self, v_r: f64, v_t: f64) -> Self {
        self.velocity_radial = v_r;
        self.velocity_transverse = v_t;
        self
    }

    pub fn with_phase(mut self, phase: f64) -> Self {
        self.scattering_phase = phase.rem_euclid(std::f64::consts::TAU);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !self.position.is_valid() {
            return Err(invalid("target.position", "need R > 0 and |psi| < pi/2"));
        }
        if !(self.rcs >= 0.0) {
            return Err(invalid("target.rcs", "must be non-negative"));
        }
        if !(0.0..std::f64::consts::TAU).contains(&self.scattering_phase) {
            return Err(invalid("target.scattering_phase", "must lie in [0, 2pi)"));
        }
        Ok(())
    }

    /// Cartesian velocity.
    pub fn velocity_xy(&self) -> Vec2 {
        self.position.radial_unit() * self.velocity_radial
            + self.position.transverse_unit() * self.velocity_transverse
    }

    /// Complex reflectivity α = √σ Γ e^{jϑ}.
    pub fn reflectivity(&self) -> Complex64 {
        self.rcs.sqrt() * self.reflection_coefficient * Complex64::from_polar(1.0, self.scattering_phase)
    }
}

/// Point on the reflector hit by the beam center: D_y tan θ_i - D_x.
pub fn incidence_point(theta_i: f64, geom: &SceneGeometry) -> f64 {
    geom.dy() * theta_i.tan() - geom.dx()
}

/// Inverse of [`incidence_point`].
pub fn incidence_angle(x: f64, geom: &SceneGeometry) -> f64 {
    ((x + geom.dx()) / geom.dy()).atan()
}

pub fn reflection_angle_to_target(theta_i: f64, target_xy: Vec2, geom: &SceneGeometry) -> f64 {
    let x_l = incidence_point(theta_i, geom);
    ((target_xy.x - x_l) / target_xy.y).atan()
}

/// Two-way BS -> reflector -> pixel delay.
pub fn two_way_delay(beam_incidence_x: f64, pixel_xy: Vec2, geom: &SceneGeometry) -> f64 {
    let d_i = geom.incoming_distance(beam_incidence_x);
    let d_o = outgoing_distance(beam_incidence_x, pixel_xy);
    2.0 * (d_i + d_o) / C0
}

pub fn outgoing_distance(x: f64, pixel_xy: Vec2) -> f64 {
    (pixel_xy - Vec2::new(x, 0.0)).norm()
}

/// Second-order expansion of the reflector-to-target distance around x = 0.
pub fn parabolic_outgoing_distance(x: f64, target: PolarPoint) -> f64 {
    let (s, c) = target.angle.sin_cos();
    target.radius - s * x + c * c / (2.0 * target.radius) * x * x
}
