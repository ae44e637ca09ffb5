//! Constant-velocity Kalman filter over `(cx, cy, w, h)` and their velocities.

use nalgebra::{SMatrix, SVector};

use crate::geometry::BBox;

type Vec8 = SVector<f64, 8>;
type Mat8 = SMatrix<f64, 8, 8>;
type Vec4 = SVector<f64, 4>;
type Mat4 = SMatrix<f64, 4, 4>;
type Mat48 = SMatrix<f64, 4, 8>;

/// Noise scales relative to box size.
const STD_POSITION: f64 = 1.0 / 20.0;
const STD_VELOCITY: f64 = 1.0 / 160.0;

#[derive(Debug, Clone, PartialEq)]
pub struct MotionState {
    pub mean: Vec8,
    pub covariance: Mat8,
}

fn transition() -> Mat8 {
    let mut f = Mat8::identity();
    for i in 0..4 {
        f[(i, i + 4)] = 1.0;
    }
    f
}

fn observation() -> Mat48 {
    let mut h = Mat48::zeros();
    for i in 0..4 {
        h[(i, i)] = 1.0;
    }
    h
}

fn measurement(b: &BBox) -> Vec4 {
    let (cx, cy) = b.center();
    Vec4::new(cx, cy, b.w, b.h)
}

impl MotionState {
    pub fn initiate(b: &BBox) -> Self {
        let z = measurement(b);
        let mut mean = Vec8::zeros();
        mean.fixed_rows_mut::<4>(0).copy_from(&z);
        let (w, h) = (b.w, b.h);
        let std = [
            2.0 * STD_POSITION * w,
            2.0 * STD_POSITION * h,
            2.0 * STD_POSITION * w,
            2.0 * STD_POSITION * h,
            10.0 * STD_VELOCITY * w,
            10.0 * STD_VELOCITY * h,
            10.0 * STD_VELOCITY * w,
            10.0 * STD_VELOCITY * h,
        ];
        Self {
            mean,
            covariance: Mat8::from_diagonal(&Vec8::from_iterator(std.iter().map(|s| s * s))),
        }
    }

    pub fn velocity(&self) -> (f64, f64) {
        (self.mean[4], self.mean[5])
    }

    /// Current box estimate; size is floored at one pixel.
    pub fn bbox(&self) -> BBox {
        BBox::from_center(self.mean[0], self.mean[1], self.mean[2].max(1.0), self.mean[3].max(1.0))
    }

    /// Time update; returns the predicted box.
    pub fn predict(&mut self) -> BBox {
        let (w, h) = (self.mean[2].abs(), self.mean[3].abs());
        let std = [
            STD_POSITION * w,
            STD_POSITION * h,
            STD_POSITION * w,
            STD_POSITION * h,
            STD_VELOCITY * w,
            STD_VELOCITY * h,
            STD_VELOCITY * w,
            STD_VELOCITY * h,
        ];
        let q = Mat8::from_diagonal(&Vec8::from_iterator(std.iter().map(|s| s * s)));
        let f = transition();
        self.mean = f * self.mean;
        self.covariance = f * self.covariance * f.transpose() + q;
        self.bbox()
    }

    /// Measurement update with an observed box.
    pub fn update(&mut self, b: &BBox) {
        let (w, h) = (self.mean[2].abs(), self.mean[3].abs());
        let std = [STD_POSITION * w, STD_POSITION * h, STD_POSITION * w, STD_POSITION * h];
        let r = Mat4::from_diagonal(&Vec4::from_iterator(std.iter().map(|s| s * s)));
        let hm = observation();
        let s = hm * self.covariance * hm.transpose() + r;
        let Some(s_inv) = s.try_inverse() else {
            // Degenerate innovation covariance: fall back to trusting the measurement.
            self.mean.fixed_rows_mut::<4>(0).copy_from(&measurement(b));
            return;
        };
        let gain = self.covariance * hm.transpose() * s_inv;
        let innovation = measurement(b) - hm * self.mean;
        self.mean += gain * innovation;
        self.covariance = (Mat8::identity() - gain * hm) * self.covariance;
        self.covariance = (self.covariance + self.covariance.transpose()) * 0.5;
    }
}
