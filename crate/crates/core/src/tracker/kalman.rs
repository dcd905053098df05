//! Constant-velocity Kalman filter over `(cx, cy, w, h)` and their velocities.
//!
//! Noise levels scale with the box height, following the DeepSORT convention.

use nalgebra::{Matrix4, SMatrix, SVector, Vector4};

use crate::graphkit::Bbox;

pub type StateVec = SVector<f64, 8>;
pub type StateCov = SMatrix<f64, 8, 8>;
type Observation = SMatrix<f64, 4, 8>;

/// 0.95 quantile of the chi-square distribution with 4 degrees of freedom.
pub const CHI2_95_4DOF: f64 = 9.4877;

const MIN_SIZE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KalmanConfig {
    pub std_weight_position: f64,
    pub std_weight_velocity: f64,
    pub std_weight_measurement: f64,
    /// Lower bound on every noise standard deviation, pixels.
    pub std_floor: f64,
}

impl Default for KalmanConfig {
    fn default() -> Self {
        Self {
            std_weight_position: 1.0 / 20.0,
            std_weight_velocity: 1.0 / 160.0,
            std_weight_measurement: 1.0 / 20.0,
            std_floor: 1e-6,
        }
    }
}

impl KalmanConfig {
    fn std(&self, weight: f64, height: f64) -> f64 {
        (weight * height).max(self.std_floor)
    }

    fn measurement_noise(&self, height: f64) -> Matrix4<f64> {
        let s = self.std(self.std_weight_measurement, height);
        Matrix4::from_diagonal_element(s * s)
    }
}

fn observation() -> Observation {
    let mut h = Observation::zeros();
    for k in 0..4 {
        h[(k, k)] = 1.0;
    }
    h
}

fn transition() -> StateCov {
    let mut f = StateCov::identity();
    for k in 0..4 {
        f[(k, k + 4)] = 1.0;
    }
    f
}

#[derive(Debug, Clone, PartialEq)]
pub struct KalmanState {
    pub mean: StateVec,
    pub covariance: StateCov,
}

impl KalmanState {
    pub fn initiate(bbox: &Bbox, cfg: &KalmanConfig) -> Self {
        let mut mean = StateVec::zeros();
        mean.fixed_rows_mut::<4>(0).copy_from(&Vector4::from(bbox.to_array()));
        let p = cfg.std(2.0 * cfg.std_weight_position, bbox.h);
        let v = cfg.std(10.0 * cfg.std_weight_velocity, bbox.h);
        let mut diag = StateVec::zeros();
        for k in 0..4 {
            diag[k] = p * p;
            diag[k + 4] = v * v;
        }
        Self {
            mean,
            covariance: StateCov::from_diagonal(&diag),
        }
    }

    pub fn bbox(&self) -> Bbox {
        Bbox::new(
            self.mean[0],
            self.mean[1],
            self.mean[2].max(MIN_SIZE),
            self.mean[3].max(MIN_SIZE),
        )
    }

    pub fn predict(&self, cfg: &KalmanConfig) -> Self {
        let f = transition();
        let h = self.mean[3].max(MIN_SIZE);
        let p = cfg.std(cfg.std_weight_position, h);
        let v = cfg.std(cfg.std_weight_velocity, h);
        let mut diag = StateVec::zeros();
        for k in 0..4 {
            diag[k] = p * p;
            diag[k + 4] = v * v;
        }
        let covariance = f * self.covariance * f.transpose() + StateCov::from_diagonal(&diag);
        Self {
            mean: f * self.mean,
            covariance: symmetrize(&covariance),
        }
    }

    /// Projected measurement mean and innovation covariance `S`.
    pub fn project(&self, cfg: &KalmanConfig) -> (Vector4<f64>, Matrix4<f64>) {
        let h = observation();
        let s = h * self.covariance * h.transpose() + cfg.measurement_noise(self.mean[3].max(MIN_SIZE));
        (h * self.mean, s)
    }

    pub fn update(&self, bbox: &Bbox, cfg: &KalmanConfig) -> Self {
        let h = observation();
        let (projected, s) = self.project(cfg);
        let s_inv = s.try_inverse().unwrap_or_else(|| pseudo_inverse(&s));
        let gain = self.covariance * h.transpose() * s_inv;
        let innovation = Vector4::from(bbox.to_array()) - projected;
        let mut mean = self.mean + gain * innovation;
        mean[2] = mean[2].max(MIN_SIZE);
        mean[3] = mean[3].max(MIN_SIZE);
        // Joseph form keeps the update PSD in exact arithmetic
        let i_kh = StateCov::identity() - gain * h;
        let r = cfg.measurement_noise(self.mean[3].max(MIN_SIZE));
        let covariance = i_kh * self.covariance * i_kh.transpose() + gain * r * gain.transpose();
        Self {
            mean,
            covariance: clamp_psd(&symmetrize(&covariance)),
        }
    }

    /// Squared Mahalanobis distance between the projected state and `bbox`.
    pub fn mahalanobis(&self, bbox: &Bbox, cfg: &KalmanConfig) -> f64 {
        let (projected, s) = self.project(cfg);
        squared_mahalanobis(&(Vector4::from(bbox.to_array()) - projected), &s)
    }
}

/// `rᵀ S⁻¹ r`.
pub fn squared_mahalanobis(innovation: &Vector4<f64>, s: &Matrix4<f64>) -> f64 {
    match s.cholesky() {
        Some(ch) => innovation.dot(&ch.solve(innovation)),
        None => innovation.dot(&(pseudo_inverse(s) * innovation)),
    }
}

fn pseudo_inverse(s: &Matrix4<f64>) -> Matrix4<f64> {
    s.pseudo_inverse(1e-12).unwrap_or_else(|_| Matrix4::zeros())
}

fn symmetrize(p: &StateCov) -> StateCov {
    (p + p.transpose()) * 0.5
}

fn clamp_psd(p: &StateCov) -> StateCov {
    let eig = p.symmetric_eigen();
    if eig.eigenvalues.iter().all(|&l| l >= 0.0) {
        return *p;
    }
    let clamped = eig.eigenvalues.map(|l| l.max(0.0));
    let q = eig.eigenvectors;
    symmetrize(&(q * StateCov::from_diagonal(&clamped) * q.transpose()))
}
