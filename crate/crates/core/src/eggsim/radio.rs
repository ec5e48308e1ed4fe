use crate::scalar::Scalar;

pub const RSSI_AT_1M_DBM: f64 = -45.0;
pub const PATH_LOSS_EXPONENT: f64 = 2.5;
pub const DEFAULT_RSSI_SIGMA_DB: f64 = 2.0;
/// Beacons weaker than this are not heard.
pub const SENSITIVITY_DBM: f64 = -100.0;

/// Log-distance path loss; distances under 1 m count as 1 m.
pub fn rssi_at<S: Scalar>(distance_m: S, noise_db: S) -> S {
    let d = distance_m.max(S::one());
    S::of(RSSI_AT_1M_DBM) - S::of(10.0 * PATH_LOSS_EXPONENT) * d.log10() + noise_db
}

pub fn distance<S: Scalar>(a: (S, S), b: (S, S)) -> S {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_points() {
        assert_eq!(rssi_at(1.0f64, 0.0), -45.0);
        approx::assert_abs_diff_eq!(rssi_at(10.0f64, 0.0), -70.0, epsilon = 1e-12);
        approx::assert_abs_diff_eq!(rssi_at(10.0f32, 0.0), -70.0, epsilon = 1e-5);
        assert_eq!(rssi_at(0.2f64, 1.5), -43.5);
        assert_eq!(distance((0.0, 0.0), (3.0f64, 4.0)), 5.0);
    }
}
