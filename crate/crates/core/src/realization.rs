//! Ho-Kalman-Kung state-space realization from impulse-response data: build
//! the block Hankel of Markov parameters, factor it by SVD, pick the order
//! from the singular-value profile, and extract (A, B, C) from the shifted
//! observability factor.

use crate::error::{Error, Result};
use crate::numerics::{self, Matrix, Vector};
use crate::plants::LinearModel;

#[derive(Debug, Clone)]
pub struct RealizationConfig {
    /// Hankel block rows N.
    pub block_rows: usize,
    /// Hankel block columns H; the factorization requires N <= H.
    pub block_cols: usize,
    /// Singular-value threshold for the order selection.
    pub epsilon: f64,
    /// When true, the threshold is `epsilon * sigma_1`; otherwise absolute.
    pub relative: bool,
}

impl RealizationConfig {
    pub fn new(block_rows: usize, block_cols: usize, epsilon: f64) -> Self {
        RealizationConfig {
            block_rows,
            block_cols,
            epsilon,
            relative: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RealizedModel {
    pub model: LinearModel,
    /// Full singular-value profile of the data Hankel.
    pub singular_values: Vector,
    /// Selected order.
    pub order: usize,
}

/// Build the block Hankel whose (i, j) block is the Markov parameter
/// y_{i+j+1} (`p x m` each).
fn markov_hankel(impulse: &[Matrix], block_rows: usize, block_cols: usize) -> Matrix {
    let p = impulse[0].nrows();
    let m = impulse[0].ncols();
    let mut h = Matrix::zeros(p * block_rows, m * block_cols);
    for i in 0..block_rows {
        for j in 0..block_cols {
            h.view_mut((i * p, j * m), (p, m)).copy_from(&impulse[i + j]);
        }
    }
    h
}

/// Identify an order-`s` state-space model from the impulse response
/// y_1..y_D. The factor split uses the symmetric square root of the
/// singular values, giving a balanced-style realization.
pub fn ho_kalman_kung(impulse: &[Matrix], cfg: &RealizationConfig) -> Result<RealizedModel> {
    let d = impulse.len();
    let (n_rows, n_cols) = (cfg.block_rows, cfg.block_cols);
    if n_rows == 0 || n_cols == 0 {
        return Err(Error::InvalidConfig("Hankel dimensions must be positive".into()));
    }
    if n_rows + n_cols - 1 > d {
        return Err(Error::InsufficientData(format!(
            "need N + H - 1 = {} impulse samples, have {d}",
            n_rows + n_cols - 1
        )));
    }
    if n_rows > n_cols {
        return Err(Error::InvalidConfig(
            "realization requires N <= H block dimensions".into(),
        ));
    }
    if cfg.epsilon <= 0.0 {
        return Err(Error::InvalidConfig("epsilon must be positive".into()));
    }
    let p = impulse[0].nrows();
    let m = impulse[0].ncols();
    if impulse.iter().any(|y| y.nrows() != p || y.ncols() != m) {
        return Err(Error::DimensionMismatch("impulse samples differ in shape".into()));
    }

    let h = markov_hankel(impulse, n_rows, n_cols);
    let dec = numerics::svd(&h)?;
    let sigma_max = dec.s.max();
    if sigma_max <= 0.0 {
        return Err(Error::DegenerateHankel);
    }
    let threshold = if cfg.relative {
        cfg.epsilon * sigma_max
    } else {
        cfg.epsilon
    };
    let order = dec.s.iter().filter(|&&sv| sv >= threshold).count();
    if order == 0 {
        return Err(Error::DegenerateHankel);
    }

    // Rank-s factors: observability = W_s S_s^(1/2), controllability = S_s^(1/2) V_s'.
    let sqrt_s = Vector::from_fn(order, |i, _| dec.s[i].sqrt());
    let w_s = dec.u.columns(0, order).clone_owned();
    let v_s = dec.v.columns(0, order).clone_owned();
    let obsv = &w_s * Matrix::from_diagonal(&sqrt_s);
    let ctrb = Matrix::from_diagonal(&sqrt_s) * v_s.transpose();

    // Shift equation on the observability factor gives A; the first block
    // column/row of the factors give B and C.
    let obsv_head = obsv.rows(0, p * (n_rows - 1)).clone_owned();
    let obsv_tail = obsv.rows(p, p * (n_rows - 1)).clone_owned();
    let a = numerics::pinv(&obsv_head)? * obsv_tail;
    let b = ctrb.columns(0, m).clone_owned();
    let c = obsv.rows(0, p).clone_owned();

    Ok(RealizedModel {
        model: LinearModel::new(a, b, c)?,
        singular_values: dec.s,
        order,
    })
}

/// Largest relative mismatch between the given impulse response and the
/// Markov parameters of the realized model.
pub fn markov_reconstruction_error(realized: &RealizedModel, impulse: &[Matrix]) -> f64 {
    let reconstructed = realized.model.impulse_response(impulse.len());
    let scale = impulse
        .iter()
        .map(|y| y.amax())
        .fold(0.0f64, f64::max)
        .max(f64::EPSILON);
    impulse
        .iter()
        .zip(reconstructed.iter())
        .map(|(y, yhat)| (y - yhat).amax())
        .fold(0.0f64, f64::max)
        / scale
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::mat;

    fn third_order() -> LinearModel {
        LinearModel::new(
            mat(3, 3, &[0.2, -0.4, 0.5, 0.7, 0.3, 0.6, -0.5, 0.1, 0.6]),
            mat(3, 1, &[0.1, 0.2, 0.1]),
            mat(1, 3, &[1.0, 0.0, 0.0]),
        )
        .unwrap()
    }

    #[test]
    fn recovers_third_order_from_impulse_data() {
        let truth = third_order();
        let impulse = truth.impulse_response(50);
        let cfg = RealizationConfig::new(5, 5, 1e-6);
        let realized = ho_kalman_kung(&impulse, &cfg).unwrap();
        assert_eq!(realized.order, 3);
        // first Markov parameters match the data
        let markov = realized.model.impulse_response(2);
        assert!((markov[0][(0, 0)] - 0.1).abs() < 1e-8);
        assert!((markov[1][(0, 0)] - (-0.01)).abs() < 1e-8);
        assert!(markov_reconstruction_error(&realized, &impulse) <= 1e-8);
    }

    #[test]
    fn exactly_three_singular_values_above_threshold() {
        let truth = third_order();
        let impulse = truth.impulse_response(50);
        let cfg = RealizationConfig::new(5, 5, 1e-6);
        let realized = ho_kalman_kung(&impulse, &cfg).unwrap();
        let above = realized
            .singular_values
            .iter()
            .filter(|&&sv| sv > 1e-6)
            .count();
        assert_eq!(above, 3);
    }

    #[test]
    fn scalar_system_eigenvalue_recovered() {
        let truth = LinearModel::new(mat(1, 1, &[0.5]), mat(1, 1, &[1.0]), mat(1, 1, &[1.0]))
            .unwrap();
        let impulse = truth.impulse_response(20);
        let cfg = RealizationConfig::new(4, 4, 1e-8);
        let realized = ho_kalman_kung(&impulse, &cfg).unwrap();
        assert_eq!(realized.order, 1);
        assert!((realized.model.a[(0, 0)] - 0.5).abs() < 1e-10);
    }

    #[test]
    fn zero_impulse_is_degenerate() {
        let impulse: Vec<Matrix> = (0..10).map(|_| Matrix::zeros(1, 1)).collect();
        let cfg = RealizationConfig::new(3, 3, 1e-6);
        assert!(matches!(
            ho_kalman_kung(&impulse, &cfg),
            Err(Error::DegenerateHankel)
        ));
    }

    #[test]
    fn insufficient_impulse_samples() {
        let impulse: Vec<Matrix> = (0..5).map(|_| Matrix::zeros(1, 1)).collect();
        let cfg = RealizationConfig::new(4, 4, 1e-6);
        assert!(matches!(
            ho_kalman_kung(&impulse, &cfg),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn wide_before_tall_requirement() {
        let impulse: Vec<Matrix> = (0..20).map(|_| Matrix::zeros(1, 1)).collect();
        let cfg = RealizationConfig::new(6, 4, 1e-6);
        assert!(matches!(
            ho_kalman_kung(&impulse, &cfg),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn truncation_error_bounded_by_singular_tail() {
        let truth = third_order();
        let impulse = truth.impulse_response(40);
        // force a rank-2 truncation by thresholding above sigma_3
        let full = ho_kalman_kung(&impulse, &RealizationConfig::new(5, 5, 1e-6)).unwrap();
        let sigma3 = full.singular_values[2];
        let mut cfg = RealizationConfig::new(5, 5, sigma3 * 1.5);
        cfg.relative = false;
        let truncated = ho_kalman_kung(&impulse, &cfg).unwrap();
        assert_eq!(truncated.order, 2);
        let err = markov_reconstruction_error(&truncated, &impulse);
        let scale: f64 = impulse.iter().map(|y| y.amax()).fold(0.0, f64::max);
        // error is on the scale of the discarded singular value
        assert!(err * scale < 40.0 * sigma3, "err {err} vs sigma3 {sigma3}");
        assert!(err * scale > 1e-6 * sigma3);
    }

    #[test]
    fn eigenvalues_invariant_and_markov_match_across_similarity() {
        // realizations from transformed data agree on eigenvalues even
        // though the parameters themselves differ
        let truth = third_order();
        let t = mat(3, 3, &[1.0, 0.2, 0.0, 0.0, 1.0, 0.0, 0.3, 0.0, 1.0]);
        let t_inv = t.clone().try_inverse().unwrap();
        let transformed = LinearModel::new(
            &t * &truth.a * &t_inv,
            &t * &truth.b,
            &truth.c * &t_inv,
        )
        .unwrap();
        let cfg = RealizationConfig::new(5, 5, 1e-6);
        let r1 = ho_kalman_kung(&truth.impulse_response(30), &cfg).unwrap();
        let r2 = ho_kalman_kung(&transformed.impulse_response(30), &cfg).unwrap();

        let mut e1: Vec<f64> = r1.model.a.complex_eigenvalues().iter().map(|c| c.norm()).collect();
        let mut e2: Vec<f64> = r2.model.a.complex_eigenvalues().iter().map(|c| c.norm()).collect();
        e1.sort_by(|a, b| a.partial_cmp(b).unwrap());
        e2.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for (a, b) in e1.iter().zip(e2.iter()) {
            assert!((a - b).abs() < 1e-8);
        }
        // parameters are similarity-dependent: A matrices need not agree,
        // but input-output behavior does
        let m1 = r1.model.impulse_response(10);
        let m2 = r2.model.impulse_response(10);
        for (a, b) in m1.iter().zip(m2.iter()) {
            assert!((a - b).amax() < 1e-8);
        }
    }
}
