//! Exact mapping between the weighted recursive-cost problem and the
//! equivalent classical LQ problem.
//!
//! Multiplying state and control by `exp(nu(s,t)) = sqrt(mu(s)/mu(t))`
//! absorbs the weight into the dynamics:
//! ```text
//! At = A - (F/2) C - (4E + F^2)/8 I     Bt = B - (F/2) D
//! Ct = C - (F/2) I                      Dt = D
//! ```
//! Cost matrices are unchanged. The adjoint pair maps back with
//! `Y = e^{nut} Yt`, `Z = e^{nut} (Zt + (F/2) Yt)`, where `nut = -nu`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, WlqError};
use crate::model::ProblemSpec;

/// The tilded system matrices of the equivalent classical problem.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformedSystem {
    pub at: DMatrix<f64>,
    pub bt: DMatrix<f64>,
    pub ct: DMatrix<f64>,
    pub dt: DMatrix<f64>,
}

/// Shift `(A, C)` alone; used by the Lyapunov solver where no `B, D` exist.
pub fn shifted_pair(
    a: &DMatrix<f64>,
    c: &DMatrix<f64>,
    e: f64,
    f: f64,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = a.nrows();
    let shift = (4.0 * e + f * f) / 8.0;
    let at = a - c * (f / 2.0) - DMatrix::identity(n, n) * shift;
    let ct = c - DMatrix::<f64>::identity(n, n) * (f / 2.0);
    (at, ct)
}

/// Map a problem to its classical equivalent.
pub fn to_classical(spec: &ProblemSpec) -> TransformedSystem {
    let (at, ct) = shifted_pair(&spec.a, &spec.c, spec.e, spec.f);
    let bt = &spec.b_mat - &spec.d * (spec.f / 2.0);
    TransformedSystem {
        at,
        bt,
        ct,
        dt: spec.d.clone(),
    }
}

/// Invert [`to_classical`]: recover `(A, B, C, D)` from the tilded matrices.
pub fn from_classical(
    ts: &TransformedSystem,
    e: f64,
    f: f64,
) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let n = ts.at.nrows();
    let c = &ts.ct + DMatrix::<f64>::identity(n, n) * (f / 2.0);
    let d = ts.dt.clone();
    let b = &ts.bt + &d * (f / 2.0);
    let shift = (4.0 * e + f * f) / 8.0;
    let a = &ts.at + &c * (f / 2.0) + DMatrix::identity(n, n) * shift;
    (a, b, c, d)
}

/// A pair of sampled vector paths on a common grid.
pub type PathPair = (Vec<DVector<f64>>, Vec<DVector<f64>>);

fn check_grid(len_a: usize, len_b: usize, what: &str) -> Result<()> {
    if len_a != len_b {
        return Err(WlqError::GridMismatch(format!(
            "{what}: {len_a} vs {len_b} samples"
        )));
    }
    Ok(())
}

/// Map sampled state/control paths into transformed coordinates:
/// elementwise multiplication by `exp(nu_k)`. The inverse map multiplies by
/// `exp(-nu_k)`.
pub fn map_state_control_path(
    x_path: &[DVector<f64>],
    u_path: &[DVector<f64>],
    nu_path: &[f64],
) -> Result<PathPair> {
    check_grid(x_path.len(), nu_path.len(), "state path vs nu path")?;
    check_grid(u_path.len(), nu_path.len(), "control path vs nu path")?;
    let xt = x_path
        .iter()
        .zip(nu_path)
        .map(|(x, &nu)| x * nu.exp())
        .collect();
    let ut = u_path
        .iter()
        .zip(nu_path)
        .map(|(u, &nu)| u * nu.exp())
        .collect();
    Ok((xt, ut))
}

/// Map a transformed adjoint pair `(Yt, Zt)` back to original coordinates:
/// `Y = e^{nut} Yt`, `Z = e^{nut} (Zt + (F/2) Yt)` with `nut = -nu`.
pub fn map_adjoint(
    yt_path: &[DVector<f64>],
    zt_path: &[DVector<f64>],
    nu_tilde_path: &[f64],
    f: f64,
) -> Result<PathPair> {
    check_grid(yt_path.len(), nu_tilde_path.len(), "Yt path vs nu~ path")?;
    check_grid(zt_path.len(), nu_tilde_path.len(), "Zt path vs nu~ path")?;
    let mut y = Vec::with_capacity(yt_path.len());
    let mut z = Vec::with_capacity(zt_path.len());
    for ((yt, zt), &nut) in yt_path.iter().zip(zt_path).zip(nu_tilde_path) {
        let scale = nut.exp();
        y.push(yt * scale);
        z.push((zt + yt * (f / 2.0)) * scale);
    }
    Ok((y, z))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::weight::{nu_exponent, WeightParams};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn scalar_transform_examples() {
        // A=0, B=1, C=0, D=0, E=2, F=0: At = -1
        let spec = ProblemSpec::scalar(0.0, 1.0, 0.0, 0.0, 2.0, 0.0, 1.0, 0.0, 1.0, 1.0);
        let ts = to_classical(&spec);
        assert_relative_eq!(ts.at[(0, 0)], -1.0);
        assert_relative_eq!(ts.bt[(0, 0)], 1.0);
        assert_relative_eq!(ts.ct[(0, 0)], 0.0);
        assert_relative_eq!(ts.dt[(0, 0)], 0.0);

        // A=1, B=1, C=2, D=1, E=2, F=2: At = 1 - 2 - 1.5 = -2.5
        let spec = ProblemSpec::scalar(1.0, 1.0, 2.0, 1.0, 2.0, 2.0, 1.0, 0.0, 1.0, 1.0);
        let ts = to_classical(&spec);
        assert_relative_eq!(ts.at[(0, 0)], -2.5);
        assert_relative_eq!(ts.bt[(0, 0)], 0.0);
        assert_relative_eq!(ts.ct[(0, 0)], 1.0);
        assert_relative_eq!(ts.dt[(0, 0)], 1.0);

        // inverse of the prior example
        let (a, b, c, d) = from_classical(&ts, 2.0, 2.0);
        assert_relative_eq!(a[(0, 0)], 1.0);
        assert_relative_eq!(b[(0, 0)], 1.0);
        assert_relative_eq!(c[(0, 0)], 2.0);
        assert_relative_eq!(d[(0, 0)], 1.0);
    }

    #[test]
    fn zero_weight_is_identity() {
        let spec = ProblemSpec::scalar(0.7, -0.3, 0.4, 0.2, 0.0, 0.0, 1.0, 0.0, 1.0, 1.0);
        let ts = to_classical(&spec);
        assert_eq!(ts.at, spec.a);
        assert_eq!(ts.bt, spec.b_mat);
        assert_eq!(ts.ct, spec.c);
        assert_eq!(ts.dt, spec.d);
    }

    #[test]
    fn path_map_round_trip() {
        let params = WeightParams::new(1.0, 0.8);
        let grid: Vec<f64> = (0..=10).map(|k| k as f64 * 0.1).collect();
        let w: Vec<f64> = grid.iter().map(|s| 0.3 * s.sin()).collect();
        let nu: Vec<f64> = grid
            .iter()
            .zip(&w)
            .map(|(&s, &wv)| nu_exponent(s, 0.0, wv, &params))
            .collect();
        let x: Vec<DVector<f64>> = grid
            .iter()
            .map(|&s| DVector::from_vec(vec![s, 1.0 - s]))
            .collect();
        let u: Vec<DVector<f64>> = grid.iter().map(|&s| DVector::from_vec(vec![-s])).collect();
        let (xt, ut) = map_state_control_path(&x, &u, &nu).unwrap();
        // s = t entry unchanged (nu = 0)
        assert_eq!(xt[0], x[0]);
        let neg_nu: Vec<f64> = nu.iter().map(|v| -v).collect();
        let (back_x, back_u) = map_state_control_path(&xt, &ut, &neg_nu).unwrap();
        for (orig, back) in x.iter().zip(&back_x) {
            assert!((orig - back).norm() <= 1e-14 * orig.norm().max(1.0));
        }
        for (orig, back) in u.iter().zip(&back_u) {
            assert!((orig - back).norm() <= 1e-14 * orig.norm().max(1.0));
        }
    }

    #[test]
    fn adjoint_map_cases() {
        let nut = vec![0.0, 0.5, -0.2];
        let yt: Vec<DVector<f64>> = vec![
            DVector::from_vec(vec![1.0]),
            DVector::from_vec(vec![2.0]),
            DVector::from_vec(vec![-1.0]),
        ];
        let zt: Vec<DVector<f64>> = vec![
            DVector::from_vec(vec![0.5]),
            DVector::from_vec(vec![0.0]),
            DVector::from_vec(vec![1.5]),
        ];
        // F = 0: pure scaling
        let (y, z) = map_adjoint(&yt, &zt, &nut, 0.0).unwrap();
        assert_relative_eq!(y[1][0], 2.0 * 0.5f64.exp());
        assert_relative_eq!(z[1][0], 0.0);
        // at s = t (nut = 0): Y = Yt, Z = Zt + (F/2) Yt
        let (y, z) = map_adjoint(&yt, &zt, &nut, 2.0).unwrap();
        assert_relative_eq!(y[0][0], 1.0);
        assert_relative_eq!(z[0][0], 0.5 + 1.0);
        // zero paths stay zero
        let zeros = vec![DVector::zeros(1); 3];
        let (y0, z0) = map_adjoint(&zeros, &zeros, &nut, 2.0).unwrap();
        assert!(y0.iter().all(|v| v[0] == 0.0));
        assert!(z0.iter().all(|v| v[0] == 0.0));
    }

    #[test]
    fn grid_mismatch_is_rejected() {
        let x = vec![DVector::zeros(1); 3];
        let u = vec![DVector::zeros(1); 3];
        let nu = vec![0.0; 2];
        assert!(matches!(
            map_state_control_path(&x, &u, &nu),
            Err(WlqError::GridMismatch(_))
        ));
    }

    proptest! {
        #[test]
        fn round_trip_identity(
            a in -2.0f64..2.0, b in -2.0f64..2.0, c in -2.0f64..2.0, d in -2.0f64..2.0,
            e in 0.0f64..3.0, f in 0.0f64..2.0,
        ) {
            let spec = ProblemSpec::scalar(a, b, c, d, e, f, 1.0, 0.0, 1.0, 1.0);
            let ts = to_classical(&spec);
            let (ra, rb, rc, rd) = from_classical(&ts, e, f);
            prop_assert!((ra[(0,0)] - a).abs() <= 1e-12 * a.abs().max(1.0));
            prop_assert!((rb[(0,0)] - b).abs() <= 1e-12 * b.abs().max(1.0));
            prop_assert!((rc[(0,0)] - c).abs() <= 1e-12 * c.abs().max(1.0));
            prop_assert!((rd[(0,0)] - d).abs() <= 1e-12 * d.abs().max(1.0));
        }
    }
}
