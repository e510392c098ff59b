//! Poincaré-ball geometry: curvature-scaled projection, hyperbolic distance,
//! distance-weighted prototypes and the residual hyperbolic block.
//!
//! Every point this module produces has norm at most [`MAX_NORM`]. Points
//! that would land closer to the boundary are rescaled along their own
//! direction rather than clamped coordinate-wise.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Distance kept between every embedding and the unit sphere.
pub const BALL_MARGIN: f64 = 1e-5;
pub const MAX_NORM: f64 = 1.0 - BALL_MARGIN;

/// A point of the open unit ball.
#[derive(Clone, Debug, PartialEq)]
pub struct PoincarePoint(Vec<f64>);

impl PoincarePoint {
    /// Validates finiteness and `norm < 1`. Norms in `(MAX_NORM, 1)` are
    /// pulled back onto `MAX_NORM`.
    pub fn new(coords: Vec<f64>) -> Result<Self> {
        if coords.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "PoincarePoint::new" });
        }
        let n = norm(&coords);
        if n >= 1.0 {
            return Err(Error::OutsideBall { norm: n });
        }
        if n > MAX_NORM {
            let s = MAX_NORM / n;
            return Ok(Self(coords.into_iter().map(|v| v * s).collect()));
        }
        Ok(Self(coords))
    }

    pub fn origin(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn coords(&self) -> &[f64] {
        &self.0
    }

    pub fn into_coords(self) -> Vec<f64> {
        self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::vector(self.0.clone())
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Positive curvature scale stored as `alpha = exp(rho)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurvatureParam {
    pub rho: f64,
}

impl CurvatureParam {
    pub fn from_alpha(alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::Domain {
                op: "CurvatureParam",
                detail: format!("alpha must be positive and finite, got {alpha}"),
            });
        }
        Ok(Self { rho: alpha.ln() })
    }

    pub fn alpha(&self) -> f64 {
        self.rho.exp()
    }
}

impl Default for CurvatureParam {
    fn default() -> Self {
        Self { rho: 0.0 }
    }
}

/// `alpha = exp(rho)` on the tape.
pub fn alpha_from_rho(tape: &mut Tape, rho: Var) -> Result<Var> {
    tape.exp(rho)
}

/// `tanh(alpha |h|) h / |h|`, kept inside the margin. `h = 0` maps to the origin.
pub fn project(tape: &mut Tape, h: Var, alpha: Var) -> Result<Var> {
    tape.ball_project(h, alpha, MAX_NORM)
}

fn check_in_ball(tape: &Tape, v: Var) -> Result<()> {
    let n = tape.value(v).norm();
    if n >= 1.0 || !n.is_finite() {
        return Err(Error::OutsideBall { norm: n });
    }
    Ok(())
}

/// `acosh(1 + 2|a - b|^2 / ((1 - |a|^2)(1 - |b|^2)))`.
///
/// Raises [`Error::OutsideBall`] when either point has norm `>= 1`.
pub fn poincare_distance(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    check_in_ball(tape, a)?;
    check_in_ball(tape, b)?;
    let diff = tape.sub(a, b)?;
    let num = tape.sum_squares(diff)?;
    let na = tape.sum_squares(a)?;
    let nb = tape.sum_squares(b)?;
    let ca = tape.affine(na, -1.0, 1.0)?;
    let cb = tape.affine(nb, -1.0, 1.0)?;
    let den = tape.mul(ca, cb)?;
    let ratio = tape.div(num, den)?;
    let arg = tape.affine(ratio, 2.0, 1.0)?;
    tape.acosh(arg)
}

/// Distance-weighted class prototype.
///
/// The unweighted mean `p̄` of the points is formed first; each point then
/// receives weight `softmax(-d(y_i, p̄))` and the prototype is
/// `Σ w_i y_i`, clipped to the margin. Returns `(prototype, weights)`.
pub fn weighted_prototype(tape: &mut Tape, points: &[Var]) -> Result<(Var, Var)> {
    if points.is_empty() {
        return Err(Error::Empty("weighted_prototype"));
    }
    for p in points {
        check_in_ball(tape, *p)?;
    }
    let stacked = tape.stack(points)?;
    let mean = tape.mean_rows(stacked)?;
    let dists = points
        .iter()
        .map(|p| poincare_distance(tape, *p, mean))
        .collect::<Result<Vec<_>>>()?;
    let d = tape.stack(&dists)?;
    let neg = tape.neg(d)?;
    let weights = tape.softmax(neg, 0)?;
    let k = points.len();
    let w_row = tape.reshape(weights, &[1, k])?;
    let combo = tape.matmul(w_row, stacked)?;
    let dim = tape.value(combo).len();
    let flat = tape.reshape(combo, &[dim])?;
    let proto = tape.ball_clip(flat, MAX_NORM)?;
    Ok((proto, weights))
}

/// `project(tanh(y W + b) + y, alpha)`.
///
/// `w` is `(d, d)` and `b` is `(d)`; `y` is a rank-1 ball point.
pub fn residual_hyperbolic_block(tape: &mut Tape, y: Var, w: Var, b: Var, alpha: Var) -> Result<Var> {
    let d = tape.value(y).len();
    let row = tape.reshape(y, &[1, d])?;
    let lin = tape.matmul(row, w)?;
    let lin = tape.add(lin, b)?;
    let f = tape.tanh(lin)?;
    let f = tape.reshape(f, &[d])?;
    let sum = tape.add(f, y)?;
    project(tape, sum, alpha)
}

/// Point-level projection for callers outside a training graph.
pub fn project_point(h: &[f64], alpha: f64) -> Result<PoincarePoint> {
    let mut tape = Tape::new();
    let hv = tape.constant(Tensor::vector(h.to_vec()));
    let a = tape.constant(Tensor::scalar(alpha));
    let y = project(&mut tape, hv, a)?;
    PoincarePoint::new(tape.value(y).data().to_vec())
}

pub fn distance(a: &PoincarePoint, b: &PoincarePoint) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::shape("distance", format!("{} vs {}", a.dim(), b.dim())));
    }
    let mut tape = Tape::new();
    let av = tape.constant(a.to_tensor());
    let bv = tape.constant(b.to_tensor());
    let d = poincare_distance(&mut tape, av, bv)?;
    Ok(tape.value(d).item())
}

/// Point-level [`weighted_prototype`]; returns the prototype and its weights.
pub fn prototype_of(points: &[PoincarePoint]) -> Result<(PoincarePoint, Vec<f64>)> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = points.iter().map(|p| tape.constant(p.to_tensor())).collect();
    let (p, w) = weighted_prototype(&mut tape, &vars)?;
    Ok((
        PoincarePoint::new(tape.value(p).data().to_vec())?,
        tape.value(w).data().to_vec(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pt(c: &[f64]) -> PoincarePoint {
        PoincarePoint::new(c.to_vec()).unwrap()
    }

    fn random_ball_point(rng: &mut ChaCha8Rng, dim: usize, max_r: f64) -> Vec<f64> {
        let dir: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let n = norm(&dir).max(1e-12);
        let r = rng.gen_range(0.0..max_r);
        dir.iter().map(|v| v / n * r).collect()
    }

    #[test]
    fn project_examples() {
        assert_eq!(project_point(&[0.0, 0.0], 1.0).unwrap().coords(), &[0.0, 0.0]);

        // tanh(10) ~ 0.9999999959 exceeds the margin, so the norm is pulled to MAX_NORM
        let y = project_point(&[10.0, 0.0], 1.0).unwrap();
        assert!((10f64.tanh() - 0.9999999959).abs() < 1e-10);
        assert!((y.coords()[0] - MAX_NORM).abs() < 1e-15);
        assert_eq!(y.coords()[1], 0.0);

        let a = project_point(&[0.3, -0.2], 1.0).unwrap();
        let b = project_point(&[0.6, -0.4], 1.0).unwrap();
        assert!(b.norm() > a.norm());
        let cos = (a.coords()[0] * b.coords()[0] + a.coords()[1] * b.coords()[1]) / (a.norm() * b.norm());
        assert!((cos - 1.0).abs() < 1e-12);
    }

    #[test]
    fn distance_examples() {
        assert!(distance(&pt(&[0.0, 0.0]), &pt(&[0.0, 0.0])).unwrap().abs() < 1e-7);
        let d = distance(&pt(&[0.5, 0.0]), &pt(&[0.0, 0.0])).unwrap();
        assert!((d - 3f64.ln()).abs() < 1e-12);
        assert!((d - 2.0 * 0.5f64.atanh()).abs() < 1e-12);
    }

    #[test]
    fn distance_rejects_points_outside_ball() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::vector(vec![1.0, 0.0]));
        let b = tape.constant(Tensor::vector(vec![0.0, 0.0]));
        assert!(matches!(poincare_distance(&mut tape, a, b), Err(Error::OutsideBall { .. })));
        assert!(matches!(PoincarePoint::new(vec![1.2, 0.0]), Err(Error::OutsideBall { .. })));
    }

    #[test]
    fn distance_from_origin_matches_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let origin = PoincarePoint::origin(5);
        for _ in 0..1000 {
            let x = pt(&random_ball_point(&mut rng, 5, 0.9));
            let d = distance(&origin, &x).unwrap();
            assert!((d - 2.0 * x.norm().atanh()).abs() < 1e-9);
        }
    }

    #[test]
    fn symmetry_and_triangle_inequality() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..1000 {
            let a = pt(&random_ball_point(&mut rng, 3, 0.95));
            let b = pt(&random_ball_point(&mut rng, 3, 0.95));
            let c = pt(&random_ball_point(&mut rng, 3, 0.95));
            let ab = distance(&a, &b).unwrap();
            assert_eq!(ab, distance(&b, &a).unwrap());
            let ac = distance(&a, &c).unwrap();
            let bc = distance(&b, &c).unwrap();
            assert!(ac <= ab + bc + 1e-9);
        }
    }

    #[test]
    fn distance_grows_toward_boundary() {
        let origin = PoincarePoint::origin(2);
        let mut prev = 0.0;
        for i in 1..=200 {
            let r = 0.9999 * i as f64 / 200.0;
            let d = distance(&origin, &pt(&[r, 0.0])).unwrap();
            assert!(d > prev);
            prev = d;
        }
        assert!(distance(&origin, &pt(&[0.99991, 0.0])).unwrap() > 5.0);
    }

    #[test]
    fn prototype_examples() {
        let y = pt(&[0.2, -0.1]);
        let (p, w) = prototype_of(std::slice::from_ref(&y)).unwrap();
        assert_eq!(w, vec![1.0]);
        assert!(p.coords().iter().zip(y.coords()).all(|(a, b)| (a - b).abs() < 1e-15));

        let (p, w) = prototype_of(&[pt(&[0.4, 0.0]), pt(&[-0.4, 0.0])]).unwrap();
        assert!((w[0] - 0.5).abs() < 1e-15 && (w[1] - 0.5).abs() < 1e-15);
        assert!(p.norm() < 1e-15);

        let copies = vec![y.clone(); 4];
        let (p, w) = prototype_of(&copies).unwrap();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(p.coords().iter().zip(y.coords()).all(|(a, b)| (a - b).abs() < 1e-9));

        assert!(matches!(prototype_of(&[]), Err(Error::Empty(_))));
    }

    /// Direct evaluation of the two-stage weighted mean on scalar coordinates.
    fn brute_force_prototype(xs: &[f64]) -> (f64, Vec<f64>) {
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let d = |a: f64, b: f64| {
            (1.0 + 2.0 * (a - b).powi(2) / ((1.0 - a * a) * (1.0 - b * b))).acosh()
        };
        let e: Vec<f64> = xs.iter().map(|x| (-d(*x, mean)).exp()).collect();
        let z: f64 = e.iter().sum();
        let w: Vec<f64> = e.iter().map(|v| v / z).collect();
        (xs.iter().zip(&w).map(|(x, w)| x * w).sum(), w)
    }

    #[test]
    fn collinear_prototype_matches_brute_force() {
        let xs = [0.1, 0.2, 0.6];
        let (expected, expected_w) = brute_force_prototype(&xs);
        let points: Vec<_> = xs.iter().map(|x| pt(&[*x, 0.0])).collect();
        let (p, w) = prototype_of(&points).unwrap();
        assert!((p.coords()[0] - expected).abs() < 1e-12);
        for (a, b) in w.iter().zip(&expected_w) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(p.coords()[0] > 0.1 && p.coords()[0] < 0.6);
        // the outlier at 0.6 sits farthest from the mean (0.3) and weighs least
        assert!(w[2] < w[0] && w[2] < w[1]);
    }

    fn residual_value(y: &[f64], w: Tensor, b: Tensor, alpha: f64) -> Vec<f64> {
        let mut tape = Tape::new();
        let yv = tape.constant(Tensor::vector(y.to_vec()));
        let wv = tape.constant(w);
        let bv = tape.constant(b);
        let av = tape.constant(Tensor::scalar(alpha));
        let out = residual_hyperbolic_block(&mut tape, yv, wv, bv, av).unwrap();
        tape.value(out).data().to_vec()
    }

    #[test]
    fn residual_block_examples() {
        let zw = Tensor::zeros(&[2, 2]);
        let zb = Tensor::zeros(&[2]);
        assert_eq!(residual_value(&[0.0, 0.0], zw.clone(), zb.clone(), 1.0), vec![0.0, 0.0]);
        let out = residual_value(&[0.3, 0.0], zw, zb, 1.0);
        assert!((out[0] - 0.3f64.tanh()).abs() < 1e-15);
        assert!((out[0] - 0.29131).abs() < 1e-5);
        assert_eq!(out[1], 0.0);
    }

    #[test]
    fn distance_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let a = Tensor::vector(random_ball_point(&mut rng, 4, 0.9));
            let b = Tensor::vector(random_ball_point(&mut rng, 4, 0.9));
            let r = grad_check(|t, v| poincare_distance(t, v[0], v[1]), &[a, b], 1e-3, 1e-4).unwrap();
            assert!(r.passed, "{r:?}");
        }
    }

    #[test]
    fn projection_and_prototype_gradients() {
        let h = Tensor::vector(vec![0.4, -0.3, 0.2]);
        let rho = Tensor::scalar(0.1);
        let r = grad_check(
            |t, v| {
                let a = alpha_from_rho(t, v[1])?;
                let y = project(t, v[0], a)?;
                let target = t.constant(Tensor::vector(vec![0.1, 0.2, -0.3]));
                poincare_distance(t, y, target)
            },
            &[h, rho],
            1e-3,
            1e-4,
        )
        .unwrap();
        assert!(r.passed, "{r:?}");

        let pts = vec![
            Tensor::vector(vec![0.1, 0.3]),
            Tensor::vector(vec![-0.2, 0.5]),
            Tensor::vector(vec![0.4, -0.1]),
        ];
        let r = grad_check(
            |t, v| {
                let (p, _) = weighted_prototype(t, v)?;
                let q = t.constant(Tensor::vector(vec![0.3, 0.3]));
                poincare_distance(t, p, q)
            },
            &pts,
            1e-3,
            1e-4,
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
    }

    proptest! {
        #[test]
        fn every_output_stays_inside_margin(
            h in prop::collection::vec(-50.0f64..50.0, 1..6),
            alpha in 0.05f64..5.0,
            w in prop::collection::vec(-3.0f64..3.0, 36),
        ) {
            let d = h.len();
            let y = project_point(&h, alpha).unwrap();
            prop_assert!(y.norm() <= MAX_NORM + 1e-15);
            let wt = Tensor::matrix(d, d, w[..d * d].to_vec()).unwrap();
            let bt = Tensor::vector(w[..d].to_vec());
            let out = residual_value(y.coords(), wt, bt, alpha);
            prop_assert!(norm(&out) <= MAX_NORM + 1e-15);
        }

        #[test]
        fn prototype_weights_form_a_distribution(
            raw in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 3), 1..7),
        ) {
            let points: Vec<_> = raw.iter().map(|h| project_point(h, 1.0).unwrap()).collect();
            let (p, w) = prototype_of(&points).unwrap();
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(w.iter().all(|v| *v >= 0.0));
            prop_assert!(p.norm() <= MAX_NORM + 1e-15);
        }
    }
}
