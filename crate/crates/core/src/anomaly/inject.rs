use ndarray::{Array1, ArrayView1};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::telemetry::WINDOW;

/// `w + a·ν` with `ν ~ N(0, I)`.
pub fn inject_gwn(w: ArrayView1<'_, f64>, a: f64, rng: &mut impl Rng) -> Array1<f64> {
    w.mapv(|v| {
        let nu: f64 = StandardNormal.sample(rng);
        v + a * nu
    })
}

/// `w ± a·1`.
pub fn inject_offset(w: ArrayView1<'_, f64>, a: f64, sign: f64) -> Array1<f64> {
    w.mapv(|v| v + sign * a)
}

/// `w ± a·e_j`.
pub fn inject_impulse(w: ArrayView1<'_, f64>, a: f64, sign: f64, j: usize) -> Result<Array1<f64>> {
    if j >= w.len() {
        return Err(Error::Param(format!("impulse position {j} outside 0..{}", w.len())));
    }
    let mut out = w.to_owned();
    out[j] += sign * a;
    Ok(out)
}

/// `w ± a·Σ_{j=i}^{i+7} e_j` with `i ∈ {0, 8}`.
pub fn inject_step(w: ArrayView1<'_, f64>, a: f64, sign: f64, start: usize) -> Result<Array1<f64>> {
    if start != 0 && start != 8 {
        return Err(Error::Param(format!("step start must be 0 or 8, got {start}")));
    }
    if w.len() != WINDOW {
        return Err(Error::Param(format!("step expects a {WINDOW}-sample column")));
    }
    let mut out = w.to_owned();
    for v in out.iter_mut().skip(start).take(8) {
        *v += sign * a;
    }
    Ok(out)
}

/// Rotation angle realizing perturbation energy `a²‖w‖²`: `arccos(1 - a²/2)`.
pub fn psa_angle(a: f64) -> Result<f64> {
    let c = 1.0 - a * a / 2.0;
    if !(-1.0..=1.0).contains(&c) {
        return Err(Error::Param(format!("PSA intensity {a} outside [0, 2]")));
    }
    Ok(c.acos())
}

/// Rotates `w` by `theta` inside the plane spanned by `w` and a uniformly random
/// unit vector orthogonal to it.
///
/// Returns the rotated column and whether `w` was zero (left unchanged).
pub fn inject_psa(w: ArrayView1<'_, f64>, theta: f64, rng: &mut impl Rng) -> Result<(Array1<f64>, bool)> {
    if !(0.0..=std::f64::consts::PI).contains(&theta) {
        return Err(Error::Param(format!("rotation angle {theta} outside [0, pi]")));
    }
    let norm = w.dot(&w).sqrt();
    if norm == 0.0 || w.len() < 2 {
        return Ok((w.to_owned(), true));
    }
    let unit = w.mapv(|v| v / norm);
    let ortho = loop {
        let g: Array1<f64> = Array1::from_shape_fn(w.len(), |_| StandardNormal.sample(rng));
        // project out w twice for numerical orthogonality
        let mut u = &g - &(&unit * g.dot(&unit));
        u = &u - &(&unit * u.dot(&unit));
        let n = u.dot(&u).sqrt();
        if n > 1e-8 {
            break u / n;
        }
    };
    let (s, c) = theta.sin_cos();
    Ok((unit.mapv(|v| v * c * norm) + ortho.mapv(|v| v * s * norm), false))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn col(f: impl Fn(usize) -> f64) -> Array1<f64> {
        Array1::from_shape_fn(WINDOW, f)
    }

    fn energy(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
        (a - b).mapv(|d| d * d).sum()
    }

    #[test]
    fn gwn_identity_and_energy() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = col(|i| i as f64);
        assert_eq!(inject_gwn(w.view(), 0.0, &mut rng), w);

        let zero = Array1::zeros(WINDOW);
        let trials = 10_000;
        let mean: f64 = (0..trials)
            .map(|_| {
                let out = inject_gwn(zero.view(), 1.0, &mut rng);
                out.dot(&out)
            })
            .sum::<f64>()
            / trials as f64;
        assert!((mean / 16.0 - 1.0).abs() < 0.05, "{mean}");

        let a = inject_gwn(w.view(), 0.3, &mut ChaCha8Rng::seed_from_u64(9));
        let b = inject_gwn(w.view(), 0.3, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }

    #[test]
    fn offset_closed_form() {
        let zero = Array1::zeros(WINDOW);
        assert_eq!(inject_offset(zero.view(), 1.0, 1.0), Array1::from_elem(WINDOW, 1.0));
        let w = col(|i| (i as f64).sin());
        let out = inject_offset(w.view(), 0.7, -1.0);
        assert!((energy(&out, &w) - 16.0 * 0.49).abs() < 1e-12);
        assert_eq!(inject_offset(w.view(), 0.0, 1.0), w);
    }

    #[test]
    fn impulse_closed_form() {
        let zero = Array1::zeros(WINDOW);
        let out = inject_impulse(zero.view(), 2.0, -1.0, 5).unwrap();
        let mut expected = Array1::zeros(WINDOW);
        expected[5] = -2.0;
        assert_eq!(out, expected);
        let w = col(|i| i as f64 * 0.1);
        let out = inject_impulse(w.view(), 1.5, 1.0, 15).unwrap();
        assert_eq!(out.iter().zip(w.iter()).filter(|(a, b)| a != b).count(), 1);
        assert!((energy(&out, &w) - 2.25).abs() < 1e-12);
        assert!(inject_impulse(w.view(), 1.0, 1.0, 16).is_err());
    }

    #[test]
    fn step_closed_form() {
        let zero = Array1::zeros(WINDOW);
        let out = inject_step(zero.view(), 1.0, 1.0, 8).unwrap();
        assert_eq!(out, col(|i| if i >= 8 { 1.0 } else { 0.0 }));
        let w = col(|i| i as f64);
        assert!((energy(&inject_step(w.view(), 0.5, -1.0, 0).unwrap(), &w) - 8.0 * 0.25).abs() < 1e-12);
        assert!(inject_step(w.view(), 1.0, 1.0, 4).is_err());
    }

    #[test]
    fn psa_geometry() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = col(|i| (i as f64 * 0.4).cos() + 0.2);
        let (same, degenerate) = inject_psa(w.view(), 0.0, &mut rng).unwrap();
        assert!(!degenerate);
        assert!(energy(&same, &w) < 1e-24);

        let (ortho, _) = inject_psa(w.view(), std::f64::consts::FRAC_PI_2, &mut rng).unwrap();
        assert!(w.dot(&ortho).abs() < 1e-9);

        let theta = psa_angle(1.0).unwrap();
        let (rot, _) = inject_psa(w.view(), theta, &mut rng).unwrap();
        let wn = w.dot(&w);
        assert!((energy(&rot, &w) - wn).abs() < 1e-9);
        assert!((rot.dot(&rot).sqrt() / wn.sqrt() - 1.0).abs() < 1e-9);
        let angle = (w.dot(&rot) / wn).clamp(-1.0, 1.0).acos();
        assert!((angle - theta).abs() < 1e-6);

        let zero = Array1::zeros(WINDOW);
        let (out, degenerate) = inject_psa(zero.view(), theta, &mut rng).unwrap();
        assert!(degenerate);
        assert_eq!(out, zero);
        assert!(psa_angle(2.5).is_err());
    }

    #[test]
    fn impulse_positions_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let n = 10_000;
        let mut counts = [0usize; WINDOW];
        for _ in 0..n {
            counts[rng.random_range(0..WINDOW)] += 1;
        }
        let p = 1.0 / 16.0;
        let sd = (n as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - n as f64 * p).abs() < 3.0 * sd, "{counts:?}");
        }
    }
}
