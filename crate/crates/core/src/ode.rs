//! Explicit Runge–Kutta integrators: adaptive Dormand–Prince 5(4) and fixed-step RK4.

use crate::error::{GeoError, Result};

/// Tolerances and guards for the adaptive integrator.
#[derive(Clone, Debug, PartialEq)]
pub struct IntegratorConfig {
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub max_step: f64,
    pub max_steps: usize,
    /// Trajectories leaving this box fail with `EscapedDomain`.
    pub domain: Option<Vec<(f64, f64)>>,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        IntegratorConfig {
            rel_tol: 1e-9,
            abs_tol: 1e-11,
            max_step: f64::INFINITY,
            max_steps: 200_000,
            domain: None,
        }
    }
}

impl IntegratorConfig {
    pub fn with_domain(mut self, domain: Vec<(f64, f64)>) -> Self {
        self.domain = Some(domain);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rel_tol > 0.0 && self.abs_tol > 0.0 && self.max_step > 0.0) {
            return Err(GeoError::invalid("integrator tolerances must be positive"));
        }
        Ok(())
    }

    pub fn inside(&self, y: &[f64]) -> bool {
        match &self.domain {
            None => y.iter().all(|v| v.is_finite()),
            Some(b) => y
                .iter()
                .zip(b)
                .all(|(v, (lo, hi))| v.is_finite() && *v >= *lo && *v <= *hi),
        }
    }
}

const C: [f64; 7] = [0.0, 0.2, 0.3, 0.8, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [0.2, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];
const B5: [f64; 7] = [
    35.0 / 384.0,
    0.0,
    500.0 / 1113.0,
    125.0 / 192.0,
    -2187.0 / 6784.0,
    11.0 / 84.0,
    0.0,
];
const B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

/// Integrates `y' = f(t, y)` from `t0` to `t1` (either direction).
pub fn integrate<F>(
    mut f: F,
    y0: &[f64],
    t0: f64,
    t1: f64,
    cfg: &IntegratorConfig,
) -> Result<Vec<f64>>
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    cfg.validate()?;
    let n = y0.len();
    let mut y = y0.to_vec();
    if !cfg.inside(&y) {
        return Err(GeoError::EscapedDomain { time: t0 });
    }
    let span = t1 - t0;
    if span == 0.0 {
        return Ok(y);
    }
    let dir = span.signum();
    let mut t = t0;
    let mut h = span.abs().min(cfg.max_step);
    let mut k = vec![vec![0.0; n]; 7];
    let mut stage = vec![0.0; n];
    let mut y5 = vec![0.0; n];
    f(t, &y, &mut k[0]);
    let mut steps = 0usize;
    let hmin = 1e-14 * span.abs().max(1e-300);
    while (t1 - t) * dir > 0.0 {
        steps += 1;
        if steps > cfg.max_steps {
            return Err(GeoError::Integrator(format!(
                "step budget exhausted at t = {t:.6e}"
            )));
        }
        let remaining = (t1 - t).abs();
        let last = h >= remaining;
        if last {
            h = remaining;
        }
        let hs = h * dir;
        for s in 1..7 {
            for i in 0..n {
                let mut acc = y[i];
                for (j, kj) in k.iter().enumerate().take(s) {
                    let a = A[s][j];
                    if a != 0.0 {
                        acc += hs * a * kj[i];
                    }
                }
                stage[i] = acc;
            }
            f(t + C[s] * hs, &stage, &mut k[s]);
        }
        let mut err = 0.0;
        for i in 0..n {
            let mut hi = 0.0;
            let mut lo = 0.0;
            for s in 0..7 {
                hi += B5[s] * k[s][i];
                lo += B4[s] * k[s][i];
            }
            y5[i] = y[i] + hs * hi;
            let sc = cfg.abs_tol + cfg.rel_tol * y[i].abs().max(y5[i].abs());
            let e = hs * (hi - lo) / sc;
            err += e * e;
        }
        err = (err / n.max(1) as f64).sqrt();
        if !err.is_finite() {
            err = 1e10;
        }
        if err <= 1.0 && !cfg.inside(&y5) {
            // shrink until the exit time is resolved
            if h > 1e-9 * span.abs() {
                h *= 0.5;
                continue;
            }
            return Err(GeoError::EscapedDomain { time: t + hs });
        }
        if err <= 1.0 {
            t = if last { t1 } else { t + hs };
            std::mem::swap(&mut y, &mut y5);
            // first-same-as-last: the seventh stage is f at the new point
            let k6 = k[6].clone();
            k[0].copy_from_slice(&k6);
            let grow = if err == 0.0 {
                5.0
            } else {
                (0.9 * err.powf(-0.2)).min(5.0)
            };
            h = (h * grow).min(cfg.max_step);
        } else {
            h *= (0.9 * err.powf(-0.2)).max(0.2);
            if h < hmin {
                return Err(GeoError::Integrator(format!(
                    "step size underflow at t = {t:.6e}"
                )));
            }
        }
    }
    Ok(y)
}

/// Classical RK4 with `steps` equal steps; smooth in the initial data and parameters.
pub fn rk4_fixed<F>(mut f: F, y0: &[f64], t0: f64, t1: f64, steps: usize) -> Vec<f64>
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    let n = y0.len();
    let mut y = y0.to_vec();
    let h = (t1 - t0) / steps.max(1) as f64;
    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut tmp = vec![0.0; n];
    let mut t = t0;
    for _ in 0..steps.max(1) {
        f(t, &y, &mut k1);
        for i in 0..n {
            tmp[i] = y[i] + 0.5 * h * k1[i];
        }
        f(t + 0.5 * h, &tmp, &mut k2);
        for i in 0..n {
            tmp[i] = y[i] + 0.5 * h * k2[i];
        }
        f(t + 0.5 * h, &tmp, &mut k3);
        for i in 0..n {
            tmp[i] = y[i] + h * k3[i];
        }
        f(t + h, &tmp, &mut k4);
        for i in 0..n {
            y[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        t += h;
    }
    y
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exponential_decay() {
        let cfg = IntegratorConfig::default();
        let y = integrate(|_, y, d| d[0] = -y[0], &[1.0], 0.0, 2.0, &cfg).unwrap();
        assert!((y[0] - (-2f64).exp()).abs() < 1e-9);
        let back = integrate(|_, y, d| d[0] = -y[0], &y, 2.0, 0.0, &cfg).unwrap();
        assert!((back[0] - 1.0).abs() < 1e-8);
    }

    #[test]
    fn rotation_preserves_radius() {
        let cfg = IntegratorConfig::default();
        let y = integrate(
            |_, y, d| {
                d[0] = -y[1];
                d[1] = y[0];
            },
            &[1.0, 0.0],
            0.0,
            std::f64::consts::PI,
            &cfg,
        )
        .unwrap();
        assert!((y[0] + 1.0).abs() < 1e-8 && y[1].abs() < 1e-8);
    }

    #[test]
    fn domain_exit_reports_time() {
        let cfg = IntegratorConfig::default().with_domain(vec![(-1.0, 1.0)]);
        let err = integrate(|_, _, d| d[0] = 1.0, &[0.0], 0.0, 5.0, &cfg).unwrap_err();
        match err {
            GeoError::EscapedDomain { time } => assert!((time - 1.0).abs() < 1e-6),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rk4_is_exact_on_cubics() {
        let y = rk4_fixed(|t, _, d| d[0] = 3.0 * t * t, &[0.0], 0.0, 2.0, 3);
        assert!((y[0] - 8.0).abs() < 1e-12);
    }
}
