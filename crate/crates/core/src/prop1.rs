//! The scalar delta-data toy: the model family
//! `f(x, sigma) = (sigma_min/sigma) x + (1 - sigma_min/sigma) theta` on a linear grid, with every expectation over
//! the grid computed as an exact sum.
//!
//! Everything here is `f64`: the checks compare million-term sums against
//! quadrature at relative tolerances that single precision cannot resolve.

use std::fmt::Write as _;

use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToySpec {
    pub xi: f64,
    pub theta: f64,
    pub theta_minus: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub n: usize,
}

impl ToySpec {
    pub fn new(xi: f64, theta: f64, theta_minus: f64, n: usize) -> Self {
        Self {
            xi,
            theta,
            theta_minus,
            sigma_min: 0.002,
            sigma_max: 80.0,
            n,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_min > 0.0 && self.sigma_max > self.sigma_min) {
            return Err(invalid("toy needs 0 < sigma_min < sigma_max"));
        }
        if self.n < 2 {
            return Err(invalid("toy grid needs n >= 2"));
        }
        Ok(())
    }

    pub fn delta_sigma(&self) -> f64 {
        (self.sigma_max - self.sigma_min) / (self.n - 1) as f64
    }

    /// `sigma_i` for `i` in `1..=n`.
    pub fn sigma(&self, i: usize) -> f64 {
        if i == self.n {
            return self.sigma_max;
        }
        self.sigma_min + (i - 1) as f64 / (self.n - 1) as f64 * (self.sigma_max - self.sigma_min)
    }

    /// Student minus teacher output, `f_theta(., sigma_{i+1}) - f_theta_minus(., sigma_i)`,
    /// with the noise already cancelled.
    fn residual(&self, i: usize) -> (f64, f64) {
        let (lo, hi) = (self.sigma(i), self.sigma(i + 1));
        let a_lo = self.sigma_min / lo;
        let a_hi = self.sigma_min / hi;
        // a_hi - a_lo written without cancellation
        let da = -self.sigma_min * (hi - lo) / (lo * hi);
        let r = da * (self.xi - self.theta) + (self.theta - self.theta_minus) * (1.0 - a_lo);
        (r, 1.0 - a_hi)
    }
}

/// `L^N(theta, theta_minus)` under uniform weighting and uniform index draws.
pub fn toy_loss(spec: &ToySpec) -> Result<f64> {
    spec.validate()?;
    let m = spec.n - 1;
    let sum: f64 = (1..spec.n).map(|i| spec.residual(i).0.powi(2)).sum();
    Ok(sum / m as f64)
}

/// `dL^N / dtheta` (teacher held fixed) divided by `delta_sigma`.
pub fn toy_scaled_grad(spec: &ToySpec) -> Result<f64> {
    spec.validate()?;
    let m = spec.n - 1;
    let sum: f64 = (1..spec.n)
        .map(|i| {
            let (r, da) = spec.residual(i);
            2.0 * r * da
        })
        .sum();
    Ok(sum / m as f64 / spec.delta_sigma())
}

/// Composite Simpson rule on `[a, b]` with `intervals` (rounded up to even).
pub fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, intervals: usize) -> f64 {
    let n = (intervals.max(2) + 1) & !1;
    let h = (b - a) / n as f64;
    let mut odd = 0.0;
    let mut even = 0.0;
    for j in 1..n {
        let v = f(a + j as f64 * h);
        if j % 2 == 1 {
            odd += v;
        } else {
            even += v;
        }
    }
    h / 3.0 * (f(a) + f(b) + 4.0 * odd + 2.0 * even)
}

pub const QUADRATURE_INTERVALS: usize = 1_000_000;

/// `E[(1 - sigma_min/sigma)^2] (theta - theta_minus)^2` for `sigma ~ U[sigma_min, sigma_max]`.
pub fn toy_loss_limit(theta: f64, theta_minus: f64, sigma_min: f64, sigma_max: f64, intervals: usize) -> Result<f64> {
    if theta == theta_minus {
        return Err(invalid("the limit is stated for theta != theta_minus"));
    }
    let e = simpson(|s| (1.0 - sigma_min / s).powi(2), sigma_min, sigma_max, intervals) / (sigma_max - sigma_min);
    Ok(e * (theta - theta_minus).powi(2))
}

/// `2 E[sigma_min/sigma^2 (1 - sigma_min/sigma)] (theta - xi)`, the scaled
/// gradient limit when the teacher equals the student.
pub fn toy_grad_limit(theta: f64, xi: f64, sigma_min: f64, sigma_max: f64, intervals: usize) -> f64 {
    let e = simpson(
        |s| sigma_min / (s * s) * (1.0 - sigma_min / s),
        sigma_min,
        sigma_max,
        intervals,
    ) / (sigma_max - sigma_min);
    2.0 * e * (theta - xi)
}

/// CT loss of the toy with explicit noise draws: for each draw `z` the model
/// is applied to `xi + sigma z` exactly as in training. Returns one loss per draw.
pub fn toy_ct_loss_per_draw(spec: &ToySpec, z: &[f64]) -> Result<Vec<f64>> {
    spec.validate()?;
    let f = |theta: f64, x: f64, s: f64| spec.sigma_min / s * x + (1.0 - spec.sigma_min / s) * theta;
    Ok(z.iter()
        .map(|&z| {
            let sum: f64 = (1..spec.n)
                .map(|i| {
                    let (lo, hi) = (spec.sigma(i), spec.sigma(i + 1));
                    let d = f(spec.theta, spec.xi + hi * z, hi) - f(spec.theta_minus, spec.xi + lo * z, lo);
                    d * d
                })
                .sum();
            sum / (spec.n - 1) as f64
        })
        .collect())
}

/// CM loss of the toy with the exact delta score and explicit noise draws.
pub fn toy_cm_loss_per_draw(spec: &ToySpec, z: &[f64]) -> Result<Vec<f64>> {
    spec.validate()?;
    let f = |theta: f64, x: f64, s: f64| spec.sigma_min / s * x + (1.0 - spec.sigma_min / s) * theta;
    Ok(z.iter()
        .map(|&z| {
            let sum: f64 = (1..spec.n)
                .map(|i| {
                    let (lo, hi) = (spec.sigma(i), spec.sigma(i + 1));
                    let x_hi = spec.xi + hi * z;
                    let score = -(x_hi - spec.xi) / (hi * hi);
                    let x_lo = x_hi - (lo - hi) * hi * score;
                    let d = f(spec.theta, x_hi, hi) - f(spec.theta_minus, x_lo, lo);
                    d * d
                })
                .sum();
            sum / (spec.n - 1) as f64
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ToyTeacher {
    ZeroEma,
    Ema { mu: f64 },
}

/// Gradient descent on the toy loss through the student branch only.
pub fn toy_descent(xi: f64, theta0: f64, n: usize, steps: usize, lr: f64, teacher: ToyTeacher) -> Result<f64> {
    let spec = ToySpec::new(xi, theta0, theta0, n);
    spec.validate()?;
    // the loss is quadratic: dL/dtheta = 2 [P (theta - theta_minus) + R (theta_minus - xi)]
    let m = (n - 1) as f64;
    let (mut p, mut r) = (0.0, 0.0);
    for i in 1..n {
        let a_lo = spec.sigma_min / spec.sigma(i);
        let a_hi = spec.sigma_min / spec.sigma(i + 1);
        p += (1.0 - a_hi).powi(2);
        r += (1.0 - a_hi) * (a_lo - a_hi);
    }
    p /= m;
    r /= m;
    let mut theta = theta0;
    let mut theta_minus = theta0;
    for _ in 0..steps {
        if teacher == ToyTeacher::ZeroEma {
            theta_minus = theta;
        }
        let g = 2.0 * (p * (theta - theta_minus) + r * (theta_minus - xi));
        theta -= lr * g;
        if let ToyTeacher::Ema { mu } = teacher {
            theta_minus = mu * theta_minus + (1.0 - mu) * theta;
        }
    }
    Ok(theta)
}

/// Least-squares slope of `log err` against `log delta_sigma`.
pub fn loglog_order(delta: &[f64], err: &[f64]) -> f64 {
    let xs: Vec<f64> = delta.iter().map(|d| d.ln()).collect();
    let ys: Vec<f64> = err.iter().map(|e| e.ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Bound {
    /// `|computed - reference| <= tol * |reference|`
    Relative,
    /// `computed >= reference`
    AtLeast,
    /// `computed < reference`
    Below,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClaimCheck {
    pub claim: String,
    pub computed: f64,
    pub reference: f64,
    pub tolerance: f64,
    pub bound: Bound,
    pub passed: bool,
}

impl ClaimCheck {
    fn new(claim: &str, computed: f64, reference: f64, tolerance: f64, bound: Bound) -> Self {
        let passed = match bound {
            Bound::Relative => (computed - reference).abs() <= tolerance * reference.abs(),
            Bound::AtLeast => computed >= reference,
            Bound::Below => computed < reference,
        };
        Self {
            claim: claim.to_string(),
            computed,
            reference,
            tolerance,
            bound,
            passed,
        }
    }
}

/// Parameters of a full check run.
#[derive(Debug, Clone, PartialEq)]
pub struct Prop1Preset {
    pub xi: f64,
    pub theta: f64,
    /// `theta - theta_minus` used for the loss-limit claim.
    pub loss_gap: f64,
    /// Offset of `theta_minus` for the divergence claims.
    pub divergence_offset: f64,
    pub grid_sizes: Vec<usize>,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub descent_n: usize,
    pub descent_steps: usize,
    pub descent_lr: f64,
    pub descent_theta0: f64,
    pub ema_mu: f64,
}

impl Prop1Preset {
    pub fn paper_defaults() -> Self {
        Self {
            xi: 1.0,
            theta: 0.5,
            loss_gap: 0.2,
            divergence_offset: 0.01,
            grid_sizes: vec![1_000, 10_000, 100_000, 1_000_000],
            sigma_min: 0.002,
            sigma_max: 80.0,
            descent_n: 1281,
            descent_steps: 10_000,
            descent_lr: 0.9,
            descent_theta0: -2.0,
            ema_mu: 0.99,
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "paper-defaults" => Ok(Self::paper_defaults()),
            _ => Err(invalid(format!("unknown prop1 preset '{name}'"))),
        }
    }

    fn spec(&self, theta_minus: f64, n: usize) -> ToySpec {
        ToySpec {
            xi: self.xi,
            theta: self.theta,
            theta_minus,
            sigma_min: self.sigma_min,
            sigma_max: self.sigma_max,
            n,
        }
    }
}

/// One row of the convergence table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvergenceRow {
    pub n: usize,
    pub delta_sigma: f64,
    pub loss: f64,
    pub loss_limit: f64,
    pub scaled_grad: f64,
    pub grad_limit: f64,
    pub grad_teacher_below: f64,
    pub grad_teacher_above: f64,
    pub loss_xi_gap: f64,
}

#[derive(Debug, Clone)]
pub struct Prop1Report {
    pub rows: Vec<ConvergenceRow>,
    pub checks: Vec<ClaimCheck>,
}

impl Prop1Report {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn table(&self) -> String {
        let mut s = format!(
            "{:<44} {:>14} {:>14} {:>10} {:>8}\n",
            "claim", "computed", "reference", "tolerance", "result"
        );
        for c in &self.checks {
            let tol = match c.bound {
                Bound::Relative => format!("rel {:.0e}", c.tolerance),
                Bound::AtLeast => ">=".to_string(),
                Bound::Below => "<".to_string(),
            };
            let _ = writeln!(
                s,
                "{:<44} {:>14.6e} {:>14.6e} {:>10} {:>8}",
                c.claim,
                c.computed,
                c.reference,
                tol,
                if c.passed { "pass" } else { "FAIL" }
            );
        }
        s
    }

    pub fn csv(&self) -> String {
        let mut s = String::from(
            "n,delta_sigma,loss,loss_limit,scaled_grad,grad_limit,grad_teacher_below,grad_teacher_above,loss_xi_gap\n",
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
                r.n,
                r.delta_sigma,
                r.loss,
                r.loss_limit,
                r.scaled_grad,
                r.grad_limit,
                r.grad_teacher_below,
                r.grad_teacher_above,
                r.loss_xi_gap
            );
        }
        s
    }
}

fn strictly_growing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[1] > w[0])
}

pub fn run_prop1(p: &Prop1Preset) -> Result<Prop1Report> {
    if p.grid_sizes.len() < 2 {
        return Err(invalid("need at least two grid sizes"));
    }
    let q = QUADRATURE_INTERVALS;
    let theta_minus = p.theta - p.loss_gap;
    let loss_limit = toy_loss_limit(p.theta, theta_minus, p.sigma_min, p.sigma_max, q)?;
    let grad_limit = toy_grad_limit(p.theta, p.xi, p.sigma_min, p.sigma_max, q);
    let mut rows = Vec::new();
    for &n in &p.grid_sizes {
        let base = p.spec(theta_minus, n);
        let other_xi = ToySpec { xi: -3.0, ..base };
        rows.push(ConvergenceRow {
            n,
            delta_sigma: base.delta_sigma(),
            loss: toy_loss(&base)?,
            loss_limit,
            scaled_grad: toy_scaled_grad(&p.spec(p.theta, n))?,
            grad_limit,
            grad_teacher_below: toy_scaled_grad(&p.spec(p.theta - p.divergence_offset, n))?,
            grad_teacher_above: toy_scaled_grad(&p.spec(p.theta + p.divergence_offset, n))?,
            loss_xi_gap: (toy_loss(&base)? - toy_loss(&other_xi)?).abs(),
        });
    }
    let last = rows[rows.len() - 1];
    let ds: Vec<f64> = rows.iter().map(|r| r.delta_sigma).collect();
    let loss_err: Vec<f64> = rows.iter().map(|r| (r.loss - r.loss_limit).abs()).collect();
    let grad_err: Vec<f64> = rows.iter().map(|r| (r.scaled_grad - r.grad_limit).abs()).collect();
    let k = rows.len();
    let below: Vec<f64> = rows.iter().map(|r| r.grad_teacher_below).collect();
    let above: Vec<f64> = rows.iter().map(|r| -r.grad_teacher_above).collect();
    let gaps: Vec<f64> = rows.iter().map(|r| -r.loss_xi_gap).collect();

    let zero = toy_descent(p.xi, p.descent_theta0, p.descent_n, p.descent_steps, p.descent_lr, ToyTeacher::ZeroEma)?;
    let ema = toy_descent(
        p.xi,
        p.descent_theta0,
        p.descent_n,
        p.descent_steps,
        p.descent_lr,
        ToyTeacher::Ema { mu: p.ema_mu },
    )?;

    let checks = vec![
        ClaimCheck::new("loss matches limit at largest N", last.loss, loss_limit, 1e-5, Bound::Relative),
        ClaimCheck::new("loss convergence order in delta_sigma", loglog_order(&ds, &loss_err), 0.9, 0.0, Bound::AtLeast),
        ClaimCheck::new(
            "scaled grad matches quadrature at largest N",
            last.scaled_grad,
            grad_limit,
            1e-4,
            Bound::Relative,
        ),
        ClaimCheck::new(
            "scaled grad order over last decade",
            loglog_order(&ds[k - 2..], &grad_err[k - 2..]),
            0.9,
            0.0,
            Bound::AtLeast,
        ),
        ClaimCheck::new(
            "grad diverges to +inf (teacher below)",
            if strictly_growing(&below) && below[0] > 0.0 { below[k - 1] / below[0] } else { 0.0 },
            100.0,
            0.0,
            Bound::AtLeast,
        ),
        ClaimCheck::new(
            "grad diverges to -inf (teacher above)",
            if strictly_growing(&above) && above[0] > 0.0 { above[k - 1] / above[0] } else { 0.0 },
            100.0,
            0.0,
            Bound::AtLeast,
        ),
        ClaimCheck::new(
            "loss gap between xi=1 and xi=-3 shrinks",
            if strictly_growing(&gaps) { last.loss_xi_gap } else { f64::INFINITY },
            rows[0].loss_xi_gap,
            0.0,
            Bound::Below,
        ),
        ClaimCheck::new("zero-EMA descent reaches xi", (zero - p.xi).abs(), 1e-3, 0.0, Bound::Below),
        ClaimCheck::new("EMA-teacher descent misses xi", (ema - p.xi).abs(), 1e-3, 0.0, Bound::AtLeast),
    ];
    Ok(Prop1Report { rows, checks })
}
