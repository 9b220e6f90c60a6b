//! Shifted-SABR implied normal volatility, Bachelier swaption pricing and
//! the SABR delta used for delta-neutral forward-swap hedges.
//!
//! The normal-vol expansion is the Hagan et al. formula in the form
//! simplified by Le Floc'h and Kennedy:
//!
//! ```text
//! σ_N ≈ (F−K)/x̂(ζ) · [1 + (g + ¼ρναβ((F+b)(K+b))^((β−1)/2) + (2−3ρ²)ν²/24)·(T0−t)]
//! g    = (β²−2β)/24 · ((F+b)(K+b))^(β−1) · α²
//! ζ    = ν/(α(1−β)) · ((F+b)^(1−β) − (K+b)^(1−β))      (ζ = ν/α·ln((F+b)/(K+b)) for β = 1)
//! x̂(ζ) = ln((√(1−2ρζ+ζ²) − ρ + ζ)/(1−ρ)) / ν
//! ```
//!
//! with the at-the-money limit `α(F+b)^β·[…]` used when `|F−K| ≤ ATM_EPSILON`.
//! `x̂` is evaluated as `(ζ/ν)·(χ(ζ)/ζ)` so that ν = 0 is a regular point.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::normal;

/// Below this |F − K| (rate units) the at-the-money branch is used.
pub const ATM_EPSILON: f64 = 1e-8;

pub const DEFAULT_SHIFT: f64 = 0.04;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SabrParams {
    pub alpha: f64,
    pub beta: f64,
    pub nu: f64,
    pub rho: f64,
    pub shift: f64,
}

impl SabrParams {
    pub fn new(alpha: f64, beta: f64, nu: f64, rho: f64, shift: f64) -> Result<Self> {
        let p = SabrParams {
            alpha,
            beta,
            nu,
            rho,
            shift,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha = {} must be positive", self.alpha));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return bad(format!("beta = {} must lie in [0, 1]", self.beta));
        }
        if !(self.nu >= 0.0 && self.nu.is_finite()) {
            return bad(format!("nu = {} must be non-negative", self.nu));
        }
        if !(self.rho.abs() < 1.0) {
            return bad(format!("rho = {} must lie in (-1, 1)", self.rho));
        }
        if !(self.shift >= 0.0 && self.shift.is_finite()) {
            return bad(format!("shift = {} must be non-negative", self.shift));
        }
        Ok(())
    }
}

/// Flat continuously compounded curve, P(t, T) = exp(−r (T − t)).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiscountCurve {
    pub rate: f64,
}

impl DiscountCurve {
    pub fn flat(rate: f64) -> Self {
        DiscountCurve { rate }
    }

    pub fn discount(&self, t: f64, maturity: f64) -> f64 {
        (-self.rate * (maturity - t)).exp()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SwaptionKind {
    Payer,
    Receiver,
}

impl SwaptionKind {
    /// The `R` indicator: 0 for payers, 1 for receivers.
    pub fn indicator(self) -> f64 {
        match self {
            SwaptionKind::Payer => 0.0,
            SwaptionKind::Receiver => 1.0,
        }
    }

    /// `1 − 2R`
    pub fn sign(self) -> f64 {
        1.0 - 2.0 * self.indicator()
    }
}

/// A European swaption observed at valuation time `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwaptionSpec {
    pub forward: f64,
    pub strike: f64,
    pub t: f64,
    pub expiry: f64,
    pub payment_times: Vec<f64>,
    pub accruals: Vec<f64>,
    pub notional: f64,
    pub kind: SwaptionKind,
    pub curve: DiscountCurve,
}

impl SwaptionSpec {
    /// Swaption on a swap starting at `expiry` with `tenor` years of
    /// equally spaced payments, `payments_per_year` per year.
    #[allow(clippy::too_many_arguments)]
    pub fn regular(
        forward: f64,
        strike: f64,
        t: f64,
        expiry: f64,
        tenor: f64,
        payments_per_year: u32,
        notional: f64,
        kind: SwaptionKind,
        curve: DiscountCurve,
    ) -> Result<Self> {
        let n = (tenor * payments_per_year as f64).round() as usize;
        if n == 0 {
            return Err(Error::InvalidParameter(format!(
                "tenor {tenor} has no payment dates at frequency {payments_per_year}"
            )));
        }
        let delta = 1.0 / payments_per_year as f64;
        let spec = SwaptionSpec {
            forward,
            strike,
            t,
            expiry,
            payment_times: (1..=n).map(|i| expiry + delta * i as f64).collect(),
            accruals: vec![delta; n],
            notional,
            kind,
            curve,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(m.to_string()));
        if self.payment_times.is_empty() || self.payment_times.len() != self.accruals.len() {
            return bad("payment times and accruals must be non-empty and of equal length");
        }
        if !(self.t < self.expiry) {
            return bad("valuation time must precede expiry");
        }
        if self.payment_times[0] < self.expiry
            || self.payment_times.windows(2).any(|w| w[1] <= w[0])
        {
            return bad("payment times must be increasing and not before expiry");
        }
        if self.accruals.iter().any(|&d| !(d > 0.0)) {
            return bad("accrual fractions must be positive");
        }
        if !(self.notional > 0.0) {
            return bad("notional must be positive");
        }
        Ok(())
    }

    pub fn with_forward(&self, forward: f64) -> Self {
        SwaptionSpec {
            forward,
            ..self.clone()
        }
    }

    pub fn time_to_expiry(&self) -> f64 {
        self.expiry - self.t
    }

    /// Present value of a basis point, Σ δ_i P(t, T_i).
    pub fn pvbp(&self) -> f64 {
        self.payment_times
            .iter()
            .zip(&self.accruals)
            .map(|(&ti, &d)| d * self.curve.discount(self.t, ti))
            .sum()
    }

    /// N·PVBP
    pub fn annuity(&self) -> f64 {
        self.notional * self.pvbp()
    }
}

fn check_shifted(params: &SabrParams, forward: f64, strike: f64) -> Result<(f64, f64)> {
    let s = forward + params.shift;
    let k = strike + params.shift;
    if !(s > 0.0 && k > 0.0) {
        return Err(Error::NumericalDomain(format!(
            "shifted forward {s} and strike {k} must be positive"
        )));
    }
    Ok((s, k))
}

/// Pieces of the expansion shared by the volatility and the delta.
struct Expansion {
    s: f64,
    tau: f64,
    /// g
    g: f64,
    /// ¼ρναβ((F+b)(K+b))^((β−1)/2)
    rho_term: f64,
    /// 1 + (g + rho_term + (2−3ρ²)ν²/24)·τ
    bracket: f64,
    /// None on the ATM branch; otherwise (x̂, √(1−2ρζ+ζ²)).
    smile: Option<(f64, f64)>,
}

impl Expansion {
    fn new(p: &SabrParams, forward: f64, strike: f64, t: f64, expiry: f64) -> Result<Self> {
        p.validate()?;
        let tau = expiry - t;
        if !(tau > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "valuation time {t} must precede expiry {expiry}"
            )));
        }
        let (s, k0) = check_shifted(p, forward, strike)?;
        let atm = (forward - strike).abs() <= ATM_EPSILON;
        let k = if atm { s } else { k0 };
        let (alpha, beta, nu, rho) = (p.alpha, p.beta, p.nu, p.rho);

        let sk = s * k;
        let g = (beta * beta - 2.0 * beta) / 24.0 * sk.powf(beta - 1.0) * alpha * alpha;
        let rho_term = 0.25 * rho * nu * alpha * beta * sk.powf(0.5 * (beta - 1.0));
        let vov = (2.0 - 3.0 * rho * rho) * nu * nu / 24.0;
        let bracket = 1.0 + (g + rho_term + vov) * tau;

        let smile = if atm {
            None
        } else {
            // q = ζ/ν, computed without cancellation for nearby strikes.
            let log_ratio = ((forward - strike) / k).ln_1p();
            let q = if beta == 1.0 {
                log_ratio / alpha
            } else {
                let a = 1.0 - beta;
                k.powf(a) * (a * log_ratio).exp_m1() / (alpha * a)
            };
            if q == 0.0 || !q.is_finite() {
                return Err(Error::NumericalDomain(format!(
                    "degenerate ζ for F = {forward}, K = {strike}"
                )));
            }
            let zeta = nu * q;
            let w = zeta * zeta - 2.0 * rho * zeta;
            if !(1.0 + w > 0.0) {
                return Err(Error::NumericalDomain(format!(
                    "1 − 2ρζ + ζ² = {} is not positive",
                    1.0 + w
                )));
            }
            let root = (1.0 + w).sqrt();
            let chi_over_zeta = if zeta == 0.0 {
                1.0
            } else {
                let arg = (w / (root + 1.0) + zeta) / (1.0 - rho);
                if !(arg > -1.0) {
                    return Err(Error::NumericalDomain(format!(
                        "x̂(ζ) undefined for ζ = {zeta}, ρ = {rho}"
                    )));
                }
                arg.ln_1p() / zeta
            };
            let x_hat = q * chi_over_zeta;
            if x_hat == 0.0 || !x_hat.is_finite() {
                return Err(Error::NumericalDomain(format!("x̂(ζ) = {x_hat}")));
            }
            Some((x_hat, root))
        };
        Ok(Expansion {
            s,
            tau,
            g,
            rho_term,
            bracket,
            smile,
        })
    }

    fn leading(&self, p: &SabrParams, forward: f64, strike: f64) -> f64 {
        match self.smile {
            Some((x_hat, _)) => (forward - strike) / x_hat,
            None => p.alpha * self.s.powf(p.beta),
        }
    }

    fn vol(&self, p: &SabrParams, forward: f64, strike: f64) -> f64 {
        self.leading(p, forward, strike) * self.bracket
    }

    /// ∂σ_N/∂F = σ_N·κ + τ
    fn vol_forward_derivative(&self, p: &SabrParams, forward: f64, strike: f64) -> f64 {
        let (alpha, beta, nu, rho) = (p.alpha, p.beta, p.nu, p.rho);
        let s = self.s;
        let sigma = self.vol(p, forward, strike);
        let inner = self.g + 0.5 * self.rho_term;
        let (kappa, tau_term) = match self.smile {
            Some((x_hat, root)) => {
                let u = forward - strike;
                let kappa = 1.0 / u - s.powf(-beta) / (alpha * x_hat * root);
                let tau_term = u / (x_hat * s) * (beta - 1.0) * inner * self.tau;
                (kappa, tau_term)
            }
            None => {
                let kappa = 0.5 * (beta / s - rho * nu / alpha * s.powf(-beta));
                let tau_term = alpha * (beta - 1.0) * s.powf(beta - 1.0) * inner * self.tau;
                (kappa, tau_term)
            }
        };
        sigma * kappa + tau_term
    }
}

/// Shifted-SABR implied normal volatility (decimal rate units).
pub fn sabr_normal_vol(
    params: &SabrParams,
    forward: f64,
    strike: f64,
    t: f64,
    expiry: f64,
) -> Result<f64> {
    let e = Expansion::new(params, forward, strike, t, expiry)?;
    let v = e.vol(params, forward, strike);
    if !v.is_finite() {
        return Err(Error::NumericalDomain(format!("normal vol {v}")));
    }
    Ok(v)
}

fn bachelier_d(spec: &SwaptionSpec, sigma_n: f64) -> Result<(f64, f64)> {
    spec.validate()?;
    if !(sigma_n > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "normal vol {sigma_n} must be positive"
        )));
    }
    let sd = sigma_n * spec.time_to_expiry().sqrt();
    Ok(((spec.forward - spec.strike) / sd, sd))
}

/// Bachelier swaption value N·PVBP·σ_N√(T0−t)·(d[Φ(d) − R] + φ(d)).
pub fn bachelier_price(spec: &SwaptionSpec, sigma_n: f64) -> Result<f64> {
    let (d, sd) = bachelier_d(spec, sigma_n)?;
    let r = spec.kind.indicator();
    Ok(spec.annuity() * sd * (d * (normal::cdf(d) - r) + normal::pdf(d)))
}

/// ∂V/∂σ_N of the Bachelier value.
pub fn bachelier_vega(spec: &SwaptionSpec, sigma_n: f64) -> Result<f64> {
    let (d, _) = bachelier_d(spec, sigma_n)?;
    Ok(spec.annuity() * spec.time_to_expiry().sqrt() * normal::pdf(d))
}

/// ∂V/∂F of the Bachelier value at fixed σ_N.
pub fn bachelier_delta(spec: &SwaptionSpec, sigma_n: f64) -> Result<f64> {
    let (d, _) = bachelier_d(spec, sigma_n)?;
    Ok(spec.annuity() * (normal::cdf(d) - spec.kind.indicator()))
}

/// SABR value: Bachelier price at the SABR implied normal vol.
pub fn sabr_price(params: &SabrParams, spec: &SwaptionSpec) -> Result<f64> {
    let vol = sabr_normal_vol(params, spec.forward, spec.strike, spec.t, spec.expiry)?;
    bachelier_price(spec, vol)
}

/// SABR delta N·PVBP·[Φ(d) + √(T0−t)·φ(d)·(σ_N κ + τ) − R], i.e. the
/// Bachelier delta plus vega times the smile's forward sensitivity.
pub fn sabr_delta(params: &SabrParams, spec: &SwaptionSpec) -> Result<f64> {
    let e = Expansion::new(params, spec.forward, spec.strike, spec.t, spec.expiry)?;
    let sigma = e.vol(params, spec.forward, spec.strike);
    let dsigma = e.vol_forward_derivative(params, spec.forward, spec.strike);
    let (d, _) = bachelier_d(spec, sigma)?;
    let bracket = normal::cdf(d) + spec.time_to_expiry().sqrt() * normal::pdf(d) * dsigma
        - spec.kind.indicator();
    Ok(spec.annuity() * bracket)
}

/// Value of the forward swap (1 − 2R)·N·PVBP·(F − K).
pub fn forward_swap_value(spec: &SwaptionSpec) -> f64 {
    spec.kind.sign() * spec.annuity() * (spec.forward - spec.strike)
}

/// ∂V^Swap/∂F = (1 − 2R)·N·PVBP.
pub fn forward_swap_sensitivity(spec: &SwaptionSpec) -> f64 {
    spec.kind.sign() * spec.annuity()
}

/// Number of forward swaps `m_t` making the swaption + swap portfolio delta-neutral.
pub fn hedge_position(params: &SabrParams, spec: &SwaptionSpec) -> Result<f64> {
    Ok(sabr_delta(params, spec)? / forward_swap_sensitivity(spec))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(alpha: f64, beta: f64, nu: f64, rho: f64) -> SabrParams {
        SabrParams::new(alpha, beta, nu, rho, DEFAULT_SHIFT).unwrap()
    }

    fn spec(forward: f64, strike: f64, kind: SwaptionKind) -> SwaptionSpec {
        SwaptionSpec::regular(
            forward,
            strike,
            0.0,
            1.0,
            1.0,
            4,
            100_000.0,
            kind,
            DiscountCurve::flat(0.01),
        )
        .unwrap()
    }

    #[test]
    fn degenerate_atm_equals_alpha() {
        let p = params(0.0071, 0.0, 0.0, 0.3);
        assert_eq!(sabr_normal_vol(&p, 0.01, 0.01, 0.0, 2.0).unwrap(), 0.0071);
        // flat smile in the β = 0, ν = 0 limit
        for k in [-0.01, 0.0, 0.005, 0.03] {
            let v = sabr_normal_vol(&p, 0.01, k, 0.0, 2.0).unwrap();
            assert!((v - 0.0071).abs() < 1e-15, "{k}: {v}");
        }
    }

    #[test]
    fn atm_branch_is_continuous() {
        let p = params(0.0086, 0.5, 1.0732, 0.6506);
        let f = 0.004;
        let atm = sabr_normal_vol(&p, f, f, 0.0, 1.0).unwrap();
        let mut prev_err = f64::INFINITY;
        for k in 4..=8 {
            let h = 10f64.powi(-k);
            let up = sabr_normal_vol(&p, f, f + h, 0.0, 1.0).unwrap();
            let dn = sabr_normal_vol(&p, f, f - h, 0.0, 1.0).unwrap();
            let err = (up - atm).abs().max((dn - atm).abs());
            assert!(err < prev_err);
            prev_err = err;
        }
        assert!(prev_err < 1e-9 * atm);
    }

    #[test]
    fn beta_one_uses_log_zeta() {
        let p = params(0.2, 1.0, 0.4, -0.2);
        let (f, k) = (0.02, 0.03);
        let s = f + p.shift;
        let kk = k + p.shift;
        let zeta = p.nu / p.alpha * (s / kk).ln();
        let chi = (((1.0 - 2.0 * p.rho * zeta + zeta * zeta).sqrt() - p.rho + zeta)
            / (1.0 - p.rho))
            .ln();
        let x_hat = chi / p.nu;
        let bracket = 1.0
            + (-(1.0 / 24.0) * p.alpha * p.alpha
                + 0.25 * p.rho * p.nu * p.alpha
                + (2.0 - 3.0 * p.rho * p.rho) * p.nu * p.nu / 24.0)
                * 1.5;
        let want = (f - k) / x_hat * bracket;
        let got = sabr_normal_vol(&p, f, k, 0.5, 2.0).unwrap();
        assert!((got / want - 1.0).abs() < 1e-12, "{got} vs {want}");
    }

    #[test]
    fn generic_branch_matches_scalar_evaluation() {
        let p = params(0.0086, 0.5, 1.0732, 0.6506);
        let (f, k, tau): (f64, f64, f64) = (0.004, 0.009, 1.0);
        let s = f + 0.04;
        let kk = k + 0.04;
        let b = 0.5;
        let g = (b * b - 2.0 * b) / 24.0 * (s * kk).powf(b - 1.0) * p.alpha * p.alpha;
        let zeta = p.nu / (p.alpha * (1.0 - b)) * (s.powf(1.0 - b) - kk.powf(1.0 - b));
        let x_hat = (((1.0 - 2.0 * p.rho * zeta + zeta * zeta).sqrt() - p.rho + zeta)
            / (1.0 - p.rho))
            .ln()
            / p.nu;
        let want = (f - k) / x_hat
            * (1.0
                + (g + 0.25 * p.rho * p.nu * p.alpha * b * s.powf(-0.25) * kk.powf(-0.25)
                    + (2.0 - 3.0 * p.rho * p.rho) * p.nu * p.nu / 24.0)
                    * tau);
        let got = sabr_normal_vol(&p, f, k, 0.0, tau).unwrap();
        assert!((got / want - 1.0).abs() < 1e-12, "{got} vs {want}");
    }

    #[test]
    fn domain_errors() {
        let p = params(0.01, 0.5, 0.3, 0.0);
        assert!(sabr_normal_vol(&p, -0.05, 0.0, 0.0, 1.0).is_err());
        assert!(sabr_normal_vol(&p, 0.01, -0.041, 0.0, 1.0).is_err());
        assert!(sabr_normal_vol(&p, 0.01, 0.01, 1.0, 1.0).is_err());
        let bad = SabrParams {
            rho: 1.0,
            ..p
        };
        assert!(sabr_normal_vol(&bad, 0.01, 0.02, 0.0, 1.0).is_err());
    }

    #[test]
    fn bachelier_atm_and_parity() {
        let sigma = 0.006;
        let payer = spec(0.01, 0.01, SwaptionKind::Payer);
        let v = bachelier_price(&payer, sigma).unwrap();
        let want = payer.notional * payer.pvbp() * sigma / (2.0 * std::f64::consts::PI).sqrt();
        assert!((v / want - 1.0).abs() < 1e-14);

        for (f, k) in [(0.01, 0.012), (0.02, 0.005), (-0.01, 0.0)] {
            let p = spec(f, k, SwaptionKind::Payer);
            let r = spec(f, k, SwaptionKind::Receiver);
            let diff = bachelier_price(&p, sigma).unwrap() - bachelier_price(&r, sigma).unwrap();
            let fwd = forward_swap_value(&p);
            assert!((diff - fwd).abs() <= 1e-10 * fwd.abs().max(1.0));
        }
        assert!(bachelier_price(&spec(0.0, 0.05, SwaptionKind::Payer), sigma).unwrap() >= 0.0);
        let mut expired = payer.clone();
        expired.t = 1.0;
        assert!(bachelier_price(&expired, sigma).is_err());
    }

    #[test]
    fn bachelier_regression_value() {
        // Independent scalar evaluation: PVBP from four quarterly periods
        // under a flat 1% rate, ATM so V = N·PVBP·σ/√(2π).
        let pvbp: f64 = (1..=4)
            .map(|i| 0.25 * (-0.01 * (1.0 + 0.25 * i as f64)).exp())
            .sum();
        let want = 100_000.0 * pvbp * 0.006 * 0.398_942_280_401_432_7;
        let got = bachelier_price(&spec(0.01, 0.01, SwaptionKind::Payer), 0.006).unwrap();
        assert!((got - want).abs() < 1e-9);
        assert!((got - 235.508_034_172_804_63).abs() < 1e-9, "{got}");
    }

    #[test]
    fn vega_properties() {
        let s = spec(0.01, 0.01, SwaptionKind::Payer);
        let vega = bachelier_vega(&s, 0.006).unwrap();
        let want = s.notional * s.pvbp() * 1.0 / (2.0 * std::f64::consts::PI).sqrt();
        assert!((vega / want - 1.0).abs() < 1e-14);
        for k in [0.0, 0.005, 0.01, 0.02] {
            let s = spec(0.01, k, SwaptionKind::Receiver);
            let sigma = 0.006;
            let v = bachelier_vega(&s, sigma).unwrap();
            assert!(v > 0.0);
            let h = 1e-7;
            let fd = (bachelier_price(&s, sigma + h).unwrap()
                - bachelier_price(&s, sigma - h).unwrap())
                / (2.0 * h);
            assert!((fd - v).abs() / v < 1e-6, "{k}: {fd} vs {v}");
        }
    }

    #[test]
    fn swap_value_cases() {
        let p = spec(0.01, 0.01, SwaptionKind::Payer);
        assert_eq!(forward_swap_value(&p), 0.0);
        let p = spec(0.02, 0.01, SwaptionKind::Payer);
        let r = spec(0.02, 0.01, SwaptionKind::Receiver);
        assert_eq!(forward_swap_value(&p), -forward_swap_value(&r));
        let unit = SwaptionSpec {
            forward: 0.02,
            strike: 0.01,
            t: 0.0,
            expiry: 1.0,
            payment_times: vec![1.0],
            accruals: vec![1.0],
            notional: 1.0,
            kind: SwaptionKind::Payer,
            curve: DiscountCurve::flat(0.0),
        };
        assert!((forward_swap_value(&unit) - 0.01).abs() < 1e-17);
    }

    #[test]
    fn bachelier_limit_delta() {
        let p = params(0.0065, 0.0, 0.0, 0.0);
        for (f, k) in [(0.01, 0.01), (0.01, 0.013), (0.01, 0.002)] {
            let s = spec(f, k, SwaptionKind::Payer);
            let d = sabr_delta(&p, &s).unwrap();
            let sigma = sabr_normal_vol(&p, f, k, 0.0, 1.0).unwrap();
            assert_eq!(sigma, 0.0065);
            let want = bachelier_delta(&s, sigma).unwrap();
            assert!((d - want).abs() < 1e-9 * want.abs().max(1.0), "{d} vs {want}");
        }
        let m = hedge_position(&p, &spec(0.01, 0.01, SwaptionKind::Payer)).unwrap();
        assert!((m - 0.5).abs() < 1e-15);
        let mr = hedge_position(&p, &spec(0.01, 0.01, SwaptionKind::Receiver)).unwrap();
        assert!((mr - 0.5).abs() < 1e-15);
        // receiver: Δ = N·PVBP·(Φ − 1) < 0 and the swap sensitivity flips too
        let d = sabr_delta(&p, &spec(0.01, 0.01, SwaptionKind::Receiver)).unwrap();
        assert!(d < 0.0);
    }

    #[test]
    fn deep_itm_delta() {
        let p = params(0.01, 0.5, 0.3, -0.2);
        let s = spec(0.05, -0.02, SwaptionKind::Payer);
        let d = sabr_delta(&p, &s).unwrap();
        let full = s.notional * s.pvbp();
        assert!((d / full - 1.0).abs() < 1e-9);
    }

    #[test]
    fn delta_matches_chained_finite_difference() {
        let cases = [
            (params(0.0086, 0.5, 1.0732, 0.6506), 0.004, 0.009),
            (params(0.02, 0.5, 0.4, -0.3), 0.01, 0.0),
            (params(0.006, 0.0, 0.8, 0.2), 0.01, 0.01),
            (params(0.15, 1.0, 0.5, -0.5), 0.01, 0.02),
            (params(0.03, 0.3, 0.2, 0.1), 0.01, 0.01 + 3e-8),
        ];
        for (p, f, k) in cases {
            for kind in [SwaptionKind::Payer, SwaptionKind::Receiver] {
                let s = spec(f, k, kind);
                let delta = sabr_delta(&p, &s).unwrap();
                let h = 1e-6;
                let price = |fwd: f64| sabr_price(&p, &s.with_forward(fwd)).unwrap();
                let fd = (price(f + h) - price(f - h)) / (2.0 * h);
                assert!(
                    (delta - fd).abs() / fd.abs().max(1e-8) < 1e-4,
                    "{p:?} {f} {k}: {delta} vs {fd}"
                );
            }
        }
    }

    #[test]
    fn hedge_position_neutralises_delta() {
        let p = params(0.012, 0.5, 0.45, -0.25);
        for kind in [SwaptionKind::Payer, SwaptionKind::Receiver] {
            let s = spec(0.011, 0.009, kind);
            let m = hedge_position(&p, &s).unwrap();
            let delta = sabr_delta(&p, &s).unwrap();
            let residual = m * forward_swap_sensitivity(&s) - delta;
            assert!(residual.abs() <= 1e-12 * delta.abs());
        }
    }
}
