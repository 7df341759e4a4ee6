//! Physical jump sizes and admissibility of initial conditions.
//!
//! For a sub-probability measure `ν` on `[0, ∞)` the physical jump at
//! feedback strength `α` is
//!
//! ```text
//! Δ = inf { x > 0 : ν([0, α x]) < x }
//! ```
//!
//! and, for a nondecreasing feedback `f` and current loss `L⁻`,
//!
//! ```text
//! Δ = inf { x > 0 : ν([0, α (f(x + L⁻) − f(L⁻))]) < x }.
//! ```
//!
//! Because `F(x) = ν([0, x])` is piecewise linear, the first expression is
//! solved segment by segment in closed form. The general form is solved by
//! splitting `x` at the preimages of the breakpoints of `F` and at the kinks
//! of `f`; on each piece the function `x ↦ F(φ(x)) − x` is convex, so a
//! golden-section minimisation locates the first sign change, which is then
//! refined by bisection.

use crate::error::{domain, Result};
use crate::feedback::FeedbackFn;
use crate::measure::Measure1D;

/// Bisection tolerance for the general feedback case.
pub const GENERAL_TOLERANCE: f64 = 1e-10;
const MAX_ITER: usize = 200;

/// Input to [`jump_size_general`].
#[derive(Debug, Clone)]
pub struct JumpQuery<'a> {
    pub mu: &'a Measure1D,
    pub alpha: f64,
    pub f: &'a FeedbackFn,
    pub l_minus: f64,
}

/// The physical jump size `inf{x > 0 : F(αx) < x}` for linear feedback.
///
/// Returns `0` when the shortfall occurs for arbitrarily small `x`, and the
/// total mass when nothing short of absorbing everything stops the cascade.
pub fn jump_size(mu: &Measure1D, alpha: f64) -> Result<f64> {
    if !(alpha > 0.0) {
        return domain(format!("jump size needs alpha > 0, got {alpha}"));
    }
    let bp = mu.breakpoints();
    let cdf = mu.cdf_values();
    if bp[0] > 0.0 {
        // F ≡ 0 on [0, b_0): the shortfall is immediate
        return Ok(0.0);
    }
    // walk the pieces [b_j/α, b_{j+1}/α] of g(x) = F(αx) − x
    for j in 0..bp.len() {
        let a = bp[j] / alpha;
        let g = cdf[j] - a;
        let (slope, end) = if j + 1 < bp.len() {
            let d = (cdf[j + 1] - cdf[j]) / (bp[j + 1] - bp[j]);
            (alpha * d - 1.0, bp[j + 1] / alpha)
        } else {
            (-1.0, f64::INFINITY)
        };
        if g <= 0.0 {
            if slope < 0.0 {
                return Ok(a);
            }
            // tangency or growth: the strict shortfall lies further right
            continue;
        }
        if slope < 0.0 {
            let root = a + g / (-slope);
            if root < end {
                return Ok(root);
            }
        }
    }
    unreachable!("the final piece always has a root")
}

/// The physical jump size for a general nondecreasing feedback `f`.
pub fn jump_size_general(q: &JumpQuery<'_>) -> Result<f64> {
    let JumpQuery {
        mu,
        alpha,
        f,
        l_minus,
    } = *q;
    if !(alpha > 0.0) {
        return domain(format!("jump size needs alpha > 0, got {alpha}"));
    }
    if !(0.0..1.0).contains(&l_minus) {
        return domain(format!("L⁻ = {l_minus} outside [0, 1)"));
    }
    if !f.is_nondecreasing() {
        return domain("the jump condition needs a nondecreasing feedback function");
    }
    if f.is_linear() {
        return jump_size(mu, alpha);
    }

    let f_base = f.eval_clamped(l_minus);
    let phi = |x: f64| alpha * (f.eval_clamped(l_minus + x) - f_base);
    let h = |x: f64| mu.cdf(phi(x)) - x;
    let upper = mu.total_mass().min(1.0 - l_minus);

    let mut knots = vec![0.0, upper];
    knots.extend(
        f.kinks()
            .iter()
            .map(|k| k - l_minus)
            .filter(|&x| x > 0.0 && x < upper),
    );
    let phi_upper = phi(upper);
    for &b in mu.breakpoints() {
        if b > 0.0 && b < phi_upper {
            knots.push(preimage(&phi, b, upper));
        }
    }
    knots.sort_by(f64::total_cmp);
    knots.dedup();

    for w in knots.windows(2) {
        let (a, b) = (w[0], w[1]);
        if b <= a {
            continue;
        }
        let (xmin, hmin) = golden_min(&h, a, b);
        if hmin < 0.0 {
            // h(a) ≥ 0 and h is convex on [a, b]: bisect on [a, xmin]
            let (mut lo, mut hi) = (a, xmin);
            for _ in 0..MAX_ITER {
                if hi - lo <= GENERAL_TOLERANCE * 1e-3 {
                    break;
                }
                let mid = 0.5 * (lo + hi);
                if h(mid) < 0.0 {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            // a never moved off the left end: the shortfall starts right at a
            return Ok(if lo == a && h(a) <= 0.0 { a } else { 0.5 * (lo + hi) });
        }
    }
    Ok(upper)
}

/// True when the initial measure does not trigger an immediate jump.
pub fn check_initial_admissible(mu: &Measure1D, alpha: f64, f: &FeedbackFn) -> Result<bool> {
    if alpha <= 0.0 {
        return Ok(true);
    }
    let q = JumpQuery {
        mu,
        alpha,
        f,
        l_minus: 0.0,
    };
    Ok(jump_size_general(&q)? == 0.0)
}

/// Smallest `x ∈ [0, upper]` with `phi(x) ≥ level`, for nondecreasing `phi`.
fn preimage(phi: &impl Fn(f64) -> f64, level: f64, upper: f64) -> f64 {
    let (mut lo, mut hi) = (0.0, upper);
    for _ in 0..MAX_ITER {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if phi(mid) >= level {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    hi
}

/// Minimum of a convex function on `[a, b]` by golden-section search,
/// including both endpoints as candidates.
fn golden_min(h: &impl Fn(f64) -> f64, a: f64, b: f64) -> (f64, f64) {
    const INV_PHI: f64 = 0.618_033_988_749_894_9;
    let (mut lo, mut hi) = (a, b);
    let mut c = hi - INV_PHI * (hi - lo);
    let mut d = lo + INV_PHI * (hi - lo);
    let (mut hc, mut hd) = (h(c), h(d));
    for _ in 0..MAX_ITER {
        if hi - lo <= 1e-15 * (1.0 + hi.abs()) {
            break;
        }
        if hc <= hd {
            hi = d;
            d = c;
            hd = hc;
            c = hi - INV_PHI * (hi - lo);
            hc = h(c);
        } else {
            lo = c;
            c = d;
            hc = hd;
            d = lo + INV_PHI * (hi - lo);
            hd = h(d);
        }
    }
    let mut best = if hc <= hd { (c, hc) } else { (d, hd) };
    for x in [a, b] {
        let hx = h(x);
        if hx < best.1 {
            best = (x, hx);
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stepped() -> Measure1D {
        Measure1D::from_densities(vec![0.0, 0.25, 1.0, 1.5], &[2.0, 0.0, 1.0]).unwrap()
    }

    /// Grid scan: first x on a 1e-5 lattice with F(αx) < x.
    fn scan(mu: &Measure1D, alpha: f64) -> f64 {
        let step = 1e-5;
        let mut k = 1;
        loop {
            let x = k as f64 * step;
            if mu.cdf(alpha * x) < x {
                return x - step;
            }
            k += 1;
        }
    }

    #[test]
    fn linear_examples() {
        let u = Measure1D::uniform(0.1, 0.6).unwrap();
        assert_eq!(jump_size(&u, 1.0).unwrap(), 0.0);
        let unit = Measure1D::uniform(0.0, 1.0).unwrap();
        assert_eq!(jump_size(&unit, 0.5).unwrap(), 0.0);
        let d2 = Measure1D::from_densities(vec![0.0, 0.5], &[2.0]).unwrap();
        let oracle = scan(&d2, 1.0);
        assert!((oracle - 1.0).abs() <= 2e-5);
        assert!((jump_size(&d2, 1.0).unwrap() - 1.0).abs() < 1e-12);
        let oracle = scan(&stepped(), 1.0);
        assert!((oracle - 0.5).abs() <= 2e-5);
        assert!((jump_size(&stepped(), 1.0).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn tangent_segment_is_skipped() {
        // F(x) = x on [0, 1]: equality everywhere, then shortfall after the mass ends
        let unit = Measure1D::uniform(0.0, 1.0).unwrap();
        assert!((jump_size(&unit, 1.0).unwrap() - 1.0).abs() < 1e-12);
        // tangent on [0, 0.2], then steep, then flat
        // (a lattice scan is unreliable here: F(x) = x up to rounding on [0, 0.2])
        let m = Measure1D::from_densities(vec![0.0, 0.2, 0.3, 2.0], &[1.0, 3.0, 0.1]).unwrap();
        // g(0.3) = 0.2, then g falls with slope −0.9
        let expect = 0.3 + 0.2 / 0.9;
        assert!((jump_size(&m, 1.0).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn rejects_nonpositive_alpha() {
        let u = Measure1D::uniform(0.0, 1.0).unwrap();
        assert!(jump_size(&u, 0.0).is_err());
        assert!(jump_size(&u, -1.0).is_err());
    }

    #[test]
    fn general_reduces_to_linear() {
        let m = stepped();
        for alpha in [0.3, 1.0, 2.5] {
            let q = JumpQuery {
                mu: &m,
                alpha,
                f: &FeedbackFn::Linear,
                l_minus: 0.0,
            };
            assert_eq!(jump_size_general(&q).unwrap(), jump_size(&m, alpha).unwrap());
        }
    }

    #[test]
    fn general_neglog_examples() {
        let away = Measure1D::uniform(0.1, 0.6).unwrap();
        let q = JumpQuery {
            mu: &away,
            alpha: 1.0,
            f: &FeedbackFn::NegLog,
            l_minus: 0.0,
        };
        assert_eq!(jump_size_general(&q).unwrap(), 0.0);

        let m = stepped();
        let q = JumpQuery {
            mu: &m,
            alpha: 1.0,
            f: &FeedbackFn::NegLog,
            l_minus: 0.0,
        };
        // bisection oracle on x ↦ F(−log(1−x)) − x over the flat stretch
        let h = |x: f64| m.cdf(-(1.0f64 - x).ln()) - x;
        let (mut lo, mut hi) = (0.3, 0.6);
        assert!(h(lo) > 0.0 && h(hi) < 0.0);
        for _ in 0..100 {
            let mid = 0.5 * (lo + hi);
            if h(mid) < 0.0 {
                hi = mid
            } else {
                lo = mid
            }
        }
        let got = jump_size_general(&q).unwrap();
        assert!((got - 0.5).abs() < 1e-10 && (got - hi).abs() < 1e-10, "got {got}");
    }

    #[test]
    fn general_table_matches_scan() {
        let f = FeedbackFn::table(vec![0.0, 0.3, 1.0], vec![0.0, 0.6, 1.0]).unwrap();
        let m = Measure1D::from_densities(vec![0.0, 0.2, 0.5, 1.5], &[1.0, 0.5, 0.65]).unwrap();
        let q = JumpQuery {
            mu: &m,
            alpha: 1.5,
            f: &f,
            l_minus: 0.1,
        };
        let got = jump_size_general(&q).unwrap();
        let step = 1e-6;
        let mut x = step;
        let phi = |x: f64| 1.5 * (f.eval_clamped(0.1 + x) - f.eval_clamped(0.1));
        while m.cdf(phi(x)) >= x {
            x += step;
        }
        assert!((got - x).abs() < 2e-6, "got {got}, scan {x}");
    }

    #[test]
    fn general_rejects_decreasing_table() {
        let f = FeedbackFn::table(vec![0.0, 0.5, 1.0], vec![0.0, 1.0, 0.5]).unwrap();
        let m = stepped();
        let q = JumpQuery {
            mu: &m,
            alpha: 1.0,
            f: &f,
            l_minus: 0.0,
        };
        assert!(jump_size_general(&q).is_err());
    }

    #[test]
    fn admissibility_examples() {
        let lin = FeedbackFn::Linear;
        let u = Measure1D::uniform(0.1, 0.6).unwrap();
        assert!(check_initial_admissible(&u, 4.0, &lin).unwrap());
        let d2 = Measure1D::from_densities(vec![0.0, 0.5], &[2.0]).unwrap();
        assert!(!check_initial_admissible(&d2, 1.0, &lin).unwrap());
        let unit = Measure1D::uniform(0.0, 1.0).unwrap();
        assert!(check_initial_admissible(&unit, 0.5, &lin).unwrap());
    }
}
