//! The feedback function `f` through which the loss acts on every particle.

use serde::{Deserialize, Serialize};

use crate::error::{domain, invalid, Result};

/// Feedback function on `[0, 1]` with `f(0) = 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "FeedbackRepr", into = "FeedbackRepr")]
pub enum FeedbackFn {
    /// `f(x) = x`.
    Linear,
    /// `f(x) = −log(1 − x)` on `[0, 1)`.
    NegLog,
    /// Linear interpolation through `(x_i, y_i)` with `x_0 = 0`,
    /// `x_last = 1` and `y_0 = 0`.
    Table { xs: Vec<f64>, ys: Vec<f64> },
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FeedbackRepr {
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    table: Option<Vec<[f64; 2]>>,
}

impl TryFrom<FeedbackRepr> for FeedbackFn {
    type Error = crate::Error;
    fn try_from(r: FeedbackRepr) -> Result<Self> {
        match (r.kind.as_str(), r.table) {
            ("linear", None) => Ok(FeedbackFn::Linear),
            ("neglog", None) => Ok(FeedbackFn::NegLog),
            ("table", Some(t)) => FeedbackFn::table(
                t.iter().map(|p| p[0]).collect(),
                t.iter().map(|p| p[1]).collect(),
            ),
            ("table", None) => invalid("feedback kind \"table\" needs a table"),
            (k @ ("linear" | "neglog"), Some(_)) => {
                invalid(format!("feedback kind \"{k}\" takes no table"))
            }
            (k, _) => invalid(format!("unknown feedback kind \"{k}\"")),
        }
    }
}

impl From<FeedbackFn> for FeedbackRepr {
    fn from(f: FeedbackFn) -> Self {
        match f {
            FeedbackFn::Linear => FeedbackRepr {
                kind: "linear".into(),
                table: None,
            },
            FeedbackFn::NegLog => FeedbackRepr {
                kind: "neglog".into(),
                table: None,
            },
            FeedbackFn::Table { xs, ys } => FeedbackRepr {
                kind: "table".into(),
                table: Some(xs.into_iter().zip(ys).map(|(x, y)| [x, y]).collect()),
            },
        }
    }
}

impl FeedbackFn {
    pub fn table(xs: Vec<f64>, ys: Vec<f64>) -> Result<Self> {
        if xs.len() < 2 || xs.len() != ys.len() {
            return invalid("a feedback table needs at least two (x, y) pairs");
        }
        if xs.iter().chain(&ys).any(|v| !v.is_finite()) {
            return invalid("feedback table entries must be finite");
        }
        if xs.windows(2).any(|w| w[1] <= w[0]) {
            return invalid("feedback table abscissae must be strictly increasing");
        }
        if xs[0] != 0.0 || *xs.last().unwrap() != 1.0 {
            return invalid("feedback table must span exactly [0, 1]");
        }
        if ys[0] != 0.0 {
            return invalid(format!("feedback table has f(0) = {} but f(0) = 0 is required", ys[0]));
        }
        Ok(FeedbackFn::Table { xs, ys })
    }

    pub fn is_linear(&self) -> bool {
        matches!(self, FeedbackFn::Linear)
    }

    /// `f(x)`, defined on `[0, 1]` (`[0, 1)` for the logarithmic kind).
    pub fn eval(&self, x: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&x) {
            return domain(format!("feedback argument {x} outside [0, 1]"));
        }
        if matches!(self, FeedbackFn::NegLog) && x >= 1.0 {
            return domain("−log(1 − x) is undefined at x = 1");
        }
        Ok(self.eval_clamped(x))
    }

    /// `f` extended by clamping its argument to `[0, 1]`; the logarithmic
    /// kind returns `+∞` at and beyond 1.
    pub fn eval_clamped(&self, x: f64) -> f64 {
        let x = x.clamp(0.0, 1.0);
        match self {
            FeedbackFn::Linear => x,
            FeedbackFn::NegLog => {
                if x >= 1.0 {
                    f64::INFINITY
                } else {
                    -(-x).ln_1p()
                }
            }
            FeedbackFn::Table { xs, ys } => {
                let j = xs.partition_point(|&b| b <= x).clamp(1, xs.len() - 1);
                let (x0, x1) = (xs[j - 1], xs[j]);
                ys[j - 1] + (ys[j] - ys[j - 1]) * (x - x0) / (x1 - x0)
            }
        }
    }

    /// `‖f‖_{Lip(x)}`, the Lipschitz constant of `f` on `[0, x]`.
    pub fn lipschitz_constant(&self, x: f64) -> Result<f64> {
        if !(0.0..1.0).contains(&x) {
            return domain(format!("Lipschitz constant requested at {x}, outside [0, 1)"));
        }
        Ok(match self {
            FeedbackFn::Linear => 1.0,
            // convex and increasing: the steepest slope on [0, x] is f'(x)
            FeedbackFn::NegLog => 1.0 / (1.0 - x),
            FeedbackFn::Table { xs, ys } => xs
                .windows(2)
                .zip(ys.windows(2))
                .take_while(|(w, _)| w[0] <= x)
                .map(|(w, v)| ((v[1] - v[0]) / (w[1] - w[0])).abs())
                .fold(0.0, f64::max),
        })
    }

    pub fn is_nondecreasing(&self) -> bool {
        match self {
            FeedbackFn::Linear | FeedbackFn::NegLog => true,
            FeedbackFn::Table { ys, .. } => ys.windows(2).all(|w| w[1] >= w[0]),
        }
    }

    /// Points in `(0, 1)` where `f` is not differentiable.
    pub fn kinks(&self) -> &[f64] {
        match self {
            FeedbackFn::Table { xs, .. } => &xs[1..xs.len() - 1],
            _ => &[],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn eval_examples() {
        assert_eq!(FeedbackFn::Linear.eval(0.3).unwrap(), 0.3);
        assert_eq!(FeedbackFn::NegLog.eval(0.0).unwrap(), 0.0);
        assert_eq!(FeedbackFn::NegLog.eval(0.5).unwrap(), 0.6931471805599453);
    }

    #[test]
    fn eval_domain_errors() {
        assert!(FeedbackFn::Linear.eval(1.2).is_err());
        assert!(FeedbackFn::Linear.eval(-0.1).is_err());
        assert!(FeedbackFn::NegLog.eval(1.0).is_err());
        assert!(FeedbackFn::Linear.eval(1.0).is_ok());
        assert_eq!(FeedbackFn::NegLog.eval_clamped(1.0), f64::INFINITY);
    }

    #[test]
    fn lipschitz_examples() {
        assert_eq!(FeedbackFn::Linear.lipschitz_constant(0.9).unwrap(), 1.0);
        assert_eq!(FeedbackFn::NegLog.lipschitz_constant(0.5).unwrap(), 2.0);
        assert!(FeedbackFn::NegLog.lipschitz_constant(1.0).is_err());
        let t = FeedbackFn::table(vec![0.0, 0.5, 1.0], vec![0.0, 0.5, 2.0]).unwrap();
        assert_eq!(t.lipschitz_constant(0.25).unwrap(), 1.0);
        assert_eq!(t.lipschitz_constant(0.5).unwrap(), 3.0);
    }

    #[test]
    fn table_requires_zero_at_origin() {
        assert!(FeedbackFn::table(vec![0.0, 1.0], vec![0.1, 1.0]).is_err());
        assert!(FeedbackFn::table(vec![0.0, 0.9], vec![0.0, 1.0]).is_err());
        let t = FeedbackFn::table(vec![0.0, 0.5, 1.0], vec![0.0, 1.0, 0.5]).unwrap();
        assert!(!t.is_nondecreasing());
        assert!((t.eval(0.75).unwrap() - 0.75).abs() < 1e-15);
    }

    #[test]
    fn json_round_trip() {
        let t = FeedbackFn::table(vec![0.0, 1.0], vec![0.0, 2.0]).unwrap();
        let s = serde_json::to_string(&t).unwrap();
        assert_eq!(s, r#"{"kind":"table","table":[[0.0,0.0],[1.0,2.0]]}"#);
        assert_eq!(serde_json::from_str::<FeedbackFn>(&s).unwrap(), t);
        assert_eq!(
            serde_json::from_str::<FeedbackFn>(r#"{"kind":"neglog"}"#).unwrap(),
            FeedbackFn::NegLog
        );
        assert!(serde_json::from_str::<FeedbackFn>(r#"{"kind":"cubic"}"#).is_err());
    }

    proptest! {
        #[test]
        fn monotone_kinds(x in 0.0f64..0.999, y in 0.0f64..0.999) {
            let (lo, hi) = if x <= y { (x, y) } else { (y, x) };
            for f in [FeedbackFn::Linear, FeedbackFn::NegLog] {
                prop_assert!(f.eval(lo).unwrap() <= f.eval(hi).unwrap());
                prop_assert!(f.lipschitz_constant(lo).unwrap() <= f.lipschitz_constant(hi).unwrap());
            }
        }
    }
}
