use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const Q_MIN: u32 = 1;
pub const Q_MAX: u32 = 256;
pub const P_MIN: i32 = -32;
pub const P_MAX: i32 = 0;

/// A scale `q * 2^p` with `q` in `[1, 256]` and `p` in `[-32, 0]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DyadicScale {
    pub q: u32,
    pub p: i32,
}

impl DyadicScale {
    pub fn new(q: u32, p: i32) -> Result<Self> {
        if !(Q_MIN..=Q_MAX).contains(&q) || !(P_MIN..=P_MAX).contains(&p) {
            return Err(Error::Parameter(format!("dyadic pair ({q}, {p}) out of range")));
        }
        Ok(Self { q, p })
    }

    pub fn value(self) -> f64 {
        self.q as f64 * 2f64.powi(self.p)
    }

    pub fn rel_error(self, s: f64) -> f64 {
        (self.value() - s).abs() / s
    }

    /// `x * q` shifted right by `-p`, rounding half away from zero.
    pub fn apply(self, x: i64) -> Result<i64> {
        let v = (x as i128) * self.q as i128;
        let out = shift_round(v, (-self.p) as u32);
        i64::try_from(out).map_err(|_| Error::Parameter(format!("rescale of {x} overflows")))
    }
}

/// Arithmetic right shift by `k` with round-half-away-from-zero.
pub fn shift_round(v: i128, k: u32) -> i128 {
    if k == 0 {
        return v;
    }
    let half = 1i128 << (k - 1);
    if v >= 0 {
        (v + half) >> k
    } else {
        -((-v + half) >> k)
    }
}

/// The `(q, p)` pair closest to `s` in relative error, smaller `q` on ties.
pub fn decompose_scale(s: f64) -> Result<DyadicScale> {
    let lo = 2f64.powi(P_MIN);
    let hi = Q_MAX as f64;
    if !(s.is_finite() && (lo..=hi).contains(&s)) {
        return Err(Error::Range(s));
    }
    let mut best: Option<(f64, DyadicScale)> = None;
    for p in P_MIN..=P_MAX {
        let t = s * 2f64.powi(-p);
        let f = t.floor();
        for cand in [f, f + 1.0] {
            let q = cand.clamp(Q_MIN as f64, Q_MAX as f64) as u32;
            let d = DyadicScale { q, p };
            let e = d.rel_error(s);
            let better = match best {
                None => true,
                Some((be, bd)) => e < be || (e == be && q < bd.q),
            };
            if better {
                best = Some((e, d));
            }
        }
    }
    Ok(best.expect("non-empty grid").1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Independent oracle: every pair on the grid.
    fn exhaustive(s: f64) -> (f64, DyadicScale) {
        let mut best = (f64::INFINITY, DyadicScale { q: 0, p: 0 });
        for q in Q_MIN..=Q_MAX {
            for p in P_MIN..=P_MAX {
                let e = ((q as f64) * 2f64.powi(p) - s).abs() / s;
                if e < best.0 || (e == best.0 && q < best.1.q) {
                    best = (e, DyadicScale { q, p });
                }
            }
        }
        best
    }

    #[test]
    fn exact_power_of_two() {
        assert_eq!(decompose_scale(1.0 / 128.0).unwrap(), DyadicScale { q: 1, p: -7 });
        assert_eq!(decompose_scale(1.0).unwrap(), DyadicScale { q: 1, p: 0 });
        assert_eq!(decompose_scale(256.0).unwrap(), DyadicScale { q: 256, p: 0 });
    }

    #[test]
    fn one_tenth() {
        let d = decompose_scale(0.1).unwrap();
        assert_eq!(d, DyadicScale { q: 205, p: -11 });
        assert!((d.rel_error(0.1) - 9.765625e-4).abs() < 1e-12);
    }

    #[test]
    fn two_over_255() {
        let s = 2.0 / 255.0;
        let d = decompose_scale(s).unwrap();
        let (e, o) = exhaustive(s);
        assert_eq!(d, o);
        assert_eq!(d, DyadicScale { q: 129, p: -14 });
        // frozen from the exhaustive oracle
        assert!((e - 3.875732421875e-3).abs() < 1e-12, "{e}");
    }

    #[test]
    fn outside_range_is_error() {
        assert!(matches!(decompose_scale(300.0), Err(Error::Range(_))));
        assert!(matches!(decompose_scale(1e-12), Err(Error::Range(_))));
        assert!(decompose_scale(0.0).is_err());
        assert!(decompose_scale(f64::NAN).is_err());
    }

    #[test]
    fn rescale_rounds_half_away() {
        let half = DyadicScale { q: 1, p: -1 };
        assert_eq!(half.apply(3).unwrap(), 2);
        assert_eq!(half.apply(-3).unwrap(), -2);
        assert_eq!(half.apply(2).unwrap(), 1);
        let d = DyadicScale { q: 205, p: -11 };
        assert_eq!(d.apply(100).unwrap(), 10);
        assert_eq!(shift_round(5, 2), 1);
        assert_eq!(shift_round(6, 2), 2);
        assert_eq!(shift_round(-6, 2), -2);
    }

    proptest! {
        #[test]
        fn matches_exhaustive_search(e in -31.5f64..7.9) {
            let s = 2f64.powf(e);
            let d = decompose_scale(s).unwrap();
            let (err, o) = exhaustive(s);
            prop_assert_eq!(d, o);
            prop_assert!(d.rel_error(s) == err);
            // one part in 256 is the worst case at the bottom of a binade
            if e >= -25.0 {
                prop_assert!(err <= 1.0 / 256.0 + 2f64.powi(-24));
            }
        }

        #[test]
        fn rescale_matches_real_rounding(x in -1_000_000i64..1_000_000, q in 1u32..=256, p in -20i32..=0) {
            let d = DyadicScale::new(q, p).unwrap();
            let exact = x as f64 * d.value();
            prop_assert_eq!(d.apply(x).unwrap() as f64, exact.round());
        }
    }
}
