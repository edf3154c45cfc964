//! Published estimates for the proning cohort, shipped for side-by-side
//! display in reports. They come from a private registry and cannot be
//! recomputed here.

use crate::linprop::Method;

/// A point estimate with a 95% interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    pub mean: f64,
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub const fn new(mean: f64, lo: f64, hi: f64) -> Self {
        Self { mean, lo, hi }
    }

    pub fn overlaps(&self, other: &Interval) -> bool {
        self.lo <= other.hi && other.lo <= self.hi
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceRow {
    pub method: Method,
    pub ate: Interval,
    pub rmse: Interval,
}

const fn row(method: Method, ate: Interval, rmse: Interval) -> ReferenceRow {
    ReferenceRow { method, ate, rmse }
}

/// Randomized-trial estimate of the effect of proning on the P/F ratio (mm Hg).
pub const TARGET_TRIAL_ATE: Interval = Interval::new(15.0, 3.0, 27.0);

/// P/F ratio between 2 and 8 hours after the session start.
pub const EARLY: [ReferenceRow; 6] = [
    row(Method::Lr, Interval::new(15.31, 11.69, 19.80), Interval::new(58.48, 57.91, 59.11)),
    row(Method::DrIpw, Interval::new(14.54, 10.29, 19.00), Interval::new(59.09, 58.15, 60.10)),
    row(Method::Blocking, Interval::new(15.59, 11.44, 20.29), Interval::new(60.02, 58.27, 61.71)),
    row(Method::Bart, Interval::new(20.11, 14.17, 27.50), Interval::new(48.62, 45.12, 56.81)),
    row(Method::Tarnet, Interval::new(17.70, 8.80, 25.60), Interval::new(51.79, 50.74, 53.53)),
    row(Method::Cfr, Interval::new(18.14, 9.28, 27.35), Interval::new(51.82, 50.83, 53.52)),
];

/// P/F ratio between 12 and 24 hours after the session start.
pub const LATE: [ReferenceRow; 6] = [
    row(Method::Lr, Interval::new(14.47, 10.34, 19.34), Interval::new(53.88, 53.41, 54.58)),
    row(Method::DrIpw, Interval::new(13.53, 8.88, 19.45), Interval::new(54.14, 53.58, 54.96)),
    row(Method::Blocking, Interval::new(14.87, 9.39, 19.34), Interval::new(53.22, 51.88, 55.14)),
    row(Method::Bart, Interval::new(13.99, 6.70, 20.34), Interval::new(50.44, 47.35, 55.40)),
    row(Method::Tarnet, Interval::new(15.13, 5.66, 25.97), Interval::new(50.61, 48.80, 52.01)),
    row(Method::Cfr, Interval::new(15.26, 5.54, 24.94), Interval::new(50.59, 48.58, 51.54)),
];

/// Difference in mean outcome between prone and supine observations.
pub const UNADJUSTED_EARLY: Interval = Interval::new(12.89, 7.88, 17.22);
pub const UNADJUSTED_LATE: Interval = Interval::new(11.88, 7.88, 16.91);

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn published_ranges() {
        let span = |rows: &[ReferenceRow]| {
            let m: Vec<f64> = rows.iter().map(|r| r.ate.mean).collect();
            (m.iter().cloned().fold(f64::INFINITY, f64::min), m.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
        };
        assert_eq!(span(&EARLY), (14.54, 20.11));
        assert_eq!(span(&LATE), (13.53, 15.26));
        for r in EARLY.iter().chain(LATE.iter()) {
            assert!(r.ate.lo > 0.0 && r.ate.lo <= r.ate.mean && r.ate.mean <= r.ate.hi);
            assert!(r.ate.overlaps(&TARGET_TRIAL_ATE));
        }
    }
}
