//! Unconstrained variance-parameter vector.
//!
//! Layout: for each random term, the free entries of its lower Cholesky
//! factor in row-major order (diagonal entries on the log scale), then the
//! variance-model coefficients (formant-major), then `atanh ρ` when the
//! residual correlation is free.

use super::engine::{Gradient, Params};

pub(crate) const LOG_SD_MIN: f64 = -12.0;
pub(crate) const LOG_SD_MAX: f64 = 5.0;
const OFFDIAG_MAX: f64 = 1e3;
const GAMMA_SLOPE_MAX: f64 = 10.0;
const ATANH_RHO_MAX: f64 = 6.0;

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct TermPattern {
    pub b: usize,
    /// Free (row, col) entries with col ≤ row.
    pub entries: Vec<(usize, usize)>,
}

impl TermPattern {
    /// Lower triangle, optionally restricted to entries inside the same
    /// formant block of size `k`.
    pub fn new(k: usize, d: usize, within_formant: bool) -> Self {
        let b = k * d;
        let entries = (0..b)
            .flat_map(|r| (0..=r).map(move |c| (r, c)))
            .filter(|&(r, c)| !within_formant || r / k == c / k)
            .collect();
        TermPattern { b, entries }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct ThetaMap {
    pub terms: Vec<TermPattern>,
    pub d: usize,
    pub m: usize,
    pub rho_free: bool,
    pub gamma_intercept_only: bool,
}

impl ThetaMap {
    pub fn len(&self) -> usize {
        self.n_lambda() + self.d * self.m + usize::from(self.rho_free)
    }

    fn n_lambda(&self) -> usize {
        self.terms.iter().map(|t| t.entries.len()).sum()
    }

    pub fn params(&self, theta: &[f64]) -> Params {
        debug_assert_eq!(theta.len(), self.len());
        let mut it = theta.iter();
        let lambda = self
            .terms
            .iter()
            .map(|t| {
                let mut l = vec![0.0; t.b * t.b];
                for &(r, c) in &t.entries {
                    let v = *it.next().unwrap();
                    l[r * t.b + c] = if r == c { v.exp() } else { v };
                }
                l
            })
            .collect();
        let gamma: Vec<f64> = it.by_ref().take(self.d * self.m).copied().collect();
        let rho = if self.rho_free { it.next().unwrap().tanh() } else { 0.0 };
        Params { lambda, gamma, rho }
    }

    /// Inverse of `params` for factors that fit the pattern; zero diagonal
    /// entries map to the lower bound.
    pub fn theta(&self, params: &Params) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        for (t, l) in self.terms.iter().zip(&params.lambda) {
            for &(r, c) in &t.entries {
                let v = l[r * t.b + c];
                out.push(if r == c {
                    if v > 0.0 {
                        v.ln().clamp(LOG_SD_MIN, LOG_SD_MAX)
                    } else {
                        LOG_SD_MIN
                    }
                } else {
                    v
                });
            }
        }
        out.extend_from_slice(&params.gamma);
        if self.rho_free {
            out.push(params.rho.clamp(-0.999_99, 0.999_99).atanh());
        }
        out
    }

    /// Chain rule from natural-coordinate derivatives to θ.
    pub fn gradient(&self, theta: &[f64], g: &Gradient) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        let mut k = 0;
        for (t, gl) in self.terms.iter().zip(&g.lambda) {
            for &(r, c) in &t.entries {
                let v = gl[r * t.b + c];
                out.push(if r == c { v * theta[k].exp() } else { v });
                k += 1;
            }
        }
        out.extend_from_slice(&g.gamma);
        if self.rho_free {
            let rho = theta[k + self.d * self.m].tanh();
            out.push(g.rho * (1.0 - rho * rho));
        }
        out
    }

    pub fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
        let mut lo = Vec::with_capacity(self.len());
        let mut hi = Vec::with_capacity(self.len());
        for t in &self.terms {
            for &(r, c) in &t.entries {
                if r == c {
                    lo.push(LOG_SD_MIN);
                    hi.push(LOG_SD_MAX);
                } else {
                    lo.push(-OFFDIAG_MAX);
                    hi.push(OFFDIAG_MAX);
                }
            }
        }
        for _ in 0..self.d {
            for a in 0..self.m {
                if a == 0 {
                    lo.push(LOG_SD_MIN);
                    hi.push(LOG_SD_MAX);
                } else if self.gamma_intercept_only {
                    lo.push(0.0);
                    hi.push(0.0);
                } else {
                    lo.push(-GAMMA_SLOPE_MAX);
                    hi.push(GAMMA_SLOPE_MAX);
                }
            }
        }
        if self.rho_free {
            lo.push(-ATANH_RHO_MAX);
            hi.push(ATANH_RHO_MAX);
        }
        (lo, hi)
    }

    /// Deterministic start: every standard deviation `sd0`, everything else 0.
    pub fn start(&self, sd0: f64) -> Vec<f64> {
        let ls = sd0.ln();
        let mut out = Vec::with_capacity(self.len());
        for t in &self.terms {
            out.extend(t.entries.iter().map(|&(r, c)| if r == c { ls } else { 0.0 }));
        }
        for _ in 0..self.d {
            out.push(ls);
            out.extend(std::iter::repeat_n(0.0, self.m - 1));
        }
        if self.rho_free {
            out.push(0.0);
        }
        out
    }

    /// Indices of the log-sd entries (random-term diagonals and γ intercepts).
    pub fn log_sd_indices(&self) -> Vec<usize> {
        let mut out = Vec::new();
        let mut k = 0;
        for t in &self.terms {
            for &(r, c) in &t.entries {
                if r == c {
                    out.push(k);
                }
                k += 1;
            }
        }
        for f in 0..self.d {
            out.push(k + f * self.m);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pattern_counts() {
        assert_eq!(TermPattern::new(4, 2, false).entries.len(), 36);
        assert_eq!(TermPattern::new(4, 2, true).entries.len(), 20);
        assert_eq!(TermPattern::new(1, 2, true).entries.len(), 2);
        assert_eq!(TermPattern::new(4, 1, false).entries.len(), 10);
    }

    #[test]
    fn round_trip() {
        let map = ThetaMap {
            terms: vec![TermPattern::new(2, 2, false), TermPattern::new(1, 2, false)],
            d: 2,
            m: 2,
            rho_free: true,
            gamma_intercept_only: false,
        };
        let theta: Vec<f64> = (0..map.len()).map(|i| 0.1 * i as f64 - 0.5).collect();
        let back = map.theta(&map.params(&theta));
        for (a, b) in theta.iter().zip(&back) {
            assert!((a - b).abs() < 1e-12);
        }
        let (lo, hi) = map.bounds();
        assert_eq!(lo.len(), map.len());
        assert!(lo.iter().zip(&hi).all(|(l, h)| l < h));
        assert_eq!(map.start(0.5).len(), map.len());
    }
}
