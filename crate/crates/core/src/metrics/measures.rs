//! Pairwise overlap and distance measures.

use serde::{Deserialize, Serialize};

use crate::error::{MmoError, Result};
use crate::simulate::{Gaussian2D, Sample2D};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridConfig {
    /// Grid cells per axis.
    pub resolution: usize,
    /// Grid margin beyond the joint extent, in bandwidths.
    pub padding: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            resolution: 100,
            padding: 3.0,
        }
    }
}

/// Kernel support in bandwidths.
const KERNEL_REACH: f64 = 5.0;

/// Per-axis bandwidth: pooled within-sample sd × (n₁ + n₂)^(−1/6).
pub fn pooled_bandwidth(p: &Sample2D, q: &Sample2D) -> Result<[f64; 2]> {
    let (cp, cq) = (p.cov(), q.cov());
    let (np, nq) = (p.len() as f64, q.len() as f64);
    let scale = (np + nq).powf(-1.0 / 6.0);
    let mut h = [0.0; 2];
    for a in 0..2 {
        if !(cp[a][a] > 0.0) || !(cq[a][a] > 0.0) {
            return Err(MmoError::DegenerateSample(format!("zero variance on axis {}", a + 1)));
        }
        let pooled = ((np - 1.0) * cp[a][a] + (nq - 1.0) * cq[a][a]) / (np + nq - 2.0);
        h[a] = pooled.sqrt() * scale;
    }
    Ok(h)
}

struct Grid {
    lo: [f64; 2],
    step: [f64; 2],
    res: usize,
    h: [f64; 2],
}

impl Grid {
    fn density(&self, s: &Sample2D) -> Vec<f64> {
        let r = self.res;
        let mut dens = vec![0.0; r * r];
        let mut wx = Vec::with_capacity(r);
        let mut wy = Vec::with_capacity(r);
        for p in &s.points {
            let (x0, x1) = self.window(p[0], 0);
            let (y0, y1) = self.window(p[1], 1);
            wx.clear();
            wy.clear();
            wx.extend((x0..x1).map(|i| self.weight(i, p[0], 0)));
            wy.extend((y0..y1).map(|j| self.weight(j, p[1], 1)));
            for (i, &a) in (x0..x1).zip(&wx) {
                let row = &mut dens[i * r + y0..i * r + y1];
                for (d, &b) in row.iter_mut().zip(&wy) {
                    *d += a * b;
                }
            }
        }
        dens
    }

    fn center(&self, i: usize, axis: usize) -> f64 {
        self.lo[axis] + (i as f64 + 0.5) * self.step[axis]
    }

    fn weight(&self, i: usize, x: f64, axis: usize) -> f64 {
        let u = (self.center(i, axis) - x) / self.h[axis];
        (-0.5 * u * u).exp()
    }

    fn window(&self, x: f64, axis: usize) -> (usize, usize) {
        let reach = KERNEL_REACH * self.h[axis];
        let a = ((x - reach - self.lo[axis]) / self.step[axis]).floor().max(0.0) as usize;
        let b = (((x + reach - self.lo[axis]) / self.step[axis]).ceil().max(0.0) as usize).min(self.res);
        (a.min(self.res), b)
    }
}

/// Bhattacharyya affinity of two samples from Gaussian-kernel densities on a
/// shared grid with a shared bandwidth.
pub fn ba_grid(p: &Sample2D, q: &Sample2D, cfg: &GridConfig) -> Result<f64> {
    if p.len() < 2 || q.len() < 2 {
        return Err(MmoError::DegenerateSample("fewer than 2 points".into()));
    }
    if cfg.resolution < 16 || !(cfg.padding > 0.0) {
        return Err(MmoError::Config("grid needs resolution ≥ 16 and positive padding".into()));
    }
    let h = pooled_bandwidth(p, q)?;
    if p.points == q.points {
        return Ok(1.0);
    }
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for pt in p.points.iter().chain(&q.points) {
        for a in 0..2 {
            lo[a] = lo[a].min(pt[a]);
            hi[a] = hi[a].max(pt[a]);
        }
    }
    let mut step = [0.0; 2];
    for a in 0..2 {
        lo[a] -= cfg.padding * h[a];
        hi[a] += cfg.padding * h[a];
        step[a] = (hi[a] - lo[a]) / cfg.resolution as f64;
    }
    let grid = Grid {
        lo,
        step,
        res: cfg.resolution,
        h,
    };
    let dp = grid.density(p);
    let dq = grid.density(q);
    let sp: f64 = dp.iter().sum();
    let sq: f64 = dq.iter().sum();
    let cross: f64 = dp.iter().zip(&dq).map(|(a, b)| (a * b).sqrt()).sum();
    Ok((cross / (sp * sq).sqrt()).min(1.0))
}

fn det2(m: &[[f64; 2]; 2]) -> f64 {
    m[0][0] * m[1][1] - m[0][1] * m[1][0]
}

/// Closed-form Bhattacharyya affinity of two bivariate Gaussians.
pub fn ba_gaussian(a: &Gaussian2D, b: &Gaussian2D) -> Result<f64> {
    let (da, db) = (det2(&a.cov), det2(&b.cov));
    if !(da > 0.0 && db > 0.0 && a.cov[0][0] > 0.0 && b.cov[0][0] > 0.0) {
        return Err(MmoError::SingularCovariance);
    }
    let s = [
        [(a.cov[0][0] + b.cov[0][0]) / 2.0, (a.cov[0][1] + b.cov[0][1]) / 2.0],
        [(a.cov[1][0] + b.cov[1][0]) / 2.0, (a.cov[1][1] + b.cov[1][1]) / 2.0],
    ];
    let ds = det2(&s);
    let d = [a.mean[0] - b.mean[0], a.mean[1] - b.mean[1]];
    // dᵀ S⁻¹ d with the 2×2 adjugate
    let quad = (d[0] * d[0] * s[1][1] - 2.0 * d[0] * d[1] * s[0][1] + d[1] * d[1] * s[0][0]) / ds;
    let db_dist = quad / 8.0 + 0.5 * (ds / (da * db).sqrt()).ln();
    Ok((-db_dist).exp())
}

/// Distance between the two sample centroids.
pub fn euclidean_distance(p: &Sample2D, q: &Sample2D) -> Result<f64> {
    if p.is_empty() || q.is_empty() {
        return Err(MmoError::DegenerateSample("empty sample".into()));
    }
    Ok(mean_distance(p.mean(), q.mean()))
}

pub fn mean_distance(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Pillai trace `tr(H (H + E)⁻¹)` of a two-group one-way MANOVA.
pub fn pillai(p: &Sample2D, q: &Sample2D) -> Result<f64> {
    let (np, nq) = (p.len() as f64, q.len() as f64);
    if p.len() + q.len() < 4 || p.is_empty() || q.is_empty() {
        return Err(MmoError::SingularScatter);
    }
    let (mp, mq) = (p.mean(), q.mean());
    let n = np + nq;
    let grand = [(np * mp[0] + nq * mq[0]) / n, (np * mp[1] + nq * mq[1]) / n];
    let mut hm = [[0.0; 2]; 2];
    for (m, k) in [(mp, np), (mq, nq)] {
        let d = [m[0] - grand[0], m[1] - grand[1]];
        for a in 0..2 {
            for b in 0..2 {
                hm[a][b] += k * d[a] * d[b];
            }
        }
    }
    let mut e = [[0.0; 2]; 2];
    for (s, k) in [(p, np), (q, nq)] {
        let c = s.cov();
        for a in 0..2 {
            for b in 0..2 {
                e[a][b] += c[a][b] * (k - 1.0);
            }
        }
    }
    let t = [[hm[0][0] + e[0][0], hm[0][1] + e[0][1]], [hm[1][0] + e[1][0], hm[1][1] + e[1][1]]];
    let dt = det2(&t);
    let scale = t[0][0].abs().max(t[1][1].abs());
    if !(dt > 1e-12 * scale * scale) {
        return Err(MmoError::SingularScatter);
    }
    // tr(H T⁻¹) with T⁻¹ = adj(T) / det T
    let tr = (hm[0][0] * t[1][1] - hm[0][1] * t[1][0] - hm[1][0] * t[0][1] + hm[1][1] * t[0][0]) / dt;
    Ok(tr.clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulate::stream_rng;

    fn gaussian(mean: [f64; 2], cov: [[f64; 2]; 2]) -> Gaussian2D {
        Gaussian2D { mean, cov }
    }

    fn sample(g: &Gaussian2D, n: usize, seed: u64) -> Sample2D {
        Sample2D::new(g.sample(n, &mut stream_rng(seed, 0)))
    }

    const I: [[f64; 2]; 2] = [[1.0, 0.0], [0.0, 1.0]];

    #[test]
    fn closed_form_values() {
        let a = gaussian([0.0, 0.0], I);
        assert_eq!(ba_gaussian(&a, &a).unwrap(), 1.0);
        let b = gaussian([2.0, 0.0], I);
        assert!((ba_gaussian(&a, &b).unwrap() - (-0.5f64).exp()).abs() < 1e-15);
        assert!((ba_gaussian(&a, &b).unwrap() - 0.60653).abs() < 5e-6);
        let c = gaussian([0.0, 0.0], [[4.0, 0.0], [0.0, 4.0]]);
        assert!((ba_gaussian(&a, &c).unwrap() - 0.8).abs() < 1e-12);
        assert_eq!(ba_gaussian(&a, &b).unwrap(), ba_gaussian(&b, &a).unwrap());
        let singular = gaussian([0.0, 0.0], [[1.0, 1.0], [1.0, 1.0]]);
        assert!(matches!(ba_gaussian(&a, &singular), Err(MmoError::SingularCovariance)));
    }

    #[test]
    fn closed_form_monotone_and_translation_invariant() {
        let a = gaussian([0.1, -0.2], [[0.5, 0.1], [0.1, 0.3]]);
        let mut last = 1.0 + 1e-9;
        for k in 0..20 {
            let b = gaussian([0.1 + 0.2 * k as f64, -0.2 + 0.1 * k as f64], a.cov);
            let v = ba_gaussian(&a, &b).unwrap();
            assert!(v < last);
            last = v;
        }
        let b = gaussian([1.0, 1.0], [[0.7, 0.0], [0.0, 0.2]]);
        let shift = |g: &Gaussian2D| gaussian([g.mean[0] + 3.0, g.mean[1] - 2.0], g.cov);
        assert!((ba_gaussian(&a, &b).unwrap() - ba_gaussian(&shift(&a), &shift(&b)).unwrap()).abs() < 1e-14);
    }

    #[test]
    fn grid_identity_symmetry_bounds() {
        let p = sample(&gaussian([0.0, 0.0], I), 500, 1);
        let q = sample(&gaussian([1.0, 0.5], [[2.0, 0.3], [0.3, 0.5]]), 700, 2);
        let cfg = GridConfig::default();
        assert_eq!(ba_grid(&p, &p, &cfg).unwrap(), 1.0);
        let pq = ba_grid(&p, &q, &cfg).unwrap();
        assert_eq!(pq, ba_grid(&q, &p, &cfg).unwrap());
        assert!((0.0..=1.0).contains(&pq));
    }

    #[test]
    fn grid_separated_clusters() {
        let p = sample(&gaussian([0.0, 0.0], I), 2000, 3);
        let q = sample(&gaussian([10.0, 0.0], I), 2000, 4);
        assert!(ba_grid(&p, &q, &GridConfig::default()).unwrap() < 0.01);
    }

    #[test]
    fn grid_matches_closed_form() {
        let a = gaussian([0.0, 0.0], I);
        let b = gaussian([2.0, 0.0], I);
        let v = ba_grid(&sample(&a, 50_000, 5), &sample(&b, 50_000, 6), &GridConfig::default()).unwrap();
        assert!((v - 0.6065).abs() < 0.02, "{v}");
    }

    #[test]
    fn grid_translation() {
        let p = sample(&gaussian([0.0, 0.0], I), 3000, 7);
        let q = sample(&gaussian([1.5, 0.5], [[1.5, 0.2], [0.2, 0.8]]), 3000, 8);
        let shift = |s: &Sample2D| Sample2D::new(s.points.iter().map(|p| [p[0] + 7.3, p[1] - 2.1]).collect());
        let cfg = GridConfig::default();
        let d = ba_grid(&p, &q, &cfg).unwrap() - ba_grid(&shift(&p), &shift(&q), &cfg).unwrap();
        assert!(d.abs() < 0.005, "{d}");
    }

    #[test]
    fn grid_degenerate() {
        let p = Sample2D::new(vec![[1.0, 0.0], [1.0, 1.0], [1.0, 2.0]]);
        let q = Sample2D::new(vec![[0.0, 0.0], [1.0, 1.0]]);
        assert!(matches!(ba_grid(&p, &q, &GridConfig::default()), Err(MmoError::DegenerateSample(_))));
        assert!(ba_grid(&Sample2D::new(vec![[0.0, 0.0]]), &q, &GridConfig::default()).is_err());
    }

    #[test]
    fn euclidean() {
        let p = Sample2D::new(vec![[-1.0, 0.0], [1.0, 0.0]]);
        let q = Sample2D::new(vec![[3.0, 4.0]]);
        assert_eq!(euclidean_distance(&p, &q).unwrap(), 5.0);
        assert_eq!(euclidean_distance(&q, &p).unwrap(), 5.0);
        assert_eq!(euclidean_distance(&p, &p).unwrap(), 0.0);
        assert!(euclidean_distance(&p, &Sample2D::new(vec![])).is_err());
    }

    #[test]
    fn pillai_cases() {
        // equal means
        let p = Sample2D::new(vec![[0.0, 0.0], [2.0, 1.0], [1.0, 3.0]]);
        let q = Sample2D::new(vec![[1.0, 1.0], [0.5, 2.0], [1.5, 1.0]]);
        assert!(pillai(&p, &q).unwrap() < 1e-15);

        // hand MANOVA: H = [[1, 1.5], [1.5, 2.25]], E = [[4, 3], [3, 2.5]],
        // tr(H (H+E)⁻¹) = 2.5 / 3.5
        let p = Sample2D::new(vec![[0.0, 0.0], [2.0, 1.0]]);
        let q = Sample2D::new(vec![[1.0, 1.0], [3.0, 3.0]]);
        assert!((pillai(&p, &q).unwrap() - 5.0 / 7.0).abs() < 1e-14);

        // growing separation with fixed scatter
        let spread = |dx: f64| Sample2D::new(vec![[dx, 0.0], [dx + 1.0, 0.5], [dx + 0.3, 1.0], [dx - 0.4, -0.2]]);
        let v = pillai(&spread(0.0), &spread(1e4)).unwrap();
        assert!(v > 0.999_999);

        let line = Sample2D::new(vec![[0.0, 0.0], [1.0, 1.0]]);
        let line2 = Sample2D::new(vec![[2.0, 2.0], [3.0, 3.0]]);
        assert!(matches!(pillai(&line, &line2), Err(MmoError::SingularScatter)));
    }
}
