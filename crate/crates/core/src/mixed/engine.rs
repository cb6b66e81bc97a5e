//! Penalized least squares for a linear mixed model with a d-variate
//! response (d = 1 or 2), crossed grouping factors and a per-row residual
//! covariance.
//!
//! Random effects are written `u = Λ v` with `v ~ N(0, I)` and `Λ` block
//! diagonal (one lower-triangular block per grouping factor, repeated over its
//! levels). Rows are whitened by the Cholesky factor of their residual
//! covariance, after which the marginal deviance is
//!
//! ```text
//! −2 log L = N log 2π + Σᵢ log|Σᵢ| + log|I + ΛᵀZ̃ᵀZ̃Λ| + min_{β,v} ‖ỹ − X̃β − Z̃Λv‖² + ‖v‖²
//! ```
//!
//! The normal equations are factored with the largest grouping factor
//! eliminated block by block (it has no within-factor coupling, so it causes
//! no fill among its own levels); the remaining random effects and the fixed
//! effects form one dense trailing block.
//!
//! The gradient uses only entries of `A⁻¹ = (I + ΛᵀZ̃ᵀZ̃Λ)⁻¹` inside the
//! factor's sparsity pattern, obtained by selected inversion.

use crate::error::{MmoError, Result};
use crate::linalg::{back_solve_t, cholesky_in_place, forward_solve, inverse_from_cholesky};

#[derive(Debug, Clone)]
pub(crate) struct Term {
    pub name: String,
    pub levels: usize,
    /// Random-effect covariates per row (1 for an intercept).
    pub k: usize,
    pub index: Vec<usize>,
    /// n × k row-major covariates.
    pub z: Vec<f64>,
}

/// Variance parameters in natural form.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Params {
    /// Per term, the (k·d) × (k·d) lower factor, row-major.
    pub lambda: Vec<Vec<f64>>,
    /// d × m log-sd coefficients, formant-major.
    pub gamma: Vec<f64>,
    pub rho: f64,
}

#[derive(Debug, Clone)]
pub(crate) struct Problem {
    pub n: usize,
    pub d: usize,
    pub p: usize,
    pub m: usize,
    pub y: Vec<f64>,
    pub x: Vec<f64>,
    pub v: Vec<f64>,
    pub terms: Vec<Term>,
    layout: Layout,
}

#[derive(Debug, Clone)]
struct Layout {
    first: Option<usize>,
    bf: usize,
    n_first: usize,
    /// Offset of each term's block inside the trailing system (None for `first`).
    trail_offset: Vec<Option<usize>>,
    /// Random part of the trailing block.
    dr: usize,
    /// Full trailing size (random + fixed).
    dt: usize,
    /// Trailing columns touched by one row, and how many of them are random.
    r: usize,
    rr: usize,
    trail: Vec<usize>,
    coupled: Vec<Vec<usize>>,
    coupled_rand: Vec<usize>,
    pos: Vec<usize>,
}

impl Problem {
    pub fn new(d: usize, p: usize, m: usize, y: Vec<f64>, x: Vec<f64>, v: Vec<f64>, terms: Vec<Term>) -> Self {
        let n = y.len() / d;
        assert_eq!(x.len(), n * p);
        assert_eq!(v.len(), n * m);
        for t in &terms {
            assert_eq!(t.index.len(), n);
            assert_eq!(t.z.len(), n * t.k);
        }
        let layout = Layout::new(n, d, p, &terms);
        Problem {
            n,
            d,
            p,
            m,
            y,
            x,
            v,
            terms,
            layout,
        }
    }

    pub fn block(&self, t: usize) -> usize {
        self.terms[t].k * self.d
    }

    /// True when least squares on the fixed effects alone leaves no
    /// residual in any formant.
    pub fn fixed_effects_interpolate(&self) -> bool {
        let (n, p, d) = (self.n, self.p, self.d);
        let mut xtx = vec![0.0; p * p];
        for i in 0..n {
            let xi = &self.x[i * p..(i + 1) * p];
            for a in 0..p {
                for b in 0..=a {
                    xtx[a * p + b] += xi[a] * xi[b];
                }
            }
        }
        if cholesky_in_place(&mut xtx, p).is_err() {
            return false;
        }
        (0..d).all(|f| {
            let mut b = vec![0.0; p];
            let mut scale = 0.0f64;
            for i in 0..n {
                let yi = self.y[i * d + f];
                scale = scale.max(yi.abs());
                for a in 0..p {
                    b[a] += self.x[i * p + a] * yi;
                }
            }
            forward_solve(&xtx, p, &mut b);
            back_solve_t(&xtx, p, &mut b);
            (0..n).all(|i| {
                let fit: f64 = (0..p).map(|a| self.x[i * p + a] * b[a]).sum();
                (self.y[i * d + f] - fit).abs() <= 1e-10 * (1.0 + scale)
            })
        })
    }
}

impl Layout {
    fn new(n: usize, d: usize, p: usize, terms: &[Term]) -> Self {
        let first = terms
            .iter()
            .enumerate()
            .max_by_key(|(i, t)| (t.levels * t.k, std::cmp::Reverse(*i)))
            .map(|(i, _)| i);
        let bf = first.map_or(0, |f| terms[f].k * d);
        let n_first = first.map_or(0, |f| terms[f].levels);

        let mut trail_offset = vec![None; terms.len()];
        let mut off = 0;
        let mut rr = 0;
        for (ti, t) in terms.iter().enumerate() {
            if Some(ti) == first {
                continue;
            }
            trail_offset[ti] = Some(off);
            off += t.levels * t.k * d;
            rr += t.k * d;
        }
        let dr = off;
        let dt = dr + p * d;
        let r = rr + p * d;

        let mut trail = Vec::with_capacity(n * r);
        for i in 0..n {
            for (ti, t) in terms.iter().enumerate() {
                if let Some(o) = trail_offset[ti] {
                    let b = t.k * d;
                    let base = o + t.index[i] * b;
                    trail.extend(base..base + b);
                }
            }
            trail.extend(dr..dt);
        }

        let mut coupled: Vec<Vec<usize>> = vec![Vec::new(); n_first];
        if let Some(f) = first {
            for i in 0..n {
                coupled[terms[f].index[i]].extend_from_slice(&trail[i * r..(i + 1) * r]);
            }
            for c in &mut coupled {
                c.sort_unstable();
                c.dedup();
            }
        }
        let coupled_rand = coupled.iter().map(|c| c.iter().filter(|&&g| g < dr).count()).collect();
        let mut pos = Vec::new();
        if let Some(f) = first {
            pos.reserve(n * r);
            for i in 0..n {
                let c = &coupled[terms[f].index[i]];
                for &g in &trail[i * r..(i + 1) * r] {
                    pos.push(c.binary_search(&g).expect("coupled index"));
                }
            }
        }
        Layout {
            first,
            bf,
            n_first,
            trail_offset,
            dr,
            dt,
            r,
            rr,
            trail,
            coupled,
            coupled_rand,
            pos,
        }
    }
}

/// Result of factoring the mixed-model equations at one parameter value.
#[derive(Debug, Clone)]
pub(crate) struct Factor {
    /// n × d × d lower inverse residual factors.
    tinv: Vec<f64>,
    /// n × d residual standard deviations.
    sd: Vec<f64>,
    /// n × d × (bf + r) whitened local design [ZΛ | X].
    w: Vec<f64>,
    /// Per first-term level, bf × bf Cholesky factor.
    lff: Vec<f64>,
    /// Per first-term level, |coupled| × bf off-diagonal factor rows.
    lc: Vec<Vec<f64>>,
    /// dt × dt dense trailing factor.
    lt: Vec<f64>,
    /// Spherical random-effect modes, first term.
    pub v_first: Vec<f64>,
    /// Trailing solution: spherical modes for other terms, then β.
    pub sol_t: Vec<f64>,
    /// Whitened conditional residuals, n × d.
    resid: Vec<f64>,
    pub deviance: f64,
}

const LN_2PI: f64 = 1.837_877_066_409_345_3;

impl Problem {
    /// Residual whitening for row i: (sd, tinv, log|Σᵢ|).
    fn whitening(&self, params: &Params, i: usize, sd: &mut [f64], tinv: &mut [f64]) -> f64 {
        let (d, m) = (self.d, self.m);
        let vi = &self.v[i * m..(i + 1) * m];
        let mut logdet = 0.0;
        for f in 0..d {
            let eta: f64 = vi.iter().zip(&params.gamma[f * m..(f + 1) * m]).map(|(a, b)| a * b).sum();
            sd[f] = eta.exp();
            logdet += 2.0 * eta;
        }
        if d == 1 {
            tinv[0] = 1.0 / sd[0];
        } else {
            let rho = params.rho;
            let c = (1.0 - rho * rho).sqrt();
            tinv[0] = 1.0 / sd[0];
            tinv[1] = 0.0;
            tinv[2] = -rho / (sd[0] * c);
            tinv[3] = 1.0 / (sd[1] * c);
            logdet += (1.0 - rho * rho).ln();
        }
        logdet
    }

    /// Unwhitened local design row block for row i: d × (bf + r).
    fn local_design(&self, params: &Params, i: usize, out: &mut [f64]) {
        let lay = &self.layout;
        let (d, p) = (self.d, self.p);
        let wd = lay.bf + lay.r;
        out.iter_mut().for_each(|v| *v = 0.0);
        let write_term = |ti: usize, col0: usize, out: &mut [f64]| {
            let t = &self.terms[ti];
            let b = t.k * d;
            let lam = &params.lambda[ti];
            let z = &t.z[i * t.k..(i + 1) * t.k];
            for f in 0..d {
                let row = &mut out[f * wd + col0..f * wd + col0 + b];
                for (j, &zj) in z.iter().enumerate() {
                    if zj == 0.0 {
                        continue;
                    }
                    let lrow = &lam[(f * t.k + j) * b..(f * t.k + j + 1) * b];
                    for (o, l) in row.iter_mut().zip(lrow) {
                        *o += zj * l;
                    }
                }
            }
        };
        if let Some(f0) = lay.first {
            write_term(f0, 0, out);
        }
        let mut col = lay.bf;
        for ti in 0..self.terms.len() {
            if lay.trail_offset[ti].is_some() {
                write_term(ti, col, out);
                col += self.block(ti);
            }
        }
        let xi = &self.x[i * p..(i + 1) * p];
        for f in 0..d {
            out[f * wd + col + f * p..f * wd + col + (f + 1) * p].copy_from_slice(xi);
        }
    }

    pub fn factor(&self, params: &Params) -> Result<Factor> {
        let lay = &self.layout;
        let (n, d) = (self.n, self.d);
        let (bf, r, dt, dr) = (lay.bf, lay.r, lay.dt, lay.dr);
        let wd = bf + r;

        let mut tinv = vec![0.0; n * d * d];
        let mut sd = vec![0.0; n * d];
        let mut w = vec![0.0; n * d * wd];
        let mut yt = vec![0.0; n * d];
        let mut logdet_r = 0.0;
        let mut u = vec![0.0; d * wd];
        for i in 0..n {
            logdet_r += self.whitening(params, i, &mut sd[i * d..(i + 1) * d], &mut tinv[i * d * d..(i + 1) * d * d]);
            self.local_design(params, i, &mut u);
            let ti = &tinv[i * d * d..(i + 1) * d * d];
            let wi = &mut w[i * d * wd..(i + 1) * d * wd];
            let yi = &self.y[i * d..(i + 1) * d];
            for f in 0..d {
                let mut yv = 0.0;
                for g in 0..=f {
                    let c = ti[f * d + g];
                    yv += c * yi[g];
                    for col in 0..wd {
                        wi[f * wd + col] += c * u[g * wd + col];
                    }
                }
                yt[i * d + f] = yv;
            }
        }

        // assemble
        let nf = lay.n_first;
        let mut lff = vec![0.0; nf * bf * bf];
        let mut cpl: Vec<Vec<f64>> = lay.coupled.iter().map(|c| vec![0.0; bf * c.len()]).collect();
        let mut rhs_f = vec![0.0; nf * bf];
        let mut dense = vec![0.0; dt * dt];
        let mut rhs_t = vec![0.0; dt];
        for i in 0..n {
            let wi = &w[i * d * wd..(i + 1) * d * wd];
            let trail = &lay.trail[i * r..(i + 1) * r];
            for f in 0..d {
                let row = &wi[f * wd..(f + 1) * wd];
                let yv = yt[i * d + f];
                if let Some(f0) = lay.first {
                    let l = self.terms[f0].index[i];
                    let a = &mut lff[l * bf * bf..(l + 1) * bf * bf];
                    let c = &mut cpl[l];
                    let ncl = lay.coupled[l].len();
                    let pos = &lay.pos[i * r..(i + 1) * r];
                    for ia in 0..bf {
                        let ra = row[ia];
                        if ra == 0.0 {
                            continue;
                        }
                        for ib in 0..=ia {
                            a[ia * bf + ib] += ra * row[ib];
                        }
                        let crow = &mut c[ia * ncl..(ia + 1) * ncl];
                        for (q, &pq) in pos.iter().enumerate() {
                            crow[pq] += ra * row[bf + q];
                        }
                        rhs_f[l * bf + ia] += ra * yv;
                    }
                }
                for q1 in 0..r {
                    let v1 = row[bf + q1];
                    if v1 == 0.0 {
                        continue;
                    }
                    let g1 = trail[q1];
                    let drow = &mut dense[g1 * dt..g1 * dt + g1 + 1];
                    for q2 in 0..=q1 {
                        drow[trail[q2]] += v1 * row[bf + q2];
                    }
                    rhs_t[g1] += v1 * yv;
                }
            }
        }
        for l in 0..nf {
            for a in 0..bf {
                lff[l * bf * bf + a * bf + a] += 1.0;
            }
        }
        for j in 0..dr {
            dense[j * dt + j] += 1.0;
        }

        // eliminate the first term level by level
        let mut lc: Vec<Vec<f64>> = Vec::with_capacity(nf);
        let mut cf = vec![0.0; nf * bf];
        let mut col = vec![0.0; bf];
        for l in 0..nf {
            let lblock = &mut lff[l * bf * bf..(l + 1) * bf * bf];
            cholesky_in_place(lblock, bf).map_err(|_| {
                MmoError::SingularSystem(format!("{} level {l}", self.terms[lay.first.unwrap()].name))
            })?;
            let c = &cpl[l];
            let gl = &lay.coupled[l];
            let ncl = gl.len();
            let mut rows = vec![0.0; ncl * bf];
            for j in 0..ncl {
                for a in 0..bf {
                    col[a] = c[a * ncl + j];
                }
                forward_solve(lblock, bf, &mut col);
                rows[j * bf..(j + 1) * bf].copy_from_slice(&col);
            }
            for j1 in 0..ncl {
                let g1 = gl[j1];
                let r1 = &rows[j1 * bf..(j1 + 1) * bf];
                let drow = &mut dense[g1 * dt..g1 * dt + g1 + 1];
                for j2 in 0..=j1 {
                    let r2 = &rows[j2 * bf..(j2 + 1) * bf];
                    let s: f64 = r1.iter().zip(r2).map(|(a, b)| a * b).sum();
                    drow[gl[j2]] -= s;
                }
            }
            let cfl = &mut cf[l * bf..(l + 1) * bf];
            cfl.copy_from_slice(&rhs_f[l * bf..(l + 1) * bf]);
            forward_solve(lblock, bf, cfl);
            for j in 0..ncl {
                let s: f64 = rows[j * bf..(j + 1) * bf].iter().zip(cfl.iter()).map(|(a, b)| a * b).sum();
                rhs_t[gl[j]] -= s;
            }
            lc.push(rows);
        }

        cholesky_in_place(&mut dense, dt).map_err(|j| {
            MmoError::SingularSystem(if j < dr {
                "random effects".to_string()
            } else {
                "fixed effects".to_string()
            })
        })?;
        let lt = dense;
        let mut sol_t = rhs_t;
        forward_solve(&lt, dt, &mut sol_t);
        back_solve_t(&lt, dt, &mut sol_t);

        let mut v_first = cf;
        for l in 0..nf {
            let gl = &lay.coupled[l];
            let rows = &lc[l];
            let vl = &mut v_first[l * bf..(l + 1) * bf];
            for (j, &g) in gl.iter().enumerate() {
                for a in 0..bf {
                    vl[a] -= rows[j * bf + a] * sol_t[g];
                }
            }
            back_solve_t(&lff[l * bf * bf..(l + 1) * bf * bf], bf, vl);
        }

        let mut logdet_a = 0.0;
        for l in 0..nf {
            for a in 0..bf {
                logdet_a += 2.0 * lff[l * bf * bf + a * bf + a].ln();
            }
        }
        for j in 0..dr {
            logdet_a += 2.0 * lt[j * dt + j].ln();
        }

        let mut resid = vec![0.0; n * d];
        let mut pwrss = 0.0;
        for i in 0..n {
            let wi = &w[i * d * wd..(i + 1) * d * wd];
            let trail = &lay.trail[i * r..(i + 1) * r];
            let vf = lay
                .first
                .map(|f0| &v_first[self.terms[f0].index[i] * bf..(self.terms[f0].index[i] + 1) * bf]);
            for f in 0..d {
                let row = &wi[f * wd..(f + 1) * wd];
                let mut fit = 0.0;
                if let Some(vf) = vf {
                    fit += row[..bf].iter().zip(vf).map(|(a, b)| a * b).sum::<f64>();
                }
                fit += row[bf..].iter().zip(trail).map(|(a, &g)| a * sol_t[g]).sum::<f64>();
                let e = yt[i * d + f] - fit;
                resid[i * d + f] = e;
                pwrss += e * e;
            }
        }
        pwrss += v_first.iter().map(|v| v * v).sum::<f64>();
        pwrss += sol_t[..dr].iter().map(|v| v * v).sum::<f64>();

        let deviance = (n * d) as f64 * LN_2PI + logdet_r + logdet_a + pwrss;
        if !deviance.is_finite() {
            return Err(MmoError::SingularSystem("non-finite deviance".into()));
        }
        Ok(Factor {
            tinv,
            sd,
            w,
            lff,
            lc,
            lt,
            v_first,
            sol_t,
            resid,
            deviance,
        })
    }

    /// Fixed effects as d columns of length p (formant-major).
    pub fn beta(&self, fac: &Factor) -> Vec<f64> {
        fac.sol_t[self.layout.dr..].to_vec()
    }

    /// Lower factor (pd × pd) of the fixed-effect precision `X̃ᵀ Ṽ⁻¹ X̃`.
    pub fn beta_precision_factor(&self, fac: &Factor) -> Vec<f64> {
        let (dr, dt) = (self.layout.dr, self.layout.dt);
        let q = dt - dr;
        let mut out = vec![0.0; q * q];
        for a in 0..q {
            for b in 0..=a {
                out[a * q + b] = fac.lt[(dr + a) * dt + dr + b];
            }
        }
        out
    }

    /// Conditional modes `u = Λ v` per term, levels × (k·d), row-major.
    pub fn random_effects(&self, params: &Params, fac: &Factor) -> Vec<Vec<f64>> {
        let lay = &self.layout;
        (0..self.terms.len())
            .map(|ti| {
                let t = &self.terms[ti];
                let b = t.k * self.d;
                let lam = &params.lambda[ti];
                let vs: &[f64] = match lay.trail_offset[ti] {
                    None => &fac.v_first,
                    Some(o) => &fac.sol_t[o..o + t.levels * b],
                };
                let mut u = vec![0.0; t.levels * b];
                for l in 0..t.levels {
                    for a in 0..b {
                        u[l * b + a] = (0..=a).map(|c| lam[a * b + c] * vs[l * b + c]).sum();
                    }
                }
                u
            })
            .collect()
    }

    /// Partial derivatives of the deviance with respect to the entries of
    /// each Λ block (b × b, row-major), each γ coefficient, and ρ.
    pub fn gradient(&self, params: &Params, fac: &Factor) -> Gradient {
        let lay = &self.layout;
        let (n, d, m) = (self.n, self.d, self.m);
        let (bf, r, rr, dt, dr) = (lay.bf, lay.r, lay.rr, lay.dt, lay.dr);
        let wd = bf + r;
        let nf = lay.n_first;

        // dense trailing random inverse
        let mut ltr = vec![0.0; dr * dr];
        for a in 0..dr {
            ltr[a * dr..a * dr + a + 1].copy_from_slice(&fac.lt[a * dt..a * dt + a + 1]);
        }
        let s = inverse_from_cholesky(&ltr, dr);

        // selected inverse for each first-term level
        let mut zll = vec![0.0; nf * bf * bf];
        let mut zc: Vec<Vec<f64>> = Vec::with_capacity(nf);
        for l in 0..nf {
            let lblock = &fac.lff[l * bf * bf..(l + 1) * bf * bf];
            let cr = lay.coupled_rand[l];
            let gl = &lay.coupled[l];
            let rows = &fac.lc[l];
            // M = Lc_r L⁻¹
            let mut mrows = rows[..cr * bf].to_vec();
            for j in 0..cr {
                back_solve_t(lblock, bf, &mut mrows[j * bf..(j + 1) * bf]);
            }
            // Zc = −S[c,c] M
            let mut z = vec![0.0; cr * bf];
            for j1 in 0..cr {
                let srow = &s[gl[j1] * dr..(gl[j1] + 1) * dr];
                let zr = &mut z[j1 * bf..(j1 + 1) * bf];
                for j2 in 0..cr {
                    let sv = srow[gl[j2]];
                    if sv == 0.0 {
                        continue;
                    }
                    for a in 0..bf {
                        zr[a] -= sv * mrows[j2 * bf + a];
                    }
                }
            }
            // Zll = (L Lᵀ)⁻¹ − L⁻ᵀ (Lc_rᵀ Zc)
            let mut pm = vec![0.0; bf * bf];
            for j in 0..cr {
                for a in 0..bf {
                    let la = rows[j * bf + a];
                    for b in 0..bf {
                        pm[a * bf + b] += la * z[j * bf + b];
                    }
                }
            }
            let mut col = vec![0.0; bf];
            let base = inverse_from_cholesky(lblock, bf);
            let zl = &mut zll[l * bf * bf..(l + 1) * bf * bf];
            for b in 0..bf {
                for a in 0..bf {
                    col[a] = pm[a * bf + b];
                }
                back_solve_t(lblock, bf, &mut col);
                for a in 0..bf {
                    zl[a * bf + b] = base[a * bf + b] - col[a];
                }
            }
            zc.push(z);
        }

        // term block positions inside a row's random index set J
        let mut j_off = vec![0usize; self.terms.len()];
        {
            let mut o = bf;
            for ti in 0..self.terms.len() {
                if lay.trail_offset[ti].is_some() {
                    j_off[ti] = o;
                    o += self.block(ti);
                }
            }
        }

        let nj = bf + rr;
        let mut e: Vec<Vec<f64>> = self.terms.iter().map(|t| vec![0.0; (t.k * d) * (t.k * d)]).collect();
        let mut g_gamma = vec![0.0; d * m];
        let mut g_rho = 0.0;
        let mut ainv = vec![0.0; nj * nj];
        let mut kmat = vec![0.0; nj * d];
        let mut ztil: Vec<f64> = Vec::new();
        for i in 0..n {
            let wi = &fac.w[i * d * wd..(i + 1) * d * wd];
            let trail = &lay.trail[i * r..i * r + rr];
            let ei = &fac.resid[i * d..(i + 1) * d];
            let ti = &fac.tinv[i * d * d..(i + 1) * d * d];

            // A⁻¹ restricted to J
            if let Some(f0) = lay.first {
                let l = self.terms[f0].index[i];
                let zl = &zll[l * bf * bf..(l + 1) * bf * bf];
                for a in 0..bf {
                    ainv[a * nj..a * nj + bf].copy_from_slice(&zl[a * bf..(a + 1) * bf]);
                }
                let pos = &lay.pos[i * r..i * r + rr];
                let z = &zc[l];
                for (q, &pq) in pos.iter().enumerate() {
                    for a in 0..bf {
                        let v = z[pq * bf + a];
                        ainv[(bf + q) * nj + a] = v;
                        ainv[a * nj + bf + q] = v;
                    }
                }
            }
            for q1 in 0..rr {
                let srow = &s[trail[q1] * dr..(trail[q1] + 1) * dr];
                for q2 in 0..rr {
                    ainv[(bf + q1) * nj + bf + q2] = srow[trail[q2]];
                }
            }

            // K = A⁻¹_JJ Uᵀ, U = whitened ZΛ on J
            for a in 0..nj {
                let arow = &ainv[a * nj..(a + 1) * nj];
                for f in 0..d {
                    let urow = &wi[f * wd..f * wd + nj];
                    kmat[a * d + f] = arow.iter().zip(urow).map(|(x, y)| x * y).sum();
                }
            }
            // V̄⁻¹ᵢᵢ = I − U K
            let mut vbar = [0.0; 4];
            for f in 0..d {
                for g in 0..d {
                    let urow = &wi[f * wd..f * wd + nj];
                    let s: f64 = (0..nj).map(|a| urow[a] * kmat[a * d + g]).sum();
                    vbar[f * d + g] = if f == g { 1.0 } else { 0.0 } - s;
                }
            }

            // Λ-entry derivatives
            for (tix, t) in self.terms.iter().enumerate() {
                let b = t.k * d;
                let o = if Some(tix) == lay.first { 0 } else { j_off[tix] };
                let z = &t.z[i * t.k..(i + 1) * t.k];
                // Z̃ = Tinv (I ⊗ zᵀ): d × b
                ztil.clear();
                ztil.resize(d * b, 0.0);
                for f in 0..d {
                    for g in 0..=f {
                        let c = ti[f * d + g];
                        for (j, &zj) in z.iter().enumerate() {
                            ztil[f * b + g * t.k + j] = c * zj;
                        }
                    }
                }
                let vhat: &[f64] = match lay.trail_offset[tix] {
                    None => {
                        let l = t.index[i];
                        &fac.v_first[l * b..(l + 1) * b]
                    }
                    Some(off) => {
                        let base = off + t.index[i] * b;
                        &fac.sol_t[base..base + b]
                    }
                };
                let et = &mut e[tix];
                for j in 0..b {
                    let mut ze = 0.0;
                    for f in 0..d {
                        ze += ztil[f * b + j] * ei[f];
                    }
                    if ze == 0.0 && (0..d).all(|f| ztil[f * b + j] == 0.0) {
                        continue;
                    }
                    for k in 0..=j {
                        let mut acc = 0.0;
                        for f in 0..d {
                            acc += kmat[(o + k) * d + f] * ztil[f * b + j];
                        }
                        et[j * b + k] += 2.0 * acc - 2.0 * ze * vhat[k];
                    }
                }
            }

            // residual-covariance derivatives: Q = Tinvᵀ (V̄⁻¹ − ẽẽᵀ) Tinv
            let mut inner = [0.0; 4];
            for f in 0..d {
                for g in 0..d {
                    inner[f * d + g] = vbar[f * d + g] - ei[f] * ei[g];
                }
            }
            let mut q = [0.0; 4];
            for a in 0..d {
                for b in 0..d {
                    let mut acc = 0.0;
                    for f in 0..d {
                        for g in 0..d {
                            acc += ti[f * d + a] * inner[f * d + g] * ti[g * d + b];
                        }
                    }
                    q[a * d + b] = acc;
                }
            }
            let sdi = &fac.sd[i * d..(i + 1) * d];
            let vi = &self.v[i * m..(i + 1) * m];
            if d == 1 {
                let dl = 2.0 * sdi[0] * sdi[0] * q[0];
                for a in 0..m {
                    g_gamma[a] += vi[a] * dl;
                }
            } else {
                let rho = params.rho;
                let (s1, s2) = (sdi[0], sdi[1]);
                let cross = 2.0 * rho * s1 * s2 * q[1];
                let dl1 = 2.0 * s1 * s1 * q[0] + cross;
                let dl2 = 2.0 * s2 * s2 * q[3] + cross;
                for a in 0..m {
                    g_gamma[a] += vi[a] * dl1;
                    g_gamma[m + a] += vi[a] * dl2;
                }
                g_rho += 2.0 * s1 * s2 * q[1];
            }
        }
        Gradient {
            lambda: e,
            gamma: g_gamma,
            rho: g_rho,
        }
    }
}

/// Deviance derivatives in natural coordinates; `lambda[t][j*b+k]` for j ≥ k.
#[derive(Debug, Clone)]
pub(crate) struct Gradient {
    pub lambda: Vec<Vec<f64>>,
    pub gamma: Vec<f64>,
    /// Derivative with respect to ρ itself.
    pub rho: f64,
}
