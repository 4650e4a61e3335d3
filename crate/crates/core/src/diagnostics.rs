//! Curvature and landscape diagnostics around a latent: Hessian-vector
//! products, the dominant Hessian eigenvalue, a Hutchinson trace estimate and
//! 2-D loss slices.
//!
//! Second derivatives come from central differences of the analytic
//! gradient, so any [`Objective`] works.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::numerics::{axpy, dot, norm, scaled, Objective};
use crate::rng::{normal_vec, rademacher_vec, stream};

/// Stream used for the power-iteration start vector.
const POWER_START_SEED: u64 = 0x5eed;

/// Finite-difference step for [`hvp`]: `1e-4 * (|z| + 1)`.
pub fn default_step(z: &[f64]) -> f64 {
    1e-4 * (norm(z) + 1.0)
}

/// `H(z) v` as `(g(z + h u) - g(z - h u)) / (2h) * |v|` with `u = v / |v|`.
///
/// For unit `v` this is the plain central difference along `v`.
pub fn hvp<O: Objective + ?Sized>(objective: &O, z: &[f64], v: &[f64], h: f64) -> Result<Vec<f64>> {
    check_len("hvp latent", objective.dim(), z.len())?;
    check_len("hvp direction", z.len(), v.len())?;
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::OutOfRange(format!("hvp step {h}")));
    }
    let len = norm(v);
    if !(len > 0.0 && len.is_finite()) {
        return Err(Error::ZeroVector("hvp direction"));
    }
    let u = scaled(1.0 / len, v);
    let mut up = z.to_vec();
    axpy(h, &u, &mut up);
    let mut down = z.to_vec();
    axpy(-h, &u, &mut down);
    let g_up = objective.gradient(&up)?;
    let g_down = objective.gradient(&down)?;
    let out: Vec<f64> = g_up
        .iter()
        .zip(&g_down)
        .map(|(a, b)| (a - b) / (2.0 * h) * len)
        .collect();
    if out.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("hessian-vector product"));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Eigenvalue {
    /// Rayleigh quotient at the last iterate; carries the sign.
    pub value: f64,
    pub converged: bool,
    pub iterations: usize,
}

/// Power iteration for the magnitude-dominant Hessian eigenvalue.
pub fn top_eigenvalue<O: Objective + ?Sized>(
    objective: &O,
    z: &[f64],
    iters: usize,
    tol: f64,
) -> Result<Eigenvalue> {
    if iters == 0 {
        return Err(Error::OutOfRange("power iterations = 0".into()));
    }
    let h = default_step(z);
    let mut v = normal_vec(&mut stream(POWER_START_SEED, 0), z.len());
    let start = norm(&v);
    v = scaled(1.0 / start, &v);
    let mut lambda = f64::NAN;
    for it in 1..=iters {
        let hv = hvp(objective, z, &v, h)?;
        let next = dot(&v, &hv);
        let len = norm(&hv);
        let converged = (next - lambda).abs() <= tol * next.abs().max(1.0);
        lambda = next;
        if converged || len == 0.0 {
            return Ok(Eigenvalue {
                value: lambda,
                converged: true,
                iterations: it,
            });
        }
        if !len.is_finite() {
            return Err(Error::Breakdown);
        }
        v = scaled(1.0 / len, &hv);
    }
    Ok(Eigenvalue {
        value: lambda,
        converged: false,
        iterations: iters,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceEstimate {
    pub estimate: f64,
    /// Standard error of the probe mean; absent with a single probe.
    pub stderr: Option<f64>,
    pub probes: usize,
}

/// Hutchinson estimate `mean_k r_kᵀ H r_k` over Rademacher probes.
pub fn hessian_trace<O: Objective + ?Sized>(
    objective: &O,
    z: &[f64],
    probes: usize,
    seed: u64,
) -> Result<TraceEstimate> {
    if probes == 0 {
        return Err(Error::OutOfRange("trace probes = 0".into()));
    }
    let h = default_step(z);
    let samples = (0..probes)
        .into_par_iter()
        .map(|k| {
            let r = rademacher_vec(&mut stream(seed, k as u64), z.len());
            Ok(dot(&r, &hvp(objective, z, &r, h)?))
        })
        .collect::<Result<Vec<f64>>>()?;
    let n = probes as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let stderr = (probes > 1).then(|| {
        let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (var / n).sqrt()
    });
    Ok(TraceEstimate {
        estimate: mean,
        stderr,
        probes,
    })
}

/// Loss on the plane `z + a d1 + b d2`, shifted by one so a perfect match
/// scores zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurfaceSlice {
    pub center: Vec<f64>,
    pub d1: Vec<f64>,
    pub d2: Vec<f64>,
    pub radius: f64,
    pub resolution: usize,
    /// `loss[i][j]` sits at `(offsets[i], offsets[j])`.
    pub loss: Vec<Vec<f64>>,
}

impl SurfaceSlice {
    pub fn offsets(&self) -> Vec<f64> {
        grid_offsets(self.radius, self.resolution)
    }

    pub fn center_loss(&self) -> f64 {
        let mid = self.resolution / 2;
        self.loss[mid][mid]
    }

    /// `alpha,beta,loss` rows with full precision.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["alpha", "beta", "loss"])?;
        let offsets = self.offsets();
        for (i, a) in offsets.iter().enumerate() {
            for (j, b) in offsets.iter().enumerate() {
                w.write_record([
                    format!("{a:.16e}"),
                    format!("{b:.16e}"),
                    format!("{:.16e}", self.loss[i][j]),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// `r * (2i/(res-1) - 1)`; the middle entry of an odd grid is exactly zero.
pub fn grid_offsets(radius: f64, resolution: usize) -> Vec<f64> {
    let last = (resolution - 1) as f64;
    (0..resolution)
        .map(|i| radius * (2.0 * i as f64 / last - 1.0))
        .collect()
}

/// Two orthonormal directions by Gram-Schmidt on Gaussian draws.
pub fn random_plane(seed: u64, dim: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if dim < 2 {
        return Err(Error::OutOfRange(format!("slice needs dim >= 2, got {dim}")));
    }
    let mut rng = stream(seed, 0);
    loop {
        let a = normal_vec(&mut rng, dim);
        let mut b = normal_vec(&mut rng, dim);
        let na = norm(&a);
        if na < 1e-8 {
            continue;
        }
        let d1 = scaled(1.0 / na, &a);
        axpy(-dot(&b, &d1), &d1, &mut b);
        // a second pass removes the residual left by rounding
        axpy(-dot(&b, &d1), &d1, &mut b);
        let nb = norm(&b);
        if nb < 1e-8 {
            continue;
        }
        return Ok((d1, scaled(1.0 / nb, &b)));
    }
}

pub fn loss_surface_slice<O: Objective + ?Sized>(
    objective: &O,
    z: &[f64],
    seed: u64,
    radius: f64,
    resolution: usize,
) -> Result<SurfaceSlice> {
    if resolution < 2 {
        return Err(Error::OutOfRange(format!("resolution {resolution}")));
    }
    if !(radius >= 0.0 && radius.is_finite()) {
        return Err(Error::OutOfRange(format!("radius {radius}")));
    }
    check_len("slice center", objective.dim(), z.len())?;
    let (d1, d2) = random_plane(seed, z.len())?;
    let offsets = grid_offsets(radius, resolution);
    let loss = offsets
        .par_iter()
        .map(|&a| {
            offsets
                .iter()
                .map(|&b| {
                    let p: Vec<f64> = z
                        .iter()
                        .zip(&d1)
                        .zip(&d2)
                        .map(|((zi, u), w)| zi + a * u + b * w)
                        .collect();
                    Ok(1.0 + objective.value(&p)?)
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SurfaceSlice {
        center: z.to_vec(),
        d1,
        d2,
        radius,
        resolution,
        loss,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnosticsConfig {
    pub power_iters: usize,
    pub power_tol: f64,
    pub probes: usize,
    pub radius: f64,
    pub resolution: usize,
    pub seed: u64,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        Self {
            power_iters: 200,
            power_tol: 1e-6,
            probes: 64,
            radius: 1.0,
            resolution: 51,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlatnessStats {
    pub lambda1: f64,
    pub lambda1_converged: bool,
    pub trace: f64,
    pub trace_stderr: Option<f64>,
    pub probes: usize,
}

pub fn flatness<O: Objective + ?Sized>(
    objective: &O,
    z: &[f64],
    cfg: &DiagnosticsConfig,
) -> Result<FlatnessStats> {
    let eig = top_eigenvalue(objective, z, cfg.power_iters, cfg.power_tol)?;
    let tr = hessian_trace(objective, z, cfg.probes, cfg.seed)?;
    Ok(FlatnessStats {
        lambda1: eig.value,
        lambda1_converged: eig.converged,
        trace: tr.estimate,
        trace_stderr: tr.stderr,
        probes: tr.probes,
    })
}

/// `½ zᵀ A z + bᵀ z` with a dense symmetric `A`.
#[derive(Debug, Clone, PartialEq)]
pub struct Quadratic {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<f64>,
}

impl Quadratic {
    pub fn new(a: Vec<Vec<f64>>) -> Self {
        let b = vec![0.0; a.len()];
        Self { a, b }
    }

    pub fn diagonal(d: &[f64]) -> Self {
        let n = d.len();
        Self::new(
            (0..n)
                .map(|i| (0..n).map(|j| if i == j { d[i] } else { 0.0 }).collect())
                .collect(),
        )
    }
}

impl Objective for Quadratic {
    fn dim(&self) -> usize {
        self.b.len()
    }

    fn value(&self, z: &[f64]) -> Result<f64> {
        check_len("quadratic", self.dim(), z.len())?;
        let az: Vec<f64> = self.a.iter().map(|row| dot(row, z)).collect();
        Ok(0.5 * dot(z, &az) + dot(&self.b, z))
    }

    fn gradient(&self, z: &[f64]) -> Result<Vec<f64>> {
        check_len("quadratic", self.dim(), z.len())?;
        Ok(self
            .a
            .iter()
            .zip(&self.b)
            .map(|(row, bi)| dot(row, z) + bi)
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alsuv::AttackObjective;
    use crate::numerics::finite_difference_grad;
    use crate::worldgen::{make_encoder_ensemble, make_generator};
    use proptest::prelude::*;

    fn random_symmetric(seed: u64, n: usize) -> Vec<Vec<f64>> {
        let mut rng = stream(seed, 0);
        let raw: Vec<Vec<f64>> = (0..n).map(|_| normal_vec(&mut rng, n)).collect();
        (0..n)
            .map(|i| (0..n).map(|j| 0.5 * (raw[i][j] + raw[j][i])).collect())
            .collect()
    }

    #[test]
    fn hvp_examples() {
        let q = Quadratic::diagonal(&[3.0, 1.0]);
        let hv = hvp(&q, &[0.3, -0.2], &[1.0, 0.0], 1e-4).unwrap();
        assert!((hv[0] - 3.0).abs() <= 1e-6 && hv[1].abs() <= 1e-6);

        let linear = Quadratic {
            a: vec![vec![0.0; 3]; 3],
            b: vec![1.0, -2.0, 0.5],
        };
        let hv = hvp(&linear, &[1.0, 2.0, 3.0], &[0.0, 1.0, 0.0], 1e-4).unwrap();
        assert!(hv.iter().all(|x| x.abs() <= 1e-6));
    }

    #[test]
    fn hvp_rejects_bad_input() {
        let q = Quadratic::diagonal(&[1.0, 1.0]);
        assert!(hvp(&q, &[0.0, 0.0], &[0.0, 0.0], 1e-4).is_err());
        assert!(hvp(&q, &[0.0, 0.0], &[1.0, 0.0], 0.0).is_err());
        assert!(hvp(&q, &[0.0], &[1.0], 1e-4).is_err());
    }

    fn small_attack() -> (crate::numerics::Mlp, crate::numerics::Mlp, Vec<f64>) {
        let g = make_generator(4, 6, 10, 2).unwrap();
        let ens = make_encoder_ensemble(5, 3, 10, 5, 0.5).unwrap();
        let target = ens.seen().forward(&g.forward(&[0.2; 6]).unwrap()).unwrap();
        (g, ens.seen().clone(), target)
    }

    #[test]
    fn hvp_matches_dense_finite_difference_hessian() {
        let (g, e, t) = small_attack();
        let obj = AttackObjective::new(&g, &e, &t).unwrap();
        let z = normal_vec(&mut stream(9, 0), 6);
        // Hessian column j = d/dz_j of the gradient, by differencing the loss twice
        let f = |x: &[f64]| obj.value(x).unwrap();
        let h = 1e-4;
        let dense: Vec<Vec<f64>> = (0..6)
            .map(|j| {
                let mut up = z.clone();
                up[j] += h;
                let mut down = z.clone();
                down[j] -= h;
                let gu = finite_difference_grad(f, &up, h);
                let gd = finite_difference_grad(f, &down, h);
                gu.iter().zip(&gd).map(|(a, b)| (a - b) / (2.0 * h)).collect()
            })
            .collect();
        let mut v = normal_vec(&mut stream(9, 1), 6);
        v = scaled(1.0 / norm(&v), &v);
        let hv = hvp(&obj, &z, &v, default_step(&z)).unwrap();
        for i in 0..6 {
            let expected: f64 = (0..6).map(|j| dense[j][i] * v[j]).sum();
            assert!((hv[i] - expected).abs() <= 1e-4, "{} vs {expected}", hv[i]);
        }
    }

    #[test]
    fn hvp_is_symmetric() {
        let (g, e, t) = small_attack();
        let obj = AttackObjective::new(&g, &e, &t).unwrap();
        for seed in 0..20 {
            let mut rng = stream(seed, 3);
            let z = normal_vec(&mut rng, 6);
            let v = normal_vec(&mut rng, 6);
            let v = scaled(1.0 / norm(&v), &v);
            let w = normal_vec(&mut rng, 6);
            let w = scaled(1.0 / norm(&w), &w);
            let h = default_step(&z);
            let a = dot(&v, &hvp(&obj, &z, &w, h).unwrap());
            let b = dot(&w, &hvp(&obj, &z, &v, h).unwrap());
            assert!((a - b).abs() <= 1e-4, "{a} vs {b}");
        }
    }

    #[test]
    fn eigenvalue_examples() {
        let e = top_eigenvalue(&Quadratic::diagonal(&[3.0, 1.0]), &[0.0, 0.0], 500, 1e-14).unwrap();
        assert!((e.value - 3.0).abs() <= 1e-6 && e.converged);
        let e = top_eigenvalue(&Quadratic::diagonal(&[-5.0, 2.0]), &[1.0, 1.0], 500, 1e-14).unwrap();
        assert!((e.value + 5.0).abs() <= 1e-6, "{}", e.value);
        assert!(top_eigenvalue(&Quadratic::diagonal(&[1.0]), &[0.0], 0, 1e-6).is_err());
    }

    #[test]
    fn zero_hessian_has_zero_eigenvalue() {
        let flat = Quadratic::new(vec![vec![0.0; 3]; 3]);
        let e = top_eigenvalue(&flat, &[0.0; 3], 10, 1e-6).unwrap();
        assert_eq!(e.value, 0.0);
    }

    #[test]
    fn trace_examples() {
        let q = Quadratic::diagonal(&[3.0, 1.0]);
        for probes in [1, 5, 64] {
            let t = hessian_trace(&q, &[0.5, 0.5], probes, 2).unwrap();
            assert!((t.estimate - 4.0).abs() <= 1e-6);
            assert_eq!(t.stderr.is_some(), probes > 1);
        }
        let t = hessian_trace(&Quadratic::diagonal(&[1.0; 7]), &[0.0; 7], 16, 0).unwrap();
        assert!((t.estimate - 7.0).abs() <= 1e-6);
        assert!(hessian_trace(&q, &[0.0, 0.0], 0, 0).is_err());
    }

    #[test]
    fn slice_grid_contract() {
        let q = Quadratic::diagonal(&[1.0, 2.0, 0.5]);
        let z = [0.3, -0.1, 0.7];
        let s = loss_surface_slice(&q, &z, 4, 2.0, 3).unwrap();
        assert_eq!(s.offsets(), vec![-2.0, 0.0, 2.0]);
        assert_eq!(s.loss.len(), 3);
        assert!(s.loss.iter().all(|r| r.len() == 3));
        assert_eq!(s.center_loss(), 1.0 + q.value(&z).unwrap());
        assert!(dot(&s.d1, &s.d2).abs() <= 1e-10);
        assert!((norm(&s.d1) - 1.0).abs() <= 1e-12 && (norm(&s.d2) - 1.0).abs() <= 1e-12);
        assert!(loss_surface_slice(&q, &z, 4, 2.0, 1).is_err());
        assert!(loss_surface_slice(&Quadratic::diagonal(&[1.0]), &[0.0], 4, 1.0, 3).is_err());
    }

    #[test]
    fn attack_slice_is_nonnegative_and_centered() {
        let (g, e, t) = small_attack();
        let obj = AttackObjective::new(&g, &e, &t).unwrap();
        let z = [0.1; 6];
        let s = loss_surface_slice(&obj, &z, 1, 1.0, 11).unwrap();
        assert!(s.loss.iter().flatten().all(|v| *v >= 0.0));
        assert_eq!(s.center_loss(), 1.0 - obj.similarity(&z).unwrap());

        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1 + 121);
        assert!(text.starts_with("alpha,beta,loss\n"));
        assert!(!text.contains('\r'));
    }

    #[test]
    fn flatness_on_quadratic() {
        let q = Quadratic::diagonal(&[2.0, 0.5, 0.25]);
        let f = flatness(&q, &[0.0; 3], &DiagnosticsConfig::default()).unwrap();
        assert!((f.lambda1 - 2.0).abs() <= 1e-5);
        assert!((f.trace - 2.75).abs() <= 1e-6);
        assert_eq!(f.probes, 64);
    }

    proptest! {
        #[test]
        fn grid_is_symmetric_about_zero(r in 0.0f64..10.0, half in 1usize..30) {
            let res = 2 * half + 1;
            let o = grid_offsets(r, res);
            prop_assert_eq!(o[half], 0.0);
            prop_assert_eq!(o[0], -r);
            prop_assert_eq!(o[res - 1], r);
            for i in 0..res {
                prop_assert!((o[i] + o[res - 1 - i]).abs() <= 1e-12 * (1.0 + r));
            }
        }

        #[test]
        fn plane_is_orthonormal(seed in any::<u64>(), dim in 2usize..20) {
            let (a, b) = random_plane(seed, dim).unwrap();
            prop_assert!(dot(&a, &b).abs() <= 1e-10);
            prop_assert!((norm(&a) - 1.0).abs() <= 1e-12);
            prop_assert!((norm(&b) - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn quadratic_hvp_is_exact(seed in 0u64..1000) {
            let a = random_symmetric(seed, 4);
            let q = Quadratic::new(a.clone());
            let z = normal_vec(&mut stream(seed, 1), 4);
            let v = normal_vec(&mut stream(seed, 2), 4);
            let hv = hvp(&q, &z, &v, default_step(&z)).unwrap();
            for i in 0..4 {
                prop_assert!((hv[i] - dot(&a[i], &v)).abs() <= 1e-6);
            }
        }
    }
}
