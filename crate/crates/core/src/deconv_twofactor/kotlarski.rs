use num_complex::Complex64;

use super::{cutoff_threshold, invert, linspace, CharFn, DensityEstimate, Provenance, RoundTrip, FREQ_POINTS, FREQ_SPAN, SPACE_POINTS};
use crate::error::{Error, Result};
use crate::stats;

/// Smallest accepted `|z|` for the cross cumulant `cum(Y3, Y3, Y4)`.
pub const CUMULANT_Z: f64 = 4.0;
const MIN_OBS: usize = 500;

/// Factor and noise components of `Y3 = W~ + eta3`, `Y4 = sigma~ W~ + eta4`.
#[derive(Debug, Clone)]
pub struct KotlarskiSplit {
    pub sigma_tilde: f64,
    /// `z`-statistic of `cum(Y3, Y3, Y4) = sigma~ kappa3(W~)`.
    pub cumulant_z: f64,
    pub cf_wtilde: CharFn,
    pub cf_eta3: CharFn,
    pub cf_eta4: CharFn,
    pub f_wtilde: DensityEstimate,
    pub f_eta3: DensityEstimate,
    pub f_eta4: DensityEstimate,
    /// Band-limited densities of the measurements themselves.
    pub f_y3: DensityEstimate,
    pub f_y4: DensityEstimate,
    pub round_trips: Vec<RoundTrip>,
}

fn ecf(data: &[f64], t: f64) -> Complex64 {
    let (mut c, mut s) = (0.0, 0.0);
    for &v in data {
        let (sn, cs) = (t * v).sin_cos();
        c += cs;
        s += sn;
    }
    Complex64::new(c, s) / data.len() as f64
}

fn centered_grid(center: f64, half: f64) -> Vec<f64> {
    linspace(center - half, center + half, SPACE_POINTS)
}

/// Split two measurements of a common non-Gaussian factor.
///
/// The loading ratio is `cum(Y3, Y4, Y4) / cum(Y3, Y3, Y4)`, which only needs
/// the noises to be independent of each other and of `W`. The characteristic
/// function of `W~` follows from
/// `log phi_W~(t) = int_0^t E[i Y3 e^{isZ}] / E[e^{isZ}] ds` with `Z = Y4 / sigma~`.
pub fn kotlarski_split(y3: &[f64], y4: &[f64]) -> Result<KotlarskiSplit> {
    let n = y3.len();
    if y4.len() != n {
        return Err(Error::Input("measurements have different lengths".into()));
    }
    if n < MIN_OBS {
        return Err(Error::InsufficientData(format!("{n} observations, need {MIN_OBS}")));
    }
    let (m3, m4) = (stats::mean(y3), stats::mean(y4));
    let a: Vec<f64> = y3.iter().map(|v| v - m3).collect();
    let b: Vec<f64> = y4.iter().map(|v| v - m4).collect();
    let nf = n as f64;
    let avg = |f: &dyn Fn(usize) -> f64| (0..n).map(f).sum::<f64>() / nf;
    let c334 = avg(&|i| a[i] * a[i] * b[i]);
    let c344 = avg(&|i| a[i] * b[i] * b[i]);
    let (caa, cbb, cab) = (avg(&|i| a[i] * a[i]), avg(&|i| b[i] * b[i]), avg(&|i| a[i] * b[i]));
    let psi: Vec<f64> = (0..n).map(|i| a[i] * a[i] * b[i] - c334 - 2.0 * cab * a[i] - caa * b[i]).collect();
    let se = stats::sd(&psi) / nf.sqrt();
    let cumulant_z = c334 / se;
    if !(cumulant_z.abs() >= CUMULANT_Z) {
        return Err(Error::NonGaussianity(format!("cum(Y3,Y3,Y4) has |z| = {:.2} < {CUMULANT_Z}", cumulant_z.abs())));
    }
    let sigma_tilde = c344 / c334;
    let var_w = cab / sigma_tilde;
    if !(var_w > 0.0) {
        return Err(Error::Degenerate(format!("implied factor variance {var_w} is not positive")));
    }

    let thr = cutoff_threshold(n);
    let half = FREQ_POINTS / 2;
    let dt = FREQ_SPAN / stats::sd(y3) / (half - 1) as f64;
    let z: Vec<f64> = y4.iter().map(|v| v / sigma_tilde).collect();
    let (mut t, mut phi_w, mut phi_y3) = (vec![], vec![], vec![]);
    let mut log_phi = Complex64::new(0.0, 0.0);
    let mut prev_r = Complex64::new(0.0, 0.0);
    for k in 0..half {
        let s = k as f64 * dt;
        let (mut pc, mut ps, mut dc, mut ds) = (0.0, 0.0, 0.0, 0.0);
        for i in 0..n {
            let (sn, cs) = (s * z[i]).sin_cos();
            pc += cs;
            ps += sn;
            dc += y3[i] * cs;
            ds += y3[i] * sn;
        }
        let phi_z = Complex64::new(pc, ps) / nf;
        if k > 0 && phi_z.norm() < thr {
            break;
        }
        // E[i Y3 e^{isZ}]
        let d = Complex64::new(-ds, dc) / nf;
        let r = d / phi_z;
        if k > 0 {
            log_phi += 0.5 * dt * (prev_r + r);
        }
        prev_r = r;
        let pw = log_phi.exp();
        if k > 0 && pw.norm() < thr {
            break;
        }
        t.push(s);
        phi_w.push(pw);
        phi_y3.push(ecf(y3, s));
    }
    if t.len() < 2 {
        return Err(Error::Regularization("factor characteristic function vanishes at the first frequency".into()));
    }
    let cf_wtilde = CharFn::new(t.clone(), phi_w.clone(), n, thr)?;
    let eta3: Vec<Complex64> = phi_y3.iter().zip(&phi_w).map(|(y, w)| y / w).collect();
    let cf_eta3 = CharFn::new(t.clone(), eta3, n, thr)?;

    // eta4 on the grid t_k / |sigma~| so that sigma~ t_k hits the factor grid.
    let s_abs = sigma_tilde.abs();
    let t4: Vec<f64> = t.iter().map(|v| v / s_abs).collect();
    let w_at: Vec<Complex64> = phi_w.iter().map(|v| if sigma_tilde < 0.0 { v.conj() } else { *v }).collect();
    let phi_y4: Vec<Complex64> = t4.iter().map(|&s| ecf(y4, s)).collect();
    let eta4: Vec<Complex64> = phi_y4.iter().zip(&w_at).map(|(y, w)| y / w).collect();
    let cf_eta4 = CharFn::new(t4.clone(), eta4, n, thr)?;

    let sd_w = var_w.sqrt();
    let sd3 = (caa - var_w).max(0.0).sqrt();
    let sd4 = (cbb - sigma_tilde * sigma_tilde * var_w).max(0.0).sqrt();
    let gw = centered_grid(m3, 6.0 * sd_w);
    let g3 = centered_grid(0.0, (6.0 * sd3).max(0.5 * sd_w));
    let g4 = centered_grid(0.0, (6.0 * sd4).max(0.5 * s_abs * sd_w));
    let gy3 = centered_grid(m3, 6.0 * caa.sqrt());
    let gy4 = centered_grid(m4, 6.0 * cbb.sqrt());
    let f_wtilde = DensityEstimate::project(gw.clone(), &invert(&t, &phi_w, &gw), Provenance::Kotlarski)?;
    let f_eta3 = DensityEstimate::project(g3.clone(), &invert(&t, &cf_eta3.values, &g3), Provenance::Kotlarski)?;
    let f_eta4 = DensityEstimate::project(g4.clone(), &invert(&t4, &cf_eta4.values, &g4), Provenance::Kotlarski)?;
    let f_y3 = DensityEstimate::project(gy3.clone(), &invert(&t, &phi_y3, &gy3), Provenance::Direct)?;
    let f_y4 = DensityEstimate::project(gy4.clone(), &invert(&t4, &phi_y4, &gy4), Provenance::Direct)?;
    let round_trips = vec![
        RoundTrip::check("W~ * eta3 = Y3", &f_wtilde, &f_eta3, &f_y3),
        RoundTrip::check("sigma~ W~ * eta4 = Y4", &f_wtilde.scaled(sigma_tilde), &f_eta4, &f_y4),
    ];
    Ok(KotlarskiSplit { sigma_tilde, cumulant_z, cf_wtilde, cf_eta3, cf_eta4, f_wtilde, f_eta3, f_eta4, f_y3, f_y4, round_trips })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dgp_oracle::{simulate, DgpSpec, Structure};
    use crate::dist::DistLaw;

    fn measurements(spec: &DgpSpec, n: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
        let s = simulate(spec, n, seed).unwrap();
        (s.y3.unwrap(), s.y4.unwrap())
    }

    /// Oracle characteristic function of a law by fine quadrature of its density.
    fn law_cf(law: &DistLaw, t: f64, lo: f64, hi: f64) -> Complex64 {
        let m = 40_000;
        let dx = (hi - lo) / m as f64;
        let mut s = Complex64::new(0.0, 0.0);
        for k in 0..m {
            let x = lo + (k as f64 + 0.5) * dx;
            s += Complex64::new(0.0, t * x).exp() * law.pdf(x);
        }
        s * dx
    }

    #[test]
    fn exponential_factor_split() {
        let spec = DgpSpec::measured_exponential(0.5, 1.0, 1.0, 0.8);
        let (y3, y4) = measurements(&spec, 100_000, 1);
        let k = kotlarski_split(&y3, &y4).unwrap();
        assert!((k.sigma_tilde - 0.8).abs() < 0.05, "{}", k.sigma_tilde);
        for d in [&k.f_wtilde, &k.f_eta3, &k.f_eta4] {
            assert!((d.integral() - 1.0).abs() < 1e-3);
            assert!(d.values.iter().all(|v| *v >= 0.0));
        }
        // estimation error against the truth seen through the same spectral window
        let w = DistLaw::centered_exponential();
        let t = &k.cf_wtilde.t;
        let phi: Vec<Complex64> = t.iter().map(|&s| law_cf(&w, s, -1.0, 40.0)).collect();
        let window = invert(t, &phi, &k.f_wtilde.grid);
        let win = DensityEstimate::project(k.f_wtilde.grid.clone(), &window, Provenance::Direct).unwrap();
        let l1 = k.f_wtilde.l1_distance(&win);
        assert!(l1 < 0.1, "L1 to band-limited truth {l1}");
        for rt in &k.round_trips {
            assert!(rt.pass, "{rt:?}");
        }
    }

    #[test]
    fn noiseless_measurements_reproduce_the_kernel_density() {
        let spec = DgpSpec::measured_exponential(0.5, 1.0, 1.0, 0.8);
        let s = simulate(&spec, 20_000, 2).unwrap();
        let y3 = s.y3.unwrap();
        // eta3 = eta4 = 0: Y3 is the factor itself
        let y4: Vec<f64> = y3.iter().map(|v| 0.8 * v).collect();
        let k = kotlarski_split(&y3, &y4).unwrap();
        assert!((k.sigma_tilde - 0.8).abs() < 1e-9);
        // the spectral cutoff acts as a sinc kernel with bandwidth 1 / cutoff
        let tc = k.cf_wtilde.cutoff;
        let sinc_kde = |x: f64| {
            y3.iter()
                .map(|v| {
                    let d = x - v;
                    if d.abs() < 1e-12 {
                        tc / std::f64::consts::PI
                    } else {
                        (tc * d).sin() / (std::f64::consts::PI * d)
                    }
                })
                .sum::<f64>()
                / y3.len() as f64
        };
        let l1 = k.f_wtilde.l1_to(sinc_kde);
        assert!(l1 < 0.05, "{l1}");
    }

    #[test]
    fn gaussian_factor_is_rejected() {
        for seed in 0..5 {
            let mut spec = DgpSpec::measured_exponential(0.5, 1.0, 1.0, 0.8);
            if let Structure::TwoFactorMeasured { w_law, .. } = &mut spec.structure {
                *w_law = DistLaw::standard_normal();
            }
            let (y3, y4) = measurements(&spec, 20_000, seed);
            assert!(matches!(kotlarski_split(&y3, &y4), Err(Error::NonGaussianity(_))), "seed {seed}");
        }
    }

    #[test]
    fn small_samples_are_rejected() {
        let v = vec![0.0; 100];
        assert!(matches!(kotlarski_split(&v, &v), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn sign_of_first_measurement_flips_the_loading() {
        let spec = DgpSpec::measured_exponential(0.5, 1.0, 1.0, 0.8);
        let (y3, y4) = measurements(&spec, 20_000, 3);
        let a = kotlarski_split(&y3, &y4).unwrap();
        let neg: Vec<f64> = y3.iter().map(|v| -v).collect();
        let b = kotlarski_split(&neg, &y4).unwrap();
        assert!((a.sigma_tilde + b.sigma_tilde).abs() < 1e-9);
    }
}
