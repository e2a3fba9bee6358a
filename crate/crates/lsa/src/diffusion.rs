//! Noise schedule, forward noising, v-prediction conversion, the
//! scheduler-weighted diffusion loss, and the discrete Euler sampling loop.

use ndarray::Array4;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::clip::LatentClip;
use crate::error::{LsaError, Result};

/// Discrete noise schedule: `sigmas[0] = sigma_max` down to
/// `sigmas[T] = 0`, strictly decreasing, length `T + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub num_steps: usize,
    sigmas: Vec<f64>,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub rho: f64,
}

impl NoiseSchedule {
    /// Karras-style power interpolation between `sigma_max` (at t = T) and
    /// `sigma_min` (at t = 1), with `sigma(0) = 0`.
    pub fn karras(num_steps: usize, sigma_min: f64, sigma_max: f64, rho: f64) -> Result<Self> {
        if num_steps < 1 {
            return Err(LsaError::invalid("NoiseSchedule", "T must be >= 1"));
        }
        if !(sigma_min > 0.0 && sigma_max >= sigma_min && rho > 0.0) {
            return Err(LsaError::invalid(
                "NoiseSchedule",
                format!("sigma_min {sigma_min}, sigma_max {sigma_max}, rho {rho}"),
            ));
        }
        let t = num_steps;
        let mut sigmas = Vec::with_capacity(t + 1);
        if t == 1 {
            sigmas.push(sigma_max);
        } else {
            let lo = sigma_min.powf(1.0 / rho);
            let hi = sigma_max.powf(1.0 / rho);
            // i runs T down to 1 so the stored order is decreasing
            for i in (1..=t).rev() {
                let frac = (t - i) as f64 / (t - 1) as f64;
                sigmas.push((hi + frac * (lo - hi)).powf(rho));
            }
        }
        sigmas.push(0.0);

        for pair in sigmas.windows(2) {
            if !(pair[0] > pair[1]) || !pair[0].is_finite() {
                return Err(LsaError::invalid(
                    "NoiseSchedule",
                    format!("sigmas not strictly decreasing: {} then {}", pair[0], pair[1]),
                ));
            }
        }
        Ok(NoiseSchedule {
            num_steps: t,
            sigmas,
            sigma_min,
            sigma_max,
            rho,
        })
    }

    /// Noise level at discrete step `t` in `0..=T` (`sigma(0) = 0`,
    /// `sigma(T) = sigma_max`).
    pub fn sigma(&self, t: usize) -> f64 {
        self.sigmas[self.num_steps - t]
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }
}

/// Network velocity output at a given noise level.
#[derive(Debug, Clone)]
pub struct VelocityPrediction {
    pub v: Array4<f64>,
    pub sigma: f64,
}

impl VelocityPrediction {
    pub fn new(v: Array4<f64>, sigma: f64) -> Result<Self> {
        if v.iter().any(|x| !x.is_finite()) {
            return Err(LsaError::NonFinite("VelocityPrediction".into()));
        }
        Ok(Self { v, sigma })
    }
}

/// c_out(sigma) = -sigma / sqrt(1 + sigma^2)
pub fn c_out(sigma: f64) -> f64 {
    -sigma / (1.0 + sigma * sigma).sqrt()
}

/// c_skip(sigma) = 1 / (1 + sigma^2)
pub fn c_skip(sigma: f64) -> f64 {
    1.0 / (1.0 + sigma * sigma)
}

/// w(sigma) = (1 + sigma^2) / sigma^2; domain error at sigma = 0.
pub fn loss_weight(sigma: f64) -> Result<f64> {
    if sigma <= 0.0 || !sigma.is_finite() {
        return Err(LsaError::invalid("loss_weight", format!("sigma = {sigma}")));
    }
    Ok((1.0 + sigma * sigma) / (sigma * sigma))
}

/// z_t = z_0 + sigma * noise. The caller controls the noise draw.
pub fn add_noise(z0: &LatentClip, sigma: f64, noise: &Array4<f64>) -> Result<LatentClip> {
    if z0.sigma != 0.0 {
        return Err(LsaError::invalid(
            "add_noise",
            format!("input latents carry sigma = {}, expected clean", z0.sigma),
        ));
    }
    if noise.dim() != z0.latents.dim() {
        return Err(LsaError::shape(
            "add_noise",
            format!("{:?}", z0.latents.dim()),
            format!("{:?}", noise.dim()),
        ));
    }
    LatentClip::new(&z0.latents + &(noise * sigma), sigma)
}

/// z0_hat = c_out(sigma) * v + c_skip(sigma) * z_t, tagged clean.
pub fn denoised_estimate(zt: &LatentClip, v: &VelocityPrediction) -> Result<LatentClip> {
    if zt.sigma != v.sigma {
        return Err(LsaError::invalid(
            "denoised_estimate",
            format!("latent sigma {} != prediction sigma {}", zt.sigma, v.sigma),
        ));
    }
    if v.v.dim() != zt.latents.dim() {
        return Err(LsaError::shape(
            "denoised_estimate",
            format!("{:?}", zt.latents.dim()),
            format!("{:?}", v.v.dim()),
        ));
    }
    let s = zt.sigma;
    LatentClip::new(&v.v * c_out(s) + &zt.latents * c_skip(s), 0.0)
}

/// Scheduler-weighted MSE: w(sigma) * mean((z0_hat - z0)^2), mean over all
/// tensor elements.
pub fn diffusion_loss(z0_hat: &LatentClip, z0: &LatentClip, sigma: f64) -> Result<f64> {
    if z0_hat.latents.dim() != z0.latents.dim() {
        return Err(LsaError::shape(
            "diffusion_loss",
            format!("{:?}", z0.latents.dim()),
            format!("{:?}", z0_hat.latents.dim()),
        ));
    }
    let w = loss_weight(sigma)?;
    let diff = &z0_hat.latents - &z0.latents;
    let mse = diff.iter().map(|d| d * d).sum::<f64>() / diff.len() as f64;
    Ok(w * mse)
}

/// Discrete Euler sampler. `init_noise` is taken as the latent state at
/// `sigma_max`; per step t = T..1 the update is
/// `z_{t-1} = z_t + (sigma_{t-1} - sigma_t) * (z_t - z0_hat) / sigma_t`.
pub fn euler_sample<M>(
    model: M,
    schedule: &NoiseSchedule,
    init_noise: Array4<f64>,
) -> Result<LatentClip>
where
    M: Fn(&LatentClip, f64) -> Result<VelocityPrediction>,
{
    let shape = init_noise.dim();
    let mut z = init_noise;
    for t in (1..=schedule.num_steps).rev() {
        let sigma_t = schedule.sigma(t);
        let sigma_prev = schedule.sigma(t - 1);
        let zt = LatentClip::new(z, sigma_t)?;
        let v = model(&zt, sigma_t)?;
        if v.v.dim() != shape {
            return Err(LsaError::shape(
                format!("euler_sample step {t}"),
                format!("{shape:?}"),
                format!("{:?}", v.v.dim()),
            ));
        }
        let z0_hat = denoised_estimate(&zt, &v)?;
        let slope = (&zt.latents - &z0_hat.latents) / sigma_t;
        z = &zt.latents + &(slope * (sigma_prev - sigma_t));
        if z.iter().any(|x| !x.is_finite()) {
            return Err(LsaError::NonFinite(format!("euler_sample step {t}")));
        }
    }
    LatentClip::new(z, 0.0)
}

/// Training-time noise level draw: log-normal over sigma.
pub fn sample_sigma<R: Rng>(rng: &mut R, location: f64, scale: f64) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    (location + scale * z).exp()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn randn4(rng: &mut ChaCha12Rng, shape: (usize, usize, usize, usize)) -> Array4<f64> {
        Array4::from_shape_fn(shape, |_| StandardNormal.sample(rng))
    }

    #[test]
    fn degenerate_single_step_schedule() {
        let s = NoiseSchedule::karras(1, 1.0, 1.0, 7.0).unwrap();
        assert_eq!(s.sigmas(), &[1.0, 0.0]);
    }

    #[test]
    fn default_t50_schedule_shape() {
        let s = NoiseSchedule::karras(50, 0.002, 80.0, 7.0).unwrap();
        assert_eq!(s.sigmas().len(), 51);
        assert_eq!(s.sigma(50), 80.0);
        assert!((s.sigma(1) - 0.002).abs() < 1e-15);
        assert_eq!(s.sigma(0), 0.0);
        for pair in s.sigmas().windows(2) {
            assert!(pair[0] > pair[1]);
        }
    }

    #[test]
    fn schedule_rejects_bad_parameters() {
        assert!(NoiseSchedule::karras(0, 0.002, 80.0, 7.0).is_err());
        assert!(NoiseSchedule::karras(10, -1.0, 80.0, 7.0).is_err());
        assert!(NoiseSchedule::karras(10, 2.0, 1.0, 7.0).is_err());
    }

    #[test]
    fn coefficient_closed_forms() {
        assert_eq!(c_out(0.0), 0.0);
        assert_eq!(c_skip(0.0), 1.0);
        assert!((c_out(1.0) + 1.0 / 2.0_f64.sqrt()).abs() < 1e-15);
        assert!((c_skip(1.0) - 0.5).abs() < 1e-15);
        assert!((loss_weight(1.0).unwrap() - 2.0).abs() < 1e-15);
        // asymptotics at large sigma
        assert!(c_skip(1e6).abs() < 1e-6);
        assert!((loss_weight(1e6).unwrap() - 1.0).abs() < 1e-6);
        assert!(loss_weight(0.0).is_err());
    }

    #[test]
    fn coefficient_identities_on_log_grid() {
        for k in 0..=60 {
            let sigma = 10f64.powf(-3.0 + 6.0 * k as f64 / 60.0);
            let rel1 = (c_skip(sigma) * (1.0 + sigma * sigma) - 1.0).abs();
            let rel2 = (c_out(sigma) * (1.0 + sigma * sigma).sqrt() + sigma).abs() / sigma;
            assert!(rel1 < 1e-12 && rel2 < 1e-12, "sigma {sigma}");
        }
    }

    #[test]
    fn add_noise_identity_and_linearity() {
        let z0 = LatentClip::new(Array4::zeros((2, 1, 2, 2)), 0.0).unwrap();
        let ones = Array4::from_elem((2, 1, 2, 2), 1.0);
        let zt = add_noise(&z0, 0.0, &ones).unwrap();
        assert_eq!(zt.latents, z0.latents);
        let zt = add_noise(&z0, 2.0, &ones).unwrap();
        assert!(zt.latents.iter().all(|&v| v == 2.0));
        assert_eq!(zt.sigma, 2.0);
    }

    #[test]
    fn add_noise_variance_matches_sigma_squared() {
        // Monte-Carlo: var(z_t - z_0) over 1e5 unit-normal draws ~ sigma^2
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let sigma = 1.7;
        let n = 100_000;
        let z0 = LatentClip::new(Array4::zeros((2, 1, 1, 1)), 0.0).unwrap();
        let mut sum_sq = 0.0;
        let mut count = 0usize;
        for _ in 0..n / 2 {
            let noise = randn4(&mut rng, (2, 1, 1, 1));
            let zt = add_noise(&z0, sigma, &noise).unwrap();
            for d in zt.latents.iter() {
                sum_sq += d * d;
                count += 1;
            }
        }
        let var = sum_sq / count as f64;
        assert!(
            (var - sigma * sigma).abs() / (sigma * sigma) < 0.05,
            "var {var}"
        );
    }

    #[test]
    fn denoised_estimate_recovers_z0_from_exact_velocity() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let z0 = randn4(&mut rng, (2, 2, 3, 3));
        let noise = randn4(&mut rng, (2, 2, 3, 3));
        for &sigma in &[0.1, 1.0, 5.0] {
            let clean = LatentClip::new(z0.clone(), 0.0).unwrap();
            let zt = add_noise(&clean, sigma, &noise).unwrap();
            // invert z0 = c_out v + c_skip z_t for v
            let v = (&z0 - &(&zt.latents * c_skip(sigma))) / c_out(sigma);
            let v = VelocityPrediction::new(v, sigma).unwrap();
            let est = denoised_estimate(&zt, &v).unwrap();
            let err = (&est.latents - &z0).iter().map(|d| d.abs()).fold(0.0, f64::max);
            assert!(err < 1e-6, "sigma {sigma}: {err}");
            assert_eq!(est.sigma, 0.0);
        }
    }

    #[test]
    fn denoised_estimate_degenerate_cases() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let z = randn4(&mut rng, (2, 1, 2, 2));
        let zt = LatentClip::new(z.clone(), 0.0).unwrap();
        let v = VelocityPrediction::new(randn4(&mut rng, (2, 1, 2, 2)), 0.0).unwrap();
        // sigma = 0: estimate equals z_t regardless of v
        assert_eq!(denoised_estimate(&zt, &v).unwrap().latents, z);
        // v = 0 at sigma = 1: estimate is z_t / 2
        let zt = LatentClip::new(z.clone(), 1.0).unwrap();
        let v0 = VelocityPrediction::new(Array4::zeros((2, 1, 2, 2)), 1.0).unwrap();
        let est = denoised_estimate(&zt, &v0).unwrap();
        assert!((&est.latents - &(&z * 0.5)).iter().all(|d| d.abs() < 1e-15));
        // sigma mismatch is an error
        let bad = VelocityPrediction::new(Array4::zeros((2, 1, 2, 2)), 0.5).unwrap();
        assert!(denoised_estimate(&zt, &bad).is_err());
    }

    #[test]
    fn diffusion_loss_matches_naive_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        for _ in 0..10 {
            let a = randn4(&mut rng, (2, 2, 3, 4));
            let b = randn4(&mut rng, (2, 2, 3, 4));
            let sigma = 0.5 + rand::Rng::gen::<f64>(&mut rng);
            let got = diffusion_loss(
                &LatentClip::new(a.clone(), 0.0).unwrap(),
                &LatentClip::new(b.clone(), 0.0).unwrap(),
                sigma,
            )
            .unwrap();
            // naive elementwise loop
            let mut sum = 0.0;
            let mut count = 0;
            for (x, y) in a.iter().zip(b.iter()) {
                sum += (x - y) * (x - y);
                count += 1;
            }
            let expect = (1.0 + sigma * sigma) / (sigma * sigma) * sum / count as f64;
            assert!((got - expect).abs() < 1e-10);
        }
    }

    #[test]
    fn diffusion_loss_known_values() {
        let z0 = LatentClip::new(Array4::zeros((2, 1, 2, 2)), 0.0).unwrap();
        let hat = LatentClip::new(Array4::from_elem((2, 1, 2, 2), 1.0), 0.0).unwrap();
        assert_eq!(diffusion_loss(&z0, &z0, 1.0).unwrap(), 0.0);
        assert!((diffusion_loss(&hat, &z0, 1.0).unwrap() - 2.0).abs() < 1e-15);
        assert!(diffusion_loss(&hat, &z0, 0.0).is_err());
    }

    /// Denoiser that always points at a fixed clean target.
    fn oracle_toward(
        target: Array4<f64>,
    ) -> impl Fn(&LatentClip, f64) -> Result<VelocityPrediction> {
        move |zt, sigma| {
            let v = (&target - &(&zt.latents * c_skip(sigma))) / c_out(sigma);
            VelocityPrediction::new(v, sigma)
        }
    }

    #[test]
    fn euler_sampler_reaches_oracle_target() {
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let target = randn4(&mut rng, (2, 2, 2, 2));
        for &t in &[1usize, 4, 16, 50] {
            let schedule = NoiseSchedule::karras(t, 0.01, 10.0, 7.0).unwrap();
            let init = randn4(&mut rng, (2, 2, 2, 2)) * schedule.sigma_max;
            let out = euler_sample(oracle_toward(target.clone()), &schedule, init).unwrap();
            let err = (&out.latents - &target)
                .iter()
                .map(|d| d.abs())
                .fold(0.0, f64::max);
            assert!(err < 1e-5, "T = {t}: err {err}");
            assert_eq!(out.sigma, 0.0);
        }
    }

    #[test]
    fn euler_sampler_step_doubling_consistency() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let target = randn4(&mut rng, (2, 1, 2, 2));
        let init = randn4(&mut rng, (2, 1, 2, 2)) * 10.0;
        let s1 = NoiseSchedule::karras(10, 0.01, 10.0, 7.0).unwrap();
        let s2 = NoiseSchedule::karras(20, 0.01, 10.0, 7.0).unwrap();
        let a = euler_sample(oracle_toward(target.clone()), &s1, init.clone()).unwrap();
        let b = euler_sample(oracle_toward(target), &s2, init).unwrap();
        let diff = (&a.latents - &b.latents)
            .iter()
            .map(|d| d.abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-5, "{diff}");
    }

    #[test]
    fn euler_sampler_independent_of_init_with_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let target = randn4(&mut rng, (2, 1, 2, 2));
        let schedule = NoiseSchedule::karras(8, 0.01, 10.0, 7.0).unwrap();
        let a = euler_sample(
            oracle_toward(target.clone()),
            &schedule,
            randn4(&mut rng, (2, 1, 2, 2)) * 10.0,
        )
        .unwrap();
        let b = euler_sample(
            oracle_toward(target),
            &schedule,
            randn4(&mut rng, (2, 1, 2, 2)) * 10.0,
        )
        .unwrap();
        let diff = (&a.latents - &b.latents)
            .iter()
            .map(|d| d.abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-6, "{diff}");
    }
}
