//! Noise schedules, the forward process, the reverse sampler step, and the
//! training losses (including the contour-consistency reward).

use crate::contour::ContourMask;
use crate::error::{MuralError, Result};
use crate::image::{Image, LatentImage};
use rand::Rng;
use rand_distr::StandardNormal;

/// Probability clamp applied before logs in the cross-entropy reward.
pub const BCE_EPS: f64 = 1e-7;

/// How the reverse-step variance is derived from the betas.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SigmaMode {
    /// sigma_t^2 = beta_t (posterior-variance upper bound).
    #[default]
    Beta,
    /// sigma_t^2 = (1 - abar_{t-1}) / (1 - abar_t) * beta_t.
    BetaTilde,
}

impl SigmaMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "beta" => Ok(SigmaMode::Beta),
            "beta-tilde" => Ok(SigmaMode::BetaTilde),
            other => Err(MuralError::InvalidParameter(format!(
                "sigma_mode must be `beta` or `beta-tilde`, got `{other}`"
            ))),
        }
    }
}

/// Per-timestep diffusion coefficients, indexed by t in 1..=T.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear beta schedule from `beta_start` to `beta_end` over `timesteps`.
    pub fn linear(timesteps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        Self::linear_with_sigma(timesteps, beta_start, beta_end, SigmaMode::Beta)
    }

    pub fn linear_with_sigma(
        timesteps: usize,
        beta_start: f64,
        beta_end: f64,
        mode: SigmaMode,
    ) -> Result<Self> {
        if timesteps < 1 {
            return Err(MuralError::InvalidParameter("need T >= 1".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(MuralError::InvalidParameter(format!(
                "need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
            )));
        }
        let beta: Vec<f64> = if timesteps == 1 {
            vec![beta_start]
        } else {
            (0..timesteps)
                .map(|i| {
                    beta_start + (beta_end - beta_start) * i as f64 / (timesteps - 1) as f64
                })
                .collect()
        };
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(timesteps);
        let mut prod = 1.0;
        for &a in &alpha {
            prod *= a;
            alpha_bar.push(prod);
        }
        let sigma = (1..=timesteps)
            .map(|t| {
                let b = beta[t - 1];
                match mode {
                    SigmaMode::Beta => b.sqrt(),
                    SigmaMode::BetaTilde => {
                        let prev = if t == 1 { 1.0 } else { alpha_bar[t - 2] };
                        ((1.0 - prev) / (1.0 - alpha_bar[t - 1]) * b).sqrt()
                    }
                }
            })
            .collect();
        Ok(NoiseSchedule {
            beta,
            alpha,
            alpha_bar,
            sigma,
        })
    }

    pub fn timesteps(&self) -> usize {
        self.beta.len()
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t < 1 || t > self.timesteps() {
            return Err(MuralError::TimestepOutOfRange {
                t,
                max: self.timesteps(),
            });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }
    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }
    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t - 1]
    }
}

/// Conditioning bundle: the contour mask, an optional style tag, and the
/// reward weight lambda.
#[derive(Debug, Clone)]
pub struct ConditionSet {
    pub contour: ContourMask,
    pub tag: Option<usize>,
    pub lambda: f64,
}

impl ConditionSet {
    pub fn new(contour: ContourMask, tag: Option<usize>, lambda: f64) -> Result<Self> {
        if lambda < 0.0 || !lambda.is_finite() {
            return Err(MuralError::InvalidParameter(format!(
                "lambda must be finite and >= 0, got {lambda}"
            )));
        }
        Ok(ConditionSet {
            contour,
            tag,
            lambda,
        })
    }
}

/// Maps a generated image to a per-pixel foreground probability in [0, 1].
pub trait RewardModel {
    fn predict(&self, generated: &Image) -> Result<Vec<f64>>;
}

/// Differentiable stand-in for a learned segmenter: a sigmoid over how far
/// each pixel's luminance sits below a threshold. With the threshold at the
/// midpoint of the two clustering centroids this recovers the contour
/// extractor exactly as temperature goes to zero.
#[derive(Debug, Clone, Copy)]
pub struct SoftContourReward {
    pub threshold: f64,
    pub temperature: f64,
}

impl SoftContourReward {
    pub const DEFAULT_TEMPERATURE: f64 = 0.05;

    pub fn new(threshold: f64, temperature: f64) -> Result<Self> {
        if temperature <= 0.0 {
            return Err(MuralError::InvalidParameter(
                "temperature must be positive".into(),
            ));
        }
        Ok(SoftContourReward {
            threshold,
            temperature,
        })
    }

    /// Threshold at the midpoint of two centroid luminances.
    pub fn from_centroid_luminances(dark: f64, light: f64) -> Self {
        SoftContourReward {
            threshold: (dark + light) / 2.0,
            temperature: Self::DEFAULT_TEMPERATURE,
        }
    }
}

impl RewardModel for SoftContourReward {
    fn predict(&self, generated: &Image) -> Result<Vec<f64>> {
        let gray = generated.to_grayscale();
        Ok(gray
            .data()
            .iter()
            .map(|&l| sigmoid((self.threshold - l) / self.temperature))
            .collect())
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_same_shape(a: &LatentImage, b: &LatentImage, what: &str) -> Result<()> {
    if !a.same_shape(b) {
        return Err(MuralError::shape(a.shape_string(), format!("{what} {}", b.shape_string())));
    }
    Ok(())
}

/// Forward process: `sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`.
pub fn forward_diffuse(
    x0: &LatentImage,
    t: usize,
    eps: &LatentImage,
    sched: &NoiseSchedule,
) -> Result<LatentImage> {
    sched.check_t(t)?;
    check_same_shape(x0, eps, "eps")?;
    let ab = sched.alpha_bar(t);
    let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = x0
        .data()
        .iter()
        .zip(eps.data())
        .map(|(x, e)| sa * x + sb * e)
        .collect();
    LatentImage::new(x0.height(), x0.width(), x0.channels(), data)
}

/// One reverse step:
/// `(xt - (1 - alpha_t) / sqrt(1 - abar_t) * eps_pred) / sqrt(alpha_t) + sigma_t * noise`.
///
/// `noise` must be all-zero at t = 1; the final step adds no randomness.
pub fn reverse_step(
    xt: &LatentImage,
    t: usize,
    eps_pred: &LatentImage,
    sched: &NoiseSchedule,
    noise: &LatentImage,
) -> Result<LatentImage> {
    sched.check_t(t)?;
    check_same_shape(xt, eps_pred, "eps_pred")?;
    check_same_shape(xt, noise, "noise")?;
    if t == 1 && noise.data().iter().any(|&v| v != 0.0) {
        return Err(MuralError::InvalidParameter(
            "reverse_step at t = 1 must receive zero noise".into(),
        ));
    }
    let a = sched.alpha(t);
    let ab = sched.alpha_bar(t);
    let coef = (1.0 - a) / (1.0 - ab).sqrt();
    let inv_sqrt_a = 1.0 / a.sqrt();
    let s = sched.sigma(t);
    let data = xt
        .data()
        .iter()
        .zip(eps_pred.data())
        .zip(noise.data())
        .map(|((x, e), n)| inv_sqrt_a * (x - coef * e) + s * n)
        .collect();
    LatentImage::new(xt.height(), xt.width(), xt.channels(), data)
}

/// Single-step clean estimate `x0_hat = (xt - sqrt(1 - abar_t) eps) / sqrt(abar_t)`.
pub fn x0_estimate(
    xt: &LatentImage,
    t: usize,
    eps_pred: &LatentImage,
    sched: &NoiseSchedule,
) -> Result<LatentImage> {
    sched.check_t(t)?;
    check_same_shape(xt, eps_pred, "eps_pred")?;
    let ab = sched.alpha_bar(t);
    let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = xt
        .data()
        .iter()
        .zip(eps_pred.data())
        .map(|(x, e)| (x - sb * e) / sa)
        .collect();
    LatentImage::new(xt.height(), xt.width(), xt.channels(), data)
}

/// Mean squared error between a noise prediction and the truth.
pub fn diffusion_loss(eps_pred: &LatentImage, eps_true: &LatentImage) -> Result<f64> {
    check_same_shape(eps_pred, eps_true, "eps_true")?;
    let n = eps_pred.data().len() as f64;
    Ok(eps_pred
        .data()
        .iter()
        .zip(eps_true.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

/// Per-pixel binary cross-entropy between the contour condition and the
/// reward model's prediction on the generated image.
pub fn reward_loss(
    cond: &ConditionSet,
    generated: &Image,
    model: &dyn RewardModel,
) -> Result<f64> {
    let probs = model.predict(generated)?;
    bce_loss(&cond.contour, &probs)
}

/// BCE with probabilities clamped to `[BCE_EPS, 1 - BCE_EPS]`.
pub fn bce_loss(target: &ContourMask, probs: &[f64]) -> Result<f64> {
    if probs.len() != target.data().len() {
        return Err(MuralError::shape(
            format!("{} contour pixels", target.data().len()),
            format!("{} probabilities", probs.len()),
        ));
    }
    let n = probs.len() as f64;
    let mut total = 0.0;
    for (&t, &p) in target.data().iter().zip(probs) {
        let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
        total -= if t == 1 { p.ln() } else { (1.0 - p).ln() };
    }
    Ok(total / n)
}

/// Eq-style combination: `train + lambda * reward`.
pub fn total_loss(train: f64, reward: f64, lambda: f64) -> Result<f64> {
    if !(train.is_finite() && reward.is_finite() && lambda.is_finite())
        || train < 0.0
        || reward < 0.0
        || lambda < 0.0
    {
        return Err(MuralError::InvalidParameter(
            "losses and lambda must be finite and nonnegative".into(),
        ));
    }
    Ok(train + lambda * reward)
}

/// Draw a standard-normal latent of the given shape.
pub fn sample_noise(
    height: usize,
    width: usize,
    channels: usize,
    rng: &mut impl Rng,
) -> LatentImage {
    let data: Vec<f64> = (0..height * width * channels)
        .map(|_| rng.sample(StandardNormal))
        .collect();
    LatentImage::new(height, width, channels, data).expect("normal draws are finite")
}

/// Full reverse chain with an arbitrary noise predictor. Draws x_T, then
/// walks t = T..1 adding `sigma_t` noise except at the last step. Any
/// non-finite intermediate aborts with the offending timestep.
pub fn sample_single<F>(
    predictor: F,
    sched: &NoiseSchedule,
    height: usize,
    width: usize,
    channels: usize,
    rng: &mut impl Rng,
) -> Result<LatentImage>
where
    F: Fn(&LatentImage, usize) -> Result<LatentImage>,
{
    let mut x = sample_noise(height, width, channels, rng);
    for t in (1..=sched.timesteps()).rev() {
        let eps = predictor(&x, t)?;
        let noise = if t > 1 {
            sample_noise(height, width, channels, rng)
        } else {
            LatentImage::zeros(height, width, channels)
        };
        x = reverse_step(&x, t, &eps, sched, &noise).map_err(|e| match e {
            MuralError::NonFinite { context } => MuralError::NonFiniteAtStep {
                timestep: t,
                context,
            },
            other => other,
        })?;
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::contour::ContourMask;
    use rand::SeedableRng;

    #[test]
    fn schedule_single_and_double_step() {
        let s = NoiseSchedule::linear(1, 0.02, 0.02).unwrap();
        assert!((s.alpha_bar(1) - 0.98).abs() < 1e-15);
        assert_eq!(s.alpha_bar(0), 1.0);

        let s2 = NoiseSchedule::linear(2, 0.1, 0.2).unwrap();
        assert!((s2.alpha_bar(2) - 0.72).abs() < 1e-15);
    }

    // Cumulative product over the default 1000-step schedule, frozen from an
    // independent evaluation.
    #[test]
    fn schedule_default_tail() {
        let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        let expect = 4.035829765375675e-5;
        assert!(
            (s.alpha_bar(1000) - expect).abs() / expect < 1e-10,
            "got {}",
            s.alpha_bar(1000)
        );
    }

    #[test]
    fn schedule_monotone_and_sigma_positive() {
        let s = NoiseSchedule::linear(100, 1e-4, 0.02).unwrap();
        for t in 1..=100 {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            assert!(s.sigma(t) > 0.0);
            assert!(s.beta(t) > 0.0 && s.beta(t) < 1.0);
        }
    }

    #[test]
    fn schedule_rejects_bad_params() {
        assert!(NoiseSchedule::linear(0, 0.1, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 0.0, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 0.3, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 0.3, 1.0).is_err());
    }

    #[test]
    fn forward_endpoint_and_substitution() {
        let sched = NoiseSchedule::linear(4, 0.75, 0.75).unwrap(); // abar_1 = 0.25
        let x0 = LatentImage::zeros(2, 2, 1);
        let eps = LatentImage::constant(2, 2, 1, 1.0).unwrap();
        let xt = forward_diffuse(&x0, 1, &eps, &sched).unwrap();
        for &v in xt.data() {
            assert!((v - 0.75f64.sqrt()).abs() < 1e-15);
        }
        // abar_0 = 1 convention: zero-noise endpoint preserves x0 exactly
        assert_eq!(sched.alpha_bar(0), 1.0);
    }

    #[test]
    fn forward_is_affine() {
        let sched = NoiseSchedule::linear(10, 0.01, 0.1).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let a = sample_noise(3, 3, 1, &mut rng);
        let b = sample_noise(3, 3, 1, &mut rng);
        let e = sample_noise(3, 3, 1, &mut rng);
        let sum = LatentImage::new(
            3,
            3,
            1,
            a.data().iter().zip(b.data()).map(|(x, y)| 2.0 * x + y).collect(),
        )
        .unwrap();
        let fa = forward_diffuse(&a, 5, &e, &sched).unwrap();
        let fb = forward_diffuse(&b, 5, &e, &sched).unwrap();
        let zero = LatentImage::zeros(3, 3, 1);
        let f0 = forward_diffuse(&zero, 5, &e, &sched).unwrap();
        let fsum = forward_diffuse(&sum, 5, &e, &sched).unwrap();
        for i in 0..9 {
            let lin = 2.0 * fa.data()[i] + fb.data()[i] - 2.0 * f0.data()[i];
            assert!((fsum.data()[i] - lin).abs() < 1e-12);
        }
    }

    #[test]
    fn reverse_zero_prediction() {
        let sched = NoiseSchedule::linear(4, 0.19, 0.19).unwrap(); // alpha = 0.81
        let xt = LatentImage::constant(2, 2, 1, 0.9).unwrap();
        let eps = LatentImage::zeros(2, 2, 1);
        let zero = LatentImage::zeros(2, 2, 1);
        let out = reverse_step(&xt, 1, &eps, &sched, &zero).unwrap();
        for &v in out.data() {
            assert!((v - 0.9 / 0.9).abs() < 1e-15);
        }
    }

    // Hand evaluation with alpha_t = 0.99, abar_t = 0.5, xt = 1, eps = 1:
    // (1 - 0.01 / sqrt(0.5)) / sqrt(0.99) = 0.9908244341688379.
    #[test]
    fn reverse_hand_value() {
        let mut sched = NoiseSchedule::linear(2, 0.01, 0.01).unwrap();
        // force abar_2 = 0.5 while alpha_2 = 0.99 stays
        sched.alpha_bar[1] = 0.5;
        let xt = LatentImage::constant(1, 1, 1, 1.0).unwrap();
        let eps = LatentImage::constant(1, 1, 1, 1.0).unwrap();
        let noise = LatentImage::zeros(1, 1, 1);
        let out = reverse_step(&xt, 2, &eps, &sched, &noise).unwrap();
        assert!((out.data()[0] - 0.9908244341688379).abs() < 1e-14);
    }

    #[test]
    fn reverse_rejects_noise_at_t1() {
        let sched = NoiseSchedule::linear(4, 0.1, 0.1).unwrap();
        let x = LatentImage::zeros(1, 1, 1);
        let n = LatentImage::constant(1, 1, 1, 0.5).unwrap();
        assert!(reverse_step(&x, 1, &x, &sched, &n).is_err());
        assert!(reverse_step(&x, 2, &x, &sched, &n).is_ok());
    }

    #[test]
    fn diffusion_loss_values() {
        let a = LatentImage::constant(2, 2, 1, 0.3).unwrap();
        assert_eq!(diffusion_loss(&a, &a).unwrap(), 0.0);
        let b = LatentImage::constant(2, 2, 1, 1.3).unwrap();
        assert!((diffusion_loss(&b, &a).unwrap() - 1.0).abs() < 1e-15);
    }

    // Brute-force elementwise loop as the independent route.
    #[test]
    fn diffusion_loss_matches_loop() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let a = sample_noise(4, 5, 3, &mut rng);
        let b = sample_noise(4, 5, 3, &mut rng);
        let mut acc = 0.0;
        for i in 0..a.data().len() {
            let d = a.data()[i] - b.data()[i];
            acc += d * d;
        }
        acc /= a.data().len() as f64;
        assert!((diffusion_loss(&a, &b).unwrap() - acc).abs() < 1e-12);
    }

    struct FixedProbs(Vec<f64>);
    impl RewardModel for FixedProbs {
        fn predict(&self, _img: &Image) -> Result<Vec<f64>> {
            Ok(self.0.clone())
        }
    }

    fn cond(bits: &[u8]) -> ConditionSet {
        let n = bits.len();
        ConditionSet::new(ContourMask::new(1, n, bits.to_vec()).unwrap(), None, 1.0).unwrap()
    }

    #[test]
    fn reward_loss_perfect_match_at_clamp() {
        let c = cond(&[1, 0, 1, 0]);
        let img = Image::constant(1, 4, 1, 0.5).unwrap();
        let loss = reward_loss(&c, &img, &FixedProbs(vec![1.0, 0.0, 1.0, 0.0])).unwrap();
        // -ln(1 - BCE_EPS) per pixel
        assert!(loss <= -(1.0f64 - BCE_EPS).ln() + 1e-12);
    }

    #[test]
    fn reward_loss_uniform_half_is_ln2() {
        let c = cond(&[1, 0, 1, 0]);
        let img = Image::constant(1, 4, 1, 0.5).unwrap();
        let loss = reward_loss(&c, &img, &FixedProbs(vec![0.5; 4])).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    // Hand evaluation: target (1, 0), prediction (0.9, 0.2)
    // -> -(ln 0.9 + ln 0.8) / 2 = 0.164252033486018.
    #[test]
    fn reward_loss_hand_value() {
        let c = cond(&[1, 0]);
        let img = Image::constant(1, 2, 1, 0.5).unwrap();
        let loss = reward_loss(&c, &img, &FixedProbs(vec![0.9, 0.2])).unwrap();
        assert!((loss - 0.164252033486018).abs() < 1e-12);
    }

    // Any +-0.05 perturbation away from the target raises the loss.
    #[test]
    fn reward_loss_minimized_at_target() {
        let target = [1u8, 0, 1, 1, 0];
        let c = cond(&target);
        let img = Image::constant(1, 5, 1, 0.5).unwrap();
        let ideal: Vec<f64> = target.iter().map(|&t| t as f64).collect();
        let base = reward_loss(&c, &img, &FixedProbs(ideal.clone())).unwrap();
        for i in 0..5 {
            for delta in [0.05, -0.05] {
                let mut p = ideal.clone();
                p[i] = (p[i] + delta).clamp(0.0, 1.0);
                if p == ideal {
                    continue;
                }
                let l = reward_loss(&c, &img, &FixedProbs(p)).unwrap();
                assert!(l > base, "perturbation {i} {delta} did not raise loss");
            }
        }
    }

    #[test]
    fn total_loss_values() {
        assert_eq!(total_loss(0.4, 9.0, 0.0).unwrap(), 0.4);
        assert!((total_loss(0.5, 0.2, 1.0).unwrap() - 0.7).abs() < 1e-15);
        assert!((total_loss(1.0, 2.0, 0.5).unwrap() - 2.0).abs() < 1e-15);
        assert!(total_loss(f64::NAN, 0.0, 0.0).is_err());
    }

    #[test]
    fn soft_reward_tracks_contour_at_low_temperature() {
        let mut data = vec![0.9; 9];
        data[4] = 0.1;
        let img = Image::new(3, 3, 1, data).unwrap();
        let reward = SoftContourReward::new(0.5, 0.01).unwrap();
        let probs = reward.predict(&img).unwrap();
        assert!(probs[4] > 0.999);
        assert!(probs[0] < 0.001);
    }

    // Monte-Carlo check of the forward marginal: over many draws the mean
    // approaches sqrt(abar) x0 and the variance 1 - abar.
    #[test]
    fn forward_marginal_moments() {
        let sched = NoiseSchedule::linear(50, 1e-3, 0.1).unwrap();
        let t = 30;
        let ab = sched.alpha_bar(t);
        let x0 = LatentImage::constant(1, 1, 1, 0.8).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let n = 10_000;
        let mut sum = 0.0;
        let mut sum2 = 0.0;
        for _ in 0..n {
            let eps = sample_noise(1, 1, 1, &mut rng);
            let v = forward_diffuse(&x0, t, &eps, &sched).unwrap().data()[0];
            sum += v;
            sum2 += v * v;
        }
        let mean = sum / n as f64;
        let var = sum2 / n as f64 - mean * mean;
        let target_mean = ab.sqrt() * 0.8;
        let target_var = 1.0 - ab;
        let se_mean = target_var.sqrt() / (n as f64).sqrt();
        let se_var = target_var * (2.0 / n as f64).sqrt();
        assert!((mean - target_mean).abs() < 3.0 * se_mean);
        assert!((var - target_var).abs() < 3.0 * se_var);
    }
}
