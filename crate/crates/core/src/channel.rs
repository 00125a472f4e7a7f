//! Synthetic downlink CSI: multipath channels seen through a uniform linear array.
//!
//! Every subcarrier row of a channel matrix is a sum of plane waves,
//!
//! ```text
//! h_n = sqrt(N_t / L) · Σ_l α_l · exp(-j2π τ_l f_s n / N_c) · a(φ_l)
//! ```
//!
//! where `a(φ)` is the array steering vector. Users of one [`MultiUserScene`]
//! share a set of far-scatterer paths verbatim and add their own local paths,
//! which is what makes the CSI of nearby users correlated.

use std::f64::consts::{FRAC_PI_2, FRAC_PI_3, PI};

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ChannelError {
    #[error("a user channel needs at least one multipath component")]
    NoPaths,
    #[error("user index {index} out of range for a scene with {users} users")]
    UserIndex { index: usize, users: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArrayConfig {
    pub n_antennas: usize,
    /// Element spacing in wavelengths.
    pub spacing: f64,
}

impl Default for ArrayConfig {
    fn default() -> Self {
        Self::new(16)
    }
}

fn half_wavelength() -> f64 {
    0.5
}

impl ArrayConfig {
    pub fn new(n_antennas: usize) -> Self {
        Self {
            n_antennas,
            spacing: half_wavelength(),
        }
    }

    pub fn validate(&self) -> Result<(), ChannelError> {
        if self.n_antennas == 0 {
            return Err(ChannelError::Config("n_antennas must be at least 1".into()));
        }
        if !(self.spacing > 0.0 && self.spacing.is_finite()) {
            return Err(ChannelError::Config("antenna spacing must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MultipathComponent {
    pub gain: Complex64,
    /// Seconds.
    pub delay: f64,
    /// Angle of departure in radians, `|aod| ≤ π/2`.
    pub aod: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub n_subcarriers: usize,
    /// Hz.
    pub sampling_rate: f64,
    pub n_shared_paths: usize,
    pub n_local_paths: usize,
    /// Side of the square deployment area in meters.
    pub area_side: f64,
    /// Path delays are uniform on `[0, delay_spread]` seconds.
    pub delay_spread: f64,
    pub n_users: usize,
    /// When set, shared paths carry this fraction of the expected channel power.
    pub shared_power_fraction: Option<f64>,
    /// When set, each path group's AoDs scatter with this standard deviation
    /// (radians) around a common direction; otherwise AoDs are uniform.
    pub aod_spread: Option<f64>,
    /// Use one AoD per user for every path instead of one per path.
    pub single_aod: bool,
    pub rng_seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self::indoor(32)
    }
}

impl SceneConfig {
    /// Desk-scale indoor defaults.
    pub fn indoor(n_subcarriers: usize) -> Self {
        Self {
            n_subcarriers,
            // 20 MHz over 32 subcarriers; scaled with N_c so the carrier spacing stays fixed.
            sampling_rate: 20e6 * n_subcarriers as f64 / 32.0,
            n_shared_paths: 0,
            n_local_paths: 4,
            area_side: 20.0,
            delay_spread: 200e-9,
            n_users: 1,
            shared_power_fraction: None,
            aod_spread: None,
            single_aod: false,
            rng_seed: 0,
        }
    }

    pub fn paths_per_user(&self) -> usize {
        self.n_shared_paths + self.n_local_paths
    }

    pub fn validate(&self) -> Result<(), ChannelError> {
        if self.n_subcarriers == 0 {
            return Err(ChannelError::Config("n_subcarriers must be at least 1".into()));
        }
        if !(self.sampling_rate > 0.0 && self.sampling_rate.is_finite()) {
            return Err(ChannelError::Config("sampling_rate must be positive".into()));
        }
        if self.paths_per_user() == 0 {
            return Err(ChannelError::NoPaths);
        }
        if self.n_users == 0 {
            return Err(ChannelError::Config("n_users must be at least 1".into()));
        }
        if !(self.delay_spread >= 0.0 && self.area_side >= 0.0) {
            return Err(ChannelError::Config("delay_spread and area_side must be non-negative".into()));
        }
        if let Some(f) = self.shared_power_fraction {
            if !(0.0..1.0).contains(&f) || self.n_shared_paths == 0 || self.n_local_paths == 0 {
                return Err(ChannelError::Config(
                    "shared_power_fraction needs shared and local paths and a value in [0, 1)".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Complex `N_c × N_t` gain matrix of one user, row-major by subcarrier.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelMatrix {
    n_subcarriers: usize,
    n_antennas: usize,
    data: Vec<Complex64>,
    pub position: (f64, f64),
}

impl ChannelMatrix {
    pub fn new(n_subcarriers: usize, n_antennas: usize, data: Vec<Complex64>) -> Self {
        assert_eq!(data.len(), n_subcarriers * n_antennas);
        Self {
            n_subcarriers,
            n_antennas,
            data,
            position: (0.0, 0.0),
        }
    }

    pub fn zeros(n_subcarriers: usize, n_antennas: usize) -> Self {
        Self::new(n_subcarriers, n_antennas, vec![Complex64::new(0.0, 0.0); n_subcarriers * n_antennas])
    }

    pub fn with_position(mut self, position: (f64, f64)) -> Self {
        self.position = position;
        self
    }

    pub fn n_subcarriers(&self) -> usize {
        self.n_subcarriers
    }

    pub fn n_antennas(&self) -> usize {
        self.n_antennas
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    /// Channel vector of subcarrier `n`.
    pub fn row(&self, n: usize) -> &[Complex64] {
        &self.data[n * self.n_antennas..(n + 1) * self.n_antennas]
    }

    pub fn get(&self, n: usize, t: usize) -> Complex64 {
        self.data[n * self.n_antennas + t]
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum()
    }

    pub fn scale(&mut self, factor: f64) {
        for z in &mut self.data {
            *z *= factor;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiUserScene {
    pub shared_paths: Vec<MultipathComponent>,
    pub per_user_paths: Vec<Vec<MultipathComponent>>,
    pub positions: Vec<(f64, f64)>,
    /// Per-user direction used when every path shares one AoD.
    pub user_aods: Vec<f64>,
}

impl MultiUserScene {
    pub fn n_users(&self) -> usize {
        self.per_user_paths.len()
    }
}

/// ULA response `[1, e^{-j2π(d/λ)sinφ}, …, e^{-j2π(d/λ)(N_t−1)sinφ}]`.
pub fn steering_vector(aod: f64, array: &ArrayConfig) -> Vec<Complex64> {
    let step = -2.0 * PI * array.spacing * aod.sin();
    (0..array.n_antennas)
        .map(|t| Complex64::from_polar(1.0, step * t as f64))
        .collect()
}

/// Evaluates the multipath sum for `user` of `scene`.
pub fn generate_channel(
    scene: &MultiUserScene,
    user: usize,
    config: &SceneConfig,
    array: &ArrayConfig,
) -> Result<ChannelMatrix, ChannelError> {
    if user >= scene.n_users() {
        return Err(ChannelError::UserIndex {
            index: user,
            users: scene.n_users(),
        });
    }
    let paths: Vec<&MultipathComponent> = scene.shared_paths.iter().chain(&scene.per_user_paths[user]).collect();
    if paths.is_empty() {
        return Err(ChannelError::NoPaths);
    }
    let (n_c, n_t) = (config.n_subcarriers, array.n_antennas);
    let amplitude = (n_t as f64 / paths.len() as f64).sqrt();
    let mut h = ChannelMatrix::zeros(n_c, n_t);
    for path in paths {
        let aod = if config.single_aod { scene.user_aods[user] } else { path.aod };
        let steer = steering_vector(aod, array);
        let phase_step = -2.0 * PI * path.delay * config.sampling_rate / n_c as f64;
        for n in 0..n_c {
            let coeff = amplitude * path.gain * Complex64::from_polar(1.0, phase_step * n as f64);
            for (dst, a) in h.data[n * n_t..(n + 1) * n_t].iter_mut().zip(&steer) {
                *dst += coeff * a;
            }
        }
    }
    Ok(h.with_position(scene.positions[user]))
}

fn draw_paths(
    count: usize,
    power_scale: f64,
    config: &SceneConfig,
    rng: &mut impl Rng,
) -> Vec<MultipathComponent> {
    // Exponential power-delay profile with an rms delay of a quarter of the spread.
    let decay = config.delay_spread / 4.0;
    let center = rng.random_range(-FRAC_PI_3..FRAC_PI_3);
    (0..count)
        .map(|_| {
            let delay = rng.random_range(0.0..=1.0) * config.delay_spread;
            let power = if decay > 0.0 { (-delay / decay).exp() } else { 1.0 } * power_scale;
            let re: f64 = StandardNormal.sample(rng);
            let im: f64 = StandardNormal.sample(rng);
            let gain = Complex64::new(re, im) * (power / 2.0).sqrt();
            let aod = match config.aod_spread {
                Some(spread) => {
                    let jitter = Normal::new(0.0, spread).map(|d| d.sample(rng)).unwrap_or(0.0);
                    (center + jitter).clamp(-FRAC_PI_2, FRAC_PI_2)
                }
                None => rng.random_range(-FRAC_PI_2..=FRAC_PI_2),
            };
            MultipathComponent { gain, delay, aod }
        })
        .collect()
}

/// Draws one scene: shared paths once, local paths and a position per user.
pub fn sample_scene(config: &SceneConfig, rng: &mut impl Rng) -> MultiUserScene {
    let (shared_scale, local_scale) = match config.shared_power_fraction {
        Some(f) => {
            let l = config.paths_per_user() as f64;
            (f * l / config.n_shared_paths as f64, (1.0 - f) * l / config.n_local_paths as f64)
        }
        None => (1.0, 1.0),
    };
    let shared_paths = draw_paths(config.n_shared_paths, shared_scale, config, rng);
    let mut per_user_paths = Vec::with_capacity(config.n_users);
    let mut positions = Vec::with_capacity(config.n_users);
    let mut user_aods = Vec::with_capacity(config.n_users);
    for _ in 0..config.n_users {
        per_user_paths.push(draw_paths(config.n_local_paths, local_scale, config, rng));
        positions.push((
            rng.random_range(0.0..=1.0) * config.area_side,
            rng.random_range(0.0..=1.0) * config.area_side,
        ));
        user_aods.push(rng.random_range(-FRAC_PI_2..=FRAC_PI_2));
    }
    MultiUserScene {
        shared_paths,
        per_user_paths,
        positions,
        user_aods,
    }
}

/// Mean per-entry power `E|h|²` over a set of matrices.
pub fn mean_entry_power<'a>(matrices: impl IntoIterator<Item = &'a ChannelMatrix>) -> f64 {
    let (mut total, mut count) = (0.0, 0usize);
    for m in matrices {
        total += m.frobenius_sq();
        count += m.data().len();
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

/// Generates `count` scenes and returns the channels indexed `[user][sample]`,
/// scaled by one global constant so the mean per-entry power is 1.
pub fn generate_dataset(
    config: &SceneConfig,
    array: &ArrayConfig,
    count: usize,
) -> Result<Vec<Vec<ChannelMatrix>>, ChannelError> {
    config.validate()?;
    array.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let mut users: Vec<Vec<ChannelMatrix>> = vec![Vec::with_capacity(count); config.n_users];
    for _ in 0..count {
        let scene = sample_scene(config, &mut rng);
        for (u, list) in users.iter_mut().enumerate() {
            list.push(generate_channel(&scene, u, config, array)?);
        }
    }
    let power = mean_entry_power(users.iter().flatten());
    if power > 0.0 {
        let factor = 1.0 / power.sqrt();
        users.iter_mut().flatten().for_each(|m| m.scale(factor));
    }
    Ok(users)
}
