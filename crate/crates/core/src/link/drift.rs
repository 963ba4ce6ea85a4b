//! Time-dependent polarization transformation of the fiber channel.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::optics::PolarizationUnitary;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriftMode {
    /// No scripted steps.
    Static,
    /// Every `step_interval`, a rotation about a random axis by a Gaussian
    /// angle with standard deviation `step_magnitude`.
    RandomWalk,
    /// Every `step_interval`, a rotation about a random axis by exactly
    /// `step_magnitude`, like a scrambler whose drive is stepped.
    ScramblerSteps,
}

/// Angles are Jones-matrix half-angles: a rotation by `a` about an axis
/// orthogonal to a state's Stokes vector flips it with probability `sin^2 a`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelDriftModel {
    #[serde(default = "default_mode")]
    pub mode: DriftMode,
    #[serde(default = "default_step_interval")]
    pub step_interval: f64,
    #[serde(default = "default_step_magnitude")]
    pub step_magnitude: f64,
    /// Environmental diffusion, radians per square-root second, applied in
    /// isotropic increments every `environment_interval`.
    #[serde(default)]
    pub environment_sigma: f64,
    #[serde(default = "default_environment_interval")]
    pub environment_interval: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_mode() -> DriftMode {
    DriftMode::Static
}
fn default_step_interval() -> f64 {
    300.0
}
fn default_step_magnitude() -> f64 {
    0.15
}
fn default_environment_interval() -> f64 {
    1.0
}

impl Default for ChannelDriftModel {
    fn default() -> Self {
        Self {
            mode: default_mode(),
            step_interval: default_step_interval(),
            step_magnitude: default_step_magnitude(),
            environment_sigma: 0.0,
            environment_interval: default_environment_interval(),
            seed: 0,
        }
    }
}

impl ChannelDriftModel {
    pub fn static_channel() -> Self {
        Self::default()
    }

    /// Instants of the scripted steps up to `until`.
    pub fn step_times(&self, until: f64) -> Vec<f64> {
        if self.mode == DriftMode::Static {
            return Vec::new();
        }
        (1..).map(|k| k as f64 * self.step_interval).take_while(|&t| t <= until).collect()
    }

    pub fn validate(&self) -> Result<(), String> {
        let mut problems = Vec::new();
        if !(self.step_interval > 0.0 && self.step_interval.is_finite()) {
            problems.push(format!("step_interval must be positive, got {}", self.step_interval));
        }
        if !(self.step_magnitude >= 0.0 && self.step_magnitude.is_finite()) {
            problems.push(format!("step_magnitude must be non-negative, got {}", self.step_magnitude));
        }
        if !(self.environment_sigma >= 0.0 && self.environment_sigma.is_finite()) {
            problems.push(format!("environment_sigma must be non-negative, got {}", self.environment_sigma));
        }
        if !(self.environment_interval > 0.0 && self.environment_interval.is_finite()) {
            problems.push(format!("environment_interval must be positive, got {}", self.environment_interval));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(problems.join("; "))
        }
    }
}

fn random_axis<R: Rng + ?Sized>(rng: &mut R) -> [f64; 3] {
    let z: f64 = rng.random_range(-1.0..=1.0);
    let phi: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let r = (1.0 - z * z).max(0.0).sqrt();
    [r * phi.cos(), r * phi.sin(), z]
}

enum Source {
    Model {
        model: ChannelDriftModel,
        step_rng: ChaCha8Rng,
        env_rng: ChaCha8Rng,
        next_step: u64,
        next_env: u64,
    },
    Scripted(std::vec::IntoIter<(f64, PolarizationUnitary)>),
}

/// Lazily generated piecewise-constant channel unitary.
pub struct ChannelDrift {
    source: Source,
    /// Change times and the cumulative unitary in force from each time on.
    times: Vec<f64>,
    unitaries: Vec<PolarizationUnitary>,
    exhausted: bool,
}

impl ChannelDrift {
    pub fn new(model: &ChannelDriftModel) -> Self {
        let exhausted = model.mode == DriftMode::Static && model.environment_sigma == 0.0;
        Self {
            source: Source::Model {
                model: model.clone(),
                step_rng: ChaCha8Rng::seed_from_u64(model.seed),
                env_rng: ChaCha8Rng::seed_from_u64(model.seed ^ 0xe7e7_e7e7_0000_0001),
                next_step: 1,
                next_env: 1,
            },
            times: vec![f64::NEG_INFINITY],
            unitaries: vec![PolarizationUnitary::identity()],
            exhausted,
        }
    }

    /// Fixed channel.
    pub fn constant(u: PolarizationUnitary) -> Self {
        Self::scripted(vec![(f64::NEG_INFINITY, u)])
    }

    /// Applies each `(time, rotation)` on top of the current channel at
    /// `time`. Times must be non-decreasing.
    pub fn scripted(mut steps: Vec<(f64, PolarizationUnitary)>) -> Self {
        steps.sort_by(|a, b| a.0.total_cmp(&b.0));
        Self {
            source: Source::Scripted(steps.into_iter()),
            times: vec![f64::NEG_INFINITY],
            unitaries: vec![PolarizationUnitary::identity()],
            exhausted: false,
        }
    }

    fn next_change(&mut self) -> Option<(f64, PolarizationUnitary)> {
        match &mut self.source {
            Source::Scripted(it) => it.next(),
            Source::Model { model, step_rng, env_rng, next_step, next_env } => {
                let steps_on = model.mode != DriftMode::Static;
                let env_on = model.environment_sigma > 0.0;
                let t_step = if steps_on { *next_step as f64 * model.step_interval } else { f64::INFINITY };
                let t_env = if env_on { *next_env as f64 * model.environment_interval } else { f64::INFINITY };
                if !t_step.is_finite() && !t_env.is_finite() {
                    return None;
                }
                if t_step <= t_env {
                    *next_step += 1;
                    let axis = random_axis(step_rng);
                    let angle = match model.mode {
                        DriftMode::ScramblerSteps => model.step_magnitude,
                        _ => Normal::new(0.0, model.step_magnitude)
                            .map(|d| d.sample(step_rng))
                            .unwrap_or(0.0),
                    };
                    Some((t_step, PolarizationUnitary::axis_rotation(axis, angle)))
                } else {
                    *next_env += 1;
                    let axis = random_axis(env_rng);
                    let sd = model.environment_sigma * model.environment_interval.sqrt();
                    let angle = Normal::new(0.0, sd).map(|d| d.sample(env_rng)).unwrap_or(0.0);
                    Some((t_env, PolarizationUnitary::axis_rotation(axis, angle)))
                }
            }
        }
    }

    fn extend_past(&mut self, t: f64) {
        while !self.exhausted && *self.times.last().expect("non-empty") <= t {
            match self.next_change() {
                Some((time, step)) => {
                    let current = *self.unitaries.last().expect("non-empty");
                    let next = (step * current).reunitarize();
                    if time == *self.times.last().expect("non-empty") {
                        *self.unitaries.last_mut().expect("non-empty") = next;
                    } else {
                        self.times.push(time);
                        self.unitaries.push(next);
                    }
                }
                None => self.exhausted = true,
            }
        }
    }

    /// Channel unitary in force at time `t` (seconds on Bob's clock).
    pub fn unitary_at(&mut self, t: f64) -> PolarizationUnitary {
        self.extend_past(t);
        let idx = self.times.partition_point(|&x| x <= t);
        self.unitaries[idx.saturating_sub(1)]
    }

    /// First change strictly after `t`, or infinity.
    pub fn next_change_after(&mut self, t: f64) -> f64 {
        self.extend_past(t);
        let idx = self.times.partition_point(|&x| x <= t);
        self.times.get(idx).copied().unwrap_or(f64::INFINITY)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optics::{measurement_probabilities, symbol_to_state, Basis, Bb84Symbol, UNITARY_TOLERANCE};

    #[test]
    fn static_channel_is_identity_forever() {
        let mut d = ChannelDrift::new(&ChannelDriftModel::static_channel());
        assert_eq!(d.unitary_at(1e6), PolarizationUnitary::identity());
        assert_eq!(d.next_change_after(0.0), f64::INFINITY);
    }

    #[test]
    fn scrambler_steps_change_at_interval_and_stay_unitary() {
        let model = ChannelDriftModel { mode: DriftMode::ScramblerSteps, seed: 4, ..ChannelDriftModel::default() };
        let mut d = ChannelDrift::new(&model);
        assert_eq!(d.unitary_at(299.9), PolarizationUnitary::identity());
        assert_eq!(d.next_change_after(0.0), 300.0);
        assert_eq!(d.next_change_after(300.0), 600.0);
        for k in 0..40 {
            let u = d.unitary_at(k as f64 * 300.0 + 1.0);
            assert!(u.is_unitary(UNITARY_TOLERANCE));
        }
        assert_ne!(d.unitary_at(301.0), d.unitary_at(299.0));
    }

    #[test]
    fn single_scrambler_step_error_is_bounded_by_magnitude() {
        let model = ChannelDriftModel { mode: DriftMode::ScramblerSteps, seed: 9, ..ChannelDriftModel::default() };
        let mut d = ChannelDrift::new(&model);
        let u = d.unitary_at(301.0);
        let s = symbol_to_state(Bb84Symbol::new(Basis::Z, 0));
        let (_, p1) = measurement_probabilities(&u.apply(&s), Basis::Z, &PolarizationUnitary::identity());
        assert!(p1 <= 0.15f64.sin().powi(2) + 1e-12);
    }

    #[test]
    fn environment_diffusion_adds_frequent_changes() {
        let model = ChannelDriftModel { environment_sigma: 0.01, seed: 1, ..ChannelDriftModel::default() };
        let mut d = ChannelDrift::new(&model);
        assert_eq!(d.next_change_after(0.0), 1.0);
        assert_eq!(d.next_change_after(5.5), 6.0);
        assert!(d.unitary_at(100.0).is_unitary(UNITARY_TOLERANCE));
    }

    #[test]
    fn same_seed_same_drift() {
        let model = ChannelDriftModel { mode: DriftMode::RandomWalk, step_interval: 1.0, seed: 3, ..ChannelDriftModel::default() };
        let mut a = ChannelDrift::new(&model);
        let mut b = ChannelDrift::new(&model);
        assert_eq!(a.unitary_at(57.5), b.unitary_at(57.5));
    }

    #[test]
    fn scripted_steps_compose() {
        let r = PolarizationUnitary::rotation_y(0.1);
        let mut d = ChannelDrift::scripted(vec![(10.0, r), (20.0, r)]);
        assert_eq!(d.unitary_at(5.0), PolarizationUnitary::identity());
        let two = d.unitary_at(25.0);
        let expect = PolarizationUnitary::rotation_y(0.2);
        assert!(two.matrix().iter().flatten().zip(expect.matrix().iter().flatten()).all(|(a, b)| (a - b).norm() < 1e-12));
    }
}
