//! Cosine momentum schedule for the EMA target network.

use std::f64::consts::PI;

use super::mlp::MlpParams;
use crate::error::{Error, Result};

/// `m(t) = m_f − (m_f − m_i)(cos(πt/T) + 1)/2`
pub fn momentum_at(step: usize, total_steps: usize, m_init: f64, m_final: f64) -> f64 {
    if total_steps == 0 {
        return m_final;
    }
    let t = step.min(total_steps) as f64 / total_steps as f64;
    m_final - (m_final - m_init) * ((PI * t).cos() + 1.0) / 2.0
}

/// Online/target pair of a siamese network.
#[derive(Debug, Clone, PartialEq)]
pub struct SiameseState {
    pub online: MlpParams,
    pub target: MlpParams,
    pub target_kind: super::TargetBranch,
    pub momentum_m: f64,
}

impl SiameseState {
    pub fn new(online: MlpParams, target_kind: super::TargetBranch, m_init: f64) -> Self {
        Self {
            target: online.clone(),
            online,
            target_kind,
            momentum_m: m_init,
        }
    }

    /// Keep a detached copy in lockstep for the non-EMA target kinds.
    pub fn sync_target(&mut self) {
        if !self.target_kind.uses_ema() {
            self.target.copy_from(&self.online);
        }
    }
}

/// Set `m` from the schedule and move the target toward the online weights.
pub fn ema_update(
    state: &mut SiameseState,
    step: usize,
    total_steps: usize,
    m_init: f64,
    m_final: f64,
) -> Result<()> {
    if !state.target_kind.uses_ema() {
        return Err(Error::param("target_kind", "EMA update needs a momentum target"));
    }
    let m = momentum_at(step, total_steps, m_init, m_final);
    state.momentum_m = m;
    state.target.blend_toward(&state.online, m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::TargetBranch;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn schedule_endpoints() {
        assert_eq!(momentum_at(0, 2000, 0.996, 1.0), 0.996);
        assert_eq!(momentum_at(2000, 2000, 0.996, 1.0), 1.0);
        assert!((momentum_at(1000, 2000, 0.996, 1.0) - 0.998).abs() < 1e-15);
        let mut prev = 0.0;
        for t in 0..=2000 {
            let m = momentum_at(t, 2000, 0.996, 1.0);
            assert!(m >= prev);
            prev = m;
        }
    }

    #[test]
    fn ema_blends_and_rejects_non_momentum() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = MlpParams::random(&[2, 3], &mut rng).unwrap();
        let b = MlpParams::random(&[2, 3], &mut rng).unwrap();
        let mut s = SiameseState::new(a.clone(), TargetBranch::Momentum, 0.5);
        s.online = b.clone();
        ema_update(&mut s, 0, 10, 0.5, 1.0).unwrap();
        let expect: Vec<f64> = a.flat().iter().zip(b.flat()).map(|(x, y)| 0.5 * x + 0.5 * y).collect();
        assert_eq!(s.target.flat(), expect);

        let mut s = SiameseState::new(a, TargetBranch::StopGradient, 0.5);
        assert!(ema_update(&mut s, 0, 10, 0.5, 1.0).is_err());
    }
}
