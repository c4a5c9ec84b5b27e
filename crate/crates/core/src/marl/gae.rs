//! Generalized advantage estimation over one environment's step sequence.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GaeError {
    #[error("values length {values} does not match rewards length {rewards}")]
    LengthMismatch { values: usize, rewards: usize },
    #[error("missing bootstrap value for a non-terminal tail")]
    MissingBootstrap,
}

/// δ_t = r_t + γ·V(s_{t+1})·(1−done_t) − V(s_t);
/// A_t = δ_t + γλ·(1−done_t)·A_{t+1}; returns = A_t + V(s_t).
///
/// `bootstrap` is V of the state following the last step; it must be
/// provided unless the last step is terminal.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    bootstrap: Option<f64>,
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>), GaeError> {
    let t_max = rewards.len();
    if values.len() != t_max {
        return Err(GaeError::LengthMismatch { values: values.len(), rewards: t_max });
    }
    assert_eq!(dones.len(), t_max);
    if t_max == 0 {
        return Ok((Vec::new(), Vec::new()));
    }
    if !dones[t_max - 1] && bootstrap.is_none() {
        return Err(GaeError::MissingBootstrap);
    }

    let mut advantages = vec![0.0; t_max];
    let mut next_adv = 0.0;
    for t in (0..t_max).rev() {
        let not_done = if dones[t] { 0.0 } else { 1.0 };
        let next_value = if t + 1 < t_max {
            values[t + 1]
        } else {
            bootstrap.unwrap_or(0.0)
        };
        let delta = rewards[t] + gamma * next_value * not_done - values[t];
        next_adv = delta + gamma * lambda * not_done * next_adv;
        advantages[t] = next_adv;
    }
    let returns: Vec<f64> = advantages.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((advantages, returns))
}
