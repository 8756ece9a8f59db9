//! Leaky integrate-and-fire layers with subtraction reset, and the
//! leak-weighted average spiking rate (ASR) accumulator.
//!
//! One step of a layer:
//!
//! ```text
//! u' = gamma * u + I
//! s  = 1 if u' > v_th else 0
//! u  = u' - v_th * s
//! ```
//!
//! The ASR after `t` steps is `sum gamma^(t-tau) s[tau] / sum gamma^(t-tau)`,
//! kept as two running accumulators so it costs O(1) per step.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LifConfig {
    /// Leak factor, `0 < gamma <= 1`.
    pub gamma: f64,
    /// Spiking threshold, `> 0`.
    pub v_th: f64,
}

impl Default for LifConfig {
    fn default() -> Self {
        Self { gamma: 1.0, v_th: 1.0 }
    }
}

impl LifConfig {
    pub fn new(gamma: f64, v_th: f64) -> Result<Self> {
        let cfg = Self { gamma, v_th };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::config(format!("gamma must be in (0, 1], got {}", self.gamma)));
        }
        if !(self.v_th > 0.0 && self.v_th.is_finite()) {
            return Err(Error::config(format!("v_th must be positive, got {}", self.v_th)));
        }
        Ok(())
    }
}

/// State of one population of LIF neurons.
#[derive(Debug, Clone, PartialEq)]
pub struct LifLayerState {
    /// Membrane potentials.
    pub u: Vec<f64>,
    /// Spikes emitted by the most recent step.
    pub s: Vec<u8>,
    /// `sum gamma^(t - tau) s[tau]` per neuron.
    pub asr_num: Vec<f64>,
    /// `sum gamma^(t - tau)`, shared by every neuron of the layer.
    pub asr_den: f64,
    /// Total spikes per neuron since reset, used for operation accounting.
    pub spike_count: Vec<u64>,
    /// Number of steps taken.
    pub t: u64,
}

impl LifLayerState {
    pub fn new(neurons: usize) -> Self {
        Self {
            u: vec![0.0; neurons],
            s: vec![0; neurons],
            asr_num: vec![0.0; neurons],
            asr_den: 0.0,
            spike_count: vec![0; neurons],
            t: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }

    /// Advances every neuron by one timestep under `input_current`.
    pub fn step(&mut self, input_current: &[f64], cfg: &LifConfig) -> Result<&[u8]> {
        if input_current.len() != self.u.len() {
            return Err(Error::shape(format!(
                "input current has {} entries for {} neurons",
                input_current.len(),
                self.u.len()
            )));
        }
        if let Some(bad) = input_current.iter().position(|c| !c.is_finite()) {
            return Err(Error::Numeric(format!("non-finite input current at neuron {bad}")));
        }
        let g = cfg.gamma;
        for i in 0..self.u.len() {
            let pre = g * self.u[i] + input_current[i];
            let spike = pre > cfg.v_th;
            self.s[i] = spike as u8;
            self.u[i] = if spike { pre - cfg.v_th } else { pre };
            self.asr_num[i] = g * self.asr_num[i] + f64::from(self.s[i]);
            self.spike_count[i] += spike as u64;
        }
        self.asr_den = g * self.asr_den + 1.0;
        self.t += 1;
        Ok(&self.s)
    }

    /// Leak-weighted average spiking rate of every neuron.
    pub fn asr(&self) -> Result<Vec<f64>> {
        if self.t == 0 {
            return Err(Error::UndefinedAsr);
        }
        Ok(self.asr_num.iter().map(|n| n / self.asr_den).collect())
    }

    pub fn total_spikes(&self) -> u64 {
        self.spike_count.iter().sum()
    }
}

/// Functional form of [`LifLayerState::step`].
pub fn lif_step(mut state: LifLayerState, input_current: &[f64], cfg: &LifConfig) -> Result<LifLayerState> {
    state.step(input_current, cfg)?;
    Ok(state)
}

/// ASR of a recorded spike train under leak `gamma`.
pub fn asr_of_train(spikes: &[u8], gamma: f64) -> Result<f64> {
    if spikes.is_empty() {
        return Err(Error::UndefinedAsr);
    }
    let (mut num, mut den) = (0.0, 0.0);
    for &s in spikes {
        num = gamma * num + f64::from(s);
        den = gamma * den + 1.0;
    }
    Ok(num / den)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn drive(c: f64, steps: usize, cfg: &LifConfig) -> (LifLayerState, Vec<u8>) {
        let mut st = LifLayerState::new(1);
        let mut train = Vec::new();
        for _ in 0..steps {
            train.push(st.step(&[c], cfg).unwrap()[0]);
        }
        (st, train)
    }

    #[test]
    fn supra_threshold_drive_spikes_every_step() {
        let cfg = LifConfig::default();
        for t in 1..20 {
            let (st, _) = drive(1.5, t, &cfg);
            assert_eq!(st.asr().unwrap()[0], 1.0);
        }
    }

    #[test]
    fn drive_exactly_at_threshold_misses_first_step() {
        // u reaches exactly v_th on step 1, which is not a spike under the strict rule.
        let cfg = LifConfig::default();
        let (st, train) = drive(1.0, 10, &cfg);
        assert_eq!(train, [0, 1, 1, 1, 1, 1, 1, 1, 1, 1]);
        assert!((st.asr().unwrap()[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn half_drive_spikes_every_other_step() {
        let cfg = LifConfig::default();
        let (st, train) = drive(0.5, 10, &cfg);
        assert_eq!(train, [0, 0, 1, 0, 1, 0, 1, 0, 1, 0]);
        let a = st.asr().unwrap()[0];
        assert!((a - 0.5).abs() <= 1.0 / 10.0 + 1e-15);
        let (st, _) = drive(0.5, 1000, &cfg);
        assert!((st.asr().unwrap()[0] - 0.5).abs() <= 1.0 / 1000.0 + 1e-15);
    }

    #[test]
    fn zero_drive_never_spikes() {
        let (st, train) = drive(0.0, 50, &LifConfig::default());
        assert!(train.iter().all(|&s| s == 0));
        assert_eq!(st.asr().unwrap()[0], 0.0);
    }

    #[test]
    fn asr_of_hand_trains() {
        assert_eq!(asr_of_train(&[1, 1, 1], 1.0).unwrap(), 1.0);
        assert_eq!(asr_of_train(&[1, 0, 1, 0], 1.0).unwrap(), 0.5);
        assert!((asr_of_train(&[1, 0], 0.5).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn asr_before_first_step_is_an_error() {
        assert!(matches!(LifLayerState::new(3).asr(), Err(Error::UndefinedAsr)));
        assert!(asr_of_train(&[], 1.0).is_err());
    }

    #[test]
    fn step_rejects_bad_input() {
        let cfg = LifConfig::default();
        let mut st = LifLayerState::new(2);
        assert!(matches!(st.step(&[1.0], &cfg), Err(Error::Shape(_))));
        assert!(matches!(st.step(&[1.0, f64::NAN], &cfg), Err(Error::Numeric(_))));
        let st = lif_step(LifLayerState::new(2), &[2.0, 0.0], &cfg).unwrap();
        assert_eq!(st.s, vec![1, 0]);
    }

    #[test]
    fn config_validation() {
        assert!(LifConfig::new(0.0, 1.0).is_err());
        assert!(LifConfig::new(1.1, 1.0).is_err());
        assert!(LifConfig::new(0.9, 0.0).is_err());
        assert!(LifConfig::new(0.9, 0.5).is_ok());
    }

    proptest! {
        #[test]
        fn rate_law_within_one_over_t(c in 0.0f64..=1.0, steps in 1usize..300) {
            let cfg = LifConfig::default();
            let mut st = LifLayerState::new(1);
            for t in 1..=steps {
                st.step(&[c], &cfg).unwrap();
                let a = st.asr().unwrap()[0];
                prop_assert!((a - c).abs() <= 1.0 / t as f64 + 1e-12);
                // with gamma = 1 the ASR is the plain spike fraction
                prop_assert_eq!(a, st.spike_count[0] as f64 / t as f64);
            }
        }

        #[test]
        fn spikes_binary_and_asr_bounded(
            gamma in 0.05f64..=1.0,
            currents in proptest::collection::vec(-3.0f64..3.0, 1..80),
        ) {
            let cfg = LifConfig::new(gamma, 1.0).unwrap();
            let mut st = LifLayerState::new(1);
            for c in currents {
                st.step(&[c], &cfg).unwrap();
                prop_assert!(st.s[0] <= 1);
                prop_assert!(st.asr_num[0] <= st.asr_den + 1e-12);
                let a = st.asr().unwrap()[0];
                prop_assert!((0.0..=1.0).contains(&a));
            }
        }

        #[test]
        fn subthreshold_membrane_stays_bounded(gamma in 0.1f64..0.95, frac in 0.0f64..1.0) {
            let cfg = LifConfig::new(gamma, 1.0).unwrap();
            let c = frac * cfg.v_th * (1.0 - gamma);
            let mut st = LifLayerState::new(1);
            for _ in 0..500 {
                st.step(&[c], &cfg).unwrap();
                prop_assert!(st.u[0] <= c / (1.0 - gamma) + 1e-12);
                prop_assert_eq!(st.s[0], 0);
            }
        }
    }
}
