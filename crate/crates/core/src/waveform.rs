//! Programmable high-voltage drive: DC square wave and frequency sweep, plus
//! the complementary charge/discharge switch schedule.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default dead time after each edge during which both switches are open, s.
pub const DEFAULT_DEAD_TIME: f64 = 100e-6;

#[derive(Debug, Error, PartialEq)]
pub enum WaveformError {
    #[error("time {t} s outside waveform window [0, {duration}] s")]
    Range { t: f64, duration: f64 },
    #[error("invalid waveform: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WaveformKind {
    DCSquare,
    FrequencySweep,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepLaw {
    #[default]
    Linear,
    Log,
}

fn default_duty() -> f64 {
    0.5
}

fn default_dead_time() -> f64 {
    DEFAULT_DEAD_TIME
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaveformSpec {
    pub kind: WaveformKind,
    /// High-level field, V/µm.
    pub field: f64,
    /// Hz
    pub freq_start: f64,
    /// Hz; equals `freq_start` for a square wave.
    pub freq_end: f64,
    #[serde(default = "default_duty")]
    pub duty: f64,
    /// s
    pub duration: f64,
    #[serde(default)]
    pub sweep_law: SweepLaw,
    /// s
    #[serde(default = "default_dead_time")]
    pub dead_time: f64,
}

/// Which switch path is closed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SwitchState {
    pub charge_closed: bool,
    pub discharge_closed: bool,
}

impl WaveformSpec {
    pub fn dc_square(field: f64, freq: f64, duration: f64) -> Self {
        Self {
            kind: WaveformKind::DCSquare,
            field,
            freq_start: freq,
            freq_end: freq,
            duty: 0.5,
            duration,
            sweep_law: SweepLaw::Linear,
            dead_time: DEFAULT_DEAD_TIME,
        }
    }

    pub fn sweep(field: f64, freq_start: f64, freq_end: f64, duration: f64) -> Self {
        Self {
            kind: WaveformKind::FrequencySweep,
            field,
            freq_start,
            freq_end,
            duty: 0.5,
            duration,
            sweep_law: SweepLaw::Linear,
            dead_time: DEFAULT_DEAD_TIME,
        }
    }

    pub fn validate(&self) -> Result<(), WaveformError> {
        let bad = |m: &str| Err(WaveformError::Invalid(m.to_string()));
        if !(self.duty > 0.0 && self.duty < 1.0) {
            return bad("duty must lie in (0, 1)");
        }
        if !(self.freq_start > 0.0 && self.freq_end > 0.0) {
            return bad("frequencies must be > 0");
        }
        if self.kind == WaveformKind::DCSquare && self.freq_start != self.freq_end {
            return bad("square wave requires freq_end == freq_start");
        }
        if !(self.duration > 0.0) {
            return bad("duration must be > 0");
        }
        if !(self.field >= 0.0) {
            return bad("field must be >= 0");
        }
        if !(self.dead_time >= 0.0) {
            return bad("dead_time must be >= 0");
        }
        Ok(())
    }

    fn check(&self, t: f64) -> Result<(), WaveformError> {
        if (0.0..=self.duration).contains(&t) {
            Ok(())
        } else {
            Err(WaveformError::Range {
                t,
                duration: self.duration,
            })
        }
    }

    /// Instantaneous frequency, Hz.
    pub fn frequency_at(&self, t: f64) -> f64 {
        match (self.kind, self.sweep_law) {
            (WaveformKind::DCSquare, _) => self.freq_start,
            (WaveformKind::FrequencySweep, SweepLaw::Linear) => {
                self.freq_start + (self.freq_end - self.freq_start) * t / self.duration
            }
            (WaveformKind::FrequencySweep, SweepLaw::Log) => {
                self.freq_start * (self.freq_end / self.freq_start).powf(t / self.duration)
            }
        }
    }

    /// Cycles elapsed since t = 0 (integral of the instantaneous frequency).
    pub fn phase(&self, t: f64) -> f64 {
        match (self.kind, self.sweep_law) {
            (WaveformKind::DCSquare, _) => self.freq_start * t,
            (WaveformKind::FrequencySweep, SweepLaw::Linear) => {
                self.freq_start * t + (self.freq_end - self.freq_start) * t * t / (2.0 * self.duration)
            }
            (WaveformKind::FrequencySweep, SweepLaw::Log) => {
                let ratio = self.freq_end / self.freq_start;
                if (ratio - 1.0).abs() < 1e-12 {
                    self.freq_start * t
                } else {
                    self.freq_start * self.duration / ratio.ln() * (ratio.powf(t / self.duration) - 1.0)
                }
            }
        }
    }

    /// Inverse of [`phase`](Self::phase): time at which `cycles` periods have elapsed.
    pub fn time_at_phase(&self, cycles: f64) -> f64 {
        match (self.kind, self.sweep_law) {
            (WaveformKind::DCSquare, _) => cycles / self.freq_start,
            (WaveformKind::FrequencySweep, SweepLaw::Linear) => {
                let a = (self.freq_end - self.freq_start) / (2.0 * self.duration);
                if a.abs() < 1e-15 {
                    cycles / self.freq_start
                } else {
                    let f0 = self.freq_start;
                    // stable root of a t^2 + f0 t - cycles = 0
                    2.0 * cycles / (f0 + (f0 * f0 + 4.0 * a * cycles).sqrt())
                }
            }
            (WaveformKind::FrequencySweep, SweepLaw::Log) => {
                let ratio = self.freq_end / self.freq_start;
                if (ratio - 1.0).abs() < 1e-12 {
                    cycles / self.freq_start
                } else {
                    let k = ratio.ln();
                    self.duration * (1.0 + cycles * k / (self.freq_start * self.duration)).ln() / k
                }
            }
        }
    }

    /// Index of the drive period containing `t`.
    pub fn cycle_index(&self, t: f64) -> u64 {
        self.phase(t).floor().max(0.0) as u64
    }

    fn is_high_unchecked(&self, t: f64) -> bool {
        self.phase(t).fract() < self.duty
    }

    /// Whether the drive is in a high segment at `t`.
    pub fn is_high(&self, t: f64) -> Result<bool, WaveformError> {
        self.check(t)?;
        Ok(self.is_high_unchecked(t))
    }

    /// Commanded voltage, V.
    pub fn voltage_at(&self, t: f64, layer_thickness: f64) -> Result<f64, WaveformError> {
        Ok(if self.is_high(t)? {
            self.high_voltage(layer_thickness)
        } else {
            0.0
        })
    }

    pub fn high_voltage(&self, layer_thickness: f64) -> f64 {
        self.field * layer_thickness
    }

    /// Time since the most recent edge, s (t = 0 counts as a rising edge).
    fn since_edge(&self, t: f64) -> f64 {
        let p = self.phase(t).fract();
        let dp = if p < self.duty { p } else { p - self.duty };
        dp / self.frequency_at(t)
    }

    /// Charge/discharge opto-coupler states. After every edge both paths stay
    /// open for the dead time.
    pub fn switch_schedule(&self, t: f64) -> Result<SwitchState, WaveformError> {
        let high = self.is_high(t)?;
        if self.since_edge(t) < self.dead_time {
            return Ok(SwitchState {
                charge_closed: false,
                discharge_closed: false,
            });
        }
        Ok(SwitchState {
            charge_closed: high,
            discharge_closed: !high,
        })
    }

    /// Steady-state voltage across a device with RC time constant `tau`
    /// (seconds), as a fraction of the high level. The start-up transient is
    /// ignored; sweeps use the instantaneous period.
    pub fn charge_fraction(&self, t: f64, tau: f64) -> Result<f64, WaveformError> {
        let high = self.is_high(t)?;
        if tau <= 0.0 {
            return Ok(if high { 1.0 } else { 0.0 });
        }
        let period = 1.0 / self.frequency_at(t);
        let x_high = (-(self.duty * period) / tau).exp();
        let x_low = (-((1.0 - self.duty) * period) / tau).exp();
        let peak = (1.0 - x_high) / (1.0 - x_high * x_low);
        let trough = peak * x_low;
        let decay = (-self.since_edge(t) / tau).exp();
        Ok(if high {
            1.0 + (trough - 1.0) * decay
        } else {
            peak * decay
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn square_levels() {
        let w = WaveformSpec::dc_square(40.0, 1.0, 10.0);
        assert_eq!(w.voltage_at(0.25, 30.0).unwrap(), 1200.0);
        assert_eq!(w.voltage_at(0.75, 30.0).unwrap(), 0.0);
    }

    #[test]
    fn out_of_window_is_range_error() {
        let w = WaveformSpec::dc_square(40.0, 1.0, 10.0);
        assert!(matches!(w.voltage_at(-0.1, 30.0), Err(WaveformError::Range { .. })));
        assert!(matches!(w.voltage_at(10.1, 30.0), Err(WaveformError::Range { .. })));
        assert!(w.switch_schedule(11.0).is_err());
    }

    #[test]
    fn validation() {
        let mut w = WaveformSpec::dc_square(40.0, 1.0, 10.0);
        assert!(w.validate().is_ok());
        w.duty = 1.0;
        assert!(w.validate().is_err());
        let mut w = WaveformSpec::dc_square(40.0, 1.0, 10.0);
        w.freq_end = 2.0;
        assert!(w.validate().is_err());
        assert!(WaveformSpec::sweep(40.0, 1.0, 100.0, 0.0).validate().is_err());
    }

    #[test]
    fn sweep_rising_edges_match_phase_integral() {
        // Oracle: count low->high transitions of the generated signal at 10 kHz.
        let w = WaveformSpec::sweep(45.0, 1.0, 100.0, 100.0);
        let rate = 10_000.0;
        let n = (w.duration * rate) as usize;
        let mut prev = false;
        let mut edges = 0;
        for i in 0..=n {
            let v = w.voltage_at(i as f64 / rate, 30.0).unwrap() > 0.0;
            if v && !prev {
                edges += 1;
            }
            prev = v;
        }
        assert!((edges as i64 - 5050).abs() <= 1, "edges = {edges}");
        assert!((w.phase(100.0) - 5050.0).abs() < 1e-9);
    }

    #[test]
    fn log_sweep_phase_is_integral_of_frequency() {
        let mut w = WaveformSpec::sweep(45.0, 1.0, 100.0, 100.0);
        w.sweep_law = SweepLaw::Log;
        // trapezoid integral of frequency_at
        let n = 200_000;
        let h = w.duration / n as f64;
        let mut acc = 0.0;
        for i in 0..n {
            let a = w.frequency_at(i as f64 * h);
            let b = w.frequency_at((i + 1) as f64 * h);
            acc += 0.5 * (a + b) * h;
        }
        assert!((acc - w.phase(100.0)).abs() / acc < 1e-6);
    }

    #[test]
    fn time_at_phase_inverts_phase() {
        let mut w = WaveformSpec::sweep(45.0, 1.0, 100.0, 100.0);
        for law in [SweepLaw::Linear, SweepLaw::Log] {
            w.sweep_law = law;
            for t in [0.0, 0.3, 7.7, 55.0, 100.0] {
                assert!((w.time_at_phase(w.phase(t)) - t).abs() < 1e-9);
            }
        }
        let sq = WaveformSpec::dc_square(40.0, 5.0, 10.0);
        assert_eq!(sq.time_at_phase(2.5), 0.5);
    }

    #[test]
    fn switch_states_mid_segments() {
        let w = WaveformSpec::dc_square(40.0, 1.0, 10.0);
        let s = w.switch_schedule(0.25).unwrap();
        assert!(s.charge_closed && !s.discharge_closed);
        let s = w.switch_schedule(0.75).unwrap();
        assert!(!s.charge_closed && s.discharge_closed);
    }

    #[test]
    fn dead_time_window_dense_scan() {
        // 1 MHz sampling across one 50 Hz period.
        let w = WaveformSpec::dc_square(40.0, 50.0, 1.0);
        let period = 1.0 / 50.0;
        let mut open_both = 0;
        for i in 0..=(period * 1e6) as usize {
            let t = i as f64 * 1e-6;
            let s = w.switch_schedule(t).unwrap();
            assert!(!(s.charge_closed && s.discharge_closed), "shoot-through at {t}");
            let near_rise = t < w.dead_time * 0.999 || (t >= period && t - period < w.dead_time * 0.999);
            let near_fall = t >= 0.5 * period && t - 0.5 * period < w.dead_time * 0.999;
            if near_rise || near_fall {
                assert!(!s.charge_closed && !s.discharge_closed, "closed inside dead time at {t}");
            }
            if !s.charge_closed && !s.discharge_closed {
                open_both += 1;
            }
        }
        // two edges (plus the next period's rising edge) x ~100 samples
        assert!((200..=302).contains(&open_both), "open samples {open_both}");
    }

    #[test]
    fn charge_fraction_limits() {
        let w = WaveformSpec::dc_square(40.0, 1.0, 10.0);
        // slow drive: fully charged in the high segment, fully discharged at the end of low
        assert!((w.charge_fraction(0.49, 1e-3).unwrap() - 1.0).abs() < 1e-12);
        assert!(w.charge_fraction(0.99, 1e-3).unwrap() < 1e-12);
        assert_eq!(w.charge_fraction(0.3, 0.0).unwrap(), 1.0);
        // fast drive with a 5 ms time constant never fully charges
        let fast = WaveformSpec::dc_square(40.0, 50.0, 1.0);
        let peak = fast.charge_fraction(0.0099999, 5e-3).unwrap();
        assert!(peak < 0.9 && peak > 0.5);
        // continuity at the falling edge
        let after = fast.charge_fraction(0.0100001, 5e-3).unwrap();
        assert!((peak - after).abs() < 1e-3);
    }

    proptest! {
        #[test]
        fn never_both_closed(f in 0.5f64..200.0, duty_pct in 5u32..95, t in 0.0f64..5.0) {
            let mut w = WaveformSpec::dc_square(40.0, f, 5.0);
            w.duty = duty_pct as f64 / 100.0;
            let s = w.switch_schedule(t).unwrap();
            prop_assert!(!(s.charge_closed && s.discharge_closed));
        }

        #[test]
        fn period_mean_is_duty_times_high(duty_k in 1u32..1000, freq in 0.5f64..20.0) {
            let n = 1000u32;
            let mut w = WaveformSpec::dc_square(40.0, freq, 100.0);
            w.duty = duty_k as f64 / n as f64;
            let period = 1.0 / freq;
            // midpoint rule; every edge falls on a cell boundary
            let mut sum = 0.0;
            for i in 0..n {
                let t = (i as f64 + 0.5) / n as f64 * period;
                sum += w.voltage_at(t, 30.0).unwrap();
            }
            let mean = sum / n as f64;
            let expected = w.duty * 1200.0;
            prop_assert!(((mean - expected) / expected).abs() <= 1e-9);
        }

        #[test]
        fn square_is_periodic(freq in 0.5f64..50.0, t in 0.0f64..5.0) {
            let w = WaveformSpec::dc_square(40.0, freq, 10.0);
            let p = 1.0 / freq;
            // stay clear of edges where floating-point phase can flip sides
            let frac = (w.phase(t)).fract();
            prop_assume!((frac - 0.5).abs() > 1e-6 && frac > 1e-6 && frac < 1.0 - 1e-6);
            prop_assert_eq!(w.voltage_at(t, 30.0).unwrap(), w.voltage_at(t + p, 30.0).unwrap());
        }
    }
}
