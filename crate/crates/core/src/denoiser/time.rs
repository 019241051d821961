//! Frequency encoding of the diffusion timestep.

use std::f64::consts::PI;

/// Frequencies used for a diffusion of `steps` steps: 8 up to 256 steps,
/// otherwise enough that every timestep stays distinguishable.
pub fn n_freq(steps: usize) -> usize {
    if steps <= 256 {
        8
    } else {
        (steps as f64).log2().ceil() as usize + 1
    }
}

/// `[sin(π·2ᵏ·t/T), cos(π·2ᵏ·t/T)]` for `k = 0..n_freq`, interleaved.
pub fn encode_time(t: usize, steps: usize, n_freq: usize) -> Vec<f64> {
    let phase = t as f64 / steps as f64;
    let mut out = Vec::with_capacity(2 * n_freq);
    for k in 0..n_freq {
        let a = PI * (1u64 << k) as f64 * phase;
        out.push(a.sin());
        out.push(a.cos());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_phase() {
        let e = encode_time(0, 100, 8);
        for k in 0..8 {
            assert_eq!(e[2 * k], 0.0);
            assert_eq!(e[2 * k + 1], 1.0);
        }
    }

    #[test]
    fn endpoint() {
        let e = encode_time(100, 100, 8);
        assert!(e[0].abs() < 1e-15);
        assert_eq!(e[1], -1.0);
    }

    #[test]
    fn every_timestep_is_distinct() {
        let steps = 100;
        let l = (steps as f64).log2().ceil() as usize + 1;
        assert!(n_freq(steps) >= l);
        let codes: Vec<Vec<f64>> = (0..=steps).map(|t| encode_time(t, steps, n_freq(steps))).collect();
        for i in 0..codes.len() {
            for j in i + 1..codes.len() {
                let d: f64 = codes[i].iter().zip(&codes[j]).map(|(a, b)| (a - b).powi(2)).sum();
                assert!(d > 1e-6, "t={i} and t={j} collide");
            }
        }
    }

    #[test]
    fn long_schedules_get_more_frequencies() {
        assert_eq!(n_freq(256), 8);
        assert_eq!(n_freq(1000), 11);
    }
}
