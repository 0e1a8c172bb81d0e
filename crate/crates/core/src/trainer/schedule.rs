//! Cosine annealing with warm restarts.

use super::TrainConfig;

/// Rate at `t_cur` epochs into a cycle of `t_i` epochs.
pub fn cosine_lr(t_cur: f64, t_i: f64, lr_max: f64, lr_min: f64) -> f64 {
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * t_cur / t_i).cos())
}

/// Position `(t_cur, t_i)` of fractional epoch `progress` within its cycle.
/// Cycles last `T0, T0·Tmult, T0·Tmult², …` epochs.
pub fn sgdr_cycle(progress: f64, t0: usize, t_mult: usize) -> (f64, f64) {
    let mut t_cur = progress.max(0.0);
    let mut t_i = t0 as f64;
    while t_cur >= t_i {
        t_cur -= t_i;
        t_i *= t_mult as f64;
    }
    (t_cur, t_i)
}

pub fn sgdr_lr(progress: f64, config: &TrainConfig) -> f64 {
    let (t_cur, t_i) = sgdr_cycle(progress, config.sgdr_t0, config.sgdr_tmult);
    cosine_lr(t_cur, t_i, config.lr_max, config.lr_min)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> TrainConfig {
        TrainConfig {
            lr_max: 1e-3,
            lr_min: 1e-5,
            sgdr_t0: 10,
            sgdr_tmult: 2,
            ..Default::default()
        }
    }

    #[test]
    fn cycle_landmarks() {
        let c = cfg();
        assert_eq!(sgdr_lr(0.0, &c), c.lr_max);
        assert!((cosine_lr(10.0, 10.0, c.lr_max, c.lr_min) - c.lr_min).abs() < 1e-18);
        let mid = cosine_lr(5.0, 10.0, c.lr_max, c.lr_min);
        assert!((mid - (c.lr_max + c.lr_min) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn restarts_follow_growing_cycles() {
        assert_eq!(sgdr_cycle(9.5, 10, 2), (9.5, 10.0));
        assert_eq!(sgdr_cycle(10.0, 10, 2), (0.0, 20.0));
        assert_eq!(sgdr_cycle(25.0, 10, 2), (15.0, 20.0));
        assert_eq!(sgdr_cycle(35.0, 10, 2), (5.0, 40.0));
        assert_eq!(sgdr_cycle(30.0, 10, 2), (0.0, 40.0));
        assert_eq!(sgdr_cycle(25.0, 10, 1), (5.0, 10.0));
        let c = cfg();
        for restart in [10.0, 30.0, 70.0] {
            assert_eq!(sgdr_lr(restart, &c), c.lr_max);
            assert!(sgdr_lr(restart - 1e-9, &c) - c.lr_min < 1e-12);
        }
    }

    #[test]
    fn continuous_and_decreasing_within_cycle() {
        let c = cfg();
        let mut prev = sgdr_lr(10.0, &c);
        for i in 1..2000 {
            let lr = sgdr_lr(10.0 + i as f64 * 0.01, &c);
            assert!(lr < prev && prev - lr < 1e-6);
            prev = lr;
        }
    }
}
