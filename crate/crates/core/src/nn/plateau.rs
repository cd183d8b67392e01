/// Reduce-on-plateau learning-rate schedule.
///
/// After `patience` consecutive non-improving metrics the rate is multiplied
/// by `factor`, never going below `min_lr`.
#[derive(Debug, Clone, PartialEq)]
pub struct PlateauScheduler {
    pub patience: usize,
    pub factor: f64,
    pub min_lr: f64,
    lr: f64,
    best: f64,
    wait: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64, patience: usize, factor: f64, min_lr: f64) -> Self {
        assert!(patience > 0, "patience must be positive");
        assert!(factor > 0.0 && factor < 1.0, "factor must lie in (0, 1)");
        assert!(min_lr > 0.0, "min_lr must be positive");
        Self {
            patience,
            factor,
            min_lr,
            lr: lr.max(min_lr),
            best: f64::INFINITY,
            wait: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    /// Feed one metric value and return the (possibly reduced) rate.
    pub fn update(&mut self, metric: f64) -> f64 {
        if metric < self.best {
            self.best = metric;
            self.wait = 0;
        } else {
            self.wait += 1;
            if self.wait >= self.patience {
                self.lr = (self.lr * self.factor).max(self.min_lr);
                self.wait = 0;
            }
        }
        self.lr
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn improving_metric_keeps_rate() {
        let mut s = PlateauScheduler::new(1e-3, 3, 0.5, 1e-6);
        for i in 0..50 {
            assert_eq!(s.update(100.0 - i as f64), 1e-3);
        }
    }

    #[test]
    fn constant_metric_reduces_on_fourth_call() {
        let mut s = PlateauScheduler::new(1e-3, 3, 0.5, 1e-6);
        assert_eq!(s.update(1.0), 1e-3);
        assert_eq!(s.update(1.0), 1e-3);
        assert_eq!(s.update(1.0), 1e-3);
        assert_eq!(s.update(1.0), 5e-4);
    }

    #[test]
    fn repeated_plateaus_halve_until_clamped() {
        let mut s = PlateauScheduler::new(1e-3, 2, 0.5, 1e-6);
        // Hand simulation: the first call sets the best, then every second
        // call on a flat metric halves the rate.
        let mut expected = vec![1e-3];
        let mut lr: f64 = 1e-3;
        for call in 1..40 {
            if call % 2 == 0 {
                lr = (lr * 0.5).max(1e-6);
            }
            expected.push(lr);
        }
        let got: Vec<f64> = (0..40).map(|_| s.update(0.25)).collect();
        assert_eq!(got, expected);
        assert_eq!(s.lr(), 1e-6);
        let mut prev = f64::INFINITY;
        for v in got {
            assert!(v <= prev && v >= 1e-6);
            prev = v;
        }
    }
}
