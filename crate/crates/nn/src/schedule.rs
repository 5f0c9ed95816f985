/// Reduce-on-plateau settings: relative threshold, `min` mode.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlateauConfig {
    pub factor: f64,
    pub patience: u32,
    pub threshold: f64,
    pub min_lr: f64,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        Self {
            factor: 0.1,
            patience: 10,
            threshold: 1e-4,
            min_lr: 0.0,
        }
    }
}

/// Learning-rate schedule that decays by `factor` once the monitored loss
/// has failed to improve for more than `patience` consecutive epochs.
///
/// An epoch improves iff `loss < best · (1 − threshold)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PlateauSchedule {
    pub config: PlateauConfig,
    lr: f64,
    best: f64,
    bad_epochs: u32,
    epochs_seen: u64,
}

impl PlateauSchedule {
    pub fn new(initial_lr: f64, config: PlateauConfig) -> Self {
        Self {
            config,
            lr: initial_lr,
            best: f64::INFINITY,
            bad_epochs: 0,
            epochs_seen: 0,
        }
    }

    /// Rebuilds a schedule from persisted state.
    pub fn restore(config: PlateauConfig, lr: f64, best: f64, bad_epochs: u32, epochs_seen: u64) -> Self {
        Self {
            config,
            lr,
            best,
            bad_epochs,
            epochs_seen,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn bad_epochs(&self) -> u32 {
        self.bad_epochs
    }

    pub fn epochs_seen(&self) -> u64 {
        self.epochs_seen
    }

    /// Records one epoch's loss and returns the learning rate for the next
    /// epoch. Non-finite losses count as non-improving.
    pub fn step(&mut self, loss: f64) -> f64 {
        self.epochs_seen += 1;
        if loss < self.best * (1.0 - self.config.threshold) {
            self.best = loss;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
        }
        if self.bad_epochs > self.config.patience {
            self.lr = (self.lr * self.config.factor).max(self.config.min_lr);
            self.bad_epochs = 0;
        }
        self.lr
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_loss_decays_at_epoch_twelve() {
        let mut s = PlateauSchedule::new(0.01, PlateauConfig::default());
        let mut first_drop = None;
        for epoch in 1..=40u32 {
            let before = s.lr();
            let after = s.step(1.0);
            if after < before && first_drop.is_none() {
                first_drop = Some(epoch);
                assert!((after - 0.001).abs() < 1e-15);
            }
        }
        assert_eq!(first_drop, Some(12));
    }

    #[test]
    fn decreasing_loss_never_decays() {
        let mut s = PlateauSchedule::new(0.01, PlateauConfig::default());
        for epoch in 0..200 {
            s.step(1.0 / (1.0 + epoch as f64));
        }
        assert_eq!(s.lr(), 0.01);
    }

    #[test]
    fn drop_of_exactly_threshold_is_not_improvement() {
        let mut s = PlateauSchedule::new(0.01, PlateauConfig::default());
        s.step(1.0);
        s.step(1.0 - 1e-4);
        assert_eq!(s.best(), 1.0);
        assert_eq!(s.bad_epochs(), 1);
        s.step(0.9);
        assert_eq!(s.best(), 0.9);
        assert_eq!(s.bad_epochs(), 0);
    }

    #[test]
    fn bad_epochs_never_exceed_patience_plus_one() {
        let mut s = PlateauSchedule::new(1.0, PlateauConfig::default());
        let mut prev = s.lr();
        for i in 0..100 {
            s.step(if i % 17 == 0 { 0.5 / (i as f64 + 1.0) } else { 5.0 });
            assert!(s.bad_epochs() <= s.config.patience + 1);
            assert!(s.lr() <= prev);
            prev = s.lr();
        }
    }
}
