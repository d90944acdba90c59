//! Learning-rate reduction on validation plateaus.

/// Multiplies the rate by `factor` once the validation loss has failed to improve on
/// its best value for `patience` consecutive epochs, then restarts the count.
#[derive(Debug, Clone, PartialEq)]
pub struct Plateau {
    lr: f64,
    patience: usize,
    factor: f64,
    best: f64,
    stale: usize,
}

impl Plateau {
    pub fn new(lr: f64, patience: usize, factor: f64) -> Self {
        Self {
            lr,
            patience: patience.max(1),
            factor,
            best: f64::INFINITY,
            stale: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Records one epoch's validation loss and returns the rate for the next epoch.
    pub fn observe(&mut self, val_loss: f64) -> f64 {
        if val_loss < self.best {
            self.best = val_loss;
            self.stale = 0;
        } else {
            self.stale += 1;
            if self.stale >= self.patience {
                self.lr *= self.factor;
                self.stale = 0;
            }
        }
        self.lr
    }

    /// Rate after replaying `history` from a fresh schedule.
    pub fn replay(lr: f64, patience: usize, factor: f64, history: &[f64]) -> f64 {
        let mut p = Self::new(lr, patience, factor);
        for &v in history {
            p.observe(v);
        }
        p.lr
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_losses_halve_after_patience() {
        assert_eq!(Plateau::replay(5e-4, 2, 0.5, &[1.0, 1.0, 1.0]), 2.5e-4);
        assert_eq!(Plateau::replay(5e-4, 2, 0.5, &[1.0, 1.0]), 5e-4);
    }

    #[test]
    fn improvement_resets_the_count() {
        assert_eq!(Plateau::replay(1.0, 2, 0.5, &[3.0, 3.0, 2.0, 2.5, 1.0, 1.5]), 1.0);
        assert_eq!(Plateau::replay(1.0, 2, 0.5, &[3.0, 3.0, 3.0, 3.0, 3.0]), 0.25);
    }
}
