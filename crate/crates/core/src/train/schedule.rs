/// Multiplies the learning rate by `factor` after `patience` consecutive
/// epochs without a strictly better validation accuracy.
#[derive(Clone, Debug)]
pub struct PlateauScheduler {
    pub patience: usize,
    pub factor: f64,
    pub min_lr: f64,
    lr: f64,
    best: Option<f64>,
    stagnant: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64, patience: usize, factor: f64, min_lr: f64) -> Self {
        Self {
            patience,
            factor,
            min_lr,
            lr,
            best: None,
            stagnant: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn stagnant_epochs(&self) -> usize {
        self.stagnant
    }

    /// Records one epoch's validation accuracy; returns the next learning rate.
    pub fn step(&mut self, val_accuracy: f64) -> f64 {
        if self.best.is_none_or(|b| val_accuracy > b) {
            self.best = Some(val_accuracy);
            self.stagnant = 0;
        } else {
            self.stagnant += 1;
            if self.stagnant >= self.patience {
                self.lr = (self.lr * self.factor).max(self.min_lr);
                self.stagnant = 0;
            }
        }
        self.lr
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    Stop,
}

/// Stops after `patience` consecutive epochs without strict improvement,
/// or once `max_epochs` epochs have run.
#[derive(Clone, Debug)]
pub struct EarlyStopper {
    pub patience: usize,
    pub max_epochs: usize,
    best: Option<f64>,
    stagnant: usize,
    epochs: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize, max_epochs: usize) -> Self {
        Self {
            patience,
            max_epochs,
            best: None,
            stagnant: 0,
            epochs: 0,
        }
    }

    pub fn stagnant_epochs(&self) -> usize {
        self.stagnant
    }

    pub fn step(&mut self, val_accuracy: f64) -> StopDecision {
        self.epochs += 1;
        if self.best.is_none_or(|b| val_accuracy > b) {
            self.best = Some(val_accuracy);
            self.stagnant = 0;
        } else {
            self.stagnant += 1;
        }
        if self.stagnant >= self.patience || self.epochs >= self.max_epochs {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }
}
