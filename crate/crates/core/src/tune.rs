//! Batched random-walk proposal adaptation, frozen after burn-in.

/// Adapts one proposal scale toward a target acceptance rate in fixed-size
/// batches. After [`ScalarTuner::freeze`] the scale never changes again.
#[derive(Debug, Clone)]
pub struct ScalarTuner {
    pub scale: f64,
    pub target: f64,
    pub window: usize,
    accepts: u32,
    count: u32,
    pub frozen: bool,
    pub frozen_accepts: u64,
    pub frozen_proposals: u64,
}

impl ScalarTuner {
    pub fn new(scale: f64, target: f64, window: usize) -> Self {
        ScalarTuner {
            scale,
            target,
            window: window.max(1),
            accepts: 0,
            count: 0,
            frozen: false,
            frozen_accepts: 0,
            frozen_proposals: 0,
        }
    }

    pub fn record(&mut self, accepted: bool) {
        if self.frozen {
            self.frozen_proposals += 1;
            self.frozen_accepts += accepted as u64;
            return;
        }
        self.count += 1;
        self.accepts += accepted as u32;
        if self.count as usize >= self.window {
            let rate = self.accepts as f64 / self.count as f64;
            self.scale = (self.scale * (rate - self.target).exp()).clamp(1e-8, 1e8);
            self.accepts = 0;
            self.count = 0;
        }
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    /// Acceptance rate over the post-freeze phase, if any proposals ran.
    pub fn frozen_rate(&self) -> Option<f64> {
        (self.frozen_proposals > 0)
            .then(|| self.frozen_accepts as f64 / self.frozen_proposals as f64)
    }
}
