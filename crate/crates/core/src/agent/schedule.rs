//! Multiplicative epsilon decay with a floor, stepped once per episode.

pub const EPSILON_START: f64 = 1.0;
pub const EPSILON_DECAY: f64 = 0.95;
pub const EPSILON_MIN: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpsilonSchedule {
    start: f64,
    decay: f64,
    floor: f64,
    decays: i32,
}

impl Default for EpsilonSchedule {
    fn default() -> Self {
        Self::new(EPSILON_START, EPSILON_DECAY, EPSILON_MIN)
    }
}

impl EpsilonSchedule {
    pub fn new(start: f64, decay: f64, floor: f64) -> Self {
        Self {
            start,
            decay,
            floor,
            decays: 0,
        }
    }

    /// `max(floor, start * decay^n)` after `n` decays.
    pub fn epsilon(&self) -> f64 {
        (self.start * self.decay.powi(self.decays)).max(self.floor)
    }

    pub fn decays(&self) -> i32 {
        self.decays
    }

    pub fn decay(&mut self) -> f64 {
        self.decays = self.decays.saturating_add(1);
        self.epsilon()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_decay() {
        let mut s = EpsilonSchedule::default();
        assert_eq!(s.epsilon(), 1.0);
        assert_eq!(s.decay(), 0.95);
    }

    #[test]
    fn floor_holds() {
        let mut s = EpsilonSchedule::new(0.10, 0.95, 0.1);
        assert_eq!(s.decay(), 0.1);
    }

    #[test]
    fn reaches_floor_after_45_decays() {
        let mut s = EpsilonSchedule::default();
        let mut iterated = 1.0f64;
        for _ in 0..44 {
            iterated = (iterated * 0.95).max(0.1);
            s.decay();
        }
        assert!(s.epsilon() > 0.1);
        assert!((s.epsilon() - iterated).abs() < 1e-15);
        assert_eq!(s.decay(), 0.1);
        assert!(0.95f64.powi(45) < 0.1);
    }
}
