//! A long-dependency task. Each sequence holds noise, then a short trigger
//! pointing in a class-specific direction, then a lag of noise, then an
//! action segment labeled with the trigger's class. Action frames carry a
//! cue shared by every class, so the short memory reveals that an action
//! is happening but only the long memory reveals which one.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::LabeledSequence;
use crate::error::{Error, Result};
use crate::numerics::Matrix;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTask {
    pub feature_dim: usize,
    pub classes: usize,
    /// Steps between the end of the trigger and the start of the action,
    /// inclusive range.
    pub lag: (usize, usize),
    pub trigger_len: usize,
    pub action_len: usize,
    /// Noise frames before the trigger, inclusive range.
    pub lead_in: (usize, usize),
    pub tail: usize,
    pub noise_std: f64,
    pub signal: f64,
}

impl SyntheticTask {
    pub fn long_dependency(feature_dim: usize, classes: usize) -> Self {
        Self {
            feature_dim,
            classes,
            lag: (32, 200),
            trigger_len: 2,
            action_len: 48,
            lead_in: (8, 64),
            tail: 8,
            noise_std: 0.5,
            signal: 5.0,
        }
    }

    /// Chance-level newest-frame accuracy on action frames.
    pub fn chance(&self) -> f64 {
        1.0 / self.classes as f64
    }

    /// Longest distance from a trigger frame to a labeled action frame.
    pub fn max_reach(&self) -> usize {
        self.trigger_len + self.lag.1 + self.action_len
    }

    pub fn generate(&self, count: usize, seed: u64) -> Result<Vec<LabeledSequence>> {
        if self.feature_dim < self.classes + 1 {
            return Err(Error::Config(format!(
                "feature_dim {} cannot hold {} class directions and a cue",
                self.feature_dim, self.classes
            )));
        }
        if self.lag.0 > self.lag.1 || self.lead_in.0 > self.lead_in.1 || self.classes == 0 {
            return Err(Error::Config("empty synthetic range".into()));
        }
        let noise = Normal::new(0.0, self.noise_std).map_err(|e| Error::Config(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cue = self.classes;
        (0..count)
            .map(|_| {
                let class = rng.random_range(1..=self.classes);
                let lead = rng.random_range(self.lead_in.0..=self.lead_in.1);
                let lag = rng.random_range(self.lag.0..=self.lag.1);
                let trigger = lead..lead + self.trigger_len;
                let action_start = trigger.end + lag;
                let action = action_start..action_start + self.action_len;
                let len = action.end + self.tail;
                let mut features = Matrix::from_fn(len, self.feature_dim, |_, _| noise.sample(&mut rng));
                let mut labels = vec![0; len];
                for t in trigger {
                    features.row_mut(t)[class - 1] += self.signal;
                }
                for t in action {
                    features.row_mut(t)[cue] += self.signal;
                    labels[t] = class;
                }
                LabeledSequence::new(features, labels)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_of_a_sequence() {
        let task = SyntheticTask {
            noise_std: 0.0,
            ..SyntheticTask::long_dependency(8, 3)
        };
        for s in &task.generate(20, 1).unwrap() {
            let fg: Vec<usize> = (0..s.len()).filter(|&t| s.labels[t] != 0).collect();
            assert_eq!(fg.len(), 48);
            assert!(fg.windows(2).all(|w| w[1] == w[0] + 1));
            assert!(fg.iter().all(|&t| s.features.get(t, 3) == 5.0));
            let class = s.labels[fg[0]];
            let lit: Vec<usize> = (0..s.len())
                .filter(|&t| s.features.get(t, class - 1) != 0.0)
                .collect();
            assert_eq!(lit.len(), 2);
            assert_eq!(lit[1], lit[0] + 1);
            let lag = fg[0] - lit[1] - 1;
            assert!((32..=200).contains(&lag), "{lag}");
            assert!(fg[0] + 48 - lit[0] <= task.max_reach());
            assert_eq!(s.len(), fg[47] + 1 + 8);
        }
    }

    #[test]
    fn generation_is_seeded() {
        let task = SyntheticTask::long_dependency(8, 3);
        let a = task.generate(5, 1).unwrap();
        assert_eq!(a, task.generate(5, 1).unwrap());
        assert_ne!(a, task.generate(5, 2).unwrap());
    }

    #[test]
    fn too_narrow_features_rejected() {
        assert!(SyntheticTask::long_dependency(3, 3).generate(1, 0).is_err());
    }
}
