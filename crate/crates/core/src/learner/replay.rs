use std::collections::VecDeque;

use nalgebra::DVector;
use rand::{Rng, RngExt};

use crate::error::{Error, Result};
use crate::structure::Trajectory;

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub s: DVector<f64>,
    pub a: DVector<f64>,
    pub s_next: DVector<f64>,
    pub cost: f64,
}

impl Transition {
    pub fn new(s: DVector<f64>, a: DVector<f64>, s_next: DVector<f64>, cost: f64) -> Result<Self> {
        let finite = s.iter().chain(a.iter()).chain(s_next.iter()).all(|v| v.is_finite()) && cost.is_finite();
        if !finite {
            return Err(Error::InvalidParams("transition has non-finite entries".into()));
        }
        if s.len() != s_next.len() {
            return Err(Error::Dimension {
                what: "next state",
                expected: s.len(),
                found: s_next.len(),
            });
        }
        Ok(Self { s, a, s_next, cost })
    }
}

#[derive(Debug, Clone)]
struct Entry {
    transition: Transition,
    episode: u64,
    step: usize,
}

/// Fixed-capacity FIFO store of transitions tagged with their episode and step.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    entries: VecDeque<Entry>,
    episode: u64,
    step: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self {
            capacity,
            entries: VecDeque::with_capacity(capacity),
            episode: 0,
            step: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Mark an episode boundary; later pushes belong to a new episode.
    pub fn start_episode(&mut self) {
        if self.step > 0 {
            self.episode += 1;
            self.step = 0;
        }
    }

    pub fn push(&mut self, transition: Transition) {
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(Entry {
            transition,
            episode: self.episode,
            step: self.step,
        });
        self.step += 1;
    }

    pub fn get(&self, i: usize) -> Option<&Transition> {
        self.entries.get(i).map(|e| &e.transition)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.entries.iter().map(|e| &e.transition)
    }

    /// `size` distinct transitions drawn uniformly, or the whole buffer when smaller.
    pub fn sample_batch<R: Rng + ?Sized>(&self, size: usize, rng: &mut R) -> Vec<Transition> {
        let amount = size.min(self.len());
        rand::seq::index::sample(rng, self.len(), amount)
            .into_iter()
            .map(|i| self.entries[i].transition.clone())
            .collect()
    }

    /// Start indices of every run of `n` consecutive transitions within one episode.
    pub fn sequence_starts(&self, n: usize) -> Vec<usize> {
        if n == 0 || self.len() < n {
            return Vec::new();
        }
        (0..=self.len() - n)
            .filter(|&i| {
                let first = &self.entries[i];
                let last = &self.entries[i + n - 1];
                last.episode == first.episode && last.step == first.step + n - 1
            })
            .collect()
    }

    /// The `m` most recent runs of `n` consecutive transitions, oldest first.
    pub fn recent_sequences(&self, m: usize, n: usize) -> Vec<Trajectory> {
        let starts = self.sequence_starts(n);
        let skip = starts.len().saturating_sub(m);
        starts[skip..].iter().map(|&i| self.trajectory(i, n)).collect()
    }

    fn trajectory(&self, start: usize, n: usize) -> Trajectory {
        let run: Vec<&Transition> = (start..start + n).map(|i| &self.entries[i].transition).collect();
        let mut states: Vec<DVector<f64>> = run.iter().map(|t| t.s.clone()).collect();
        states.push(run[n - 1].s_next.clone());
        Trajectory {
            states,
            actions: run.iter().map(|t| t.a.clone()).collect(),
        }
    }
}

/// Draw `m` sequences of `n` consecutive transitions, each inside one episode.
pub fn sample_sequences<R: Rng + ?Sized>(
    buffer: &ReplayBuffer,
    m: usize,
    n: usize,
    rng: &mut R,
) -> Result<Vec<Trajectory>> {
    let starts = buffer.sequence_starts(n);
    if starts.is_empty() {
        return Err(Error::InsufficientData(format!(
            "no episode holds {n} consecutive transitions; defer the identification penalty"
        )));
    }
    Ok((0..m)
        .map(|_| buffer.trajectory(starts[rng.random_range(0..starts.len())], n))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(i: usize) -> Transition {
        let x = i as f64;
        Transition::new(
            DVector::from_element(1, x),
            DVector::from_element(1, -x),
            DVector::from_element(1, x + 1.0),
            x,
        )
        .unwrap()
    }

    #[test]
    fn ring_eviction() {
        let mut b = ReplayBuffer::new(3);
        for i in 0..5 {
            b.push(t(i));
        }
        assert_eq!(b.len(), 3);
        assert_eq!(b.get(0).unwrap().cost, 2.0);
    }

    #[test]
    fn sequences_stay_inside_episodes() {
        let mut b = ReplayBuffer::new(100);
        for i in 0..3 {
            b.push(t(i));
        }
        b.start_episode();
        for i in 10..12 {
            b.push(t(i));
        }
        assert_eq!(b.sequence_starts(2), vec![0, 1, 3]);
        assert_eq!(b.sequence_starts(3), vec![0]);
        assert!(b.sequence_starts(4).is_empty());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let seqs = sample_sequences(&b, 4, 3, &mut rng).unwrap();
        for s in &seqs {
            assert_eq!(s.states.len(), 4);
            assert_eq!(s.states[3][0], 3.0);
        }
        assert!(matches!(sample_sequences(&b, 1, 4, &mut rng), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn rejects_non_finite() {
        let one = DVector::from_element(1, 1.0);
        assert!(Transition::new(one.clone(), one.clone(), one, f64::NAN).is_err());
    }
}
