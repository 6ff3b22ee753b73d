//! Fixed-capacity ring buffer of transitions with uniform sampling.
//!
//! Rewards are stored exactly as the environment emitted them; the reset
//! penalty is applied when targets are built.

use rand::Rng;

use crate::error::{Error, Result};

pub const DEFAULT_CAPACITY: usize = 1_000_000;
pub const DEFAULT_BATCH_SIZE: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub s: Vec<f64>,
    pub a: Vec<f64>,
    pub r: f64,
    pub s_next: Vec<f64>,
    /// `s_next` is a fresh initial state after a terminal event.
    pub is_reset_step: bool,
}

/// Uniform draws from a [`ReplayBuffer`], laid out row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct MiniBatch {
    pub size: usize,
    pub obs_dim: usize,
    pub action_dim: usize,
    pub s: Vec<f64>,
    pub a: Vec<f64>,
    pub r: Vec<f64>,
    pub s_next: Vec<f64>,
    pub is_reset_step: Vec<bool>,
}

impl MiniBatch {
    pub fn from_transitions(ts: &[Transition]) -> Result<Self> {
        let first = ts.first().ok_or(Error::Empty("transition list"))?;
        let (obs_dim, action_dim) = (first.s.len(), first.a.len());
        let mut batch = MiniBatch::with_capacity(ts.len(), obs_dim, action_dim);
        for t in ts {
            if t.s.len() != obs_dim || t.s_next.len() != obs_dim {
                return Err(Error::Shape {
                    expected: obs_dim,
                    actual: if t.s.len() != obs_dim { t.s.len() } else { t.s_next.len() },
                });
            }
            if t.a.len() != action_dim {
                return Err(Error::Shape {
                    expected: action_dim,
                    actual: t.a.len(),
                });
            }
            batch.push_row(&t.s, &t.a, t.r, &t.s_next, t.is_reset_step);
        }
        Ok(batch)
    }

    fn with_capacity(n: usize, obs_dim: usize, action_dim: usize) -> Self {
        MiniBatch {
            size: 0,
            obs_dim,
            action_dim,
            s: Vec::with_capacity(n * obs_dim),
            a: Vec::with_capacity(n * action_dim),
            r: Vec::with_capacity(n),
            s_next: Vec::with_capacity(n * obs_dim),
            is_reset_step: Vec::with_capacity(n),
        }
    }

    fn push_row(&mut self, s: &[f64], a: &[f64], r: f64, s_next: &[f64], reset: bool) {
        self.s.extend_from_slice(s);
        self.a.extend_from_slice(a);
        self.r.push(r);
        self.s_next.extend_from_slice(s_next);
        self.is_reset_step.push(reset);
        self.size += 1;
    }

    pub fn transition(&self, i: usize) -> Transition {
        let (o, d) = (self.obs_dim, self.action_dim);
        Transition {
            s: self.s[i * o..(i + 1) * o].to_vec(),
            a: self.a[i * d..(i + 1) * d].to_vec(),
            r: self.r[i],
            s_next: self.s_next[i * o..(i + 1) * o].to_vec(),
            is_reset_step: self.is_reset_step[i],
        }
    }

    /// Rows of `[s, a]` for critic input.
    pub fn state_actions(&self) -> Vec<f64> {
        concat_rows(&self.s, self.obs_dim, &self.a, self.action_dim)
    }
}

/// Interleaves two row-major blocks with equal row counts.
pub fn concat_rows(x: &[f64], x_dim: usize, y: &[f64], y_dim: usize) -> Vec<f64> {
    let rows = x.len() / x_dim;
    debug_assert_eq!(rows * y_dim, y.len());
    let mut out = Vec::with_capacity(rows * (x_dim + y_dim));
    for (xr, yr) in x.chunks_exact(x_dim).zip(y.chunks_exact(y_dim)) {
        out.extend_from_slice(xr);
        out.extend_from_slice(yr);
    }
    out
}

/// Ring buffer with flat storage; the oldest entry is overwritten at capacity.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    obs_dim: usize,
    action_dim: usize,
    len: usize,
    head: usize,
    s: Vec<f64>,
    a: Vec<f64>,
    r: Vec<f64>,
    s_next: Vec<f64>,
    is_reset_step: Vec<bool>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, obs_dim: usize, action_dim: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::validation("buffer_capacity", "must be positive"));
        }
        Ok(ReplayBuffer {
            capacity,
            obs_dim,
            action_dim,
            len: 0,
            head: 0,
            s: Vec::new(),
            a: Vec::new(),
            r: Vec::new(),
            s_next: Vec::new(),
            is_reset_step: Vec::new(),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn push(&mut self, t: Transition) -> Result<()> {
        for (len, want) in [
            (t.s.len(), self.obs_dim),
            (t.s_next.len(), self.obs_dim),
            (t.a.len(), self.action_dim),
        ] {
            if len != want {
                return Err(Error::Shape {
                    expected: want,
                    actual: len,
                });
            }
        }
        if self.len < self.capacity {
            self.s.extend_from_slice(&t.s);
            self.a.extend_from_slice(&t.a);
            self.r.push(t.r);
            self.s_next.extend_from_slice(&t.s_next);
            self.is_reset_step.push(t.is_reset_step);
            self.len += 1;
        } else {
            let (i, o, d) = (self.head, self.obs_dim, self.action_dim);
            self.s[i * o..(i + 1) * o].copy_from_slice(&t.s);
            self.a[i * d..(i + 1) * d].copy_from_slice(&t.a);
            self.r[i] = t.r;
            self.s_next[i * o..(i + 1) * o].copy_from_slice(&t.s_next);
            self.is_reset_step[i] = t.is_reset_step;
        }
        self.head = (self.head + 1) % self.capacity;
        Ok(())
    }

    /// Slot `i` counted from the oldest live entry.
    pub fn get(&self, i: usize) -> Option<Transition> {
        if i >= self.len {
            return None;
        }
        let start = if self.len < self.capacity { 0 } else { self.head };
        let slot = (start + i) % self.capacity;
        Some(self.slot(slot))
    }

    fn slot(&self, k: usize) -> Transition {
        let (o, d) = (self.obs_dim, self.action_dim);
        Transition {
            s: self.s[k * o..(k + 1) * o].to_vec(),
            a: self.a[k * d..(k + 1) * d].to_vec(),
            r: self.r[k],
            s_next: self.s_next[k * o..(k + 1) * o].to_vec(),
            is_reset_step: self.is_reset_step[k],
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = Transition> + '_ {
        (0..self.len).map(|i| self.get(i).expect("index below len"))
    }

    /// `n` draws uniformly with replacement; returns raw slot indices as well.
    pub fn sample_indices<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<usize>> {
        if self.is_empty() {
            return Err(Error::Empty("replay buffer"));
        }
        Ok((0..n).map(|_| rng.random_range(0..self.len)).collect())
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<MiniBatch> {
        let idx = self.sample_indices(n, rng)?;
        let (o, d) = (self.obs_dim, self.action_dim);
        let mut batch = MiniBatch::with_capacity(n, o, d);
        for k in idx {
            batch.push_row(
                &self.s[k * o..(k + 1) * o],
                &self.a[k * d..(k + 1) * d],
                self.r[k],
                &self.s_next[k * o..(k + 1) * o],
                self.is_reset_step[k],
            );
        }
        Ok(batch)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(x: f64) -> Transition {
        Transition {
            s: vec![x],
            a: vec![x / 10.0],
            r: x,
            s_next: vec![x + 1.0],
            is_reset_step: x as i64 % 2 == 0,
        }
    }

    #[test]
    fn push_and_evict_in_order() {
        let mut buf = ReplayBuffer::new(3, 1, 1).unwrap();
        buf.push(t(0.0)).unwrap();
        assert_eq!(buf.len(), 1);
        for i in 1..4 {
            buf.push(t(i as f64)).unwrap();
        }
        assert_eq!(buf.len(), 3);
        let rs: Vec<f64> = buf.iter().map(|x| x.r).collect();
        assert_eq!(rs, vec![1.0, 2.0, 3.0]);
        for i in 4..9 {
            buf.push(t(i as f64)).unwrap();
            assert!(buf.len() <= 3);
        }
        assert_eq!(buf.iter().map(|x| x.r).collect::<Vec<_>>(), vec![6.0, 7.0, 8.0]);
        assert_eq!(buf.get(3), None);
        assert_eq!(DEFAULT_CAPACITY, 1_000_000);
    }

    #[test]
    fn push_checks_shapes() {
        let mut buf = ReplayBuffer::new(3, 2, 1).unwrap();
        assert!(buf.push(t(0.0)).is_err());
        assert!(ReplayBuffer::new(0, 1, 1).is_err());
    }

    #[test]
    fn single_element_and_empty() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut buf = ReplayBuffer::new(10, 1, 1).unwrap();
        assert!(matches!(buf.sample(4, &mut rng), Err(Error::Empty(_))));
        buf.push(t(5.0)).unwrap();
        let batch = buf.sample(4, &mut rng).unwrap();
        assert_eq!(batch.size, 4);
        for i in 0..4 {
            assert_eq!(batch.transition(i), t(5.0));
        }
        assert_eq!(DEFAULT_BATCH_SIZE, 256);
    }

    #[test]
    fn sampling_is_deterministic_given_rng() {
        let mut buf = ReplayBuffer::new(100, 1, 1).unwrap();
        for i in 0..50 {
            buf.push(t(i as f64)).unwrap();
        }
        let a = buf.sample(32, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = buf.sample(32, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn minibatch_from_transitions_and_concat() {
        let batch = MiniBatch::from_transitions(&[t(1.0), t(2.0)]).unwrap();
        assert_eq!(batch.state_actions(), vec![1.0, 0.1, 2.0, 0.2]);
        assert_eq!(batch.is_reset_step, vec![false, true]);
        assert!(MiniBatch::from_transitions(&[]).is_err());
    }
}
