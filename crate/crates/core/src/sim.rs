//! Deterministic discrete-event scheduling and seeded token generation.

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeSet, BinaryHeap};

use crate::protocol::EOT;

/// Simulated time in whole microseconds. One microsecond is the scheduler
/// tick.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct SimTime(pub u64);

impl SimTime {
    pub const TICK_MS: f64 = 1e-3;

    pub fn from_ms(ms: f64) -> Self {
        assert!(ms.is_finite() && ms >= 0.0, "simulated time must be finite and >= 0, got {ms}");
        Self((ms * 1000.0).round() as u64)
    }

    pub fn as_ms(self) -> f64 {
        self.0 as f64 / 1000.0
    }
}

struct Entry<E> {
    at: SimTime,
    seq: u64,
    event: E,
}

impl<E> PartialEq for Entry<E> {
    fn eq(&self, other: &Self) -> bool {
        (self.at, self.seq) == (other.at, other.seq)
    }
}

impl<E> Eq for Entry<E> {}

impl<E> PartialOrd for Entry<E> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<E> Ord for Entry<E> {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.at, self.seq).cmp(&(other.at, other.seq))
    }
}

/// Event queue ordered by time, then by insertion order.
pub struct Scheduler<E> {
    queue: BinaryHeap<Reverse<Entry<E>>>,
    now: SimTime,
    seq: u64,
}

impl<E> Default for Scheduler<E> {
    fn default() -> Self {
        Self {
            queue: BinaryHeap::new(),
            now: SimTime::default(),
            seq: 0,
        }
    }
}

impl<E> Scheduler<E> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    /// Events scheduled in the past fire at the current time.
    pub fn schedule(&mut self, at: SimTime, event: E) {
        let at = at.max(self.now);
        self.queue.push(Reverse(Entry {
            at,
            seq: self.seq,
            event,
        }));
        self.seq += 1;
    }

    pub fn pop(&mut self) -> Option<(SimTime, E)> {
        let Reverse(entry) = self.queue.pop()?;
        self.now = entry.at;
        Some((entry.at, entry.event))
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }

    pub fn len(&self) -> usize {
        self.queue.len()
    }
}

pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

const VOCAB: [&str; 48] = [
    "the", "a", "model", "device", "cloud", "token", "prompt", "answer", "is", "of", "and", "to",
    "in", "that", "for", "with", "on", "as", "this", "it", "be", "by", "are", "we", "text",
    "summary", "result", "data", "user", "first", "next", "which", "from", "can", "more", "time",
    "fast", "slow", "long", "short", "question", "document", "report", "value", "case", "note",
    "point", ".",
];

/// Seeded stand-in for a language model.
///
/// The token at each position is a hash of the seed, the position and the
/// history so far, so two sources with the same seed agree for as long as
/// their histories agree. Positions listed in `divergence` deliberately
/// produce a different token. The stream ends with [`EOT`] at position
/// `length - 1`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSource {
    seed: u64,
    length: u64,
    divergence: BTreeSet<u64>,
}

impl TokenSource {
    pub fn new(seed: u64, length: u64) -> Self {
        assert!(length >= 1, "a token source produces at least one token");
        Self {
            seed,
            length,
            divergence: BTreeSet::new(),
        }
    }

    pub fn with_divergence(mut self, positions: impl IntoIterator<Item = u64>) -> Self {
        self.divergence.extend(positions);
        self
    }

    pub fn length(&self) -> u64 {
        self.length
    }

    pub fn diverges_at(&self, position: u64) -> bool {
        self.divergence.contains(&position)
    }

    pub fn token_at(&self, position: u64, history: u64) -> String {
        if position + 1 >= self.length {
            return EOT.to_owned();
        }
        let h = splitmix64(self.seed ^ splitmix64(history ^ splitmix64(position)));
        let mut id = (h % VOCAB.len() as u64) as usize;
        if self.diverges_at(position) {
            let shift = 1 + (splitmix64(h) % (VOCAB.len() as u64 - 1)) as usize;
            id = (id + shift) % VOCAB.len();
        }
        VOCAB[id].to_owned()
    }

    pub fn stream(&self) -> TokenStream<'_> {
        TokenStream {
            source: self,
            history: 0,
            position: 0,
            finished: false,
        }
    }
}

/// Running generation over a [`TokenSource`]. `propose` looks at the next
/// token without consuming it; `commit` appends whichever token is kept.
#[derive(Debug, Clone)]
pub struct TokenStream<'a> {
    source: &'a TokenSource,
    history: u64,
    position: u64,
    finished: bool,
}

impl TokenStream<'_> {
    pub fn position(&self) -> u64 {
        self.position
    }

    pub fn finished(&self) -> bool {
        self.finished
    }

    pub fn propose(&self) -> String {
        self.source.token_at(self.position, self.history)
    }

    pub fn commit(&mut self, token: &str) {
        self.history = splitmix64(self.history ^ fnv1a(token.as_bytes()));
        self.position += 1;
        if token == EOT || self.position >= self.source.length {
            self.finished = true;
        }
    }
}

impl Iterator for TokenStream<'_> {
    type Item = String;

    fn next(&mut self) -> Option<String> {
        if self.finished {
            return None;
        }
        let t = self.propose();
        self.commit(&t);
        Some(t)
    }
}
