//! Per-session nonce table: a FIFO of at most 16 live nonces, with at most 20
//! generations in any sliding one-second window.

use std::collections::VecDeque;
use std::time::Duration;

use rand::RngCore;

pub const NONCE_QUEUE_CAPACITY: usize = 16;
pub const MAX_NONCES_PER_WINDOW: usize = 20;
pub const RATE_WINDOW: Duration = Duration::from_secs(1);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RateLimited;

#[derive(Debug, Clone, Default)]
pub struct NonceTable {
    live: VecDeque<u32>,
    issued_at: VecDeque<Duration>,
}

impl NonceTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Draws a nonce not already live and appends it, evicting the oldest
    /// entry when the queue is full.
    pub fn generate<R: RngCore + ?Sized>(&mut self, rng: &mut R, now: Duration) -> Result<u32, RateLimited> {
        while let Some(&t) = self.issued_at.front() {
            if now.saturating_sub(t) >= RATE_WINDOW {
                self.issued_at.pop_front();
            } else {
                break;
            }
        }
        if self.issued_at.len() >= MAX_NONCES_PER_WINDOW {
            return Err(RateLimited);
        }

        let nonce = loop {
            let n = rng.next_u32();
            if !self.live.contains(&n) {
                break n;
            }
        };
        if self.live.len() == NONCE_QUEUE_CAPACITY {
            self.live.pop_front();
        }
        self.live.push_back(nonce);
        self.issued_at.push_back(now);
        Ok(nonce)
    }

    pub fn contains(&self, nonce: u32) -> bool {
        self.live.contains(&nonce)
    }

    /// Removes `nonce`; returns whether it was live.
    pub fn consume(&mut self, nonce: u32) -> bool {
        match self.live.iter().position(|&n| n == nonce) {
            Some(i) => {
                self.live.remove(i);
                true
            }
            None => false,
        }
    }

    pub fn len(&self) -> usize {
        self.live.len()
    }

    pub fn is_empty(&self) -> bool {
        self.live.is_empty()
    }
}
