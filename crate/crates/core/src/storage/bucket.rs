/// FIFO token bucket evaluated lazily: `acquire` returns the grant time of
/// the next token for a request arriving at `now`. Arrivals must be
/// submitted in non-decreasing time order.
#[derive(Debug, Clone)]
pub(crate) struct TokenBucket {
    rate: f64,
    burst: f64,
    level: f64,
    // time at which `level` was last evaluated; may lie in the future when
    // earlier requests are still queued for tokens
    at: f64,
}

impl TokenBucket {
    pub(crate) fn new(rate: f64, burst: u32) -> Self {
        let burst = burst.max(1) as f64;
        TokenBucket {
            rate,
            burst,
            level: burst,
            at: 0.0,
        }
    }

    pub(crate) fn acquire(&mut self, now: f64) -> f64 {
        let t = now.max(self.at);
        let level = (self.level + self.rate * (t - self.at)).min(self.burst);
        if level >= 1.0 {
            self.level = level - 1.0;
            self.at = t;
            t
        } else {
            let grant = t + (1.0 - level) / self.rate;
            self.level = 0.0;
            self.at = grant;
            grant
        }
    }
}
