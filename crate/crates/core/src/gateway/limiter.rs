use std::sync::{Arc, Condvar, Mutex};

/// Counting semaphore bounding concurrent upstream requests.
#[derive(Debug, Clone)]
pub struct InflightLimiter {
    inner: Arc<Inner>,
}

#[derive(Debug)]
struct Inner {
    max: usize,
    state: Mutex<usize>,
    freed: Condvar,
}

pub struct Permit {
    inner: Arc<Inner>,
}

impl InflightLimiter {
    pub fn new(max: usize) -> Self {
        assert!(max >= 1, "max_inflight must be at least 1");
        InflightLimiter {
            inner: Arc::new(Inner {
                max,
                state: Mutex::new(0),
                freed: Condvar::new(),
            }),
        }
    }

    /// Blocks until a slot is free.
    pub fn acquire(&self) -> Permit {
        let mut in_flight = self.inner.state.lock().expect("limiter lock");
        while *in_flight >= self.inner.max {
            in_flight = self.inner.freed.wait(in_flight).expect("limiter lock");
        }
        *in_flight += 1;
        Permit {
            inner: Arc::clone(&self.inner),
        }
    }

    pub fn in_flight(&self) -> usize {
        *self.inner.state.lock().expect("limiter lock")
    }

    pub fn max(&self) -> usize {
        self.inner.max
    }
}

impl Drop for Permit {
    fn drop(&mut self) {
        let mut in_flight = self.inner.state.lock().expect("limiter lock");
        *in_flight -= 1;
        self.inner.freed.notify_one();
    }
}
