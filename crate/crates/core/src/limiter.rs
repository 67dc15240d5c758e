use parking_lot::{Condvar, Mutex};

/// Counting semaphore bounding how many callers hold a permit at once.
#[derive(Debug)]
pub struct Limiter {
    available: Mutex<usize>,
    released: Condvar,
    capacity: usize,
}

impl Limiter {
    pub fn new(capacity: usize) -> Self {
        let capacity = capacity.max(1);
        Self {
            available: Mutex::new(capacity),
            released: Condvar::new(),
            capacity,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Blocks until a permit is free. The permit is returned on drop.
    pub fn acquire(&self) -> Permit<'_> {
        let mut available = self.available.lock();
        while *available == 0 {
            self.released.wait(&mut available);
        }
        *available -= 1;
        Permit { limiter: self }
    }

    /// Permits currently handed out.
    pub fn in_use(&self) -> usize {
        self.capacity - *self.available.lock()
    }
}

pub struct Permit<'a> {
    limiter: &'a Limiter,
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.limiter.available.lock() += 1;
        self.limiter.released.notify_one();
    }
}
