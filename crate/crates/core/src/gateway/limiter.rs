use std::collections::HashMap;
use std::sync::Arc;

use parking_lot::{Condvar, Mutex};

/// Caps in-flight requests per endpoint; excess callers block.
#[derive(Debug, Clone)]
pub struct EndpointLimiter {
    max_in_flight: usize,
    state: Arc<(Mutex<HashMap<String, usize>>, Condvar)>,
}

impl EndpointLimiter {
    pub fn new(max_in_flight: usize) -> Self {
        EndpointLimiter {
            max_in_flight: max_in_flight.max(1),
            state: Arc::default(),
        }
    }

    pub fn max_in_flight(&self) -> usize {
        self.max_in_flight
    }

    pub fn acquire(&self, endpoint: &str) -> Permit {
        let (lock, cvar) = &*self.state;
        let mut counts = lock.lock();
        loop {
            let n = counts.entry(endpoint.to_string()).or_insert(0);
            if *n < self.max_in_flight {
                *n += 1;
                break;
            }
            cvar.wait(&mut counts);
        }
        Permit {
            endpoint: endpoint.to_string(),
            state: Arc::clone(&self.state),
        }
    }

    pub fn in_flight(&self, endpoint: &str) -> usize {
        self.state.0.lock().get(endpoint).copied().unwrap_or(0)
    }
}

impl Default for EndpointLimiter {
    fn default() -> Self {
        EndpointLimiter::new(4)
    }
}

/// Released on drop.
#[derive(Debug)]
pub struct Permit {
    endpoint: String,
    state: Arc<(Mutex<HashMap<String, usize>>, Condvar)>,
}

impl Drop for Permit {
    fn drop(&mut self) {
        let (lock, cvar) = &*self.state;
        if let Some(n) = lock.lock().get_mut(&self.endpoint) {
            *n -= 1;
        }
        cvar.notify_all();
    }
}
