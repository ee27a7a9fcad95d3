//! Lets a checker stop clients between operations.

use parking_lot::{Condvar, Mutex};

#[derive(Default)]
struct State {
    paused: bool,
    inflight: usize,
}

/// Clients wrap each operation in [`Gate::pass`]; a checker calls
/// [`Gate::pause`] to wait until none is in flight and no new one starts.
#[derive(Default)]
pub struct Gate {
    state: Mutex<State>,
    cv: Condvar,
}

pub struct Paused<'a>(&'a Gate);

impl Drop for Paused<'_> {
    fn drop(&mut self) {
        self.0.state.lock().paused = false;
        self.0.cv.notify_all();
    }
}

impl Gate {
    pub fn new() -> Gate {
        Gate::default()
    }

    pub fn pass<T>(&self, op: impl FnOnce() -> T) -> T {
        {
            let mut s = self.state.lock();
            while s.paused {
                self.cv.wait(&mut s);
            }
            s.inflight += 1;
        }
        let r = op();
        self.state.lock().inflight -= 1;
        self.cv.notify_all();
        r
    }

    /// Blocks new operations and waits for running ones. Clients resume
    /// when the guard drops.
    pub fn pause(&self) -> Paused<'_> {
        let mut s = self.state.lock();
        while s.paused {
            self.cv.wait(&mut s);
        }
        s.paused = true;
        while s.inflight > 0 {
            self.cv.wait(&mut s);
        }
        Paused(self)
    }

    /// Like [`Gate::pause`] but stays paused until [`Gate::resume`]. For
    /// pausing from one thread and resuming from another.
    pub fn hold(&self) {
        std::mem::forget(self.pause());
    }

    pub fn resume(&self) {
        drop(Paused(self));
    }
}
