use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use chrono::{DateTime, NaiveDateTime};

/// How session time advances.
#[derive(Debug, Clone)]
pub enum ClockMode {
    /// Real monotonic time; the sampler sleeps between polls.
    Wall,
    /// Simulated time with no sleeping. Polls happen every sampling period,
    /// or exactly at `schedule` times when given, after which the session
    /// ends by itself.
    Simulated {
        civil_start: NaiveDateTime,
        schedule: Option<Arc<[f64]>>,
    },
}

impl ClockMode {
    /// Simulated time starting at the Unix epoch.
    pub fn simulated() -> Self {
        ClockMode::Simulated {
            civil_start: DateTime::UNIX_EPOCH.naive_utc(),
            schedule: None,
        }
    }

    pub fn scheduled(times: impl Into<Arc<[f64]>>) -> Self {
        ClockMode::Simulated {
            civil_start: DateTime::UNIX_EPOCH.naive_utc(),
            schedule: Some(times.into()),
        }
    }
}

#[derive(Debug, Default)]
struct SignalState {
    halt: bool,
    ended: bool,
}

/// Halt request from the controller, and end notice from the sampler.
#[derive(Debug, Default)]
pub(crate) struct Signal {
    state: Mutex<SignalState>,
    cv: Condvar,
}

impl Signal {
    pub fn halt(&self) {
        self.state.lock().unwrap().halt = true;
        self.cv.notify_all();
    }

    pub fn is_halted(&self) -> bool {
        self.state.lock().unwrap().halt
    }

    pub fn mark_ended(&self) {
        self.state.lock().unwrap().ended = true;
        self.cv.notify_all();
    }

    pub fn is_ended(&self) -> bool {
        self.state.lock().unwrap().ended
    }

    /// Sleeps until `deadline` or a halt; true if halted.
    fn sleep_until(&self, deadline: Instant) -> bool {
        let mut state = self.state.lock().unwrap();
        loop {
            if state.halt {
                return true;
            }
            let now = Instant::now();
            if now >= deadline {
                return false;
            }
            state = self.cv.wait_timeout(state, deadline - now).unwrap().0;
        }
    }

    /// Waits for the sampler to end on its own; false on timeout.
    pub fn wait_ended(&self, timeout: Option<Duration>) -> bool {
        let deadline = timeout.map(|t| Instant::now() + t);
        let mut state = self.state.lock().unwrap();
        loop {
            if state.ended {
                return true;
            }
            match deadline {
                None => state = self.cv.wait(state).unwrap(),
                Some(d) => {
                    let now = Instant::now();
                    if now >= d {
                        return false;
                    }
                    state = self.cv.wait_timeout(state, d - now).unwrap().0;
                }
            }
        }
    }
}

pub(crate) enum Tick {
    At(f64),
    Halted,
    Finished,
}

/// One session's time source.
pub(crate) struct SessionClock {
    mode: ClockMode,
    period_s: f64,
    origin: Instant,
    simulated_now: Mutex<f64>,
}

impl SessionClock {
    pub fn start(mode: ClockMode, period_s: f64) -> Self {
        SessionClock {
            mode,
            period_s,
            origin: Instant::now(),
            simulated_now: Mutex::new(0.0),
        }
    }

    pub fn civil_start(&self) -> NaiveDateTime {
        match &self.mode {
            ClockMode::Wall => chrono::Local::now().naive_local(),
            ClockMode::Simulated { civil_start, .. } => *civil_start,
        }
    }

    pub fn first_poll_s(&self) -> f64 {
        match &self.mode {
            ClockMode::Simulated {
                schedule: Some(s), ..
            } => s.first().copied().unwrap_or(0.0),
            _ => 0.0,
        }
    }

    pub fn now_s(&self) -> f64 {
        match self.mode {
            ClockMode::Wall => self.origin.elapsed().as_secs_f64(),
            ClockMode::Simulated { .. } => *self.simulated_now.lock().unwrap(),
        }
    }

    /// Time of poll number `k` (the first poll is number 0).
    pub fn tick(&self, k: u64, signal: &Signal) -> Tick {
        match &self.mode {
            ClockMode::Wall => {
                // Deadlines are fixed multiples of the period, so sleeps do not drift.
                let deadline = self.origin + Duration::from_secs_f64(k as f64 * self.period_s);
                if signal.sleep_until(deadline) {
                    Tick::Halted
                } else {
                    Tick::At(self.now_s())
                }
            }
            ClockMode::Simulated { schedule, .. } => {
                if signal.is_halted() {
                    return Tick::Halted;
                }
                let t = match schedule {
                    Some(times) => match times.get(k as usize) {
                        Some(&t) => t,
                        None => return Tick::Finished,
                    },
                    None => k as f64 * self.period_s,
                };
                *self.simulated_now.lock().unwrap() = t;
                Tick::At(t)
            }
        }
    }
}
