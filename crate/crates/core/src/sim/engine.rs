use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};

use super::{RequestRecord, SimConfig, SimError, SimOutput};
use crate::analytics::Policy;
use crate::delay_model::DelaySampler;
use crate::schedulers::{CodeSpec, Scheduler, SchedulerView};

const ARRIVAL_STREAM: u64 = 1 << 20;
const DELAY_STREAM: u64 = 2 << 20;
const MIX_STREAM: u64 = 3 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Kind {
    Completion,
    Arrival,
}

#[derive(Debug, Clone, Copy)]
struct Event {
    time: f64,
    kind: Kind,
    /// Request id for completions, class id for arrivals.
    key: u64,
    thread: u32,
    generation: u64,
}

impl Event {
    fn order(&self, other: &Self) -> Ordering {
        self.time
            .total_cmp(&other.time)
            .then(self.kind.cmp(&other.kind))
            .then(self.key.cmp(&other.key))
            .then(self.thread.cmp(&other.thread))
    }
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.order(other) == Ordering::Equal
    }
}

impl Eq for Event {}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Event {
    fn cmp(&self, other: &Self) -> Ordering {
        // BinaryHeap is a max-heap.
        other.order(self)
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct Slot {
    task: Option<usize>,
    generation: u64,
}

#[derive(Debug, Clone)]
struct Request {
    class: usize,
    code: CodeSpec,
    t_arrive: f64,
    t_start: f64,
    t_finish: f64,
    completed: u32,
    canceled: u32,
    waiting: u32,
    backlog: usize,
}

enum Arrivals {
    Poisson {
        rngs: Vec<ChaCha8Rng>,
        gaps: Vec<Option<Exp<f64>>>,
        generated: usize,
    },
    /// The request queue is never empty; classes are drawn by composition.
    Saturated { rng: ChaCha8Rng, cumulative: Vec<f64> },
}

struct Engine<'a> {
    cfg: &'a SimConfig,
    scheduler: Scheduler,
    arrivals: Arrivals,
    now: f64,
    requests: Vec<Request>,
    request_queue: VecDeque<usize>,
    task_queue: VecDeque<usize>,
    slots: Vec<Slot>,
    idle: Vec<u32>,
    events: BinaryHeap<Event>,
    samplers: Vec<DelaySampler>,
    scripted: VecDeque<f64>,
    completion_times: Vec<f64>,
    // Time-averaged request-queue length.
    measuring: bool,
    backlog_area: f64,
    last_change: f64,
    window: (f64, f64),
}

impl<'a> Engine<'a> {
    fn new(cfg: &'a SimConfig, saturated: bool) -> Result<Self, SimError> {
        cfg.validate()?;
        let scheduler = Scheduler::build(&cfg.scheduler, &cfg.classes, &cfg.sys, cfg.policy)?;
        if cfg.policy == Policy::Blocking {
            for i in 0..cfg.classes.len() {
                let n = scheduler.max_code(i, &cfg.classes);
                if n > cfg.sys.threads {
                    return Err(SimError::Config(format!("code length {n} exceeds thread count")));
                }
            }
        }
        let m = cfg.classes.len();
        let arrivals = if saturated {
            let total = cfg.total_rate();
            let mut acc = 0.0;
            let cumulative = cfg
                .rates
                .iter()
                .map(|r| {
                    acc += r / total;
                    acc
                })
                .collect();
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(MIX_STREAM);
            Arrivals::Saturated { rng, cumulative }
        } else {
            let rngs = (0..m)
                .map(|i| {
                    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                    rng.set_stream(ARRIVAL_STREAM + i as u64);
                    rng
                })
                .collect();
            let gaps = cfg.rates.iter().map(|&r| (r > 0.0).then(|| Exp::new(r).expect("positive rate"))).collect();
            Arrivals::Poisson {
                rngs,
                gaps,
                generated: 0,
            }
        };
        let samplers = cfg
            .delay_sources
            .iter()
            .enumerate()
            .map(|(i, src)| DelaySampler::new(src.clone(), cfg.seed).with_stream(DELAY_STREAM + i as u64))
            .collect();
        let threads = cfg.sys.threads as usize;
        Ok(Self {
            cfg,
            scheduler,
            arrivals,
            now: 0.0,
            requests: Vec::with_capacity(if saturated { 0 } else { cfg.horizon }),
            request_queue: VecDeque::new(),
            task_queue: VecDeque::new(),
            slots: vec![Slot::default(); threads],
            idle: (0..threads as u32).rev().collect(),
            events: BinaryHeap::new(),
            samplers,
            scripted: cfg.scripted_delays.clone().unwrap_or_default().into(),
            completion_times: Vec::new(),
            measuring: false,
            backlog_area: 0.0,
            last_change: 0.0,
            window: (0.0, 0.0),
        })
    }

    fn schedule_arrival(&mut self, class: usize) {
        if let Arrivals::Poisson { rngs, gaps, .. } = &mut self.arrivals {
            if let Some(gap) = &gaps[class] {
                let t = self.now + gap.sample(&mut rngs[class]);
                self.events.push(Event {
                    time: t,
                    kind: Kind::Arrival,
                    key: class as u64,
                    thread: 0,
                    generation: 0,
                });
            }
        }
    }

    fn accumulate_backlog(&mut self) {
        if self.measuring {
            self.backlog_area += self.request_queue.len() as f64 * (self.now - self.last_change);
        }
        self.last_change = self.now;
    }

    fn enqueue_request(&mut self, class: usize) {
        let view = SchedulerView {
            backlog: self.request_queue.len(),
            idle_threads: self.idle.len() as u32,
            class_id: class,
        };
        let code = self.scheduler.choose(&view, &self.cfg.classes);
        let id = self.requests.len();
        self.requests.push(Request {
            class,
            code,
            t_arrive: self.now,
            t_start: f64::NAN,
            t_finish: f64::NAN,
            completed: 0,
            canceled: 0,
            waiting: 0,
            backlog: view.backlog,
        });
        self.accumulate_backlog();
        self.request_queue.push_back(id);
    }

    fn on_arrival(&mut self, class: usize) {
        let Arrivals::Poisson { generated, .. } = &mut self.arrivals else {
            return;
        };
        if *generated >= self.cfg.horizon {
            return;
        }
        let id = *generated;
        *generated += 1;
        let last = *generated == self.cfg.horizon;

        if id == self.cfg.warmup {
            self.measuring = true;
            self.last_change = self.now;
            self.window.0 = self.now;
        }
        self.enqueue_request(class);
        if last {
            self.accumulate_backlog();
            self.measuring = false;
            self.window.1 = self.now;
        } else {
            self.schedule_arrival(class);
        }
    }

    fn on_completion(&mut self, req: usize, thread: u32) {
        self.slots[thread as usize].task = None;
        self.idle.push(thread);
        let r = &mut self.requests[req];
        r.completed += 1;
        if r.completed < r.code.k {
            return;
        }
        r.t_finish = self.now;
        let mut canceled = r.waiting;
        if r.waiting > 0 {
            self.task_queue.retain(|&t| t != req);
            r.waiting = 0;
        }
        for (i, slot) in self.slots.iter_mut().enumerate() {
            if slot.task == Some(req) {
                slot.task = None;
                slot.generation += 1;
                self.idle.push(i as u32);
                canceled += 1;
            }
        }
        self.requests[req].canceled = canceled;
        self.completion_times.push(self.now);
    }

    fn start_task(&mut self, req: usize) {
        let thread = self.idle.pop().expect("caller checked for an idle thread");
        let r = &mut self.requests[req];
        r.waiting -= 1;
        let delay = match self.scripted.pop_front() {
            Some(d) => d,
            None => self.samplers[r.class].next_delay(),
        };
        let slot = &mut self.slots[thread as usize];
        slot.task = Some(req);
        self.events.push(Event {
            time: self.now + delay,
            kind: Kind::Completion,
            key: req as u64,
            thread,
            generation: slot.generation,
        });
    }

    fn draw_saturated_class(&mut self) -> Option<usize> {
        match &mut self.arrivals {
            Arrivals::Saturated { rng, cumulative } => {
                let u: f64 = rng.random();
                Some(cumulative.iter().position(|&c| u < c).unwrap_or(cumulative.len() - 1))
            }
            Arrivals::Poisson { .. } => None,
        }
    }

    /// Idle threads pull queued tasks, then head-of-line requests are
    /// admitted for as long as the policy allows.
    fn dispatch(&mut self) {
        loop {
            while !self.idle.is_empty() {
                let Some(req) = self.task_queue.pop_front() else {
                    break;
                };
                self.start_task(req);
            }
            if self.request_queue.is_empty() {
                if let Some(class) = self.draw_saturated_class() {
                    self.enqueue_request(class);
                }
            }
            let Some(&head) = self.request_queue.front() else {
                break;
            };
            let code = self.requests[head].code;
            let needed = match self.cfg.policy {
                Policy::Blocking => code.n,
                Policy::NonBlocking => 1,
            };
            if (self.idle.len() as u32) < needed || !self.task_queue.is_empty() {
                break;
            }
            self.accumulate_backlog();
            self.request_queue.pop_front();
            let r = &mut self.requests[head];
            r.t_start = self.now;
            r.waiting = code.n;
            self.task_queue.extend(std::iter::repeat_n(head, code.n as usize));
        }
    }

    fn check_invariants(&self) -> Result<(), SimError> {
        let fail = |what: String| {
            Err(SimError::Invariant {
                time: self.now,
                what,
            })
        };
        let busy = self.slots.iter().filter(|s| s.task.is_some()).count();
        if busy + self.idle.len() != self.slots.len() {
            return fail(format!("{busy} busy + {} idle != {} threads", self.idle.len(), self.slots.len()));
        }
        if self.request_queue.iter().any(|&r| !self.requests[r].t_start.is_nan()) {
            return fail("request both queued and in service".into());
        }
        match self.cfg.policy {
            Policy::NonBlocking => {
                if !self.idle.is_empty() && (!self.task_queue.is_empty() || !self.request_queue.is_empty()) {
                    return fail("idle thread while work is waiting".into());
                }
            }
            Policy::Blocking => {
                if !self.task_queue.is_empty() {
                    return fail("blocking admission left tasks waiting".into());
                }
                if let Some(&head) = self.request_queue.front() {
                    if self.idle.len() as u32 >= self.requests[head].code.n {
                        return fail("head-of-line request admissible but waiting".into());
                    }
                }
            }
        }
        Ok(())
    }

    /// Processes events until the queue drains or `stop` returns true.
    fn run(&mut self, stop: impl Fn(&Self) -> bool) -> Result<(), SimError> {
        for class in 0..self.cfg.classes.len() {
            self.schedule_arrival(class);
        }
        self.dispatch();
        while let Some(ev) = self.events.pop() {
            self.now = ev.time;
            match ev.kind {
                Kind::Completion => {
                    let thread = ev.thread as usize;
                    if self.slots[thread].generation != ev.generation {
                        continue;
                    }
                    self.on_completion(ev.key as usize, ev.thread);
                }
                Kind::Arrival => self.on_arrival(ev.key as usize),
            }
            // Admissions happen after every event sharing this timestamp.
            if self.events.peek().is_some_and(|next| next.time == self.now) {
                continue;
            }
            self.dispatch();
            if self.cfg.check_invariants {
                self.check_invariants()?;
            }
            if stop(self) {
                break;
            }
        }
        Ok(())
    }
}

/// Runs `config.horizon` Poisson arrivals to completion.
pub fn run_simulation(config: &SimConfig) -> Result<SimOutput, SimError> {
    let mut engine = Engine::new(config, false)?;
    engine.run(|_| false)?;

    let records = engine
        .requests
        .iter()
        .enumerate()
        .map(|(id, r)| RequestRecord {
            id: id as u64,
            class_id: r.class,
            t_arrive: r.t_arrive,
            t_start: r.t_start,
            t_finish: r.t_finish,
            code: r.code,
            tasks_completed: r.completed.min(r.code.k),
            tasks_canceled: r.canceled,
            backlog_at_arrival: r.backlog,
        })
        .collect();
    let (start, end) = engine.window;
    let span = end - start;
    let measured_arrivals = (config.horizon - config.warmup).saturating_sub(1);
    let (mean_backlog, arrival_rate) = if span > 0.0 {
        (engine.backlog_area / span, measured_arrivals as f64 / span)
    } else {
        (0.0, 0.0)
    };
    Ok(SimOutput {
        records,
        warmup: config.warmup,
        mean_backlog,
        arrival_rate,
    })
}

/// Throughput of an always-backlogged system: the request queue is refilled
/// the moment it empties. The first 10% of completions are discarded.
pub fn run_backlogged(config: &SimConfig, num_requests: usize) -> Result<f64, SimError> {
    if !config.scheduler.is_fixed() {
        return Err(SimError::Config("backlogged runs need a fixed scheduler".into()));
    }
    if num_requests < 20 {
        return Err(SimError::Config("backlogged runs need at least 20 requests".into()));
    }
    let mut engine = Engine::new(config, true)?;
    engine.run(|e| e.completion_times.len() >= num_requests)?;
    let times = &engine.completion_times;
    let skip = num_requests / 10;
    let first = times[skip];
    let last = times[times.len() - 1];
    Ok((times.len() - 1 - skip) as f64 / (last - first))
}
