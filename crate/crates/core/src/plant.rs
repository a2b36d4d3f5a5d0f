//! Day-by-day plant: reservoir mass balance plus downstream routing, recording
//! a [`Trajectory`]. Every simulator in the crate steps through this type so
//! that energy, levels and diagnostics are computed one way.

use crate::hydrology::Disturbance;
use crate::reservoir::{ReservoirSpec, StepRecord, Trajectory};
use crate::routing::{DownstreamModel, RoutingState};

#[derive(Debug, Clone)]
pub struct Plant<'a> {
    spec: &'a ReservoirSpec,
    routing: &'a dyn DownstreamModel,
    routing_state: RoutingState,
    storage: f64,
    start_day: usize,
    records: Vec<StepRecord>,
    negative_storage_events: usize,
}

impl<'a> Plant<'a> {
    /// The routing memory starts at rest with the first day's total natural
    /// flow, as if the reservoir had been passing its inflow through.
    pub fn new(
        spec: &'a ReservoirSpec,
        routing: &'a dyn DownstreamModel,
        start_day: usize,
        s0: f64,
        first: Disturbance,
    ) -> Self {
        Plant {
            spec,
            routing,
            routing_state: routing.state_at_rest(first.q_d + first.q_t + first.q_l),
            storage: s0,
            start_day,
            records: Vec::new(),
            negative_storage_events: 0,
        }
    }

    pub fn storage(&self) -> f64 {
        self.storage
    }

    /// Number of steps taken so far.
    pub fn t(&self) -> usize {
        self.records.len()
    }

    pub fn routing_state(&self) -> &RoutingState {
        &self.routing_state
    }

    pub fn step(&mut self, u: f64, dist: Disturbance) -> StepRecord {
        let s = self.storage;
        let r = self.spec.apply_release(s, u, dist.q_d);
        let head = self.spec.hydraulic_head(s, r);
        let energy = self.spec.energy_production(head, r);
        let h_hanoi = self
            .routing
            .advance(&mut self.routing_state, r + dist.q_t + dist.q_l);
        let next = self.spec.mass_balance(s, dist.q_d, r);
        if next < 0.0 {
            self.negative_storage_events += 1;
        }
        let rec = StepRecord {
            t: self.records.len(),
            s,
            u,
            r,
            q_d: dist.q_d,
            h_hanoi,
            energy,
        };
        self.records.push(rec);
        self.storage = next;
        rec
    }

    pub fn finish(self) -> Trajectory {
        Trajectory {
            start_day: self.start_day,
            seconds_per_step: self.spec.seconds_per_step,
            records: self.records,
            final_storage: self.storage,
            negative_storage_events: self.negative_storage_events,
        }
    }
}
