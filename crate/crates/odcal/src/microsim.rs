//! Discrete-time microscopic traffic simulator.
//!
//! Single-lane Krauss car-following on the network graph: synchronous speed
//! updates from the pre-step state, position advancement with link
//! transitions, FIFO entry queues when an insertion is blocked, per-vehicle
//! rerouting, and midpoint detector counting.
//!
//! Collision handling: Krauss safe speeds keep followers at least a vehicle
//! length behind the leader they can see. Vehicles merging into one link from
//! different upstream links in the same step are ordered by arrival and then
//! clamped to that spacing; an entrant that cannot fit is held at the end of
//! its old link for the step. Clamped vehicles never move backward, so the
//! per-link spacing invariant holds exactly at every step.

use std::collections::VecDeque;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::network::{edge_costs_from_snapshot, shortest_path, walk_route};
use crate::network::{distances_to, NetworkError, NetworkSpec};

/// Krauss model parameters plus the geometric constants of the vehicle fleet.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct CarFollowingParams {
    /// Maximum acceleration, m/s^2.
    pub accel: f64,
    /// Comfortable deceleration used in the safe-speed bound, m/s^2.
    pub decel: f64,
    /// Driver reaction time, seconds. Must be >= the simulation step.
    pub tau: f64,
    /// Driver imperfection in [0, 1]; scales the random speed dither.
    pub sigma: f64,
    /// Clear space required ahead of a newly inserted vehicle, meters.
    pub min_gap: f64,
    /// Meters.
    pub vehicle_length: f64,
}

impl Default for CarFollowingParams {
    fn default() -> Self {
        CarFollowingParams {
            accel: 2.6,
            decel: 4.5,
            tau: 1.0,
            sigma: 0.5,
            min_gap: 2.5,
            vehicle_length: 5.0,
        }
    }
}

impl CarFollowingParams {
    pub fn validate(&self) -> Result<(), SimError> {
        let ok = self.accel > 0.0
            && self.decel > 0.0
            && self.tau > 0.0
            && (0.0..=1.0).contains(&self.sigma)
            && self.min_gap >= 0.0
            && self.vehicle_length > 0.0;
        if ok {
            Ok(())
        } else {
            Err(SimError::BadParams)
        }
    }
}

/// One vehicle in the network. `offset` is the front-bumper position in
/// meters from the start of the current link (`route[route_position]`).
#[derive(Debug, Clone)]
pub struct Vehicle {
    pub id: u64,
    pub od_index: usize,
    pub route: Vec<usize>,
    pub route_position: usize,
    pub offset: f64,
    pub speed: f64,
    /// Input-timestep index of the dispatch decision that created it.
    pub depart_step: u32,
}

/// Per-link aggregate view of the world at one instant. Empty links report
/// their free-flow speed as the mean.
#[derive(Debug, Clone)]
pub struct SimSnapshot {
    pub counts: Vec<u32>,
    pub mean_speeds: Vec<f64>,
    pub clock: f64,
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("vehicle ordering violated on link {link} at t={clock}")]
    Ordering { link: usize, clock: f64 },
    #[error("invalid car-following parameters")]
    BadParams,
    #[error("routing failed for OD pair {od}: {source}")]
    Route {
        od: usize,
        #[source]
        source: NetworkError,
    },
}

/// Mutable world state. All randomness flows from the seeded generator owned
/// by the state, so identical seeds and action sequences replay bit-exactly.
#[derive(Debug, Clone)]
pub struct SimState {
    pub clock: f64,
    pub rng_seed: u64,
    /// Vehicles per link, ordered by offset descending (front of link first).
    per_link: Vec<Vec<Vehicle>>,
    /// FIFO insertion queues keyed by entry link.
    queues: Vec<VecDeque<Vehicle>>,
    inserted_total: u64,
    arrived_count: u64,
    /// Accumulated counts per detector (position in `spec.detectors`).
    detector_acc: Vec<u64>,
    /// Link id -> detector index, precomputed.
    detector_of_link: Vec<Option<usize>>,
    next_vehicle_id: u64,
    rng: ChaCha8Rng,
}

/// Krauss safe speed: the fastest speed that still allows stopping behind the
/// leader, assuming the leader brakes at `decel` after reaction time `tau`.
/// Monotone nondecreasing in both `gap` and `v_leader`.
pub fn krauss_safe_speed(v_leader: f64, gap: f64, params: &CarFollowingParams) -> f64 {
    let s = params.decel * params.tau;
    (-s + (s * s + v_leader * v_leader + 2.0 * params.decel * gap).sqrt()).max(0.0)
}

/// Krauss speed update: accelerate toward the minimum of desired bounds, then
/// subtract the random imperfection dither. `rand_draw` is uniform in [0, 1).
pub fn krauss_next_speed(
    v: f64,
    v_safe: f64,
    v_max: f64,
    params: &CarFollowingParams,
    dt: f64,
    rand_draw: f64,
) -> f64 {
    let v_des = (v + params.accel * dt).min(v_safe).min(v_max);
    (v_des - params.sigma * params.accel * dt * rand_draw).max(0.0)
}

/// Working record for one vehicle during a step's movement resolution.
struct Moved {
    vehicle: Option<Vehicle>,
    old_link: usize,
    old_offset: f64,
    v_next: f64,
    target_link: usize,
    target_offset: f64,
    target_rp: usize,
    /// Distance from the old position to the start of the target link
    /// (0 when the vehicle stays on its link).
    path_base: f64,
    held: bool,
    clamped: bool,
}

impl SimState {
    pub fn new(spec: &NetworkSpec, seed: u64) -> Self {
        let n = spec.n_links();
        let detector_of_link = (0..n).map(|l| spec.detector_index(l)).collect();
        SimState {
            clock: 0.0,
            rng_seed: seed,
            per_link: vec![Vec::new(); n],
            queues: vec![VecDeque::new(); n],
            inserted_total: 0,
            arrived_count: 0,
            detector_acc: vec![0; spec.n_detectors()],
            detector_of_link,
            next_vehicle_id: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn active_count(&self) -> u64 {
        self.per_link.iter().map(|l| l.len() as u64).sum()
    }

    pub fn queued_count(&self) -> u64 {
        self.queues.iter().map(|q| q.len() as u64).sum()
    }

    pub fn arrived_count(&self) -> u64 {
        self.arrived_count
    }

    pub fn inserted_total(&self) -> u64 {
        self.inserted_total
    }

    /// Conservation identity: inserted == active + queued + arrived.
    pub fn conserves_vehicles(&self) -> bool {
        self.inserted_total == self.active_count() + self.queued_count() + self.arrived_count
    }

    /// Active vehicles as (link id, vehicle), front of each link first.
    pub fn vehicles(&self) -> impl Iterator<Item = (usize, &Vehicle)> {
        self.per_link
            .iter()
            .enumerate()
            .flat_map(|(l, vs)| vs.iter().map(move |v| (l, v)))
    }

    /// Running per-detector counts since the last reset, without resetting.
    pub fn peek_detectors(&self) -> &[u64] {
        &self.detector_acc
    }

    /// Returns the accumulated counts for the closing aggregation interval
    /// and zeroes the accumulators.
    pub fn read_and_reset_detectors(&mut self) -> Vec<u64> {
        let out = self.detector_acc.clone();
        self.detector_acc.iter_mut().for_each(|c| *c = 0);
        out
    }

    /// Per-link counts and mean speeds; empty links report free-flow speed.
    pub fn snapshot(&self, spec: &NetworkSpec) -> SimSnapshot {
        let mut counts = Vec::with_capacity(spec.n_links());
        let mut mean_speeds = Vec::with_capacity(spec.n_links());
        for link in &spec.links {
            let vs = &self.per_link[link.id];
            counts.push(vs.len() as u32);
            if vs.is_empty() {
                mean_speeds.push(link.free_flow_speed);
            } else {
                mean_speeds.push(vs.iter().map(|v| v.speed).sum::<f64>() / vs.len() as f64);
            }
        }
        SimSnapshot { counts, mean_speeds, clock: self.clock }
    }

    /// True when the first `min_gap + vehicle_length` meters of the link are
    /// clear of vehicle bodies, so an insertion at offset 0 keeps `min_gap`.
    fn entry_free(&self, link: usize, params: &CarFollowingParams) -> bool {
        let cell = params.min_gap + 2.0 * params.vehicle_length;
        self.per_link[link].last().map(|v| v.offset >= cell).unwrap_or(true)
    }

    fn place(&mut self, vehicle: Vehicle) {
        let link = vehicle.route[vehicle.route_position];
        debug_assert!(self
            .per_link[link]
            .last()
            .map(|v| v.offset > vehicle.offset)
            .unwrap_or(true));
        self.per_link[link].push(vehicle);
    }

    /// Dispatches one vehicle for `od_index` onto the first link of the
    /// current shortest path. If the entry cell is occupied the vehicle joins
    /// that link's FIFO queue and is retried every step; queued vehicles
    /// still count as inserted.
    pub fn insert_vehicle(
        &mut self,
        spec: &NetworkSpec,
        params: &CarFollowingParams,
        od_index: usize,
        depart_step: u32,
    ) -> Result<(), SimError> {
        let (origin, dest) = spec.od_pairs[od_index];
        let costs = edge_costs_from_snapshot(spec, &self.snapshot(spec));
        let route = shortest_path(spec, &costs, origin, dest)
            .map_err(|source| SimError::Route { od: od_index, source })?;
        let vehicle = Vehicle {
            id: self.next_vehicle_id,
            od_index,
            route,
            route_position: 0,
            offset: 0.0,
            speed: 0.0,
            depart_step,
        };
        self.next_vehicle_id += 1;
        self.inserted_total += 1;
        let entry = vehicle.route[0];
        if self.queues[entry].is_empty() && self.entry_free(entry, params) {
            self.place(vehicle);
        } else {
            self.queues[entry].push_back(vehicle);
        }
        Ok(())
    }

    /// Replaces every active vehicle's remaining route (from the end node of
    /// its current link) with the current shortest path under snapshot-based
    /// edge costs. The current link itself never changes.
    pub fn reroute_all(&mut self, spec: &NetworkSpec) -> Result<(), SimError> {
        let costs = edge_costs_from_snapshot(spec, &self.snapshot(spec));
        let dests: std::collections::BTreeSet<u32> =
            spec.od_pairs.iter().map(|&(_, d)| d).collect();
        let dist: std::collections::BTreeMap<u32, _> = dests
            .into_iter()
            .map(|d| (d, distances_to(spec, &costs, d)))
            .collect();
        for link_vehicles in &mut self.per_link {
            for veh in link_vehicles.iter_mut() {
                let dest = spec.od_pairs[veh.od_index].1;
                let cur = veh.route[veh.route_position];
                let end_node = spec.links[cur].to_node;
                if end_node == dest {
                    veh.route = vec![cur];
                } else {
                    let tail = walk_route(spec, &costs, &dist[&dest], end_node, dest)
                        .map_err(|source| SimError::Route { od: veh.od_index, source })?;
                    let mut route = Vec::with_capacity(tail.len() + 1);
                    route.push(cur);
                    route.extend(tail);
                    veh.route = route;
                }
                veh.route_position = 0;
            }
        }
        Ok(())
    }

    /// Leader seen by vehicle `i` on `link`: the next vehicle ahead on the
    /// same link, else the rearmost vehicle on the next route link. Returns
    /// (leader speed, bumper gap).
    fn leader_of(
        &self,
        link: usize,
        i: usize,
        spec: &NetworkSpec,
        params: &CarFollowingParams,
    ) -> Option<(f64, f64)> {
        let veh = &self.per_link[link][i];
        if i > 0 {
            let lead = &self.per_link[link][i - 1];
            return Some((lead.speed, lead.offset - veh.offset - params.vehicle_length));
        }
        if veh.route_position + 1 < veh.route.len() {
            let next = veh.route[veh.route_position + 1];
            return self.per_link[next].last().map(|lead| {
                let gap = (spec.links[link].length - veh.offset) + lead.offset
                    - params.vehicle_length;
                (lead.speed, gap)
            });
        }
        None
    }

    fn retry_queued(&mut self, params: &CarFollowingParams) {
        for link in 0..self.queues.len() {
            while !self.queues[link].is_empty() && self.entry_free(link, params) {
                let vehicle = self.queues[link].pop_front().expect("checked nonempty");
                self.place(vehicle);
            }
        }
    }

    /// Advances the world by `dt` seconds: queued-insertion retries, a
    /// synchronous Krauss speed pass, position advancement with link
    /// transitions and merge resolution, detector crediting, and arrivals.
    pub fn sim_step(
        &mut self,
        spec: &NetworkSpec,
        params: &CarFollowingParams,
        dt: f64,
    ) -> Result<(), SimError> {
        assert!(dt > 0.0, "dt must be positive");
        params.validate()?;
        self.retry_queued(params);

        let n_links = spec.n_links();

        // Speed pass: all decisions read the pre-step state. Draw order is
        // fixed (links ascending, front to back), which pins determinism.
        let mut new_speeds: Vec<Vec<f64>> = Vec::with_capacity(n_links);
        for link in 0..n_links {
            let mut speeds = Vec::with_capacity(self.per_link[link].len());
            for i in 0..self.per_link[link].len() {
                let v_safe = match self.leader_of(link, i, spec, params) {
                    Some((v_leader, gap)) => krauss_safe_speed(v_leader, gap.max(0.0), params),
                    None => f64::INFINITY,
                };
                let draw: f64 = self.rng.gen();
                let veh = &self.per_link[link][i];
                let v_max = spec.links[link].free_flow_speed;
                speeds.push(krauss_next_speed(veh.speed, v_safe, v_max, params, dt, draw));
            }
            new_speeds.push(speeds);
        }

        // Tentative movement. Survivors keep their relative order; entrants
        // are grouped per target link for merge resolution. Vehicles that
        // run out of route leave the network.
        let mut moved: Vec<Moved> = Vec::new();
        let mut arrivals: Vec<Vehicle> = Vec::new();
        let mut final_lists: Vec<Vec<usize>> = vec![Vec::new(); n_links];
        let mut entrants: Vec<Vec<usize>> = vec![Vec::new(); n_links];

        for link in 0..n_links {
            let vehicles = std::mem::take(&mut self.per_link[link]);
            for (i, veh) in vehicles.into_iter().enumerate() {
                let v_next = new_speeds[link][i];
                let new_off = veh.offset + v_next * dt;
                let len = spec.links[link].length;
                let last = veh.route_position + 1 == veh.route.len();
                if last && new_off >= len {
                    arrivals.push(veh);
                    continue;
                }
                let m = if new_off > len {
                    // Walk the route; long links make multi-link jumps rare,
                    // but the walk handles them for small test networks.
                    let old_offset = veh.offset;
                    let mut rp = veh.route_position;
                    let mut remaining = new_off - len;
                    let mut path_base = len - veh.offset;
                    let mut target = None;
                    loop {
                        rp += 1;
                        let l = veh.route[rp];
                        let l_len = spec.links[l].length;
                        let l_last = rp + 1 == veh.route.len();
                        if l_last && remaining >= l_len {
                            break; // arrives within this step
                        }
                        if remaining > l_len {
                            remaining -= l_len;
                            path_base += l_len;
                            continue;
                        }
                        target = Some((l, remaining, rp));
                        break;
                    }
                    let Some((t_link, t_off, t_rp)) = target else {
                        arrivals.push(veh);
                        continue;
                    };
                    Moved {
                        vehicle: Some(veh),
                        old_link: link,
                        old_offset,
                        v_next,
                        target_link: t_link,
                        target_offset: t_off,
                        target_rp: t_rp,
                        path_base,
                        held: false,
                        clamped: false,
                    }
                } else {
                    let old_offset = veh.offset;
                    let target_rp = veh.route_position;
                    Moved {
                        vehicle: Some(veh),
                        old_link: link,
                        old_offset,
                        v_next,
                        target_link: link,
                        target_offset: new_off,
                        target_rp,
                        path_base: 0.0,
                        held: false,
                        clamped: false,
                    }
                };
                let idx = moved.len();
                if m.target_link == link {
                    final_lists[link].push(idx);
                } else {
                    entrants[m.target_link].push(idx);
                }
                moved.push(m);
            }
        }

        // Merge entrants behind survivors, ordered by arrival (entry offset
        // descending, then vehicle id).
        for link in 0..n_links {
            let mut es = std::mem::take(&mut entrants[link]);
            es.sort_by(|&a, &b| {
                moved[b]
                    .target_offset
                    .partial_cmp(&moved[a].target_offset)
                    .expect("offsets are finite")
                    .then_with(|| {
                        let ida = moved[a].vehicle.as_ref().map(|v| v.id);
                        let idb = moved[b].vehicle.as_ref().map(|v| v.id);
                        ida.cmp(&idb)
                    })
            });
            final_lists[link].extend(es);
        }

        // Spacing enforcement. Offsets only ever shrink here, and a clamped
        // vehicle never lands behind its pre-step position. An entrant that
        // would clamp below the link start is held at the end of its old
        // link, which re-queues that link for another sweep.
        let vl = params.vehicle_length;
        let mut work: VecDeque<usize> = (0..n_links).collect();
        let mut queued_links = vec![true; n_links];
        while let Some(link) = work.pop_front() {
            queued_links[link] = false;
            let mut limit = f64::INFINITY;
            let mut i = 0;
            while i < final_lists[link].len() {
                let mi = final_lists[link][i];
                let placed = moved[mi].target_offset.min(limit);
                let entered = moved[mi].target_link != moved[mi].old_link;
                if placed < 0.0 && entered {
                    let old = moved[mi].old_link;
                    moved[mi].held = true;
                    moved[mi].clamped = true;
                    moved[mi].target_link = old;
                    moved[mi].target_offset = spec.links[old].length;
                    moved[mi].target_rp =
                        moved[mi].vehicle.as_ref().expect("present until applied").route_position;
                    moved[mi].path_base = 0.0;
                    final_lists[link].remove(i);
                    let pos = final_lists[old]
                        .iter()
                        .take_while(|&&j| moved[j].held)
                        .count();
                    final_lists[old].insert(pos, mi);
                    if !queued_links[old] {
                        queued_links[old] = true;
                        work.push_back(old);
                    }
                    continue;
                }
                debug_assert!(placed >= 0.0, "survivors never clamp below the link start");
                if placed < moved[mi].target_offset {
                    moved[mi].target_offset = placed;
                    moved[mi].clamped = true;
                }
                limit = moved[mi].target_offset - vl;
                i += 1;
            }
        }

        // Detector crediting from final positions: a detector fires when the
        // front bumper crosses the link midpoint, once per traversal.
        let credit = |link: usize, from: f64, to: f64, acc: &mut Vec<u64>| {
            if let Some(d) = self.detector_of_link[link] {
                let mid = spec.links[link].length * 0.5;
                if from < mid && to >= mid {
                    acc[d] += 1;
                }
            }
        };
        let mut acc = std::mem::take(&mut self.detector_acc);
        for m in &moved {
            let veh = m.vehicle.as_ref().expect("present until applied");
            if m.target_link == m.old_link {
                credit(m.old_link, m.old_offset, m.target_offset, &mut acc);
            } else {
                credit(m.old_link, m.old_offset, spec.links[m.old_link].length, &mut acc);
                for rp in veh.route_position + 1..m.target_rp {
                    let l = veh.route[rp];
                    credit(l, 0.0, spec.links[l].length, &mut acc);
                }
                credit(m.target_link, 0.0, m.target_offset, &mut acc);
            }
        }
        for veh in &arrivals {
            let cur = veh.route[veh.route_position];
            credit(cur, veh.offset, spec.links[cur].length, &mut acc);
            for rp in veh.route_position + 1..veh.route.len() {
                let l = veh.route[rp];
                credit(l, 0.0, spec.links[l].length, &mut acc);
            }
        }
        self.detector_acc = acc;

        // Apply: realized displacement fixes the speed of clamped vehicles.
        let mut slots: Vec<Option<Moved>> = moved.into_iter().map(Some).collect();
        for link in 0..n_links {
            let list = std::mem::take(&mut final_lists[link]);
            let mut rebuilt = Vec::with_capacity(list.len());
            for mi in list {
                let m = slots[mi].take().expect("each vehicle applied once");
                let mut veh = m.vehicle.expect("present until applied");
                let realized = if m.target_link == m.old_link {
                    m.target_offset - m.old_offset
                } else {
                    m.path_base + m.target_offset
                };
                veh.speed = if m.clamped { realized / dt } else { m.v_next };
                veh.speed = veh.speed.min(spec.links[m.target_link].free_flow_speed);
                veh.offset = m.target_offset;
                veh.route_position = m.target_rp;
                rebuilt.push(veh);
            }
            self.per_link[link] = rebuilt;
        }
        self.arrived_count += arrivals.len() as u64;

        // Ordering audit; the clamp pass makes violations unreachable, but
        // this is the safety contract of the whole simulator, so verify.
        for link in 0..n_links {
            let len = spec.links[link].length;
            let vs = &self.per_link[link];
            for i in 0..vs.len() {
                let off = vs[i].offset;
                let bad_bounds = !(-1e-9..=len + 1e-9).contains(&off);
                let bad_spacing = i > 0 && vs[i - 1].offset - off < vl - 1e-9;
                if bad_bounds || bad_spacing {
                    return Err(SimError::Ordering { link, clock: self.clock });
                }
            }
        }

        self.clock += dt;
        Ok(())
    }

    #[cfg(test)]
    pub(crate) fn place_test_vehicle(
        &mut self,
        route: Vec<usize>,
        route_position: usize,
        offset: f64,
        speed: f64,
    ) {
        let vehicle = Vehicle {
            id: self.next_vehicle_id,
            od_index: 0,
            route,
            route_position,
            offset,
            speed,
            depart_step: 0,
        };
        self.next_vehicle_id += 1;
        self.inserted_total += 1;
        let link = vehicle.route[vehicle.route_position];
        let pos = self.per_link[link]
            .iter()
            .position(|v| v.offset < offset)
            .unwrap_or(self.per_link[link].len());
        self.per_link[link].insert(pos, vehicle);
    }
}
