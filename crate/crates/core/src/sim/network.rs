//! Road geometry: single-lane ring and multi-lane bottleneck with zipper
//! lane drops, plus leader/follower resolution over a set of vehicle
//! states.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::VehicleState;

/// Gap handed to controllers when no leader is in range.
pub const FREE_ROAD_GAP: f64 = 1e9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub length: f64,
    pub lanes: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Network {
    Ring { length: f64 },
    Bottleneck(BottleneckNet),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BottleneckNet {
    pub segments: Vec<Segment>,
    /// Cumulative segment starts plus the total length at the end.
    pub boundaries: Vec<f64>,
    /// Vehicles this close to a lane-drop boundary follow partner-lane
    /// vehicles as well (m).
    pub merge_zone: f64,
}

impl BottleneckNet {
    pub fn new(segments: Vec<Segment>, merge_zone: f64) -> Self {
        let mut boundaries = Vec::with_capacity(segments.len() + 1);
        let mut acc = 0.0;
        boundaries.push(0.0);
        for s in &segments {
            acc += s.length;
            boundaries.push(acc);
        }
        BottleneckNet { segments, boundaries, merge_zone }
    }

    pub fn total_length(&self) -> f64 {
        *self.boundaries.last().unwrap()
    }

    pub fn segment_of(&self, x: f64) -> usize {
        // boundaries[i] <= x < boundaries[i+1]
        let mut seg = 0;
        while seg + 1 < self.segments.len() && x >= self.boundaries[seg + 1] {
            seg += 1;
        }
        seg
    }

    /// Zipper lane mapping across one boundary: lanes collapse in adjacent
    /// pairs (or groups) onto the surviving lanes.
    pub fn map_lane_once(&self, seg_from: usize, lane: u32) -> u32 {
        let from = self.segments[seg_from].lanes;
        let to = self.segments[seg_from + 1].lanes;
        if to >= from {
            lane.min(to - 1)
        } else {
            lane * to / from
        }
    }

    /// Lane a vehicle in `seg_from`/`lane` will occupy once it reaches
    /// `seg_to`.
    pub fn map_lane(&self, seg_from: usize, seg_to: usize, lane: u32) -> u32 {
        let mut l = lane;
        for s in seg_from..seg_to {
            l = self.map_lane_once(s, l);
        }
        l
    }

    /// Whether a position in `seg` lies inside the merge zone ahead of a
    /// lane drop.
    pub fn in_merge_zone(&self, seg: usize, x: f64) -> bool {
        seg + 1 < self.segments.len()
            && self.segments[seg + 1].lanes < self.segments[seg].lanes
            && self.boundaries[seg + 1] - x <= self.merge_zone
    }
}

impl Network {
    pub fn speedway_length(&self) -> f64 {
        match self {
            Network::Ring { length } => *length,
            Network::Bottleneck(b) => b.total_length(),
        }
    }
}

/// A vehicle seen as a leader (or follower) of another: bumper gap,
/// front-to-front headway, and current velocity. `physical` marks
/// candidates that share the follower's lane (directly or through a lane
/// mapping), where a non-positive gap means an actual overlap; merge-zone
/// partners in a different lane are not physical until the drop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LeaderInfo {
    pub idx: usize,
    pub headway: f64,
    pub gap: f64,
    pub velocity: f64,
    pub physical: bool,
}

/// Leader/follower relations for one vehicle. `candidates` lists every
/// vehicle the failsafe must respect (same lane, merge partners, next
/// segment); `leader` is the nearest of them.
#[derive(Debug, Clone, Default)]
pub struct LeaderView {
    pub leader: Option<LeaderInfo>,
    pub candidates: Vec<LeaderInfo>,
    pub follower: Option<LeaderInfo>,
}

/// Compute leader views for every vehicle in `states`.
pub fn leader_views(network: &Network, states: &[VehicleState]) -> Vec<LeaderView> {
    match network {
        Network::Ring { length } => ring_views(*length, states),
        Network::Bottleneck(net) => bottleneck_views(net, states),
    }
}

fn ring_views(length: f64, states: &[VehicleState]) -> Vec<LeaderView> {
    let n = states.len();
    let mut views = vec![LeaderView::default(); n];
    if n == 0 {
        return views;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        states[a]
            .position
            .partial_cmp(&states[b].position)
            .unwrap()
            .then(states[a].id.cmp(&states[b].id))
    });
    for k in 0..n {
        let i = order[k];
        let j = order[(k + 1) % n];
        let mut headway = states[j].position - states[i].position;
        if headway <= 0.0 || n == 1 {
            headway += length;
        }
        let leader = LeaderInfo {
            idx: j,
            headway,
            gap: headway - states[j].length,
            velocity: states[j].velocity,
            physical: true,
        };
        let f = order[(k + n - 1) % n];
        let mut back = states[i].position - states[f].position;
        if back <= 0.0 || n == 1 {
            back += length;
        }
        let follower = LeaderInfo {
            idx: f,
            headway: back,
            gap: back - states[i].length,
            velocity: states[f].velocity,
            physical: true,
        };
        views[i] = LeaderView { leader: Some(leader), candidates: vec![leader], follower: Some(follower) };
    }
    views
}

type Bucket = Vec<(f64, u32, usize)>; // (position, id, index), sorted

fn bottleneck_views(net: &BottleneckNet, states: &[VehicleState]) -> Vec<LeaderView> {
    let mut buckets: BTreeMap<(usize, u32), Bucket> = BTreeMap::new();
    for (idx, s) in states.iter().enumerate() {
        let seg = net.segment_of(s.position);
        buckets.entry((seg, s.lane)).or_default().push((s.position, s.id, idx));
    }
    for bucket in buckets.values_mut() {
        bucket.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    }

    let successor = |bucket: &Bucket, pos: f64, id: u32| -> Option<(f64, usize)> {
        bucket
            .iter()
            .find(|(p, bid, _)| (*p, *bid) > (pos, id))
            .map(|(p, _, idx)| (*p, *idx))
    };
    let predecessor = |bucket: &Bucket, pos: f64, id: u32| -> Option<(f64, usize)> {
        bucket
            .iter()
            .rev()
            .find(|(p, bid, _)| (*p, *bid) < (pos, id))
            .map(|(p, _, idx)| (*p, *idx))
    };

    let mut views = Vec::with_capacity(states.len());
    for s in states {
        let seg = net.segment_of(s.position);
        let mut candidates: Vec<LeaderInfo> = Vec::new();
        let mut push = |pos: f64, idx: usize, physical: bool| {
            let headway = pos - s.position;
            candidates.push(LeaderInfo {
                idx,
                headway,
                gap: headway - states[idx].length,
                velocity: states[idx].velocity,
                physical,
            });
        };

        if let Some(bucket) = buckets.get(&(seg, s.lane)) {
            if let Some((pos, idx)) = successor(bucket, s.position, s.id) {
                push(pos, idx, true);
            }
        }
        // merge partners share the surviving lane across the next drop
        if net.in_merge_zone(seg, s.position) {
            let target = net.map_lane_once(seg, s.lane);
            for lane in 0..net.segments[seg].lanes {
                if lane == s.lane || net.map_lane_once(seg, lane) != target {
                    continue;
                }
                if let Some(bucket) = buckets.get(&(seg, lane)) {
                    if let Some((pos, idx)) = successor(bucket, s.position, s.id) {
                        push(pos, idx, false);
                    }
                }
            }
        }
        // nearest vehicle downstream in the lane this one flows into
        for t in seg + 1..net.segments.len() {
            let lane_t = net.map_lane(seg, t, s.lane);
            if let Some(bucket) = buckets.get(&(t, lane_t)) {
                if let Some((pos, _, idx)) = bucket.first() {
                    push(*pos, *idx, true);
                    break;
                }
            }
        }

        let leader = candidates
            .iter()
            .min_by(|a, b| a.headway.partial_cmp(&b.headway).unwrap())
            .copied();

        // follower: nearest behind in this lane, else in upstream lanes
        // that map into it
        let mut follower = None;
        if let Some(bucket) = buckets.get(&(seg, s.lane)) {
            if let Some((pos, idx)) = predecessor(bucket, s.position, s.id) {
                follower = Some((pos, idx));
            }
        }
        if follower.is_none() && seg > 0 {
            let t = seg - 1;
            let mut best: Option<(f64, usize)> = None;
            for lane in 0..net.segments[t].lanes {
                if net.map_lane_once(t, lane) != s.lane {
                    continue;
                }
                if let Some(bucket) = buckets.get(&(t, lane)) {
                    if let Some((pos, _, idx)) = bucket.last() {
                        if best.map_or(true, |(bp, _)| *pos > bp) {
                            best = Some((*pos, *idx));
                        }
                    }
                }
            }
            follower = best;
        }
        let follower = follower.map(|(pos, idx)| LeaderInfo {
            idx,
            headway: s.position - pos,
            gap: s.position - pos - s.length,
            velocity: states[idx].velocity,
            physical: true,
        });

        views.push(LeaderView { leader, candidates, follower });
    }
    views
}
