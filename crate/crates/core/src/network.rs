//! Corridor topology and junction coupling constraints.
//!
//! A corridor is a directed path of links. Besides serial junctions it may
//! contain merges where an on-ramp joins the mainline. On-ramps are point
//! queues without internal dynamics; at a merge the ramp is served first and
//! the mainline receives the remaining downstream supply.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::link::{LinkSpec, LinkVariables};
use crate::milp::{LinearProgram, Sense, VarId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JunctionKind {
    Serial,
    Merge,
}

/// A node between links. For a merge, `incoming` is `[mainline link, ramp]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Junction {
    pub id: usize,
    pub kind: JunctionKind,
    pub incoming: Vec<usize>,
    pub outgoing: Vec<usize>,
}

/// On-ramp feeding a merge from a point queue with constant demand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ramp {
    pub id: usize,
    /// Arrival rate, veh/s.
    pub demand: f64,
}

/// Reduced exit capacity from `start` (seconds) on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapacityDrop {
    pub link: usize,
    pub capacity: f64,
    pub start: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corridor {
    pub links: Vec<LinkSpec>,
    pub ramps: Vec<Ramp>,
    pub junctions: Vec<Junction>,
    pub entry_links: Vec<usize>,
    pub exit_links: Vec<usize>,
    pub capacity_drop: Option<CapacityDrop>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TopologyError {
    #[error("junction {junction} references unknown id {id}")]
    UnknownReference { junction: usize, id: usize },
    #[error("{kind:?} junction {junction} has {incoming} incoming and {outgoing} outgoing")]
    Arity { junction: usize, kind: JunctionKind, incoming: usize, outgoing: usize },
    #[error("link {0} is not reached from an entry link")]
    DanglingLink(usize),
    #[error("link {0} appears in more than one upstream or downstream role")]
    DuplicateRole(usize),
    #[error("duplicate id {0}")]
    DuplicateId(usize),
    #[error("corridor must have exactly one entry and one exit link, found {entries} and {exits}")]
    EntryExit { entries: usize, exits: usize },
    #[error("FD inconsistency on link {link}: {msg}")]
    FdInconsistency { link: usize, msg: String },
    #[error("speed-limit candidate {index} of link {link} inconsistent: {msg}")]
    VslInconsistency { link: usize, index: usize, msg: String },
    #[error("link {0} has an empty speed-limit set")]
    MissingVslSet(usize),
    #[error("capacity drop refers to link {0}, which is not an exit link")]
    CapacityDropLink(usize),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetworkError {
    #[error("junction {junction}: unsupported arity for {kind:?}")]
    Topology { junction: usize, kind: JunctionKind },
    #[error("junction {junction}: no variables for id {id}")]
    MissingVariables { junction: usize, id: usize },
}

impl Corridor {
    pub fn link(&self, id: usize) -> Option<&LinkSpec> {
        self.links.iter().find(|l| l.id == id)
    }

    pub fn ramp(&self, id: usize) -> Option<&Ramp> {
        self.ramps.iter().find(|r| r.id == id)
    }

    pub fn vsl_links(&self) -> impl Iterator<Item = &LinkSpec> {
        self.links.iter().filter(|l| l.is_vsl())
    }

    /// Mainline links from entry to exit.
    pub fn path(&self) -> Vec<usize> {
        let mut path = Vec::new();
        let Some(&start) = self.entry_links.first() else { return path };
        let mut cur = start;
        let mut seen = BTreeSet::new();
        while seen.insert(cur) {
            path.push(cur);
            match self.junctions.iter().find(|j| j.incoming.first() == Some(&cur)) {
                Some(j) if !j.outgoing.is_empty() => cur = j.outgoing[0],
                _ => break,
            }
        }
        path
    }

    /// Exit capacity in force at time `t`, if reduced.
    pub fn exit_capacity(&self, link: usize, t: f64) -> Option<f64> {
        self.capacity_drop.as_ref().filter(|d| d.link == link && t + 1e-9 >= d.start).map(|d| d.capacity)
    }

    /// Length of the mainline path.
    pub fn length(&self) -> f64 {
        self.path().iter().filter_map(|&id| self.link(id)).map(|l| l.geometry.length()).sum()
    }
}

/// Checks connectivity, roles, and diagram consistency. Returns every
/// problem found.
pub fn validate_topology(corridor: &Corridor) -> Result<(), Vec<TopologyError>> {
    let mut errors = Vec::new();
    let mut ids = BTreeSet::new();
    for id in corridor.links.iter().map(|l| l.id).chain(corridor.ramps.iter().map(|r| r.id)) {
        if !ids.insert(id) {
            errors.push(TopologyError::DuplicateId(id));
        }
    }
    let is_link = |id: usize| corridor.link(id).is_some();
    let is_ramp = |id: usize| corridor.ramp(id).is_some();

    let mut upstream_role: BTreeMap<usize, usize> = BTreeMap::new();
    let mut downstream_role: BTreeMap<usize, usize> = BTreeMap::new();
    for j in &corridor.junctions {
        let arity_ok = match j.kind {
            JunctionKind::Serial => j.incoming.len() == 1 && j.outgoing.len() == 1,
            JunctionKind::Merge => j.incoming.len() == 2 && j.outgoing.len() == 1,
        };
        if !arity_ok {
            errors.push(TopologyError::Arity {
                junction: j.id,
                kind: j.kind,
                incoming: j.incoming.len(),
                outgoing: j.outgoing.len(),
            });
        }
        for (pos, &id) in j.incoming.iter().enumerate() {
            let ok = if j.kind == JunctionKind::Merge && pos == 1 { is_ramp(id) } else { is_link(id) };
            if !ok {
                errors.push(TopologyError::UnknownReference { junction: j.id, id });
            }
            *upstream_role.entry(id).or_default() += 1;
        }
        for &id in &j.outgoing {
            if !is_link(id) {
                errors.push(TopologyError::UnknownReference { junction: j.id, id });
            }
            *downstream_role.entry(id).or_default() += 1;
        }
    }
    for (&id, &n) in upstream_role.iter().chain(downstream_role.iter()) {
        if n > 1 {
            errors.push(TopologyError::DuplicateRole(id));
        }
    }
    if corridor.entry_links.len() != 1 || corridor.exit_links.len() != 1 {
        errors.push(TopologyError::EntryExit { entries: corridor.entry_links.len(), exits: corridor.exit_links.len() });
    } else {
        let path: BTreeSet<usize> = corridor.path().into_iter().collect();
        for l in &corridor.links {
            if !path.contains(&l.id) {
                errors.push(TopologyError::DanglingLink(l.id));
            }
        }
        let last = corridor.path().last().copied();
        if last != corridor.exit_links.first().copied() {
            errors.push(TopologyError::DanglingLink(corridor.exit_links[0]));
        }
    }
    for l in &corridor.links {
        if let Some(msg) = l.fd.consistency_error() {
            errors.push(TopologyError::FdInconsistency { link: l.id, msg });
        }
        if let Some(sets) = &l.vsl {
            if sets.is_empty() {
                errors.push(TopologyError::MissingVslSet(l.id));
            } else if let Err((index, msg)) = sets.check(&l.fd) {
                errors.push(TopologyError::VslInconsistency { link: l.id, index, msg });
            }
        }
    }
    if let Some(d) = &corridor.capacity_drop {
        if !corridor.exit_links.contains(&d.link) {
            errors.push(TopologyError::CapacityDropLink(d.link));
        }
    }
    if errors.is_empty() {
        Ok(())
    } else {
        Err(errors)
    }
}

/// Ramp flows over a window plus the binaries recording whether the ramp is
/// limited by downstream supply.
#[derive(Debug, Clone)]
pub struct RampVariables {
    pub ramp: usize,
    pub flow: Vec<VarId>,
    pub supply_limited: Vec<VarId>,
    /// Vehicles waiting at the start of the window.
    pub initial_queue: f64,
    pub demand: f64,
}

impl RampVariables {
    pub fn new(
        lp: &mut LinearProgram,
        ramp: &Ramp,
        steps: usize,
        capacity: f64,
        initial_queue: f64,
        prefix: &str,
    ) -> Self {
        let flow =
            (0..steps).map(|n| lp.add_continuous(format!("{prefix}r{}.flow[{n}]", ramp.id), 0.0, capacity)).collect();
        let supply_limited = (0..steps).map(|n| lp.add_binary(format!("{prefix}r{}.limited[{n}]", ramp.id))).collect();
        Self { ramp: ramp.id, flow, supply_limited, initial_queue, demand: ramp.demand }
    }
}

/// Coupling rows of one junction over `steps` steps of length `step`.
///
/// Serial: outflow of the upstream link equals inflow of the downstream link
/// (each already bounded by its own demand and supply). Merge: conservation,
/// ramp flow never above its queue plus arrivals, and ramp-first priority:
/// either the ramp is fully served by the end of the step or the mainline
/// sends nothing.
pub fn build_node_constraints(
    lp: &mut LinearProgram,
    junction: &Junction,
    links: &BTreeMap<usize, LinkVariables>,
    ramps: &BTreeMap<usize, RampVariables>,
    step: f64,
) -> Result<usize, NetworkError> {
    let before = lp.num_constraints();
    let jid = junction.id;
    let get = |id: usize| links.get(&id).ok_or(NetworkError::MissingVariables { junction: jid, id });
    match (junction.kind, junction.incoming.as_slice(), junction.outgoing.as_slice()) {
        (JunctionKind::Serial, &[up], &[down]) => {
            let (u, d) = (get(up)?, get(down)?);
            for n in 0..u.steps() {
                lp.add_constraint(
                    format!("j{jid}.flow[{n}]"),
                    &[(u.outflow[n], 1.0), (d.inflow[n], -1.0)],
                    Sense::Eq,
                    0.0,
                );
            }
        }
        (JunctionKind::Merge, &[main, ramp], &[down]) => {
            let (m, d) = (get(main)?, get(down)?);
            let r = ramps.get(&ramp).ok_or(NetworkError::MissingVariables { junction: jid, id: ramp })?;
            let main_cap = lp.variable(m.outflow[0]).upper;
            for n in 0..m.steps() {
                lp.add_constraint(
                    format!("j{jid}.flow[{n}]"),
                    &[(m.outflow[n], 1.0), (r.flow[n], 1.0), (d.inflow[n], -1.0)],
                    Sense::Eq,
                    0.0,
                );
                let available = r.initial_queue + r.demand * step * (n + 1) as f64;
                let cum: Vec<(VarId, f64)> = r.flow[..=n].iter().map(|&f| (f, step)).collect();
                lp.add_constraint(format!("j{jid}.ramp_queue[{n}]"), &cum, Sense::Le, available);
                // limited = 0: cumulative ramp flow reaches everything available.
                let mut served = cum.clone();
                served.push((r.supply_limited[n], available));
                lp.add_constraint(format!("j{jid}.ramp_served[{n}]"), &served, Sense::Ge, available);
                // limited = 1: the mainline gets nothing.
                lp.add_constraint(
                    format!("j{jid}.ramp_first[{n}]"),
                    &[(m.outflow[n], 1.0), (r.supply_limited[n], main_cap)],
                    Sense::Le,
                    main_cap,
                );
            }
        }
        (kind, _, _) => return Err(NetworkError::Topology { junction: jid, kind }),
    }
    Ok(lp.num_constraints() - before)
}
