//! Choosing which human interventions to make: a 0/1 knapsack over operator
//! time with trigger gating and mandatory reliability coverage.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use super::{HitlError, Phase};
use crate::agents::{AgentKind, AgentSpec};

/// Two objective values closer than this are treated as equal.
pub const Z_EPS: f64 = 1e-9;

/// Above this many triggered candidates the solver switches from exhaustive
/// enumeration to branch and bound.
pub const EXHAUSTIVE_LIMIT: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionCandidate {
    pub index: usize,
    pub agent: AgentKind,
    pub phase: Phase,
    /// Predicted benefit S.
    pub benefit: f64,
    /// Human time cost t in seconds.
    pub time_cost: f64,
    pub triggered: bool,
    /// Reliability of the agent once this guidance is given.
    pub reliability_after: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Feasibility {
    Feasible,
    Infeasible { uncovered: Vec<AgentKind> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionPlan {
    pub selected: Vec<usize>,
    pub objective: f64,
    pub time_used: f64,
    pub feasibility: Feasibility,
}

impl InterventionPlan {
    pub fn is_feasible(&self) -> bool {
        self.feasibility == Feasibility::Feasible
    }

    pub fn includes(&self, candidates: &[InterventionCandidate], agent: AgentKind, phase: Phase) -> bool {
        self.selected
            .iter()
            .any(|&i| candidates[i].agent == agent && candidates[i].phase == phase)
    }
}

/// Precomputed instance: which mandatory agents each candidate covers.
struct Instance<'a> {
    cands: &'a [InterventionCandidate],
    budget: f64,
    mandatory: Vec<AgentKind>,
    /// Bitmask over `mandatory` for each candidate.
    covers: Vec<u32>,
}

impl<'a> Instance<'a> {
    fn new(cands: &'a [InterventionCandidate], budget: f64, agents: &[AgentSpec]) -> Result<Self, HitlError> {
        if !(budget >= 0.0) || !budget.is_finite() {
            return Err(HitlError::InvalidInstance(format!("budget must be a finite value >= 0, got {budget}")));
        }
        for (pos, c) in cands.iter().enumerate() {
            if c.index != pos {
                return Err(HitlError::InvalidInstance(format!("candidate at position {pos} has index {}", c.index)));
            }
            if !(c.benefit >= 0.0) || !c.benefit.is_finite() {
                return Err(HitlError::InvalidInstance(format!("candidate {pos}: benefit must be >= 0")));
            }
            if !(c.time_cost > 0.0) || !c.time_cost.is_finite() {
                return Err(HitlError::InvalidInstance(format!("candidate {pos}: time cost must be > 0")));
            }
            if !(0.0..=1.0).contains(&c.reliability_after) {
                return Err(HitlError::InvalidInstance(format!("candidate {pos}: reliability must be in [0,1]")));
            }
        }
        let mut mandatory: Vec<(AgentKind, f64)> = Vec::new();
        for a in agents {
            if a.reliability < a.risk_threshold && !mandatory.iter().any(|m| m.0 == a.kind) {
                mandatory.push((a.kind, a.risk_threshold));
            }
        }
        if mandatory.len() > 32 {
            return Err(HitlError::InvalidInstance("too many agents".into()));
        }
        let covers = cands
            .iter()
            .map(|c| {
                mandatory
                    .iter()
                    .enumerate()
                    .filter(|(_, (k, r))| c.triggered && c.agent == *k && c.reliability_after >= *r)
                    .fold(0u32, |m, (bit, _)| m | (1 << bit))
            })
            .collect();
        Ok(Self {
            cands,
            budget,
            mandatory: mandatory.into_iter().map(|m| m.0).collect(),
            covers,
        })
    }

    fn plan(&self, selected: Vec<usize>) -> InterventionPlan {
        let objective = selected.iter().map(|&i| self.cands[i].benefit).sum();
        let time_used = selected.iter().map(|&i| self.cands[i].time_cost).sum();
        let covered = selected.iter().fold(0u32, |m, &i| m | self.covers[i]);
        let uncovered: Vec<AgentKind> = self
            .mandatory
            .iter()
            .enumerate()
            .filter(|(bit, _)| covered & (1 << bit) == 0)
            .map(|(_, k)| *k)
            .collect();
        InterventionPlan {
            selected,
            objective,
            time_used,
            feasibility: if uncovered.is_empty() {
                Feasibility::Feasible
            } else {
                Feasibility::Infeasible { uncovered }
            },
        }
    }
}

/// Candidate solution key: more coverage, then larger Z, then the
/// lexicographically smallest sorted index set.
#[derive(Debug, Clone)]
struct Best {
    covered: u32,
    z: f64,
    set: Vec<usize>,
}

fn better(covered: u32, z: f64, set: &[usize], best: &Best) -> bool {
    match covered.cmp(&best.covered) {
        Ordering::Greater => return true,
        Ordering::Less => return false,
        Ordering::Equal => {}
    }
    if z > best.z + Z_EPS {
        return true;
    }
    if z < best.z - Z_EPS {
        return false;
    }
    set < best.set.as_slice()
}

fn exhaustive(inst: &Instance<'_>, items: &[usize]) -> Vec<usize> {
    let mut best = Best {
        covered: 0,
        z: 0.0,
        set: Vec::new(),
    };
    for mask in 0u64..(1u64 << items.len()) {
        let set: Vec<usize> = items
            .iter()
            .enumerate()
            .filter(|(bit, _)| mask & (1 << bit) != 0)
            .map(|(_, &i)| i)
            .collect();
        let time: f64 = set.iter().map(|&i| inst.cands[i].time_cost).sum();
        if time > inst.budget {
            continue;
        }
        let covered = set.iter().fold(0u32, |m, &i| m | inst.covers[i]).count_ones();
        let z: f64 = set.iter().map(|&i| inst.cands[i].benefit).sum();
        if better(covered, z, &set, &best) {
            best = Best { covered, z, set };
        }
    }
    best.set
}

struct Search<'a, 'b> {
    inst: &'b Instance<'a>,
    items: Vec<usize>,
    best: Best,
    chosen: Vec<usize>,
}

impl Search<'_, '_> {
    fn z_bound(&self, depth: usize, capacity: f64) -> f64 {
        let mut rest: Vec<usize> = self.items[depth..].to_vec();
        rest.sort_by(|&a, &b| {
            let ra = self.inst.cands[a].benefit / self.inst.cands[a].time_cost;
            let rb = self.inst.cands[b].benefit / self.inst.cands[b].time_cost;
            rb.total_cmp(&ra)
        });
        let mut cap = capacity;
        let mut bound = 0.0;
        for i in rest {
            let c = &self.inst.cands[i];
            if c.time_cost <= cap {
                cap -= c.time_cost;
                bound += c.benefit;
            } else {
                bound += c.benefit * cap / c.time_cost;
                break;
            }
        }
        bound
    }

    fn cover_bound(&self, depth: usize, capacity: f64, mask: u32) -> u32 {
        let reachable = self.items[depth..]
            .iter()
            .filter(|&&i| self.inst.cands[i].time_cost <= capacity)
            .fold(mask, |m, &i| m | self.inst.covers[i]);
        reachable.count_ones()
    }

    fn visit(&mut self, depth: usize, used: f64, z: f64, mask: u32) {
        let capacity = self.inst.budget - used;
        let cover_ub = self.cover_bound(depth, capacity, mask);
        if cover_ub < self.best.covered {
            return;
        }
        if cover_ub == self.best.covered && z + self.z_bound(depth, capacity) < self.best.z - 1e-7 {
            return;
        }
        if depth == self.items.len() {
            let mut set = self.chosen.clone();
            set.sort_unstable();
            let exact_z: f64 = set.iter().map(|&i| self.inst.cands[i].benefit).sum();
            if better(mask.count_ones(), exact_z, &set, &self.best) {
                self.best = Best {
                    covered: mask.count_ones(),
                    z: exact_z,
                    set,
                };
            }
            return;
        }
        let item = self.items[depth];
        let c = &self.inst.cands[item];
        if used + c.time_cost <= self.inst.budget {
            self.chosen.push(item);
            self.visit(depth + 1, used + c.time_cost, z + c.benefit, mask | self.inst.covers[item]);
            self.chosen.pop();
        }
        self.visit(depth + 1, used, z, mask);
    }
}

fn branch_and_bound(inst: &Instance<'_>, items: &[usize]) -> Vec<usize> {
    let mut search = Search {
        inst,
        items: items.to_vec(),
        best: Best {
            covered: 0,
            z: 0.0,
            set: Vec::new(),
        },
        chosen: Vec::new(),
    };
    search.visit(0, 0.0, 0.0, 0);
    search.best.set
}

fn triggered_items(cands: &[InterventionCandidate]) -> Vec<usize> {
    cands.iter().filter(|c| c.triggered).map(|c| c.index).collect()
}

/// Solves the intervention program exactly. Coverage of agents whose
/// reliability is below their risk threshold is mandatory; when it cannot be
/// met within `budget` the best partial plan is returned marked infeasible.
pub fn select_interventions(
    candidates: &[InterventionCandidate],
    budget: f64,
    agents: &[AgentSpec],
) -> Result<InterventionPlan, HitlError> {
    let inst = Instance::new(candidates, budget, agents)?;
    let items = triggered_items(candidates);
    let selected = if items.len() <= EXHAUSTIVE_LIMIT {
        exhaustive(&inst, &items)
    } else {
        branch_and_bound(&inst, &items)
    };
    Ok(inst.plan(selected))
}

/// The branch-and-bound solver on its own, regardless of instance size.
pub fn select_interventions_bnb(
    candidates: &[InterventionCandidate],
    budget: f64,
    agents: &[AgentSpec],
) -> Result<InterventionPlan, HitlError> {
    let inst = Instance::new(candidates, budget, agents)?;
    let items = triggered_items(candidates);
    Ok(inst.plan(branch_and_bound(&inst, &items)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cand(index: usize, agent: AgentKind, s: f64, t: f64) -> InterventionCandidate {
        InterventionCandidate {
            index,
            agent,
            phase: Phase::PreInference,
            benefit: s,
            time_cost: t,
            triggered: true,
            reliability_after: 0.95,
        }
    }

    fn healthy() -> Vec<AgentSpec> {
        AgentKind::ALL.iter().map(|&k| AgentSpec::default_for(k)).collect()
    }

    #[test]
    fn nothing_triggered_gives_empty_plan() {
        let mut c = vec![cand(0, AgentKind::Coach, 5.0, 1.0)];
        c[0].triggered = false;
        let plan = select_interventions(&c, 10.0, &healthy()).unwrap();
        assert!(plan.selected.is_empty());
        assert_eq!(plan.objective, 0.0);
        assert!(plan.is_feasible());
    }

    #[test]
    fn three_item_example() {
        let c = vec![
            cand(0, AgentKind::Coach, 5.0, 2.0),
            cand(1, AgentKind::Coder, 4.0, 2.0),
            cand(2, AgentKind::Critic, 3.0, 3.0),
        ];
        for plan in [
            select_interventions(&c, 4.0, &healthy()).unwrap(),
            select_interventions_bnb(&c, 4.0, &healthy()).unwrap(),
        ] {
            assert_eq!(plan.selected, vec![0, 1]);
            assert_eq!(plan.objective, 9.0);
            assert_eq!(plan.time_used, 4.0);
        }
    }

    #[test]
    fn unaffordable_mandatory_coverage_is_infeasible() {
        let mut agents = healthy();
        agents[1].reliability = 0.4;
        agents[1].risk_threshold = 0.7;
        let c = vec![cand(0, AgentKind::Coach, 5.0, 2.0), cand(1, AgentKind::Coder, 1.0, 5.0)];
        let plan = select_interventions(&c, 4.0, &agents).unwrap();
        assert_eq!(
            plan.feasibility,
            Feasibility::Infeasible {
                uncovered: vec![AgentKind::Coder]
            }
        );
        let plan = select_interventions(&c, 5.0, &agents).unwrap();
        assert_eq!(plan.selected, vec![1]);
        assert!(plan.is_feasible());
    }

    #[test]
    fn ties_pick_smallest_index_set() {
        let c = vec![
            cand(0, AgentKind::Coach, 2.0, 1.0),
            cand(1, AgentKind::Coder, 2.0, 1.0),
            cand(2, AgentKind::Critic, 2.0, 1.0),
        ];
        let plan = select_interventions(&c, 2.0, &healthy()).unwrap();
        assert_eq!(plan.selected, vec![0, 1]);
        assert_eq!(select_interventions_bnb(&c, 2.0, &healthy()).unwrap().selected, vec![0, 1]);
    }

    #[test]
    fn invalid_instances_are_rejected() {
        assert!(select_interventions(&[], -1.0, &[]).is_err());
        assert!(select_interventions(&[cand(0, AgentKind::Coach, 1.0, 0.0)], 1.0, &[]).is_err());
        assert!(select_interventions(&[cand(3, AgentKind::Coach, 1.0, 1.0)], 1.0, &[]).is_err());
    }
}
