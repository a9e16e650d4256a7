//! Goal predicates an episode is judged against.

use serde::{Deserialize, Serialize};

use crate::sim::{Episode, Placement};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Goal {
    /// The target has appeared in view at least once.
    Find { target: String },
    /// The target is in hand.
    Grasp { target: String },
    /// The target is switched on.
    Toggle { target: String },
    /// The item rests in `destination` and every container in `close` is shut.
    Transfer {
        item: String,
        destination: String,
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        close: Vec<String>,
    },
}

impl Goal {
    /// Object the goal is about (the item for transfers).
    pub fn subject(&self) -> &str {
        match self {
            Goal::Find { target } | Goal::Grasp { target } | Goal::Toggle { target } => target,
            Goal::Transfer { item, .. } => item,
        }
    }

    pub fn holds(&self, ep: &Episode<'_>) -> bool {
        let scene = ep.scene();
        let idx = |id: &str| scene.index_of(id);
        match self {
            Goal::Find { target } => ep.agent().revealed_items.contains(target),
            Goal::Grasp { target } => ep.agent().held.as_deref() == Some(target.as_str()),
            Goal::Toggle { target } => idx(target).is_some_and(|i| ep.world().states[i].toggled_on),
            Goal::Transfer { item, destination, close } => {
                let (Some(i), Some(d)) = (idx(item), idx(destination)) else {
                    return false;
                };
                ep.world().placement[i] == Placement::In(d)
                    && close.iter().all(|c| idx(c).is_some_and(|ci| !ep.world().states[ci].open))
            }
        }
    }
}

/// Tracks when each goal last became true over an episode.
#[derive(Debug, Clone)]
pub struct GoalTracker {
    goals: Vec<Goal>,
    held: Vec<bool>,
    since: Vec<Option<u32>>,
}

impl GoalTracker {
    pub fn new(goals: &[Goal], ep: &Episode<'_>) -> Self {
        let held: Vec<bool> = goals.iter().map(|g| g.holds(ep)).collect();
        let since = held.iter().map(|&h| h.then_some(0)).collect();
        GoalTracker { goals: goals.to_vec(), held, since }
    }

    /// Re-evaluate after a step; returns indices of goals that just became true.
    pub fn update(&mut self, ep: &Episode<'_>) -> Vec<usize> {
        let step = ep.agent().step_count;
        let mut fresh = Vec::new();
        for (k, g) in self.goals.iter().enumerate() {
            let now = g.holds(ep);
            if now && !self.held[k] {
                self.since[k] = Some(step);
                fresh.push(k);
            }
            if !now {
                self.since[k] = None;
            }
            self.held[k] = now;
        }
        fresh
    }

    pub fn holding(&self) -> &[bool] {
        &self.held
    }

    pub fn completed(&self) -> usize {
        self.held.iter().filter(|&&h| h).count()
    }

    /// Every goal holds and they were reached in the listed order.
    pub fn satisfied(&self) -> bool {
        if !self.held.iter().all(|&h| h) {
            return false;
        }
        let times: Vec<u32> = self.since.iter().map(|t| t.unwrap_or(0)).collect();
        times.windows(2).all(|w| w[0] <= w[1])
    }
}
