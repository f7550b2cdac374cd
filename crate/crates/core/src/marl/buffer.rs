use super::nn::ACTION_DIM;

/// One agent's record of one episode.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AgentEpisode {
    pub obs: Vec<Vec<f64>>,
    /// Pre-squash action samples.
    pub u: Vec<[f64; ACTION_DIM]>,
    pub logp: Vec<f64>,
    /// Scaled rewards.
    pub rewards: Vec<f64>,
    pub values: Vec<f64>,
    pub dones: Vec<bool>,
}

impl AgentEpisode {
    pub fn len(&self) -> usize {
        self.obs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.obs.is_empty()
    }

    fn consistent(&self) -> bool {
        let n = self.obs.len();
        [self.u.len(), self.logp.len(), self.rewards.len(), self.values.len(), self.dones.len()]
            .iter()
            .all(|&l| l == n)
    }
}

/// Per-agent rollout storage plus the joint observations the critics use.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutBuffer {
    /// `agents[i][e]` is agent `i` in buffered episode `e`.
    pub agents: Vec<Vec<AgentEpisode>>,
    /// `joint[e][t]` is the concatenation of every agent's features.
    pub joint: Vec<Vec<Vec<f64>>>,
    pub capacity_episodes: usize,
}

impl RolloutBuffer {
    pub fn new(n_agents: usize, capacity_episodes: usize) -> Self {
        RolloutBuffer {
            agents: vec![Vec::new(); n_agents],
            joint: Vec::new(),
            capacity_episodes,
        }
    }

    pub fn episodes(&self) -> usize {
        self.joint.len()
    }

    pub fn is_full(&self) -> bool {
        self.episodes() >= self.capacity_episodes
    }

    pub fn is_empty(&self) -> bool {
        self.joint.is_empty()
    }

    pub fn push(&mut self, per_agent: Vec<AgentEpisode>, joint: Vec<Vec<f64>>) {
        assert_eq!(per_agent.len(), self.agents.len(), "one episode per agent");
        for ep in &per_agent {
            assert!(ep.consistent() && ep.len() == joint.len(), "ragged episode record");
        }
        for (slot, ep) in self.agents.iter_mut().zip(per_agent) {
            slot.push(ep);
        }
        self.joint.push(joint);
    }

    pub fn clear(&mut self) {
        for a in &mut self.agents {
            a.clear();
        }
        self.joint.clear();
    }
}
