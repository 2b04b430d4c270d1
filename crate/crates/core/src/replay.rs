//! Episode-structured replay with hindsight goal relabeling at sampling time.

use std::collections::VecDeque;
use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::blockworld::{reward_from_positions, Goal, RewardParams};
use crate::error::{ensure, Result};

pub const DEFAULT_CAPACITY: usize = 1_000_000;
pub const DEFAULT_AUGMENT_PROB: f64 = 0.8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub obs: Vec<f64>,
    pub goal: Goal,
    pub action: [f64; 4],
    pub reward: f64,
    pub next_obs: Vec<f64>,
    /// Block positions after the step.
    pub achieved_next: Goal,
    /// Gripper position after the step, needed for the retreat bonus.
    pub next_gripper: [f64; 3],
    pub t: usize,
    pub episode_id: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    transitions: Vec<Transition>,
}

impl Episode {
    pub fn new(transitions: Vec<Transition>) -> Result<Self> {
        ensure!(!transitions.is_empty(), "episode is empty");
        let id = transitions[0].episode_id;
        let n = transitions[0].achieved_next.n_criteria();
        for (i, tr) in transitions.iter().enumerate() {
            ensure!(tr.t == i, "episode timesteps not contiguous at index {i} (t = {})", tr.t);
            ensure!(tr.episode_id == id, "mixed episode ids in one episode");
            ensure!(
                tr.achieved_next.n_criteria() == n && tr.goal.n_criteria() == n,
                "criterion count changes inside episode"
            );
        }
        Ok(Self { transitions })
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn transitions(&self) -> &[Transition] {
        &self.transitions
    }

    pub fn id(&self) -> u64 {
        self.transitions[0].episode_id
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HerMode {
    None,
    /// Whole goal replaced by the outcome of one later timestep.
    Standard,
    /// Each criterion replaced independently, each from its own later timestep.
    MultiCriteria,
}

/// A sampled transition, possibly relabeled.
#[derive(Clone, Debug, PartialEq)]
pub struct Sampled {
    pub transition: Transition,
    /// For each criterion, the episode timestep its replacement came from.
    pub sources: Vec<Option<usize>>,
}

impl Sampled {
    pub fn relabeled(&self) -> bool {
        self.sources.iter().any(Option::is_some)
    }
}

/// Recomputes a transition's reward against `new_goal` from its stored outcome.
pub fn her_reward_recompute(tr: &Transition, new_goal: &Goal, params: &RewardParams) -> f64 {
    reward_from_positions(
        tr.achieved_next.as_slice(),
        &tr.next_gripper,
        new_goal.as_slice(),
        params,
    )
}

#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    episodes: VecDeque<Episode>,
    /// Exclusive end offset of each stored episode in the flat index space.
    ends: Vec<usize>,
    size: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            episodes: VecDeque::new(),
            ends: Vec::new(),
            size: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.size
    }

    pub fn is_empty(&self) -> bool {
        self.size == 0
    }

    pub fn n_episodes(&self) -> usize {
        self.episodes.len()
    }

    pub fn episodes(&self) -> impl Iterator<Item = &Episode> {
        self.episodes.iter()
    }

    pub fn clear(&mut self) {
        self.episodes.clear();
        self.ends.clear();
        self.size = 0;
    }

    pub fn store_episode(&mut self, episode: Episode) -> Result<()> {
        ensure!(
            episode.len() <= self.capacity,
            "episode of {} transitions exceeds buffer capacity {}",
            episode.len(),
            self.capacity
        );
        self.size += episode.len();
        self.episodes.push_back(episode);
        while self.size > self.capacity {
            let old = self.episodes.pop_front().expect("size > 0 implies an episode");
            self.size -= old.len();
        }
        let mut acc = 0;
        self.ends.clear();
        self.ends.extend(self.episodes.iter().map(|e| {
            acc += e.len();
            acc
        }));
        Ok(())
    }

    fn locate(&self, flat: usize) -> (usize, usize) {
        let ep = self.ends.partition_point(|&end| end <= flat);
        let start = if ep == 0 { 0 } else { self.ends[ep - 1] };
        (ep, flat - start)
    }

    /// Draws `batch_size` transitions uniformly and relabels per `mode`.
    ///
    /// With probability `z` a goal (standard) or each criterion
    /// (multi-criteria) is swapped for an outcome from a strictly later
    /// timestep; the reward is then recomputed from the stored outcome.
    pub fn sample_batch<R, F>(
        &self,
        batch_size: usize,
        z: f64,
        mode: HerMode,
        reward_fn: F,
        rng: &mut R,
    ) -> Result<Vec<Sampled>>
    where
        R: Rng + ?Sized,
        F: Fn(&Transition, &Goal) -> f64,
    {
        ensure!(batch_size > 0, "batch_size must be positive");
        ensure!(!self.is_empty(), "cannot sample from an empty buffer");
        ensure!((0.0..=1.0).contains(&z), "augmentation probability {z} outside [0, 1]");
        let mut out = Vec::with_capacity(batch_size);
        for _ in 0..batch_size {
            let (ep, t) = self.locate(rng.random_range(0..self.size));
            let episode = &self.episodes[ep].transitions;
            let mut tr = episode[t].clone();
            let n = tr.goal.n_criteria();
            let mut sources = vec![None; n];
            let last = episode.len() - 1;
            if t < last {
                match mode {
                    HerMode::None => {}
                    HerMode::Standard => {
                        if rng.random_bool(z) {
                            let f = rng.random_range(t + 1..=last);
                            tr.goal = episode[f].achieved_next.clone();
                            sources.fill(Some(f));
                        }
                    }
                    HerMode::MultiCriteria => {
                        for (i, src) in sources.iter_mut().enumerate() {
                            if rng.random_bool(z) {
                                let f = rng.random_range(t + 1..=last);
                                tr.goal.set_criterion(i, episode[f].achieved_next.criterion(i));
                                *src = Some(f);
                            }
                        }
                    }
                }
            }
            if sources.iter().any(Option::is_some) {
                tr.reward = reward_fn(&tr, &tr.goal);
            }
            out.push(Sampled { transition: tr, sources });
        }
        Ok(out)
    }

    /// One JSON object per stored transition.
    pub fn dump_jsonl(&self, mut w: impl Write) -> Result<()> {
        for ep in &self.episodes {
            for tr in &ep.transitions {
                serde_json::to_writer(&mut w, tr)?;
                w.write_all(b"\n")?;
            }
        }
        Ok(())
    }
}

/// Reward closure for [`ReplayBuffer::sample_batch`] backed by the environment reward.
pub fn env_reward(params: RewardParams) -> impl Fn(&Transition, &Goal) -> f64 + Copy {
    move |tr, g| her_reward_recompute(tr, g, &params)
}
