//! Declarative TOML game description.
//!
//! ```toml
//! discount = 0.9
//! states = ["s0", "s1"]
//! initial = [1.0, 0.0]
//! reward_bounds = [0.0, 5.0]
//! # reward_noise = 0.0
//! # joint_cap = 1000000
//!
//! [[agents]]
//! actions = ["C", "D"]
//!
//! [[agents]]
//! actions = ["C", "D"]
//!
//! [[transitions]]
//! state = "s0"
//! joint = ["C", "D"]   # omit to cover every joint action of the state
//! next = [0.0, 1.0]
//!
//! [[rewards]]
//! state = "s0"         # omit for every state
//! joint = ["C", "D"]   # omit for every joint action
//! values = [0.0, 5.0]  # one entry per agent
//! ```
//!
//! Entries apply in file order, later ones overriding earlier ones. Every
//! (state, joint action) pair needs a transition row; unspecified rewards are 0.
//! Probability rows off by at most 1e-9 are re-normalized, larger deviations
//! are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{GameDefinition, MarkovGame, RewardBounds, DEFAULT_JOINT_CAP};
use crate::error::{Error, Result};

const RENORMALIZE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GameConfig {
    pub discount: f64,
    pub states: Vec<String>,
    pub initial: Vec<f64>,
    pub reward_bounds: [f64; 2],
    #[serde(default)]
    pub reward_noise: f64,
    #[serde(default)]
    pub joint_cap: Option<usize>,
    pub agents: Vec<AgentConfig>,
    #[serde(default)]
    pub transitions: Vec<TransitionEntry>,
    #[serde(default)]
    pub rewards: Vec<RewardEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentConfig {
    #[serde(default)]
    pub name: Option<String>,
    pub actions: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransitionEntry {
    pub state: String,
    #[serde(default)]
    pub joint: Option<Vec<String>>,
    pub next: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardEntry {
    #[serde(default)]
    pub state: Option<String>,
    #[serde(default)]
    pub joint: Option<Vec<String>>,
    pub values: Vec<f64>,
}

pub fn load_game_config(path: &Path) -> Result<MarkovGame> {
    let text = std::fs::read_to_string(path)?;
    parse_game_config(&text)
}

pub fn parse_game_config(text: &str) -> Result<MarkovGame> {
    let cfg: GameConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    cfg.build()
}

fn renormalize(row: &[f64], what: &str) -> Result<Vec<f64>> {
    if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(Error::Config(format!("{what}: probabilities must be nonnegative")));
    }
    let sum: f64 = row.iter().sum();
    if (sum - 1.0).abs() > RENORMALIZE_TOL {
        return Err(Error::Config(format!("{what}: probabilities sum to {sum}")));
    }
    Ok(row.iter().map(|p| p / sum).collect())
}

impl GameConfig {
    pub fn build(&self) -> Result<MarkovGame> {
        let ns = self.states.len();
        let n_agents = self.agents.len();
        if ns == 0 || n_agents == 0 {
            return Err(Error::Config("need at least one state and one agent".into()));
        }
        let sizes: Vec<usize> = self.agents.iter().map(|a| a.actions.len()).collect();
        let cap = self.joint_cap.unwrap_or(DEFAULT_JOINT_CAP);
        let space = super::JointActionSpace::new(&sizes, cap)?;
        let nj = space.count();

        let state_index = |label: &str| -> Result<usize> {
            self.states
                .iter()
                .position(|s| s == label)
                .ok_or_else(|| Error::Config(format!("unknown state {label:?}")))
        };
        let joint_indices = |joint: &Option<Vec<String>>| -> Result<Vec<usize>> {
            match joint {
                None => Ok((0..nj).collect()),
                Some(labels) => {
                    if labels.len() != n_agents {
                        return Err(Error::Config(format!(
                            "joint action {labels:?} must name one action per agent"
                        )));
                    }
                    let actions = labels
                        .iter()
                        .zip(&self.agents)
                        .map(|(l, agent)| {
                            agent
                                .actions
                                .iter()
                                .position(|a| a == l)
                                .ok_or_else(|| Error::Config(format!("unknown action {l:?}")))
                        })
                        .collect::<Result<Vec<_>>>()?;
                    Ok(vec![space.encode(&actions)])
                }
            }
        };

        let mut transitions: Vec<Vec<Option<Vec<f64>>>> = vec![vec![None; nj]; ns];
        for entry in &self.transitions {
            let s = state_index(&entry.state)?;
            if entry.next.len() != ns {
                return Err(Error::Config(format!(
                    "transition from {:?}: expected {ns} probabilities",
                    entry.state
                )));
            }
            let row = renormalize(&entry.next, &format!("transition from {:?}", entry.state))?;
            for a in joint_indices(&entry.joint)? {
                transitions[s][a] = Some(row.clone());
            }
        }
        let transitions = transitions
            .into_iter()
            .enumerate()
            .map(|(s, rows)| {
                rows.into_iter()
                    .enumerate()
                    .map(|(a, row)| {
                        row.ok_or_else(|| {
                            Error::Config(format!(
                                "no transition for state {:?}, joint action {:?}",
                                self.states[s],
                                space.decode(a)
                            ))
                        })
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;

        let mut rewards = vec![vec![vec![0.0; nj]; ns]; n_agents];
        for entry in &self.rewards {
            if entry.values.len() != n_agents {
                return Err(Error::Config(format!(
                    "reward entry {:?} needs {n_agents} values",
                    entry.values
                )));
            }
            let states: Vec<usize> = match &entry.state {
                Some(label) => vec![state_index(label)?],
                None => (0..ns).collect(),
            };
            let joints = joint_indices(&entry.joint)?;
            for &s in &states {
                for &a in &joints {
                    for (i, v) in entry.values.iter().enumerate() {
                        rewards[i][s][a] = *v;
                    }
                }
            }
        }

        if self.initial.len() != ns {
            return Err(Error::Config(format!("initial distribution needs {ns} entries")));
        }
        let initial = renormalize(&self.initial, "initial distribution")?;

        MarkovGame::new(GameDefinition {
            state_labels: self.states.clone(),
            action_labels: self.agents.iter().map(|a| a.actions.clone()).collect(),
            transitions,
            rewards,
            reward_bounds: RewardBounds {
                min: self.reward_bounds[0],
                max: self.reward_bounds[1],
            },
            discount: self.discount,
            initial,
            reward_noise: self.reward_noise,
            joint_cap: cap,
        })
        .map_err(|e| match e {
            Error::InvalidGame(msg) => Error::Config(msg),
            other => other,
        })
    }

    /// Config describing an existing game, with every entry explicit.
    pub fn from_game(game: &MarkovGame) -> Self {
        let nj = game.n_joint();
        let space = game.joint();
        let joint_labels = |a: usize| -> Vec<String> {
            space
                .decode(a)
                .iter()
                .enumerate()
                .map(|(i, &ai)| game.action_labels(i)[ai].clone())
                .collect()
        };
        let mut transitions = Vec::new();
        let mut rewards = Vec::new();
        for s in 0..game.n_states() {
            for a in 0..nj {
                transitions.push(TransitionEntry {
                    state: game.state_labels()[s].clone(),
                    joint: Some(joint_labels(a)),
                    next: game.dense_transition(s, a),
                });
                rewards.push(RewardEntry {
                    state: Some(game.state_labels()[s].clone()),
                    joint: Some(joint_labels(a)),
                    values: (0..game.n_agents()).map(|i| game.reward(i, s, a)).collect(),
                });
            }
        }
        let b = game.reward_bounds();
        Self {
            discount: game.discount(),
            states: game.state_labels().to_vec(),
            initial: game.initial().to_vec(),
            reward_bounds: [b.min, b.max],
            reward_noise: game.reward_noise(),
            joint_cap: None,
            agents: (0..game.n_agents())
                .map(|i| AgentConfig {
                    name: None,
                    actions: game.action_labels(i).to_vec(),
                })
                .collect(),
            transitions,
            rewards,
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const PD: &str = r#"
discount = 0.0
states = ["s0"]
initial = [1.0]
reward_bounds = [0.0, 5.0]

[[agents]]
actions = ["C", "D"]

[[agents]]
actions = ["C", "D"]

[[transitions]]
state = "s0"
next = [1.0]

[[rewards]]
joint = ["C", "C"]
values = [3.0, 3.0]

[[rewards]]
joint = ["C", "D"]
values = [0.0, 5.0]

[[rewards]]
joint = ["D", "C"]
values = [5.0, 0.0]

[[rewards]]
joint = ["D", "D"]
values = [1.0, 1.0]
"#;

    #[test]
    fn parses_prisoners_dilemma() {
        let g = parse_game_config(PD).unwrap();
        assert_eq!(g.n_agents(), 2);
        assert_eq!(g.n_joint(), 4);
        assert_eq!(g.reward(0, 0, g.joint().encode(&[1, 0])), 5.0);
        assert_eq!(g.reward(1, 0, g.joint().encode(&[1, 0])), 0.0);
    }

    #[test]
    fn renormalizes_tiny_deviation_only() {
        let ok = PD.replace("initial = [1.0]", "initial = [1.0000000001]");
        assert!(parse_game_config(&ok).is_ok());
        let bad = PD.replace("initial = [1.0]", "initial = [1.00001]");
        assert!(matches!(parse_game_config(&bad), Err(Error::Config(_))));
    }

    #[test]
    fn missing_transition_is_an_error() {
        let text = PD.replace("[[transitions]]\nstate = \"s0\"\nnext = [1.0]\n", "");
        assert!(matches!(parse_game_config(&text), Err(Error::Config(_))));
    }

    #[test]
    fn unknown_action_label_is_an_error() {
        let text = PD.replace("joint = [\"D\", \"D\"]", "joint = [\"D\", \"X\"]");
        assert!(parse_game_config(&text).is_err());
    }

    #[test]
    fn round_trips_through_explicit_config() {
        let g = parse_game_config(PD).unwrap();
        let text = GameConfig::from_game(&g).to_toml().unwrap();
        assert_eq!(parse_game_config(&text).unwrap(), g);
    }
}
