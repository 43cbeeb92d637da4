use std::fs::File;
use std::path::Path;

use anyhow::Context;
use qre_core::game::load_game_config;
use qre_core::metrics::ReferenceDistribution;
use qre_core::scenarios::{build_scenario, builtin_game, load_scenario_spec, perturb_rewards, ScenarioKind, ScenarioSpec};
use qre_core::{MarkovGame, Rationality};

use crate::args::GameSource;
use crate::output::{config_err, core_err, Failure};

/// A game ready to solve, with the λ it should be solved at by default.
pub struct Resolved {
    pub game: MarkovGame,
    pub default_rationality: Option<Rationality>,
    /// Reference measure for the monotonicity residual.
    pub reference: ReferenceDistribution,
}

pub fn load_game(name: &str) -> Result<MarkovGame, Failure> {
    if let Some(g) = builtin_game(name) {
        return Ok(g);
    }
    let path = Path::new(name);
    if !path.exists() {
        return Err(config_err(anyhow::anyhow!("`{name}` is neither a built-in game nor an existing file")));
    }
    load_game_config(path).map_err(core_err)
}

pub fn load_scenario(name: &str) -> Result<ScenarioSpec, Failure> {
    match name {
        "merge" => Ok(ScenarioSpec::new(ScenarioKind::Merge)),
        "intersection" => Ok(ScenarioSpec::new(ScenarioKind::Intersection)),
        path => {
            if !Path::new(path).exists() {
                return Err(config_err(anyhow::anyhow!("scenario file `{path}` not found")));
            }
            load_scenario_spec(Path::new(path)).map_err(core_err)
        }
    }
}

pub fn resolve(source: &GameSource, seed: u64) -> Result<Resolved, Failure> {
    let mut resolved = match (&source.game, &source.scenario) {
        (Some(g), None) => Resolved {
            game: load_game(g)?,
            default_rationality: None,
            reference: ReferenceDistribution::Visitation,
        },
        (None, Some(s)) => {
            let sc = build_scenario(&load_scenario(s)?).map_err(core_err)?;
            Resolved {
                game: sc.game,
                default_rationality: Some(sc.rationality),
                reference: ReferenceDistribution::Uniform,
            }
        }
        _ => return Err(config_err(anyhow::anyhow!("pass exactly one of --game or --scenario"))),
    };
    if let Some(sigma) = source.sigma_perturb {
        resolved.game = perturb_rewards(&resolved.game, sigma, seed).map_err(core_err)?;
    }
    Ok(resolved)
}

/// One value applies to every agent; otherwise one value per agent.
pub fn rationality(values: &[f64], n_agents: usize) -> Result<Rationality, Failure> {
    let lambdas = match values {
        [l] => vec![*l; n_agents],
        ls if ls.len() == n_agents => ls.to_vec(),
        ls => return Err(config_err(anyhow::anyhow!("{} λ values for {n_agents} agents", ls.len()))),
    };
    Rationality::per_agent(lambdas).map_err(core_err)
}

pub fn open(path: &Path) -> Result<File, Failure> {
    File::open(path)
        .with_context(|| format!("opening {}", path.display()))
        .map_err(Failure::Io)
}
