//! Gradient verification of every training loss against central finite
//! differences, network by network.

use crate::augment::{augment, AugKind};
use crate::envsim::{DomainSpec, Transition};
use crate::losses::{
    self, forward_cycle_loss, reverse_cycle_loss, reverse_decodes, svea_loss, usra_loss, LossError, LossWeights, PairBatch,
    ReverseDecodes, TargetRule, UsraBatch,
};
use crate::models::{ModelBundle, ModelError, QInput};
use crate::numcore::gradcheck::{grad_check, GradCheckConfig};
use crate::numcore::{Graph, NumError, ParamSet, Var};
use crate::trainer::collect_random;

pub const NETWORKS: [&str; 4] = ["encoder", "projection", "decoder", "q_head"];
pub const PROBES_PER_NETWORK: usize = 64;
pub const TOLERANCE: f64 = 1e-3;

/// Setting this variable to `1` adds a bias to every analytic gradient.
pub const FAULT_ENV: &str = "USRA_GRADCHECK_FAULT";

#[derive(Clone, Debug)]
pub struct LossCheck {
    pub network: &'static str,
    pub loss: &'static str,
    pub probes: usize,
    pub max_rel_err: f64,
    pub pass: bool,
}

/// Worst result per network across all losses that reach it.
#[derive(Clone, Debug)]
pub struct NetworkSummary {
    pub network: &'static str,
    pub probes: usize,
    pub max_rel_err: f64,
    pub pass: bool,
}

pub fn fault_from_env() -> f64 {
    match std::env::var(FAULT_ENV) {
        Ok(v) if v == "1" => 0.05,
        _ => 0.0,
    }
}

fn with_set(b: &ModelBundle, which: usize, params: &ParamSet) -> ModelBundle {
    let mut local = b.clone();
    match which {
        0 => local.encoder = params.clone(),
        1 => local.projection = params.clone(),
        2 => local.decoder = params.clone(),
        _ => local.q_head = params.clone(),
    }
    local
}

fn to_num(e: LossError) -> NumError {
    match e {
        LossError::Model(ModelError::Num(n)) => n,
        // the fixture batches are non-empty and the weights valid
        other => unreachable!("gradient fixture rejected: {other}"),
    }
}

struct Fixture {
    bundle: ModelBundle,
    transitions: Vec<Transition>,
    forward: PairBatch,
    reverse: ReverseDecodes,
    targets: Vec<f32>,
}

impl Fixture {
    fn new() -> Result<Self, LossError> {
        let bundle = ModelBundle::new(13, QInput::Latent);
        let data = collect_random(&DomainSpec::train(), 8, 200, 21);
        let obs = |i: usize| data.transitions[i].obs.clone();
        let forward = PairBatch {
            first: vec![obs(0), obs(2)],
            second: vec![obs(1), obs(3)],
        };
        let reverse_pairs = PairBatch {
            first: vec![obs(4), obs(5)],
            second: vec![augment(AugKind::RandConv, &obs(4), 1), augment(AugKind::RandConv, &obs(5), 2)],
        };
        let reverse = reverse_decodes(&bundle, &reverse_pairs, 5)?;
        let transitions: Vec<Transition> = data.transitions[5..8].to_vec();
        let refs: Vec<&Transition> = transitions.iter().collect();
        let targets = losses::td_target(&bundle, &refs, 0.99, TargetRule::Max)?;
        Ok(Self {
            bundle,
            transitions,
            forward,
            reverse,
            targets,
        })
    }

    fn loss(&self, name: &str, g: &mut Graph<f64>, b: &ModelBundle) -> Result<Var, LossError> {
        let refs: Vec<&Transition> = self.transitions.iter().collect();
        match name {
            "forward_cycle" => forward_cycle_loss(g, b, &self.forward, 1e-3, 5),
            "reverse_cycle" => reverse_cycle_loss(g, b, &self.reverse),
            "svea" => svea_loss(g, b, &refs, &self.targets, Some(AugKind::RandConv), 2),
            _ => {
                let batch = UsraBatch {
                    forward_pairs: &self.forward,
                    reverse: &self.reverse,
                    transitions: &refs,
                    targets: &self.targets,
                    aug: Some(AugKind::RandConv),
                };
                Ok(usra_loss(g, b, &batch, &LossWeights::default(), 3)?.0)
            }
        }
    }
}

/// Runs every (loss, network) pair the loss depends on. The reverse cycle
/// reads fixed decodes, so it does not reach the decoder.
pub fn gradient_suite(fault: f64) -> Result<Vec<LossCheck>, LossError> {
    let fx = Fixture::new()?;
    let cfg = GradCheckConfig {
        n_probes: PROBES_PER_NETWORK,
        tol: TOLERANCE,
        fault,
        ..GradCheckConfig::default()
    };
    let plan: [(&'static str, &[usize]); 4] = [
        ("forward_cycle", &[0, 1, 2]),
        ("reverse_cycle", &[0, 1]),
        ("svea", &[0, 3]),
        ("total", &[0, 1, 2, 3]),
    ];
    let mut out = Vec::new();
    for (loss, nets) in plan {
        for &which in nets {
            let set = fx.bundle.online_sets()[which].clone();
            let rep = grad_check(
                &set,
                |g, params| fx.loss(loss, g, &with_set(&fx.bundle, which, params)).map_err(to_num),
                &cfg,
            )?;
            out.push(LossCheck {
                network: NETWORKS[which],
                loss,
                probes: rep.probes,
                max_rel_err: rep.max_rel_err,
                pass: rep.pass,
            });
        }
    }
    Ok(out)
}

pub fn summarize(checks: &[LossCheck]) -> Vec<NetworkSummary> {
    NETWORKS
        .iter()
        .filter_map(|&network| {
            let mine: Vec<&LossCheck> = checks.iter().filter(|c| c.network == network).collect();
            (!mine.is_empty()).then(|| NetworkSummary {
                network,
                probes: mine.iter().map(|c| c.probes).min().unwrap_or(0),
                max_rel_err: mine.iter().map(|c| c.max_rel_err).fold(0.0, f64::max),
                pass: mine.iter().all(|c| c.pass),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_covers_four_networks_and_detects_faults() {
        let checks = gradient_suite(0.0).unwrap();
        let summary = summarize(&checks);
        assert_eq!(summary.len(), 4);
        for s in &summary {
            assert!(s.pass, "{}: {}", s.network, s.max_rel_err);
            assert!(s.probes >= PROBES_PER_NETWORK);
        }
        let faulty = gradient_suite(0.05).unwrap();
        assert!(summarize(&faulty).iter().any(|s| !s.pass));
    }
}
