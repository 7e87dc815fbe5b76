//! Experts, routers and the MoE placements, assembled into separate actor
//! and critic towers.

mod init;
mod network;
mod routing;

pub use init::orthogonal;
pub use network::{build_actor_critic, ActorCritic, LayerRouting, Tower, TowerOutput};
pub use routing::{
    augment_router_input, router_entropy, softmoe_forward, topk_select, GradSwitch, RouteCtx,
    SoftMoeOutput,
};

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Hidden layers per tower.
pub const HIDDEN_LAYERS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Architecture {
    Baseline,
    /// MoE replaces the second hidden layer.
    Middle,
    /// MoE replaces the third hidden layer.
    Final,
    /// MoE at every hidden layer.
    All,
    /// One MoE whose experts are whole 3-layer trunks.
    Big,
}

impl Architecture {
    pub fn moe_layers(self) -> usize {
        match self {
            Architecture::Baseline => 0,
            Architecture::All => HIDDEN_LAYERS,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RouterKind {
    SoftMoE,
    TopK,
    Hardcoded,
    /// SoftMoE whose router also sees the latest gradient similarity.
    SoftGradientMoE,
    /// Hard routing that moves to the next expert when gradient similarity
    /// drops below a threshold.
    GradThresholdSwitch,
}

impl RouterKind {
    pub fn is_soft(self) -> bool {
        matches!(self, RouterKind::SoftMoE | RouterKind::SoftGradientMoE)
    }

    pub fn has_params(self) -> bool {
        matches!(self, RouterKind::SoftMoE | RouterKind::SoftGradientMoE | RouterKind::TopK)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RouterSpec {
    pub kind: RouterKind,
    /// Experts selected per token by hard routers; only 1 is supported.
    #[serde(default = "one")]
    pub k: usize,
    /// Append a one-hot task id to the router input.
    #[serde(default)]
    pub task_id_input: bool,
    /// Append the latest gradient similarity to the router input.
    #[serde(default)]
    pub grad_sim_input: bool,
    /// Weight of this layer's routing entropy bonus.
    #[serde(default)]
    pub entropy_coef: f64,
}

fn one() -> usize {
    1
}

impl RouterSpec {
    pub fn new(kind: RouterKind) -> Self {
        Self {
            kind,
            k: 1,
            task_id_input: false,
            grad_sim_input: kind == RouterKind::SoftGradientMoE,
            entropy_coef: 0.0,
        }
    }

    pub fn with_task_id(mut self) -> Self {
        self.task_id_input = true;
        self
    }

    pub fn with_entropy(mut self, coef: f64) -> Self {
        self.entropy_coef = coef;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.k != 1 {
            return Err(Error::config(format!("router k must be 1, got {}", self.k)));
        }
        if !self.entropy_coef.is_finite() || self.entropy_coef < 0.0 {
            return Err(Error::config(format!("entropy_coef must be >= 0, got {}", self.entropy_coef)));
        }
        let learned = self.kind.has_params();
        if !learned && (self.task_id_input || self.grad_sim_input) {
            return Err(Error::config(format!("{:?} has no router to feed inputs to", self.kind)));
        }
        if self.kind == RouterKind::SoftGradientMoE && !self.grad_sim_input {
            return Err(Error::config("SoftGradientMoE requires grad_sim_input"));
        }
        Ok(())
    }
}

/// Accepts either a bare kind (`"SoftMoE"`) or a full object.
#[derive(Deserialize)]
#[serde(untagged)]
enum RouterEntry {
    Kind(RouterKind),
    Spec(RouterSpec),
}

fn routers_de<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Vec<RouterSpec>, D::Error> {
    let entries = Vec::<RouterEntry>::deserialize(d)?;
    Ok(entries
        .into_iter()
        .map(|e| match e {
            RouterEntry::Kind(k) => RouterSpec::new(k),
            RouterEntry::Spec(s) => s,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MoENetworkConfig {
    pub architecture: Architecture,
    /// One entry per MoE layer, outermost first.
    #[serde(deserialize_with = "routers_de")]
    pub routers: Vec<RouterSpec>,
    pub apply_to_actor: bool,
    pub apply_to_critic: bool,
    pub layer_size: usize,
    pub num_experts: usize,
    /// SoftMoE slots per expert.
    pub slots_per_expert: usize,
    /// Similarity below which GradThresholdSwitch moves on.
    pub switch_threshold: f64,
}

impl Default for MoENetworkConfig {
    fn default() -> Self {
        Self {
            architecture: Architecture::Baseline,
            routers: Vec::new(),
            apply_to_actor: true,
            apply_to_critic: true,
            layer_size: 64,
            num_experts: 3,
            slots_per_expert: 1,
            switch_threshold: 0.5,
        }
    }
}

impl MoENetworkConfig {
    pub fn new(architecture: Architecture, routers: Vec<RouterSpec>) -> Self {
        Self {
            architecture,
            routers,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let want = self.architecture.moe_layers();
        if self.routers.len() != want {
            return Err(Error::config(format!(
                "network.routers: {:?} needs {want} router(s), got {}",
                self.architecture,
                self.routers.len()
            )));
        }
        for r in &self.routers {
            r.validate()?;
        }
        if self.layer_size == 0 || self.num_experts == 0 || self.slots_per_expert == 0 {
            return Err(Error::config("network: layer_size, num_experts and slots_per_expert must be > 0"));
        }
        if !(self.switch_threshold > -1.0 && self.switch_threshold < 1.0) {
            return Err(Error::config(format!(
                "network.switch_threshold must lie in (-1, 1), got {}",
                self.switch_threshold
            )));
        }
        Ok(())
    }

    pub fn uses(&self, kind: RouterKind) -> bool {
        self.routers.iter().any(|r| r.kind == kind)
    }
}
