//! Actor and critic towers with optional MoE layers.

use super::init::{name_hash, orthogonal};
use super::routing::{augment_var, softmoe_per_sample, topk_per_sample, RouteCtx};
use super::{Architecture, MoENetworkConfig, RouterKind, RouterSpec, HIDDEN_LAYERS};
use crate::envs::mix_seed;
use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tape, Tensor, Var};
use std::cell::Cell;

const HIDDEN_GAIN: f64 = std::f64::consts::SQRT_2;
const ACTOR_HEAD_GAIN: f64 = 0.01;
const CRITIC_HEAD_GAIN: f64 = 1.0;
const ROUTER_GAIN: f64 = 1.0;

#[derive(Debug, Clone)]
struct Dense {
    w: String,
    b: String,
}

impl Dense {
    fn init(store: &mut ParamStore, prefix: &str, inp: usize, out: usize, gain: f64, seed: u64) -> Result<Self> {
        let w = format!("{prefix}.w");
        let b = format!("{prefix}.b");
        store.insert(&w, orthogonal(inp, out, gain, mix_seed(seed, name_hash(&w))))?;
        store.insert(&b, Tensor::zeros(&[out]))?;
        Ok(Self { w, b })
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, &self.w)?;
        let b = tape.param(store, &self.b)?;
        let z = tape.matmul(x, w)?;
        tape.add_row(z, b)
    }
}

#[derive(Debug, Clone)]
enum RouterParams {
    Phi(String),
    Linear(Dense),
    Fixed,
}

#[derive(Debug, Clone)]
struct MoeBlock {
    spec: RouterSpec,
    /// Each expert is a stack of relu layers.
    experts: Vec<Vec<Dense>>,
    router: RouterParams,
    slots_per_expert: usize,
}

#[derive(Debug, Clone)]
enum Block {
    Dense(Dense),
    Moe(MoeBlock),
}

/// Routing distribution of one MoE layer on one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct LayerRouting {
    pub kind: RouterKind,
    /// `B × n`, rows sum to 1.
    pub probs: Var,
    pub entropy_coef: f64,
}

#[derive(Debug, Clone)]
pub struct TowerOutput {
    pub out: Var,
    pub routing: Vec<LayerRouting>,
    /// Post-relu activations of every hidden layer that ran, experts
    /// included.
    pub hidden: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct Tower {
    name: String,
    blocks: Vec<Block>,
    head: Dense,
    num_experts: usize,
}

fn run_stack(tape: &mut Tape, store: &ParamStore, layers: &[Dense], x: Var, hidden: &mut Vec<Var>) -> Result<Var> {
    let mut h = x;
    for d in layers {
        let z = d.forward(tape, store, h)?;
        h = tape.relu(z)?;
        hidden.push(h);
    }
    Ok(h)
}

impl Tower {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn num_moe_layers(&self) -> usize {
        self.blocks.iter().filter(|b| matches!(b, Block::Moe(_))).count()
    }

    pub fn router_specs(&self) -> Vec<&RouterSpec> {
        self.blocks
            .iter()
            .filter_map(|b| match b {
                Block::Moe(m) => Some(&m.spec),
                Block::Dense(_) => None,
            })
            .collect()
    }

    /// Forward pass on a `B × d` batch.
    ///
    /// With `probe` set every expert is evaluated so `hidden` covers all
    /// neurons; the output is unaffected.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, ctx: &RouteCtx, probe: bool) -> Result<TowerOutput> {
        let mut hidden = Vec::new();
        let mut routing = Vec::new();
        let mut h = x;
        for block in &self.blocks {
            match block {
                Block::Dense(d) => {
                    h = run_stack(tape, store, std::slice::from_ref(d), h, &mut hidden)?;
                }
                Block::Moe(m) => {
                    let n = m.experts.len();
                    let ran: Vec<Cell<bool>> = vec![Cell::new(false); n];
                    let input = h;
                    let mut expert = |tape: &mut Tape, j: usize, inp: Var| -> Result<Var> {
                        ran[j].set(true);
                        run_stack(tape, store, &m.experts[j], inp, &mut hidden)
                    };
                    let (y, probs) = match (&m.router, m.spec.kind) {
                        (RouterParams::Phi(phi), _) => {
                            let rin = augment_var(tape, input, &m.spec, ctx)?;
                            let phi = tape.param(store, phi)?;
                            softmoe_per_sample(tape, input, rin, phi, m.slots_per_expert, &mut expert)?
                        }
                        (RouterParams::Linear(lin), _) => {
                            let rin = augment_var(tape, input, &m.spec, ctx)?;
                            let logits = lin.forward(tape, store, rin)?;
                            topk_per_sample(tape, input, logits, &mut expert)?
                        }
                        (RouterParams::Fixed, kind) => {
                            let idx = if kind == RouterKind::Hardcoded { ctx.task_id } else { ctx.switch_index };
                            if idx >= n {
                                return Err(Error::contract(format!("{kind:?} route {idx} outside 0..{n} experts")));
                            }
                            let y = expert(tape, idx, input)?;
                            let b = tape.shape(input)[0];
                            let mut onehot = vec![0.0; b * n];
                            onehot.iter_mut().skip(idx).step_by(n).for_each(|v| *v = 1.0);
                            let probs = tape.constant(Tensor::new(vec![b, n], onehot)?);
                            (y, probs)
                        }
                    };
                    if probe {
                        for j in 0..n {
                            if !ran[j].get() {
                                expert(tape, j, input)?;
                            }
                        }
                    }
                    routing.push(LayerRouting {
                        kind: m.spec.kind,
                        probs,
                        entropy_coef: m.spec.entropy_coef,
                    });
                    h = y;
                }
            }
        }
        let out = self.head.forward(tape, store, h)?;
        Ok(TowerOutput { out, routing, hidden })
    }

    /// Weighted routing-entropy bonus `Σ_l coef_l · mean_B H(p_l)`, or `None`
    /// when no layer asks for one.
    pub fn entropy_bonus(tape: &mut Tape, routing: &[LayerRouting]) -> Result<Option<Var>> {
        let mut total: Option<Var> = None;
        for r in routing.iter().filter(|r| r.entropy_coef > 0.0) {
            let h = tape.entropy_rows(r.probs)?;
            let h = tape.mean(h)?;
            let h = tape.scale(h, r.entropy_coef)?;
            total = Some(match total {
                None => h,
                Some(t) => tape.add(t, h)?,
            });
        }
        Ok(total)
    }

    pub fn num_experts(&self) -> usize {
        self.num_experts
    }
}

#[allow(clippy::too_many_arguments)]
fn build_tower(
    store: &mut ParamStore,
    name: &str,
    cfg: &MoENetworkConfig,
    moe: bool,
    in_dim: usize,
    out_dim: usize,
    head_gain: f64,
    num_tasks: usize,
    seed: u64,
) -> Result<Tower> {
    let hsz = cfg.layer_size;
    let arch = if moe { cfg.architecture } else { Architecture::Baseline };
    let moe_at = |i: usize| match arch {
        Architecture::Baseline | Architecture::Big => false,
        Architecture::Middle => i == 1,
        Architecture::Final => i == HIDDEN_LAYERS - 1,
        Architecture::All => true,
    };
    let mut routers = cfg.routers.iter();
    let mut blocks = Vec::new();

    let moe_block = |store: &mut ParamStore, i: usize, inp: usize, depth: usize, spec: &RouterSpec| -> Result<MoeBlock> {
        let prefix = format!("{name}.moe{i}");
        let n = cfg.num_experts;
        let mut experts = Vec::with_capacity(n);
        for j in 0..n {
            let mut stack = Vec::with_capacity(depth);
            for k in 0..depth {
                let d_in = if k == 0 { inp } else { hsz };
                stack.push(Dense::init(store, &format!("{prefix}.expert{j}.l{k}"), d_in, hsz, HIDDEN_GAIN, seed)?);
            }
            experts.push(stack);
        }
        let r_in = inp + if spec.task_id_input { num_tasks } else { 0 } + usize::from(spec.grad_sim_input);
        let router = match spec.kind {
            RouterKind::SoftMoE | RouterKind::SoftGradientMoE => {
                let phi = format!("{prefix}.router.phi");
                let cols = n * cfg.slots_per_expert;
                store.insert(&phi, orthogonal(r_in, cols, ROUTER_GAIN, mix_seed(seed, name_hash(&phi))))?;
                RouterParams::Phi(phi)
            }
            RouterKind::TopK => RouterParams::Linear(Dense::init(store, &format!("{prefix}.router"), r_in, n, ROUTER_GAIN, seed)?),
            RouterKind::Hardcoded | RouterKind::GradThresholdSwitch => RouterParams::Fixed,
        };
        Ok(MoeBlock {
            spec: spec.clone(),
            experts,
            router,
            slots_per_expert: cfg.slots_per_expert,
        })
    };

    if arch == Architecture::Big {
        let spec = routers.next().expect("validated router count");
        blocks.push(Block::Moe(moe_block(store, 0, in_dim, HIDDEN_LAYERS, spec)?));
    } else {
        for i in 0..HIDDEN_LAYERS {
            let inp = if i == 0 { in_dim } else { hsz };
            if moe_at(i) {
                let spec = routers.next().expect("validated router count");
                blocks.push(Block::Moe(moe_block(store, i, inp, 1, spec)?));
            } else {
                blocks.push(Block::Dense(Dense::init(store, &format!("{name}.l{i}"), inp, hsz, HIDDEN_GAIN, seed)?));
            }
        }
    }
    let head = Dense::init(store, &format!("{name}.head"), hsz, out_dim, head_gain, seed)?;
    Ok(Tower {
        name: name.to_string(),
        blocks,
        head,
        num_experts: cfg.num_experts,
    })
}

/// Separate actor (logits) and critic (value) towers.
#[derive(Debug, Clone)]
pub struct ActorCritic {
    pub actor: Tower,
    pub critic: Tower,
    obs_dim: usize,
    act_dim: usize,
    num_tasks: usize,
}

impl ActorCritic {
    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn act_dim(&self) -> usize {
        self.act_dim
    }

    pub fn num_tasks(&self) -> usize {
        self.num_tasks
    }
}

/// Builds both towers and their freshly initialised parameters.
///
/// Every parameter's init stream depends only on `seed` and its name, so
/// switching MoE off for a tower reproduces the Baseline tower exactly.
pub fn build_actor_critic(
    cfg: &MoENetworkConfig,
    obs_dim: usize,
    act_dim: usize,
    num_tasks: usize,
    seed: u64,
) -> Result<(ActorCritic, ParamStore)> {
    cfg.validate()?;
    if obs_dim == 0 || act_dim == 0 || num_tasks == 0 {
        return Err(Error::config("network dims and task count must be > 0"));
    }
    if cfg.uses(RouterKind::Hardcoded) && num_tasks > cfg.num_experts {
        return Err(Error::config(format!(
            "Hardcoded routing needs one expert per task: {num_tasks} tasks, {} experts",
            cfg.num_experts
        )));
    }
    let mut store = ParamStore::new();
    let actor = build_tower(&mut store, "actor", cfg, cfg.apply_to_actor, obs_dim, act_dim, ACTOR_HEAD_GAIN, num_tasks, seed)?;
    let critic = build_tower(&mut store, "critic", cfg, cfg.apply_to_critic, obs_dim, 1, CRITIC_HEAD_GAIN, num_tasks, seed)?;
    Ok((
        ActorCritic {
            actor,
            critic,
            obs_dim,
            act_dim,
            num_tasks,
        },
        store,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moe::RouterSpec;

    fn mlp_params(inp: usize, h: usize, out: usize) -> usize {
        (inp * h + h) + 2 * (h * h + h) + (h * out + out)
    }

    #[test]
    fn baseline_parameter_count() {
        let cfg = MoENetworkConfig::default();
        let (_, store) = build_actor_critic(&cfg, 600, 5, 3, 0).unwrap();
        assert_eq!(store.num_scalars_with_prefix("actor."), mlp_params(600, 64, 5));
        assert_eq!(store.num_scalars_with_prefix("critic."), mlp_params(600, 64, 1));
        assert_eq!(store.num_scalars(), mlp_params(600, 64, 5) + mlp_params(600, 64, 1));
    }

    #[test]
    fn big_hardcoded_triples_the_trunk() {
        let cfg = MoENetworkConfig::new(Architecture::Big, vec![RouterSpec::new(RouterKind::Hardcoded)]);
        let (_, store) = build_actor_critic(&cfg, 600, 5, 3, 0).unwrap();
        let trunk = (600 * 64 + 64) + 2 * (64 * 64 + 64);
        assert_eq!(store.num_scalars_with_prefix("actor.moe0."), 3 * trunk);
        assert_eq!(store.num_scalars_with_prefix("actor."), 3 * trunk + 64 * 5 + 5);
        assert!(!store.names().any(|n| n.contains("router")));
    }

    #[test]
    fn smsmhc_layout() {
        let r = vec![
            RouterSpec::new(RouterKind::SoftMoE),
            RouterSpec::new(RouterKind::SoftMoE),
            RouterSpec::new(RouterKind::Hardcoded),
        ];
        let cfg = MoENetworkConfig::new(Architecture::All, r);
        let (net, store) = build_actor_critic(&cfg, 600, 5, 3, 0).unwrap();
        assert!(store.contains("actor.moe0.router.phi"));
        assert!(store.contains("actor.moe1.router.phi"));
        assert!(!store.contains("actor.moe2.router.phi"));
        assert_eq!(store.get("actor.moe0.router.phi").unwrap().shape(), &[600, 3]);
        assert_eq!(net.actor.num_moe_layers(), 3);
    }

    #[test]
    fn flags_select_towers() {
        let mut cfg = MoENetworkConfig::new(Architecture::Final, vec![RouterSpec::new(RouterKind::TopK)]);
        cfg.apply_to_critic = false;
        let (net, store) = build_actor_critic(&cfg, 600, 5, 3, 0).unwrap();
        assert_eq!(net.actor.num_moe_layers(), 1);
        assert_eq!(net.critic.num_moe_layers(), 0);
        assert!(store.contains("critic.l2.w"));

        cfg.apply_to_actor = false;
        let (_, off) = build_actor_critic(&cfg, 600, 5, 3, 0).unwrap();
        let (_, base) = build_actor_critic(&MoENetworkConfig::default(), 600, 5, 3, 0).unwrap();
        assert_eq!(off, base);
    }

    #[test]
    fn baseline_matches_plain_mlp() {
        let (net, store) = build_actor_critic(&MoENetworkConfig::default(), 12, 4, 1, 3).unwrap();
        let x = Tensor::new(vec![2, 12], (0..24).map(|i| ((i * 7) % 5) as f64 - 2.0).collect()).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let out = net.actor.forward(&mut tape, &store, xv, &RouteCtx::task(0, 1), false).unwrap();

        let mut h = x;
        for l in ["actor.l0", "actor.l1", "actor.l2"] {
            h = h
                .matmul(store.get(&format!("{l}.w")).unwrap())
                .unwrap()
                .add_row(store.get(&format!("{l}.b")).unwrap())
                .unwrap()
                .relu();
        }
        let logits = h
            .matmul(store.get("actor.head.w").unwrap())
            .unwrap()
            .add_row(store.get("actor.head.b").unwrap())
            .unwrap();
        let got: Vec<u64> = tape.value(out.out).data().iter().map(|v| v.to_bits()).collect();
        let want: Vec<u64> = logits.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(got, want);
        assert_eq!(out.hidden.len(), 3);
    }

    #[test]
    fn probe_covers_every_expert() {
        let cfg = MoENetworkConfig::new(Architecture::Big, vec![RouterSpec::new(RouterKind::Hardcoded)]);
        let (net, store) = build_actor_critic(&cfg, 8, 3, 3, 1).unwrap();
        let ctx = RouteCtx::task(2, 3);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[4, 8]));
        let train = net.actor.forward(&mut tape, &store, x, &ctx, false).unwrap();
        let probe = net.actor.forward(&mut tape, &store, x, &ctx, true).unwrap();
        assert_eq!(train.hidden.len(), 3);
        assert_eq!(probe.hidden.len(), 9);
        assert_eq!(tape.value(train.out), tape.value(probe.out));
        assert_eq!(tape.value(train.routing[0].probs).row(0), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn hardcoded_needs_enough_experts() {
        let cfg = MoENetworkConfig::new(Architecture::Big, vec![RouterSpec::new(RouterKind::Hardcoded)]);
        assert!(matches!(build_actor_critic(&cfg, 8, 3, 4, 1), Err(Error::Config(_))));
    }
}
