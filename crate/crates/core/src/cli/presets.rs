//! Named configurations: `<mode>-<arch>[-<router>][-<modifier>...]`.
//!
//! Modes: `single` (Breakout), `mtrl`, `crl`. Architectures: `baseline`,
//! `smsmhc`, or `middle|final|all|big` followed by a router (`softmoe`,
//! `topk`, `hardcoded`, `softgradient`, `gradswitch`). Modifiers: `tid`
//! (task id into routers), `re` (router entropy bonus), `actor` / `critic`
//! (MoE on that tower only), `rev` (order Ast, BO, SI).

use crate::envs::GameId;
use crate::error::{Error, Result};
use crate::harness::{Mode, RunConfig, TaskSchedule};
use crate::moe::{Architecture, MoENetworkConfig, RouterKind, RouterSpec};

/// Router entropy coefficient used by `re` presets.
pub const PRESET_ROUTER_ENTROPY: f64 = 0.01;

const MODES: [&str; 3] = ["single", "mtrl", "crl"];
const ARCHS: [&str; 4] = ["middle", "final", "all", "big"];
const ROUTERS: [&str; 5] = ["softmoe", "topk", "hardcoded", "softgradient", "gradswitch"];

fn router_kind(token: &str) -> Option<RouterKind> {
    Some(match token {
        "softmoe" => RouterKind::SoftMoE,
        "topk" => RouterKind::TopK,
        "hardcoded" => RouterKind::Hardcoded,
        "softgradient" => RouterKind::SoftGradientMoE,
        "gradswitch" => RouterKind::GradThresholdSwitch,
        _ => return None,
    })
}

fn architecture(token: &str) -> Option<Architecture> {
    Some(match token {
        "middle" => Architecture::Middle,
        "final" => Architecture::Final,
        "all" => Architecture::All,
        "big" => Architecture::Big,
        _ => return None,
    })
}

/// Expands a preset name into a full run configuration.
pub fn preset(name: &str) -> Result<RunConfig> {
    let bad = |why: &str| Error::config(format!("preset `{name}`: {why}"));
    let mut tokens = name.split('-');
    let mode = match tokens.next() {
        Some("single") => Mode::Single,
        Some("mtrl") => Mode::MTRL,
        Some("crl") => Mode::CRL,
        _ => return Err(bad("must start with single, mtrl or crl")),
    };
    let network = match tokens.next() {
        Some("baseline") => MoENetworkConfig::default(),
        Some("smsmhc") => MoENetworkConfig::new(
            Architecture::All,
            [RouterKind::SoftMoE, RouterKind::SoftMoE, RouterKind::Hardcoded]
                .into_iter()
                .map(RouterSpec::new)
                .collect(),
        ),
        Some(a) => {
            let arch = architecture(a).ok_or_else(|| bad(&format!("unknown architecture `{a}`")))?;
            let r = tokens.next().ok_or_else(|| bad("missing router"))?;
            let kind = router_kind(r).ok_or_else(|| bad(&format!("unknown router `{r}`")))?;
            MoENetworkConfig::new(arch, vec![RouterSpec::new(kind); arch.moe_layers()])
        }
        None => return Err(bad("missing architecture")),
    };
    let mut cfg = RunConfig {
        schedule: match mode {
            Mode::Single => TaskSchedule::single(GameId::Breakout),
            Mode::MTRL => TaskSchedule {
                mode,
                passes: 1,
                ..TaskSchedule::default()
            },
            Mode::CRL => TaskSchedule::default(),
        },
        network,
        ..RunConfig::default()
    };

    let mut seen: Vec<&str> = Vec::new();
    for m in tokens {
        if seen.contains(&m) {
            return Err(bad(&format!("modifier `{m}` repeated")));
        }
        seen.push(m);
        let learned = || cfg.network.routers.iter().any(|r| r.kind.has_params());
        match m {
            "tid" | "re" if !learned() => return Err(bad(&format!("`{m}` needs a learned router"))),
            "tid" => cfg
                .network
                .routers
                .iter_mut()
                .filter(|r| r.kind.has_params())
                .for_each(|r| r.task_id_input = true),
            "re" => cfg
                .network
                .routers
                .iter_mut()
                .filter(|r| r.kind.has_params())
                .for_each(|r| r.entropy_coef = PRESET_ROUTER_ENTROPY),
            "actor" | "critic" if cfg.network.routers.is_empty() => return Err(bad(&format!("`{m}` needs MoE layers"))),
            "actor" | "critic" if seen.contains(&"actor") && seen.contains(&"critic") => {
                return Err(bad("`actor` and `critic` exclude each other"))
            }
            "actor" => cfg.network.apply_to_critic = false,
            "critic" => cfg.network.apply_to_actor = false,
            "rev" if mode == Mode::Single => return Err(bad("`rev` needs more than one task")),
            "rev" => cfg.schedule.order.reverse(),
            _ => return Err(bad(&format!("unknown modifier `{m}`"))),
        }
    }
    cfg.network.validate().map_err(|e| bad(&e.to_string()))?;
    Ok(cfg)
}

/// Every mode × architecture × router combination, without modifiers.
pub fn preset_names() -> Vec<String> {
    let mut out = Vec::new();
    for mode in MODES {
        out.push(format!("{mode}-baseline"));
        out.push(format!("{mode}-smsmhc"));
        for arch in ARCHS {
            for r in ROUTERS {
                out.push(format!("{mode}-{arch}-{r}"));
            }
        }
    }
    out
}
