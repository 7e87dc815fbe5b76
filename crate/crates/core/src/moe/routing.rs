//! Router math shared by every MoE placement.

use super::RouterSpec;
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Side information available to routers on one forward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RouteCtx {
    /// Index of the current task in the deduplicated task list.
    pub task_id: usize,
    pub num_tasks: usize,
    /// Latest sequential gradient similarity, 0 before the first one exists.
    pub grad_sim: f64,
    /// Active expert of GradThresholdSwitch layers.
    pub switch_index: usize,
}

impl RouteCtx {
    pub fn task(task_id: usize, num_tasks: usize) -> Self {
        Self {
            task_id,
            num_tasks,
            grad_sim: 0.0,
            switch_index: 0,
        }
    }
}

/// Concatenates `x` with the router-only extras requested by `spec`.
///
/// `x` is `B×d`; the result is `B×(d + |T|·task + grad)`.
pub fn augment_router_input(
    x: &Tensor,
    task_id: Option<usize>,
    num_tasks: usize,
    grad_sim: Option<f64>,
    spec: &RouterSpec,
) -> Result<Tensor> {
    let (b, d) = x.dims2()?;
    let extra = extras(b, task_id, num_tasks, grad_sim, spec)?;
    let Some((e, w)) = extra else {
        return Ok(x.clone());
    };
    let mut out = Vec::with_capacity(b * (d + w));
    for r in 0..b {
        out.extend_from_slice(x.row(r));
        out.extend_from_slice(&e[r * w..(r + 1) * w]);
    }
    Tensor::new(vec![b, d + w], out)
}

fn extras(
    b: usize,
    task_id: Option<usize>,
    num_tasks: usize,
    grad_sim: Option<f64>,
    spec: &RouterSpec,
) -> Result<Option<(Vec<f64>, usize)>> {
    let mut row = Vec::new();
    if spec.task_id_input {
        let t = task_id.ok_or_else(|| Error::contract("router expects a task id"))?;
        if t >= num_tasks {
            return Err(Error::contract(format!("task id {t} outside 0..{num_tasks}")));
        }
        let mut onehot = vec![0.0; num_tasks];
        onehot[t] = 1.0;
        row.extend(onehot);
    }
    if spec.grad_sim_input {
        let g = grad_sim.ok_or_else(|| Error::contract("router expects a gradient similarity"))?;
        row.push(g);
    }
    if row.is_empty() {
        return Ok(None);
    }
    let w = row.len();
    Ok(Some((row.repeat(b), w)))
}

/// Tape version of [`augment_router_input`]; the extras enter as constants.
pub(crate) fn augment_var(tape: &mut Tape, x: Var, spec: &RouterSpec, ctx: &RouteCtx) -> Result<Var> {
    let b = tape.shape(x)[0];
    match extras(b, Some(ctx.task_id), ctx.num_tasks, Some(ctx.grad_sim), spec)? {
        None => Ok(x),
        Some((e, w)) => {
            let c = tape.constant(Tensor::new(vec![b, w], e)?);
            tape.concat_cols(&[x, c])
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SoftMoeOutput {
    /// `m × d_out`
    pub y: Var,
    /// Dispatch weights `m × (n·p)`, softmax over tokens.
    pub dispatch: Var,
    /// Combine weights `m × (n·p)`, softmax over slots.
    pub combine: Var,
    /// Per-token combine mass of each expert, `m × n`.
    pub expert_mass: Var,
}

/// Soft MoE over the `m` tokens in `x`.
///
/// `router_in` (`m × d_r`) times `phi` (`d_r × n·p`) gives the slot logits;
/// slot inputs are `Dᵀx` and the output is `C·Ỹ` where `Ỹ` stacks
/// `expert(i / p, slots)`.
pub fn softmoe_forward<F>(
    tape: &mut Tape,
    x: Var,
    router_in: Var,
    phi: Var,
    slots_per_expert: usize,
    mut expert: F,
) -> Result<SoftMoeOutput>
where
    F: FnMut(&mut Tape, usize, Var) -> Result<Var>,
{
    let (m, _) = tape.value(x).dims2()?;
    let (mr, dr) = tape.value(router_in).dims2()?;
    let (dp, np) = tape.value(phi).dims2()?;
    if mr != m || dp != dr || slots_per_expert == 0 || np % slots_per_expert != 0 {
        return Err(Error::contract(format!(
            "softmoe: x {:?}, router input {:?}, phi {:?}, p = {slots_per_expert}",
            tape.shape(x),
            tape.shape(router_in),
            tape.shape(phi)
        )));
    }
    let n = np / slots_per_expert;
    let logits = tape.matmul(router_in, phi)?;
    let dispatch = tape.softmax(logits, 0)?;
    let combine = tape.softmax(logits, 1)?;
    let dt = tape.transpose(dispatch)?;
    let slots = tape.matmul(dt, x)?;
    let mut outs = Vec::with_capacity(n);
    for i in 0..n {
        let s = tape.slice_rows(slots, i * slots_per_expert, (i + 1) * slots_per_expert)?;
        outs.push(expert(tape, i, s)?);
    }
    let y_tilde = tape.concat_rows(&outs)?;
    let y = tape.matmul(combine, y_tilde)?;
    let expert_mass = tape.sum_col_groups(combine, slots_per_expert)?;
    Ok(SoftMoeOutput {
        y,
        dispatch,
        combine,
        expert_mass,
    })
}

/// Soft MoE applied to each row of `x` as its own single token.
///
/// With one token the dispatch softmax is identically 1, so every slot sees
/// the token and each expert only has to run once on the whole batch.
/// Returns `(y, expert_mass)`.
pub(crate) fn softmoe_per_sample<F>(
    tape: &mut Tape,
    x: Var,
    router_in: Var,
    phi: Var,
    slots_per_expert: usize,
    mut expert: F,
) -> Result<(Var, Var)>
where
    F: FnMut(&mut Tape, usize, Var) -> Result<Var>,
{
    let np = tape.value(phi).dims2()?.1;
    if slots_per_expert == 0 || np % slots_per_expert != 0 {
        return Err(Error::contract(format!("softmoe: {np} slots, p = {slots_per_expert}")));
    }
    let n = np / slots_per_expert;
    let logits = tape.matmul(router_in, phi)?;
    let combine = tape.softmax(logits, 1)?;
    let mass = tape.sum_col_groups(combine, slots_per_expert)?;
    let mut y = None;
    for j in 0..n {
        let f = expert(tape, j, x)?;
        let w = tape.slice_cols(mass, j, j + 1)?;
        let term = tape.mul_col(f, w)?;
        y = Some(match y {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    Ok((y.expect("at least one expert"), mass))
}

/// Argmax per row of a `B × n` logit matrix, ties to the lowest index.
pub fn topk_select(logits: &Tensor) -> Result<Vec<usize>> {
    let (b, n) = logits.dims2()?;
    Ok((0..b)
        .map(|r| {
            let row = &logits.data()[r * n..(r + 1) * n];
            let mut best = 0;
            for j in 1..n {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect())
}

/// Top-1 routing: `y = p_{j*} · f_{j*}(x)` with `p = softmax(logits)`.
/// Returns `(y, p)`.
pub(crate) fn topk_per_sample<F>(tape: &mut Tape, x: Var, logits: Var, mut expert: F) -> Result<(Var, Var)>
where
    F: FnMut(&mut Tape, usize, Var) -> Result<Var>,
{
    let (b, n) = tape.value(logits).dims2()?;
    let chosen = topk_select(tape.value(logits))?;
    let probs = tape.softmax(logits, 1)?;
    let gate = tape.gather_cols(probs, &chosen)?;
    let mut y = None;
    for j in 0..n {
        if !chosen.contains(&j) {
            continue;
        }
        let mask: Vec<f64> = chosen.iter().map(|&c| if c == j { 1.0 } else { 0.0 }).collect();
        let mask = tape.constant(Tensor::new(vec![b, 1], mask)?);
        let g = tape.mul(gate, mask)?;
        let f = expert(tape, j, x)?;
        let term = tape.mul_col(f, g)?;
        y = Some(match y {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    Ok((y.expect("every row selects an expert"), probs))
}

/// Shannon entropy of each layer's routing distribution, summed.
pub fn router_entropy(record: &[Vec<f64>]) -> Result<f64> {
    let mut total = 0.0;
    for layer in record {
        let s: f64 = layer.iter().sum();
        if layer.iter().any(|&p| p.is_nan() || p < 0.0) || (s - 1.0).abs() > 1e-9 {
            return Err(Error::contract(format!("invalid routing distribution {layer:?}")));
        }
        total -= layer.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>();
    }
    Ok(total)
}

/// Active-expert register of a GradThresholdSwitch router.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradSwitch {
    index: usize,
    num_experts: usize,
    threshold: f64,
}

impl GradSwitch {
    pub fn new(num_experts: usize, threshold: f64) -> Result<Self> {
        if num_experts == 0 || !(threshold > -1.0 && threshold < 1.0) {
            return Err(Error::contract(format!(
                "switch needs experts > 0 and threshold in (-1, 1), got {num_experts}, {threshold}"
            )));
        }
        Ok(Self {
            index: 0,
            num_experts,
            threshold,
        })
    }

    pub fn index(&self) -> usize {
        self.index
    }

    /// Feeds one newly completed bucket similarity; returns the active index.
    pub fn observe(&mut self, similarity: f64) -> usize {
        if similarity < self.threshold {
            self.index = (self.index + 1) % self.num_experts;
        }
        self.index
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moe::RouterKind;

    #[test]
    fn augmentation_rules() {
        let x = Tensor::from_rows(&[vec![0.5, -1.0]]).unwrap();
        let plain = RouterSpec::new(RouterKind::SoftMoE);
        assert_eq!(augment_router_input(&x, None, 3, None, &plain).unwrap(), x);

        let task = RouterSpec::new(RouterKind::SoftMoE).with_task_id();
        let a = augment_router_input(&x, Some(1), 3, None, &task).unwrap();
        assert_eq!(a.data(), &[0.5, -1.0, 0.0, 1.0, 0.0]);
        assert!(augment_router_input(&x, None, 3, None, &task).is_err());

        let grad = RouterSpec::new(RouterKind::SoftGradientMoE);
        let a = augment_router_input(&x, None, 3, Some(0.0), &grad).unwrap();
        assert_eq!(a.data(), &[0.5, -1.0, 0.0]);
        assert!(augment_router_input(&x, None, 3, None, &grad).is_err());
    }

    #[test]
    fn topk_argmax_and_ties() {
        let l = Tensor::from_rows(&[vec![0.1, 2.0, -1.0], vec![0.3, 0.3, 0.3]]).unwrap();
        assert_eq!(topk_select(&l).unwrap(), vec![1, 0]);
    }

    #[test]
    fn entropy_values() {
        assert_eq!(router_entropy(&[vec![0.0, 1.0, 0.0]]).unwrap(), 0.0);
        let u = router_entropy(&[vec![1.0 / 3.0; 3]]).unwrap();
        assert!((u - 3.0_f64.ln()).abs() < 1e-12);
        assert!((router_entropy(&[vec![1.0 / 3.0; 3], vec![1.0 / 3.0; 3]]).unwrap() - 2.0 * u).abs() < 1e-12);
        assert!(router_entropy(&[vec![0.5, 0.6]]).is_err());
    }

    #[test]
    fn switch_register() {
        let mut s = GradSwitch::new(3, 0.5).unwrap();
        assert_eq!(s.observe(0.9), 0);
        assert_eq!(s.observe(0.1), 1);
        assert_eq!(s.observe(0.1), 2);
        assert_eq!(s.observe(0.1), 0);
        assert!(GradSwitch::new(3, 1.0).is_err());
    }
}
