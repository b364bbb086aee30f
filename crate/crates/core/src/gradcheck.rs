//! Finite-difference verification of every differentiable operation and of
//! the assembled model.
//!
//! The checker evaluates losses forward-only at perturbed inputs, so it is
//! independent of the adjoint code it validates. Central differences with
//! step 1e-5 at 64-bit give roughly 1e-10 absolute noise, far below the
//! 1e-4 relative tolerance.

use crate::error::Result;
use crate::tensor::{Tape, TensorId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;

/// Guarded relative error; the floor keeps finite-difference noise on
/// near-zero gradients from registering as disagreement.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

#[derive(Debug, Clone)]
pub struct CheckEntry {
    pub name: String,
    pub max_rel_err: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Default)]
pub struct CheckReport {
    pub entries: Vec<CheckEntry>,
}

impl CheckReport {
    pub fn pass(&self) -> bool {
        self.entries.iter().all(|e| e.pass)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&format!(
                "{:<28} max_rel_err {:>12.3e}  {}\n",
                e.name,
                e.max_rel_err,
                if e.pass { "pass" } else { "FAIL" }
            ));
        }
        out
    }
}

/// One checkable computation: named input arrays and a loss builder. The
/// builder must construct the same scalar for identical input values.
struct Probe<'a> {
    inputs: Vec<(Vec<f64>, Vec<usize>)>,
    build: Box<dyn Fn(&mut Tape<f64>, &[TensorId]) -> Result<TensorId> + 'a>,
}

fn run_probe(probe: &Probe, fault: Option<&'static str>) -> Result<f64> {
    let loss_at = |inputs: &[(Vec<f64>, Vec<usize>)]| -> Result<f64> {
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = inputs
            .iter()
            .map(|(v, s)| tape.leaf(v.clone(), s.clone(), true))
            .collect::<Result<_>>()?;
        let loss = (probe.build)(&mut tape, &ids)?;
        Ok(tape.values(loss)[0])
    };

    // Analytic gradients.
    let mut tape = Tape::new();
    if let Some(f) = fault {
        tape.inject_adjoint_fault(f);
    }
    let ids: Vec<TensorId> = probe
        .inputs
        .iter()
        .map(|(v, s)| tape.leaf(v.clone(), s.clone(), true))
        .collect::<Result<_>>()?;
    let loss = (probe.build)(&mut tape, &ids)?;
    tape.backward(loss)?;

    let mut worst = 0.0f64;
    let mut perturbed = probe.inputs.clone();
    for (which, (values, _)) in probe.inputs.iter().enumerate() {
        let analytic = tape.grad(ids[which]).expect("requires_grad leaf");
        for e in 0..values.len() {
            let orig = values[e];
            perturbed[which].0[e] = orig + FD_STEP;
            let up = loss_at(&perturbed)?;
            perturbed[which].0[e] = orig - FD_STEP;
            let down = loss_at(&perturbed)?;
            perturbed[which].0[e] = orig;
            let fd = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[e], fd));
        }
    }
    Ok(worst)
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Projects a tensor to a scalar through fixed random weights so that every
/// output element influences the loss.
fn project(tape: &mut Tape<f64>, out: TensorId, rng: &mut ChaCha8Rng) -> Result<TensorId> {
    let n: usize = tape.shape(out).iter().product();
    let w = tape.constant(rand_vec(rng, n), tape.shape(out).to_vec())?;
    let p = tape.mul(out, w)?;
    Ok(tape.sum(p))
}

macro_rules! op_probe {
    ($entries:expr, $fault:expr, $seeds:expr, $name:expr, $inputs:expr, $build:expr) => {{
        let mut worst = 0.0f64;
        for seed in 0..$seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(seed as u64 * 7919 + 11);
            let inputs = $inputs(&mut rng);
            let proj_rng = ChaCha8Rng::seed_from_u64(seed as u64 * 104729 + 3);
            let probe = Probe {
                inputs,
                build: Box::new(move |tape: &mut Tape<f64>, ids: &[TensorId]| {
                    let out = $build(tape, ids)?;
                    let mut r = proj_rng.clone();
                    project(tape, out, &mut r)
                }),
            };
            worst = worst.max(run_probe(&probe, $fault)?);
        }
        $entries.push(CheckEntry { name: $name.to_string(), max_rel_err: worst, pass: worst <= REL_TOL });
    }};
}

/// Finite-difference check of every op's adjoint over `seeds` random draws.
pub fn check_ops_seeded(seeds: usize, fault: Option<&'static str>) -> Result<CheckReport> {
    let mut entries: Vec<CheckEntry> = Vec::new();

    op_probe!(entries, fault, seeds, "matmul", |rng: &mut ChaCha8Rng| vec![
        (rand_vec(rng, 12), vec![3, 4]),
        (rand_vec(rng, 8), vec![4, 2]),
    ], |t: &mut Tape<f64>, ids: &[TensorId]| t.matmul(ids[0], ids[1]));

    op_probe!(entries, fault, seeds, "transpose", |rng: &mut ChaCha8Rng| vec![
        (rand_vec(rng, 6), vec![2, 3]),
    ], |t: &mut Tape<f64>, ids: &[TensorId]| t.transpose(ids[0]));

    op_probe!(entries, fault, seeds, "add", |rng: &mut ChaCha8Rng| vec![
        (rand_vec(rng, 6), vec![2, 3]),
        (rand_vec(rng, 6), vec![2, 3]),
    ], |t: &mut Tape<f64>, ids: &[TensorId]| t.add(ids[0], ids[1]));

    op_probe!(entries, fault, seeds, "sub", |rng: &mut ChaCha8Rng| vec![
        (rand_vec(rng, 6), vec![2, 3]),
        (rand_vec(rng, 6), vec![2, 3]),
    ], |t: &mut Tape<f64>, ids: &[TensorId]| t.sub(ids[0], ids[1]));

    op_probe!(entries, fault, seeds, "mul", |rng: &mut ChaCha8Rng| vec![
        (rand_vec(rng, 6), vec![2, 3]),
        (rand_vec(rng, 6), vec![2, 3]),
    ], |t: &mut Tape<f64>, ids: &[TensorId]| t.mul(ids[0], ids[1]));

    op_probe!(entries, fault, seeds, "add_bias", |rng: &mut ChaCha8Rng| vec![
        (rand_vec(rng, 6), vec![2, 3]),
        (rand_vec(rng, 3), vec![3]),
    ], |t: &mut Tape<f64>, ids: &[TensorId]| t.add_bias(ids[0], ids[1]));

    op_probe!(entries, fault, seeds, "scale", |rng: &mut ChaCha8Rng| vec![
        (rand_vec(rng, 5), vec![5]),
    ], |t: &mut Tape<f64>, ids: &[TensorId]| Ok::<_, crate::Error>(t.scale(ids[0], 0.7)));

    op_probe!(entries, fault, seeds, "tanh", |rng: &mut ChaCha8Rng| vec![
        (rand_vec(rng, 5), vec![5]),
    ], |t: &mut Tape<f64>, ids: &[TensorId]| Ok::<_, crate::Error>(t.tanh(ids[0])));

    op_probe!(entries, fault, seeds, "sigmoid", |rng: &mut ChaCha8Rng| vec![
        (rand_vec(rng, 5), vec![5]),
    ], |t: &mut Tape<f64>, ids: &[TensorId]| Ok::<_, crate::Error>(t.sigmoid(ids[0])));

    op_probe!(entries, fault, seeds, "softmax", |rng: &mut ChaCha8Rng| vec![
        (rand_vec(rng, 10), vec![2, 5]),
    ], |t: &mut Tape<f64>, ids: &[TensorId]| t.softmax(ids[0], 1));

    op_probe!(entries, fault, seeds, "log_softmax", |rng: &mut ChaCha8Rng| vec![
        (rand_vec(rng, 10), vec![2, 5]),
    ], |t: &mut Tape<f64>, ids: &[TensorId]| t.log_softmax(ids[0], 1));

    op_probe!(entries, fault, seeds, "pick_per_row", |rng: &mut ChaCha8Rng| vec![
        (rand_vec(rng, 12), vec![3, 4]),
    ], |t: &mut Tape<f64>, ids: &[TensorId]| t.pick_per_row(ids[0], vec![1, 0, 3]));

    op_probe!(entries, fault, seeds, "sum", |rng: &mut ChaCha8Rng| vec![
        (rand_vec(rng, 7), vec![7]),
    ], |t: &mut Tape<f64>, ids: &[TensorId]| Ok::<_, crate::Error>(t.sum(ids[0])));

    op_probe!(entries, fault, seeds, "mean_pool", |rng: &mut ChaCha8Rng| vec![
        (rand_vec(rng, 12), vec![4, 3]),
    ], |t: &mut Tape<f64>, ids: &[TensorId]| t.mean_pool(ids[0], 0, &[true, false, true, true]));

    op_probe!(entries, fault, seeds, "concat0", |rng: &mut ChaCha8Rng| vec![
        (rand_vec(rng, 6), vec![2, 3]),
        (rand_vec(rng, 3), vec![1, 3]),
    ], |t: &mut Tape<f64>, ids: &[TensorId]| t.concat0(&[ids[0], ids[1]]));

    op_probe!(entries, fault, seeds, "concat_cols", |rng: &mut ChaCha8Rng| vec![
        (rand_vec(rng, 4), vec![2, 2]),
        (rand_vec(rng, 6), vec![2, 3]),
    ], |t: &mut Tape<f64>, ids: &[TensorId]| t.concat_cols(&[ids[0], ids[1]]));

    op_probe!(entries, fault, seeds, "slice_cols", |rng: &mut ChaCha8Rng| vec![
        (rand_vec(rng, 8), vec![2, 4]),
    ], |t: &mut Tape<f64>, ids: &[TensorId]| t.slice_cols(ids[0], 1, 2));

    op_probe!(entries, fault, seeds, "slice_rows", |rng: &mut ChaCha8Rng| vec![
        (rand_vec(rng, 8), vec![4, 2]),
    ], |t: &mut Tape<f64>, ids: &[TensorId]| t.slice_rows(ids[0], 1, 2));

    op_probe!(entries, fault, seeds, "reshape", |rng: &mut ChaCha8Rng| vec![
        (rand_vec(rng, 6), vec![2, 3]),
    ], |t: &mut Tape<f64>, ids: &[TensorId]| t.reshape(ids[0], vec![3, 2]));

    op_probe!(entries, fault, seeds, "layer_norm", |rng: &mut ChaCha8Rng| vec![
        (rand_vec(rng, 8), vec![2, 4]),
        (rand_vec(rng, 4), vec![4]),
        (rand_vec(rng, 4), vec![4]),
    ], |t: &mut Tape<f64>, ids: &[TensorId]| t.layer_norm(ids[0], ids[1], ids[2], 1e-5));

    op_probe!(entries, fault, seeds, "embed", |rng: &mut ChaCha8Rng| vec![
        (rand_vec(rng, 18), vec![6, 3]),
    ], |t: &mut Tape<f64>, ids: &[TensorId]| t.embed(ids[0], &[1, 4, 4, 0]));

    op_probe!(entries, fault, seeds, "bce_with_logits", |rng: &mut ChaCha8Rng| vec![
        (rand_vec(rng, 6), vec![6]),
    ], |t: &mut Tape<f64>, ids: &[TensorId]| {
        let targets = vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0];
        let mask = vec![1.0, 1.0, 0.0, 1.0, 1.0, 0.0];
        t.bce_with_logits(ids[0], targets, mask)
    });

    Ok(CheckReport { entries })
}

/// Default op suite at 20 seeds, as the invariants prescribe.
pub fn check_ops(fault: Option<&'static str>) -> Result<CheckReport> {
    check_ops_seeded(20, fault)
}

// ── whole-model check ────────────────────────────────────────────────

use crate::data::{ContextWindow, DialogExample};
use crate::model::{Ablation, ModelConfig, Mrg, TaskMode};

/// The fixed small geometry for whole-model checking: embedding 8, hidden
/// 16, two layers, two heads, three 5-token utterances, a 4-token question,
/// vocabulary 16.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 16,
        emb_dim: 8,
        hidden: 16,
        layers: 2,
        heads: 2,
        window: ContextWindow { max_utterances: 3, tokens_per_utterance: 5, max_response_len: 6 },
        init_std: 0.1,
    }
}

fn tiny_example(rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> DialogExample {
    let vocab = cfg.vocab_size as u32;
    let tok = |rng: &mut ChaCha8Rng| rng.gen_range(4..vocab);
    let utterances: Vec<Vec<u32>> = (0..3).map(|_| (0..5).map(|_| tok(rng)).collect()).collect();
    let question: Vec<u32> = (0..4).map(|_| tok(rng)).collect();
    let response: Vec<u32> = (0..5).map(|_| tok(rng)).collect();
    let mut answer_mask = vec![0u8; 15];
    answer_mask[rng.gen_range(0..15)] = 1;
    answer_mask[rng.gen_range(0..15)] = 1;
    DialogExample {
        utterances,
        question,
        answer_mask,
        response,
        utterance_tokens: vec![],
        question_tokens: vec![],
        response_tokens: vec![],
    }
}

fn model_joint_loss(model: &Mrg<f64>, ex: &DialogExample, fault: Option<&'static str>) -> Result<Vec<Vec<f64>>> {
    let mut tape = Tape::new();
    if let Some(f) = fault {
        tape.inject_adjoint_fault(f);
    }
    let leaves = model.register(&mut tape, true)?;
    let loss = model.batch_loss(&mut tape, &leaves, &[ex], TaskMode::Joint, 1.0)?;
    tape.backward(loss.total)?;
    Ok(leaves
        .iter()
        .map(|&id| {
            tape.grad(id)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; tape.values(id).len()])
        })
        .collect())
}

fn model_loss_only(model: &Mrg<f64>, ex: &DialogExample) -> Result<f64> {
    let mut tape = Tape::new();
    let leaves = model.register(&mut tape, false)?;
    let loss = model.batch_loss(&mut tape, &leaves, &[ex], TaskMode::Joint, 1.0)?;
    Ok(loss.total_value)
}

/// Finite-difference check of the joint loss gradient for every trainable
/// parameter of a tiny model. One entry per parameter tensor.
pub fn check_model(seed: u64, fault: Option<&'static str>) -> Result<CheckReport> {
    let cfg = tiny_model_config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(17));
    let ex = tiny_example(&mut rng, &cfg);
    let mut model: Mrg<f64> = Mrg::init(cfg, Ablation::default(), seed)?;

    let grads = model_joint_loss(&model, &ex, fault)?;

    let mut entries = Vec::new();
    for slot in 0..model.params.len() {
        let name = model.params.get(slot).name.clone();
        let n = model.params.get(slot).values.len();
        let mut worst = 0.0f64;
        for e in 0..n {
            let orig = model.params.get(slot).values[e];
            model.params.get_mut(slot).values[e] = orig + FD_STEP;
            let up = model_loss_only(&model, &ex)?;
            model.params.get_mut(slot).values[e] = orig - FD_STEP;
            let down = model_loss_only(&model, &ex)?;
            model.params.get_mut(slot).values[e] = orig;
            let fd = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(grads[slot][e], fd));
        }
        entries.push(CheckEntry { name, max_rel_err: worst, pass: worst <= REL_TOL });
    }
    Ok(CheckReport { entries })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_op_adjoints_match_finite_differences() {
        let report = check_ops_seeded(20, None).unwrap();
        assert!(report.pass(), "\n{}", report.render());
    }

    #[test]
    fn injected_fault_is_detected_and_named() {
        let report = check_ops_seeded(3, Some("matmul")).unwrap();
        assert!(!report.pass());
        let failing: Vec<&str> = report
            .entries
            .iter()
            .filter(|e| !e.pass)
            .map(|e| e.name.as_str())
            .collect();
        assert!(failing.contains(&"matmul"), "failing set: {failing:?}");
    }

    #[test]
    fn matmul_gradient_tight_tolerance() {
        // 3x4 · 4x2 at 64-bit should agree with central differences to 1e-6.
        let mut worst = 0.0f64;
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = (rand_vec(&mut rng, 12), vec![3, 4]);
            let b = (rand_vec(&mut rng, 8), vec![4, 2]);
            let proj_rng = ChaCha8Rng::seed_from_u64(seed + 1000);
            let probe = Probe {
                inputs: vec![a, b],
                build: Box::new(move |t: &mut Tape<f64>, ids: &[TensorId]| {
                    let c = t.matmul(ids[0], ids[1])?;
                    let mut r = proj_rng.clone();
                    project(t, c, &mut r)
                }),
            };
            worst = worst.max(run_probe(&probe, None).unwrap());
        }
        assert!(worst <= 1e-6, "max rel err {worst}");
    }

    #[test]
    fn softmax_jacobian_tight_tolerance() {
        // Full Jacobian of a length-5 softmax vs finite differences at 1e-6.
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let x = rand_vec(&mut rng, 5);
        for i in 0..5 {
            let mut tape = Tape::new();
            let xid = tape.leaf(x.clone(), vec![5], true).unwrap();
            let s = tape.softmax(xid, 0).unwrap();
            let row = tape.reshape(s, vec![1, 5]).unwrap();
            let yi = tape.pick_per_row(row, vec![i]).unwrap();
            let loss = tape.sum(yi);
            tape.backward(loss).unwrap();
            let analytic = tape.grad(xid).unwrap().to_vec();
            for j in 0..5 {
                let eval = |xs: &[f64]| {
                    let mut t2: Tape<f64> = Tape::new();
                    let id = t2.leaf(xs.to_vec(), vec![5], false).unwrap();
                    let sm = t2.softmax(id, 0).unwrap();
                    t2.values(sm)[i]
                };
                let mut up = x.clone();
                up[j] += FD_STEP;
                let mut down = x.clone();
                down[j] -= FD_STEP;
                let fd = (eval(&up) - eval(&down)) / (2.0 * FD_STEP);
                assert!(
                    rel_err(analytic[j], fd) <= 1e-6,
                    "J[{i},{j}] analytic {} vs fd {fd}",
                    analytic[j]
                );
            }
        }
    }
}
