//! Training harness: Adam with a reduced-rate group for the memory
//! tables and gate, stateless batch order, MAE losses on per-atom energy
//! and forces, periodic evaluation, and restartable checkpoints.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use crate::config::ExperimentConfig;
use crate::data::LabeledStructure;
use crate::model::{
    check_finite, forces_node, forward_energy, prepare, reduced_lr_group, ParamStore, Prepared,
};
use crate::tape::Tensor;
use crate::util::{fmt_f64, mix64, parse_f64, seeded_permutation};
use crate::{Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Everything the optimizer owns: parameters, first/second Adam moments
/// (aligned with the parameter store order), and the step counter.
pub struct TrainerState {
    pub params: ParamStore,
    pub adam_m: Vec<Tensor>,
    pub adam_v: Vec<Tensor>,
    pub step: usize,
}

impl TrainerState {
    pub fn init(cfg: &ExperimentConfig) -> Result<TrainerState> {
        let params = ParamStore::init(cfg)?;
        let zeros: Vec<Tensor> =
            params.iter().map(|(_, t)| Tensor::zeros(t.rows, t.cols)).collect();
        Ok(TrainerState { params, adam_m: zeros.clone(), adam_v: zeros, step: 0 })
    }
}

/// A structure with its graph preprocessing and labels in tape-ready form.
pub struct Example {
    pub prep: Prepared,
    pub energy: f64,
    pub forces: Tensor,
}

pub fn prepare_examples(
    cfg: &ExperimentConfig,
    data: &[LabeledStructure],
) -> Result<Vec<Example>> {
    data.iter()
        .map(|ls| {
            let prep = prepare(&ls.structure, cfg)?;
            let forces =
                Tensor::from_vec(ls.forces.len(), 3, ls.forces.iter().flatten().copied().collect());
            Ok(Example { prep, energy: ls.energy, forces })
        })
        .collect()
}

pub fn steps_per_epoch(n: usize, batch_size: usize) -> usize {
    n.div_ceil(batch_size)
}

/// Batch membership is a pure function of (seed, step): each epoch draws
/// a fresh seeded permutation and the final short batch is kept, so a
/// resumed run sees exactly the data order of an uninterrupted one.
pub fn batch_for_step(seed: u64, n: usize, batch_size: usize, step: usize) -> Vec<usize> {
    let spe = steps_per_epoch(n, batch_size);
    let epoch = step / spe;
    let slot = step % spe;
    let perm = seeded_permutation(mix64(seed, &[epoch as u64]), n);
    let start = slot * batch_size;
    let end = (start + batch_size).min(n);
    perm[start..end].to_vec()
}

/// Loss over one batch: w_E · mean_s |ΔE_s|/N_s + w_F · Σ|ΔF| / (3 N_tot).
/// When `grads` is given, per-parameter gradients are accumulated into it
/// in store order (forces differentiate through the distance gradient, so
/// this is a second-order pass).
pub fn batch_loss(
    cfg: &ExperimentConfig,
    params: &ParamStore,
    batch: &[&Example],
    mut grads: Option<&mut Vec<Tensor>>,
) -> Result<f64> {
    assert!(!batch.is_empty(), "empty batch");
    let b = batch.len() as f64;
    let n_tot: usize = batch.iter().map(|ex| ex.prep.n_atoms()).sum();
    let mut total = 0.0;
    for ex in batch {
        let mut fw = forward_energy(params, &ex.prep, cfg)?;
        let f_pred = forces_node(&mut fw, &ex.prep);
        let t = &mut fw.tape;
        let de = t.add_scalar(fw.energy, -ex.energy);
        let ae = t.abs(de);
        let e_term = t.mul_scalar(ae, cfg.train.w_energy / (b * ex.prep.n_atoms() as f64));
        let f_ref = t.constant(ex.forces.clone());
        let df = t.sub(f_pred, f_ref);
        let adf = t.abs(df);
        let sdf = t.sum_all(adf);
        let f_term = t.mul_scalar(sdf, cfg.train.w_force / (3.0 * n_tot as f64));
        let loss = t.add(e_term, f_term);
        let value = t.value(loss).item();
        if !value.is_finite() {
            check_finite(&fw, "loss evaluation")?;
            return Err(Error::Numerical(format!(
                "non-finite loss on structure '{}'",
                ex.prep.structure.id
            )));
        }
        total += value;
        if let Some(acc) = grads.as_deref_mut() {
            let wrt: Vec<_> = fw.param_nodes.iter().map(|(_, id)| *id).collect();
            let gs = fw.tape.backward(loss, &wrt);
            for (slot, g) in acc.iter_mut().zip(gs) {
                if let Some(gid) = g {
                    let gv = fw.tape.value(gid);
                    for (dst, src) in slot.data.iter_mut().zip(&gv.data) {
                        *dst += src;
                    }
                }
            }
        }
    }
    Ok(total)
}

fn reduced_group_indices(cfg: &ExperimentConfig, params: &ParamStore) -> HashSet<usize> {
    let names: HashSet<&str> = reduced_lr_group(cfg).into_iter().collect();
    params
        .names()
        .iter()
        .enumerate()
        .filter(|(_, n)| names.contains(n.as_str()))
        .map(|(i, _)| i)
        .collect()
}

fn adam_update_array(
    theta: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: usize,
    lr: f64,
) {
    let bc1 = 1.0 - ADAM_BETA1.powi(t as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(t as i32);
    for i in 0..theta.len() {
        m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * grad[i];
        v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * grad[i] * grad[i];
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        theta[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
}

/// One Adam update over all parameters. The memory-table / gate /
/// control-branch group steps at base_lr · lr_scale, everything else at
/// base_lr. Increments the step counter.
pub fn adam_step(cfg: &ExperimentConfig, state: &mut TrainerState, grads: &[Tensor]) {
    assert_eq!(grads.len(), state.adam_m.len(), "gradient/parameter count mismatch");
    let reduced = reduced_group_indices(cfg, &state.params);
    state.step += 1;
    let t = state.step;
    let names: Vec<String> = state.params.names().to_vec();
    for (i, name) in names.iter().enumerate() {
        let lr = if reduced.contains(&i) {
            cfg.train.base_lr * cfg.train.lr_scale
        } else {
            cfg.train.base_lr
        };
        let theta = state.params.get_mut(name);
        adam_update_array(
            &mut theta.data,
            &grads[i].data,
            &mut state.adam_m[i].data,
            &mut state.adam_v[i].data,
            t,
            lr,
        );
    }
}

/// One metrics observation: a (split, family) cell at a given step.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub split: String,
    pub family: String,
    pub energy_mae_per_atom: f64,
    pub force_mae: f64,
}

pub fn metrics_csv_header() -> &'static str {
    "step,split,family,energy_mae_per_atom,force_mae,variant,seed"
}

impl MetricsRow {
    pub fn csv_line(&self, variant: &str, seed: u64) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.step,
            self.split,
            self.family,
            fmt_f64(self.energy_mae_per_atom),
            fmt_f64(self.force_mae),
            variant,
            seed
        )
    }
}

/// Energy/force MAE over a split, overall and broken out per family.
/// Energy error is per-atom and averaged per structure; force error
/// averages absolute components over all atoms.
pub fn evaluate(
    cfg: &ExperimentConfig,
    params: &ParamStore,
    examples: &[Example],
    indices: &[usize],
    step: usize,
    split: &str,
) -> Result<Vec<MetricsRow>> {
    if indices.is_empty() {
        return Err(Error::Data(format!("evaluation split '{split}' is empty")));
    }
    // family -> (Σ per-structure energy err, n structures, Σ|Δf|, force comps)
    let mut cells: BTreeMap<String, (f64, usize, f64, usize)> = BTreeMap::new();
    for &i in indices {
        let ex = &examples[i];
        let mut fw = forward_energy(params, &ex.prep, cfg)?;
        let f_pred = forces_node(&mut fw, &ex.prep);
        check_finite(&fw, format!("evaluation of '{}'", ex.prep.structure.id).as_str())?;
        let e_err = (fw.tape.value(fw.energy).item() - ex.energy).abs()
            / ex.prep.n_atoms() as f64;
        let f_val = fw.tape.value(f_pred);
        let f_abs: f64 =
            f_val.data.iter().zip(&ex.forces.data).map(|(a, b)| (a - b).abs()).sum();
        let comps = 3 * ex.prep.n_atoms();
        for key in ["overall", ex.prep.structure.family.as_str()] {
            let cell = cells.entry(key.to_string()).or_insert((0.0, 0, 0.0, 0));
            cell.0 += e_err;
            cell.1 += 1;
            cell.2 += f_abs;
            cell.3 += comps;
        }
    }
    let mut rows = Vec::new();
    // "overall" first, then families alphabetically
    let (overall, rest): (Vec<_>, Vec<_>) =
        cells.into_iter().partition(|(k, _)| k == "overall");
    for (family, (e_sum, n, f_sum, comps)) in overall.into_iter().chain(rest) {
        rows.push(MetricsRow {
            step,
            split: split.to_string(),
            family,
            energy_mae_per_atom: e_sum / n as f64,
            force_mae: f_sum / comps as f64,
        });
    }
    Ok(rows)
}

/// Run (or continue) training to `cfg.train.steps`. Evaluation and a
/// checkpoint callback fire at step 0 of a fresh run, every
/// `eval_interval` updates, and at the final step; both run on the val
/// and test splits. A non-finite loss or parameter aborts with a
/// checkpoint dump so the failure can be inspected. Returns per-step
/// training losses.
pub fn train_loop(
    cfg: &ExperimentConfig,
    state: &mut TrainerState,
    examples: &[Example],
    train_idx: &[usize],
    val_idx: &[usize],
    test_idx: &[usize],
    on_eval: &mut dyn FnMut(usize, &[MetricsRow]) -> Result<()>,
    on_checkpoint: &mut dyn FnMut(usize, &TrainerState) -> Result<()>,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if train_idx.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    let run_eval = |params: &ParamStore,
                    step: usize,
                    on_eval: &mut dyn FnMut(usize, &[MetricsRow]) -> Result<()>|
     -> Result<()> {
        let mut rows = evaluate(cfg, params, examples, val_idx, step, "val")?;
        rows.extend(evaluate(cfg, params, examples, test_idx, step, "test")?);
        on_eval(step, &rows)
    };
    if state.step == 0 {
        run_eval(&state.params, 0, on_eval)?;
        on_checkpoint(0, state)?;
    }
    let mut losses = Vec::new();
    let mut grads: Vec<Tensor> =
        state.params.iter().map(|(_, t)| Tensor::zeros(t.rows, t.cols)).collect();
    while state.step < cfg.train.steps {
        let batch_local = batch_for_step(
            cfg.train.seed,
            train_idx.len(),
            cfg.train.batch_size,
            state.step,
        );
        let batch: Vec<&Example> = batch_local.iter().map(|&i| &examples[train_idx[i]]).collect();
        for g in grads.iter_mut() {
            g.data.iter_mut().for_each(|x| *x = 0.0);
        }
        let loss = match batch_loss(cfg, &state.params, &batch, Some(&mut grads)) {
            Ok(l) => l,
            Err(Error::Numerical(msg)) => {
                on_checkpoint(state.step, state)?;
                return Err(Error::Numerical(format!(
                    "training diverged at step {}: {msg}",
                    state.step
                )));
            }
            Err(e) => return Err(e),
        };
        adam_step(cfg, state, &grads);
        losses.push(loss);
        if let Some((name, _)) = state
            .params
            .iter()
            .find(|(_, t)| t.data.iter().any(|v| !v.is_finite()))
        {
            let name = name.to_string();
            on_checkpoint(state.step, state)?;
            return Err(Error::Numerical(format!(
                "training diverged at step {}: parameter '{name}' became non-finite",
                state.step
            )));
        }
        if state.step % cfg.train.eval_interval == 0 || state.step == cfg.train.steps {
            run_eval(&state.params, state.step, on_eval)?;
            on_checkpoint(state.step, state)?;
        }
    }
    Ok(losses)
}

// --- checkpoints -------------------------------------------------------------

const CHECKPOINT_HEADER: &str = "pamm-checkpoint v1";

/// Text checkpoint: version line, step, the full canonical config, then
/// one line per array (parameters and both Adam moments) with exact
/// round-trip reals. Written atomically via a temp file.
pub fn save_checkpoint(path: &Path, cfg: &ExperimentConfig, state: &TrainerState) -> Result<()> {
    let mut out = String::new();
    out.push_str(CHECKPOINT_HEADER);
    out.push('\n');
    writeln!(out, "step={}", state.step).expect("string write");
    out.push_str("config-begin\n");
    out.push_str(&cfg.canonical_text());
    out.push_str("config-end\n");
    let mut arrays: Vec<(String, &Tensor)> = Vec::new();
    for (i, (name, tensor)) in state.params.iter().enumerate() {
        arrays.push((format!("param.{name}"), tensor));
        arrays.push((format!("adam_m.{name}"), &state.adam_m[i]));
        arrays.push((format!("adam_v.{name}"), &state.adam_v[i]));
    }
    for (name, tensor) in arrays {
        write!(out, "array {name} {} {}", tensor.rows, tensor.cols).expect("string write");
        for (i, v) in tensor.data.iter().enumerate() {
            out.push(if i == 0 { ' ' } else { ',' });
            out.push_str(&fmt_f64(*v));
        }
        out.push('\n');
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, out)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Load a checkpoint into a fresh state. The embedded config decides the
/// parameter census; every array must be present with its exact shape.
pub fn load_checkpoint(path: &Path) -> Result<(ExperimentConfig, TrainerState)> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(l) if l == CHECKPOINT_HEADER => {}
        Some(l) => {
            return Err(Error::Data(format!(
                "unsupported checkpoint header '{l}', expected '{CHECKPOINT_HEADER}'"
            )))
        }
        None => return Err(Error::Data("empty checkpoint file".into())),
    }
    let step_line = lines.next().unwrap_or_default();
    let step: usize = step_line
        .strip_prefix("step=")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Data(format!("bad checkpoint step line '{step_line}'")))?;
    if lines.next() != Some("config-begin") {
        return Err(Error::Data("checkpoint missing config-begin".into()));
    }
    let mut cfg_text = String::new();
    let mut closed = false;
    for line in lines.by_ref() {
        if line == "config-end" {
            closed = true;
            break;
        }
        cfg_text.push_str(line);
        cfg_text.push('\n');
    }
    if !closed {
        return Err(Error::Data("checkpoint missing config-end".into()));
    }
    let cfg = ExperimentConfig::from_text(&cfg_text)?;
    cfg.validate()?;

    let mut arrays: BTreeMap<String, Tensor> = BTreeMap::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.splitn(5, ' ');
        let (tag, name, rows, cols, csv) = (
            parts.next().unwrap_or_default(),
            parts.next().unwrap_or_default(),
            parts.next().unwrap_or_default(),
            parts.next().unwrap_or_default(),
            parts.next().unwrap_or_default(),
        );
        if tag != "array" {
            return Err(Error::Data(format!("unexpected checkpoint line '{line}'")));
        }
        let rows: usize = rows
            .parse()
            .map_err(|_| Error::Data(format!("bad shape in checkpoint array '{name}'")))?;
        let cols: usize = cols
            .parse()
            .map_err(|_| Error::Data(format!("bad shape in checkpoint array '{name}'")))?;
        let data: Vec<f64> = csv
            .split(',')
            .map(|t| {
                parse_f64(t).ok_or_else(|| {
                    Error::Data(format!("bad real '{t}' in checkpoint array '{name}'"))
                })
            })
            .collect::<Result<_>>()?;
        if data.len() != rows * cols {
            return Err(Error::Data(format!(
                "checkpoint array '{name}' holds {} values for shape {rows}x{cols}",
                data.len()
            )));
        }
        if arrays.insert(name.to_string(), Tensor::from_vec(rows, cols, data)).is_some() {
            return Err(Error::Data(format!("duplicate checkpoint array '{name}'")));
        }
    }

    let mut state = TrainerState::init(&cfg)?;
    state.step = step;
    let names: Vec<String> = state.params.names().to_vec();
    for (i, name) in names.iter().enumerate() {
        for (prefix, slot) in [
            ("param", true),
            ("adam_m", false),
            ("adam_v", false),
        ] {
            let key = format!("{prefix}.{name}");
            let found = arrays.remove(&key).ok_or_else(|| {
                Error::Data(format!("checkpoint is missing array '{key}'"))
            })?;
            let expect = if slot {
                state.params.get(name)
            } else if prefix == "adam_m" {
                &state.adam_m[i]
            } else {
                &state.adam_v[i]
            };
            if (found.rows, found.cols) != (expect.rows, expect.cols) {
                return Err(Error::Data(format!(
                    "checkpoint array '{key}' has shape {}x{}, expected {}x{}",
                    found.rows, found.cols, expect.rows, expect.cols
                )));
            }
            if slot {
                *state.params.get_mut(name) = found;
            } else if prefix == "adam_m" {
                state.adam_m[i] = found;
            } else {
                state.adam_v[i] = found;
            }
        }
    }
    if let Some(extra) = arrays.keys().next() {
        return Err(Error::Data(format!(
            "checkpoint array '{extra}' does not belong to this configuration"
        )));
    }
    Ok((cfg, state))
}

/// A checkpoint may only continue a run with the identical configuration;
/// the error names the first differing line (e.g. the variant).
pub fn check_compatible(expected: &ExperimentConfig, loaded: &ExperimentConfig) -> Result<()> {
    let a = expected.canonical_text();
    let b = loaded.canonical_text();
    if a == b {
        return Ok(());
    }
    for (ea, eb) in a.lines().zip(b.lines()) {
        if ea != eb {
            return Err(Error::Data(format!(
                "checkpoint configuration mismatch: expected '{ea}', found '{eb}'"
            )));
        }
    }
    Err(Error::Data("checkpoint configuration mismatch in line count".into()))
}
