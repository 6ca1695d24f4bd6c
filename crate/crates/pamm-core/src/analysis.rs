//! Mechanism analyses over trained models and datasets: the pair-motif
//! frequency histogram, gate/affine usage statistics, and per-motif
//! force-error deltas between two models.

use std::collections::BTreeMap;

use crate::config::ExperimentConfig;
use crate::data::LabeledStructure;
use crate::graph::build_neighbor_list;
use crate::model::{forces_node, forward_energy, prepare, ParamStore};
use crate::motif::quantize_distance;
use crate::util::fmt_f64;
use crate::{Error, Result};

/// One (Z_source, Z_target, distance-bin) cell of the pair-motif
/// histogram, with its share of all edges and the running share of the
/// rows so far (rows are ordered most-frequent first).
#[derive(Clone, Debug, PartialEq)]
pub struct MotifFreqRow {
    pub z_source: u32,
    pub z_target: u32,
    pub bin: usize,
    pub count: usize,
    pub fraction: f64,
    pub cumulative: f64,
}

pub fn motif_freq_csv_header() -> &'static str {
    "z_source,z_target,bin,count,fraction,cumulative"
}

impl MotifFreqRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.z_source,
            self.z_target,
            self.bin,
            self.count,
            fmt_f64(self.fraction),
            fmt_f64(self.cumulative)
        )
    }
}

/// Histogram of quantized pair motifs over every directed edge of every
/// structure, most frequent first (key order breaks ties for
/// reproducibility).
pub fn motif_frequency(
    cfg: &ExperimentConfig,
    data: &[LabeledStructure],
) -> Result<Vec<MotifFreqRow>> {
    if data.is_empty() {
        return Err(Error::Data("motif frequency over an empty dataset".into()));
    }
    let mut counts: BTreeMap<(u32, u32, usize), usize> = BTreeMap::new();
    let mut total = 0usize;
    for ls in data {
        let s = &ls.structure;
        let graph = build_neighbor_list(s, cfg.motif.r_max)?;
        for e in &graph.edges {
            let bin = quantize_distance(e.r, &cfg.motif)?;
            *counts.entry((s.species[e.source], s.species[e.target], bin)).or_default() += 1;
            total += 1;
        }
    }
    let mut cells: Vec<((u32, u32, usize), usize)> = counts.into_iter().collect();
    cells.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut rows = Vec::with_capacity(cells.len());
    let mut running = 0usize;
    for ((zj, zi, bin), count) in cells {
        running += count;
        rows.push(MotifFreqRow {
            z_source: zj,
            z_target: zi,
            bin,
            count,
            fraction: count as f64 / total as f64,
            cumulative: running as f64 / total as f64,
        });
    }
    Ok(rows)
}

/// Share of all edges covered by the most frequent 10% of observed keys
/// (at least one key). The generated data is expected to be heavy-headed
/// here; the acceptance suite checks ≥ 0.5.
pub fn head_coverage(rows: &[MotifFreqRow]) -> f64 {
    let head = rows.len().div_ceil(10);
    rows[..head].iter().map(|r| r.fraction).sum()
}

/// One gate-usage statistic: the mean deviation of a modulation from
/// identity, grouped by family (and per layer for affine deltas).
#[derive(Clone, Debug, PartialEq)]
pub struct GateUsageRow {
    pub statistic: String,
    pub family: String,
    /// Layer index for per-layer statistics, "-" for the global gate
    pub layer: String,
    pub value: f64,
}

pub fn gate_usage_csv_header() -> &'static str {
    "statistic,family,layer,value"
}

impl GateUsageRow {
    pub fn csv_line(&self) -> String {
        format!("{},{},{},{}", self.statistic, self.family, self.layer, fmt_f64(self.value))
    }
}

/// Mean |g−1| of the scalar gate per family, plus per-layer mean |Δg| of
/// the affine modulation when present. Rejects variants with neither
/// mechanism — there is nothing to measure on a plain baseline.
pub fn gate_usage(
    cfg: &ExperimentConfig,
    params: &ParamStore,
    data: &[LabeledStructure],
) -> Result<Vec<GateUsageRow>> {
    let flags = cfg.variant.flags();
    if !flags.gate && !flags.affine {
        return Err(Error::Config(format!(
            "variant '{}' has no gate or affine modulation to analyze",
            cfg.variant.name()
        )));
    }
    if data.is_empty() {
        return Err(Error::Data("gate usage over an empty dataset".into()));
    }
    // family -> (Σ|g−1|, count); layer stats keyed by (family, layer)
    let mut gate_cells: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    let mut affine_cells: BTreeMap<(String, usize), (f64, usize)> = BTreeMap::new();
    for ls in data {
        let prep = prepare(&ls.structure, cfg)?;
        let fw = forward_energy(params, &prep, cfg)?;
        let keys = ["overall".to_string(), ls.structure.family.clone()];
        if let Some(g) = fw.gate_g {
            let v = fw.tape.value(g);
            let sum: f64 = v.data.iter().map(|x| (x - 1.0).abs()).sum();
            for key in &keys {
                let cell = gate_cells.entry(key.clone()).or_default();
                cell.0 += sum;
                cell.1 += v.data.len();
            }
        }
        for (layer, &dg) in fw.affine_delta_g.iter().enumerate() {
            let v = fw.tape.value(dg);
            let sum: f64 = v.data.iter().map(|x| x.abs()).sum();
            for key in &keys {
                let cell = affine_cells.entry((key.clone(), layer)).or_default();
                cell.0 += sum;
                cell.1 += v.data.len();
            }
        }
    }
    let mut rows = Vec::new();
    for (family, (sum, n)) in gate_cells {
        rows.push(GateUsageRow {
            statistic: "gate_abs_dev".into(),
            family,
            layer: "-".into(),
            value: sum / n as f64,
        });
    }
    for ((family, layer), (sum, n)) in affine_cells {
        rows.push(GateUsageRow {
            statistic: "affine_delta_abs".into(),
            family,
            layer: layer.to_string(),
            value: sum / n as f64,
        });
    }
    Ok(rows)
}

/// Per-motif force-error change between two models, joined with the
/// motif's frequency. Each directed edge attributes the force error of
/// its target atom to the edge's pair key; `delta` is mean(model A error
/// − model B error) over those attributions.
#[derive(Clone, Debug, PartialEq)]
pub struct MotifDeltaRow {
    pub z_source: u32,
    pub z_target: u32,
    pub bin: usize,
    pub count: usize,
    pub delta: f64,
}

pub fn motif_delta_csv_header() -> &'static str {
    "z_source,z_target,bin,count,delta"
}

impl MotifDeltaRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.z_source,
            self.z_target,
            self.bin,
            self.count,
            fmt_f64(self.delta)
        )
    }
}

/// Per-atom force-error norms of one model on one structure.
fn force_error_norms(
    cfg: &ExperimentConfig,
    params: &ParamStore,
    ls: &LabeledStructure,
) -> Result<Vec<f64>> {
    let prep = prepare(&ls.structure, cfg)?;
    let mut fw = forward_energy(params, &prep, cfg)?;
    let f_pred = forces_node(&mut fw, &prep);
    let v = fw.tape.value(f_pred);
    Ok((0..prep.n_atoms())
        .map(|a| {
            let mut sq = 0.0;
            for c in 0..3 {
                let d = v.at(a, c) - ls.forces[a][c];
                sq += d * d;
            }
            sq.sqrt()
        })
        .collect())
}

/// Force-error delta (model A − model B) per pair motif. Both models run
/// on the same structures; the edge geometry (and hence keys) comes from
/// model A's quantizer config.
pub fn motif_delta(
    cfg_a: &ExperimentConfig,
    params_a: &ParamStore,
    cfg_b: &ExperimentConfig,
    params_b: &ParamStore,
    data: &[LabeledStructure],
) -> Result<Vec<MotifDeltaRow>> {
    if data.is_empty() {
        return Err(Error::Data("motif delta over an empty dataset".into()));
    }
    let mut cells: BTreeMap<(u32, u32, usize), (f64, usize)> = BTreeMap::new();
    for ls in data {
        let err_a = force_error_norms(cfg_a, params_a, ls)?;
        let err_b = force_error_norms(cfg_b, params_b, ls)?;
        let s = &ls.structure;
        let graph = build_neighbor_list(s, cfg_a.motif.r_max)?;
        for e in &graph.edges {
            let bin = quantize_distance(e.r, &cfg_a.motif)?;
            let cell = cells
                .entry((s.species[e.source], s.species[e.target], bin))
                .or_default();
            cell.0 += err_a[e.target] - err_b[e.target];
            cell.1 += 1;
        }
    }
    let mut cells: Vec<_> = cells.into_iter().collect();
    cells.sort_by(|a, b| b.1 .1.cmp(&a.1 .1).then(a.0.cmp(&b.0)));
    Ok(cells
        .into_iter()
        .map(|((zj, zi, bin), (sum, count))| MotifDeltaRow {
            z_source: zj,
            z_target: zi,
            bin,
            count,
            delta: sum / count as f64,
        })
        .collect())
}
