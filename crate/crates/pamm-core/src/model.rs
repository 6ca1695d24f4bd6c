//! The host model: a small smooth invariant message-passing network over
//! the periodic neighbor graph. Produces total energy; forces come from
//! reverse-mode differentiation with respect to the per-edge distances
//! (the only geometry input the smooth paths see — bucket indices are
//! piecewise constant and carry no gradient).

use std::collections::HashMap;
use std::sync::Arc;

use rand_distr::{Distribution, Normal};

use crate::config::ExperimentConfig;
use crate::fusion::{
    self, AffineNodes, EdgeBaseFeatures, EdgeInputLayout, MlpControlNodes,
};
use crate::graph::{build_neighbor_list, enumerate_triplets, NeighborGraph, Structure, TripletSet};
use crate::motif::{self, BucketAssignment};
use crate::tape::{NodeId, Tape, Tensor};
use crate::util::rng_for;
use crate::{Error, Result};

/// Hidden width of each layer's message MLP.
pub const MSG_HIDDEN: usize = 32;
/// Hidden width of the per-atom readout MLP.
pub const READOUT_HIDDEN: usize = 16;
/// Standard deviation of the species embedding init.
const EMBED_INIT_SCALE: f64 = 0.5;
/// Standard deviation of the memory table init. Small: retrieved vectors
/// start as a mild perturbation of the edge input.
const TABLE_INIT_SCALE: f64 = 0.05;
/// Supported species range (H..Og), fixed table height.
pub const N_SPECIES: usize = 118;

/// Named parameter tensors in a canonical order.
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    /// Deterministic initialization. Each tensor draws from its own
    /// name-keyed stream, so two variants sharing a parameter name start
    /// from identical values regardless of what else they allocate.
    pub fn init(cfg: &ExperimentConfig) -> Result<ParamStore> {
        cfg.validate()?;
        let seed = cfg.train.seed;
        let spec = param_spec(cfg)?;
        let mut store =
            ParamStore { names: Vec::new(), tensors: Vec::new(), index: HashMap::new() };
        for p in spec {
            let t = match p.init {
                Init::Zeros => Tensor::zeros(p.rows, p.cols),
                Init::Normal(sd) => {
                    let mut rng = rng_for(seed, &p.name);
                    let dist = Normal::new(0.0, sd).expect("valid std dev");
                    Tensor::from_vec(
                        p.rows,
                        p.cols,
                        (0..p.rows * p.cols).map(|_| dist.sample(&mut rng)).collect(),
                    )
                }
            };
            store.insert(p.name, t);
        }
        Ok(store)
    }

    fn insert(&mut self, name: String, t: Tensor) {
        self.index.insert(name.clone(), self.tensors.len());
        self.names.push(name);
        self.tensors.push(t);
    }

    pub fn get(&self, name: &str) -> &Tensor {
        &self.tensors[*self.index.get(name).unwrap_or_else(|| panic!("no parameter '{name}'"))]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        let i = *self.index.get(name).unwrap_or_else(|| panic!("no parameter '{name}'"));
        &mut self.tensors[i]
    }

    pub fn try_get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(move |n| (n.as_str(), self.get(n)))
    }

    pub fn total_len(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }
}

enum Init {
    Zeros,
    Normal(f64),
}

struct ParamSpec {
    name: String,
    rows: usize,
    cols: usize,
    init: Init,
}

fn normal_fan_in(fan_in: usize) -> Init {
    Init::Normal(1.0 / (fan_in as f64).sqrt())
}

/// Hidden width and achieved count of the parameter-matched control
/// branch for this configuration.
pub fn control_branch_shape(cfg: &ExperimentConfig) -> Result<(usize, usize)> {
    let in_dim = 2 * N_SPECIES + cfg.host.n_rb;
    let out_dim = 2 * cfg.motif.d;
    let target = motif::structured_param_target(&cfg.motif);
    fusion::match_mlp_params(in_dim, out_dim, target)
}

fn param_spec(cfg: &ExperimentConfig) -> Result<Vec<ParamSpec>> {
    let f = cfg.variant.flags();
    let layout = edge_layout(cfg);
    let width = layout.width();
    let (d_n, d_e, d_sp) = (cfg.host.d_n, cfg.host.d_e, cfg.host.d_sp);
    let mut spec = Vec::new();
    let mut push = |name: String, rows: usize, cols: usize, init: Init| {
        spec.push(ParamSpec { name, rows, cols, init });
    };

    push("species.embed".into(), N_SPECIES, d_sp, Init::Normal(EMBED_INIT_SCALE));
    push("node.init.w".into(), d_n, d_sp, normal_fan_in(d_sp));
    push("node.init.b".into(), 1, d_n, Init::Zeros);

    for l in 0..cfg.host.layers {
        push(format!("layer{l}.edge.w"), d_e, width, normal_fan_in(width));
        let msg_in = 2 * d_n + d_e;
        push(format!("layer{l}.msg.w1"), MSG_HIDDEN, msg_in, normal_fan_in(msg_in));
        push(format!("layer{l}.msg.b1"), 1, MSG_HIDDEN, Init::Zeros);
        push(format!("layer{l}.msg.w2"), d_n, MSG_HIDDEN, normal_fan_in(MSG_HIDDEN));
        push(format!("layer{l}.msg.b2"), 1, d_n, Init::Zeros);
    }

    push("readout.w1".into(), READOUT_HIDDEN, d_n, normal_fan_in(d_n));
    push("readout.b1".into(), 1, READOUT_HIDDEN, Init::Zeros);
    push("readout.w2".into(), 1, READOUT_HIDDEN, normal_fan_in(READOUT_HIDDEN));
    push("readout.b2".into(), 1, 1, Init::Zeros);

    if f.gate {
        push("gate.wq".into(), cfg.gate.d_gate, width, normal_fan_in(width));
        push("gate.wk".into(), cfg.gate.d_gate, width, normal_fan_in(width));
    }
    if f.pair {
        push("memory.pair".into(), cfg.motif.h * cfg.motif.m_pair, cfg.motif.d, Init::Normal(TABLE_INIT_SCALE));
    }
    if f.triplet {
        push("memory.tri".into(), cfg.motif.h * cfg.motif.m_tri, cfg.motif.d, Init::Normal(TABLE_INIT_SCALE));
    }
    if f.affine {
        let n_mlps = if cfg.affine.shared { 1 } else { cfg.host.layers };
        let two_d = 2 * cfg.motif.d;
        for l in 0..n_mlps {
            push(format!("affine.layer{l}.w1"), cfg.affine.hidden, two_d, normal_fan_in(two_d));
            push(format!("affine.layer{l}.b1"), 1, cfg.affine.hidden, Init::Zeros);
            push(format!("affine.layer{l}.wg"), d_e, cfg.affine.hidden, Init::Zeros);
            push(format!("affine.layer{l}.wb"), d_e, cfg.affine.hidden, Init::Zeros);
        }
    }
    if f.mlp_control {
        let (w, _count) = control_branch_shape(cfg)?;
        let in_dim = 2 * N_SPECIES + cfg.host.n_rb;
        let out_dim = 2 * cfg.motif.d;
        push("mlpctl.w1".into(), w, in_dim, normal_fan_in(in_dim));
        push("mlpctl.b1".into(), 1, w, Init::Zeros);
        push("mlpctl.w2".into(), out_dim, w, normal_fan_in(w));
        push("mlpctl.b2".into(), 1, out_dim, Init::Zeros);
    }
    Ok(spec)
}

/// Parameter names in the reduced-learning-rate group: the memory tables,
/// the gate projections, and — because it replaces the tables — the
/// control branch.
pub fn reduced_lr_group(cfg: &ExperimentConfig) -> Vec<&'static str> {
    let f = cfg.variant.flags();
    let mut names = Vec::new();
    if f.pair {
        names.push("memory.pair");
    }
    if f.triplet {
        names.push("memory.tri");
    }
    if f.gate {
        names.push("gate.wq");
        names.push("gate.wk");
    }
    if f.mlp_control {
        names.extend(["mlpctl.w1", "mlpctl.b1", "mlpctl.w2", "mlpctl.b2"]);
    }
    names
}

pub fn edge_layout(cfg: &ExperimentConfig) -> EdgeInputLayout {
    EdgeInputLayout { n_rb: cfg.host.n_rb, d_sp: cfg.host.d_sp, d_mem: cfg.motif.d }
}

/// Everything derivable from geometry alone, computed once per structure
/// and reused across training steps: neighbor graph, triplets, bucket
/// assignments, index vectors and constants for the tape.
pub struct Prepared {
    pub structure: Structure,
    pub graph: NeighborGraph,
    pub triplets: TripletSet,
    pub buckets: BucketAssignment,
    /// per-edge source / target atom indices
    pub src_ids: Arc<Vec<usize>>,
    pub tgt_ids: Arc<Vec<usize>>,
    /// per-atom species row (Z−1) into the embedding table
    pub z_rows: Arc<Vec<usize>>,
    /// E×3 unit vectors target→source-image
    pub unit: Tensor,
    /// E×1 distances; the differentiable geometry input
    pub r: Tensor,
    /// per-triplet parent edge index
    pub tri_edge: Arc<Vec<usize>>,
    /// per-edge 1/n_triplets (0 for edges with none)
    pub inv_tri_count: Arc<Vec<f64>>,
    /// per-atom 1/√max(in-degree, 1) for the residual update
    pub inv_sqrt_deg: Arc<Vec<f64>>,
}

impl Prepared {
    pub fn n_atoms(&self) -> usize {
        self.structure.n_atoms()
    }

    pub fn n_edges(&self) -> usize {
        self.graph.edges.len()
    }
}

pub fn prepare(structure: &Structure, cfg: &ExperimentConfig) -> Result<Prepared> {
    let graph = build_neighbor_list(structure, cfg.host.cutoff)?;
    let triplets = enumerate_triplets(&graph);
    let buckets = motif::compute_buckets(structure, &graph, &triplets, &cfg.motif)?;

    let n_edges = graph.edges.len();
    let mut src = Vec::with_capacity(n_edges);
    let mut tgt = Vec::with_capacity(n_edges);
    let mut unit = Vec::with_capacity(3 * n_edges);
    let mut r = Vec::with_capacity(n_edges);
    for e in &graph.edges {
        src.push(e.source);
        tgt.push(e.target);
        unit.extend_from_slice(&e.u);
        r.push(e.r);
    }

    let tri_edge: Vec<usize> = triplets.triplets.iter().map(|t| t.edge).collect();
    let inv_tri_count: Vec<f64> = (0..n_edges)
        .map(|e| {
            let n = triplets.of_edge(e).len();
            if n == 0 {
                0.0
            } else {
                1.0 / n as f64
            }
        })
        .collect();

    let n = structure.n_atoms();
    let inv_sqrt_deg: Vec<f64> =
        (0..n).map(|i| 1.0 / (graph.in_degree(i).max(1) as f64).sqrt()).collect();
    let z_rows: Vec<usize> = structure.species.iter().map(|&z| z as usize - 1).collect();

    Ok(Prepared {
        structure: structure.clone(),
        graph,
        triplets,
        buckets,
        src_ids: Arc::new(src),
        tgt_ids: Arc::new(tgt),
        z_rows: Arc::new(z_rows),
        unit: Tensor::from_vec(n_edges, 3, unit),
        r: Tensor::from_vec(n_edges, 1, r),
        tri_edge: Arc::new(tri_edge),
        inv_tri_count: Arc::new(inv_tri_count),
        inv_sqrt_deg: Arc::new(inv_sqrt_deg),
    })
}

/// Gaussian radial basis under a smooth cosine cutoff envelope, built on
/// the tape so dφ/dr flows. Centers μ_n are equally spaced in (0, cutoff],
/// σ = cutoff/N_rb.
pub fn radial_basis(tape: &mut Tape, r: NodeId, n_rb: usize, cutoff: f64) -> NodeId {
    let n_edges = tape.value(r).rows;
    let sigma = cutoff / n_rb as f64;
    let mus: Vec<f64> = (0..n_rb).map(|k| (k + 1) as f64 * cutoff / n_rb as f64).collect();

    let r_wide = tape.broadcast_col(r, n_rb);
    let mu_row = tape.constant(Tensor::row(mus));
    let mu_wide = tape.broadcast_row(mu_row, n_edges);
    let diff = tape.sub(r_wide, mu_wide);
    let sq = tape.mul(diff, diff);
    let scaled = tape.mul_scalar(sq, -1.0 / (2.0 * sigma * sigma));
    let gauss = tape.exp(scaled);

    // f_cut(r) = ½(1 + cos(πr/cutoff))
    let arg = tape.mul_scalar(r, std::f64::consts::PI / cutoff);
    let c = tape.cos(arg);
    let half = tape.mul_scalar(c, 0.5);
    let env = tape.add_scalar(half, 0.5);
    let env_wide = tape.broadcast_col(env, n_rb);
    tape.mul(gauss, env_wide)
}

/// A completed forward pass: the tape plus handles to the nodes later
/// stages need (loss building, force extraction, mechanism analyses).
pub struct Forward {
    pub tape: Tape,
    /// 1×1 total energy
    pub energy: NodeId,
    /// N×1 per-atom energies
    pub per_atom: NodeId,
    /// E×1 distance leaf (differentiate against this for forces)
    pub r_leaf: NodeId,
    /// E×1 gate values, when the variant gates
    pub gate_g: Option<NodeId>,
    /// per-layer Δg head outputs (E×d_e), when the variant is affine
    pub affine_delta_g: Vec<NodeId>,
    /// leaf node of every parameter, keyed by name, in store order
    pub param_nodes: Vec<(String, NodeId)>,
    /// milestone labels for non-finite diagnostics
    named: Vec<(NodeId, String)>,
}

impl Forward {
    pub fn param_node(&self, name: &str) -> NodeId {
        self.param_nodes
            .iter()
            .find(|(n, _)| n == name)
            .unwrap_or_else(|| panic!("no parameter node '{name}'"))
            .1
    }
}

/// Build the full energy pipeline for one structure. Geometry enters as
/// the distance leaf plus constants; every smooth path (radial basis,
/// embeddings, lookup values, gate, affine, MLPs) is on the tape.
pub fn forward_energy(
    params: &ParamStore,
    prep: &Prepared,
    cfg: &ExperimentConfig,
) -> Result<Forward> {
    let flags = cfg.variant.flags();
    let layout = edge_layout(cfg);
    let n_atoms = prep.n_atoms();
    let n_edges = prep.n_edges();
    let d = cfg.motif.d;
    let h_hashes = cfg.motif.h;

    let mut tape = Tape::new();
    let mut named: Vec<(NodeId, String)> = Vec::new();

    // parameters as leaves, in store order
    let mut param_nodes = Vec::with_capacity(params.names().len());
    for (name, tensor) in params.iter() {
        let id = tape.leaf(tensor.clone());
        param_nodes.push((name.to_string(), id));
    }
    let node_of = |pn: &Vec<(String, NodeId)>, name: &str| -> NodeId {
        pn.iter().find(|(n, _)| n == name).unwrap_or_else(|| panic!("missing param {name}")).1
    };

    let r_leaf = tape.leaf(prep.r.clone());

    // --- base edge features -------------------------------------------
    let phi_r = radial_basis(&mut tape, r_leaf, cfg.host.n_rb, cfg.host.cutoff);
    named.push((phi_r, "phi_r".into()));

    let embed = node_of(&param_nodes, "species.embed");
    let atom_embed = tape.gather_rows(embed, prep.z_rows.clone());
    let phi_s = tape.gather_rows(atom_embed, prep.src_ids.clone());
    let phi_t = tape.gather_rows(atom_embed, prep.tgt_ids.clone());

    // --- memory retrieval ---------------------------------------------
    let e_pair = if flags.pair {
        let table = node_of(&param_nodes, "memory.pair");
        Some(lookup_mean(
            &mut tape,
            table,
            &prep.buckets.pair,
            n_edges,
            h_hashes,
            cfg.motif.m_pair,
        ))
    } else {
        None
    };
    let e_tri = if flags.triplet {
        let table = node_of(&param_nodes, "memory.tri");
        let n_tri = prep.tri_edge.len();
        let per_triplet = lookup_mean(
            &mut tape,
            table,
            &prep.buckets.tri,
            n_tri,
            h_hashes,
            cfg.motif.m_tri,
        );
        // per-edge mean over the edge's triplets; edges with none stay zero
        let summed = tape.scatter_add_rows(per_triplet, prep.tri_edge.clone(), n_edges);
        Some(tape.scale_rows(summed, prep.inv_tri_count.clone()))
    } else {
        None
    };

    let zero_mem = |tape: &mut Tape| tape.constant(Tensor::zeros(n_edges, d));
    let base = EdgeBaseFeatures { phi_r, phi_s, phi_t };
    let (x_edge, mem_concat) = if flags.mlp_control {
        let branch_params = MlpControlNodes {
            w1: node_of(&param_nodes, "mlpctl.w1"),
            b1: node_of(&param_nodes, "mlpctl.b1"),
            w2: node_of(&param_nodes, "mlpctl.w2"),
            b2: node_of(&param_nodes, "mlpctl.b2"),
        };
        let onehot_src = tape.constant(fusion::species_one_hot(
            &prep.src_ids.iter().map(|&i| prep.structure.species[i]).collect::<Vec<_>>(),
        ));
        let onehot_tgt = tape.constant(fusion::species_one_hot(
            &prep.tgt_ids.iter().map(|&i| prep.structure.species[i]).collect::<Vec<_>>(),
        ));
        let branch =
            fusion::apply_mlp_control(&mut tape, onehot_src, onehot_tgt, phi_r, &branch_params);
        (fusion::assemble_edge_input_with_branch(&mut tape, base, branch, layout), None)
    } else {
        let ep = e_pair.unwrap_or_else(|| zero_mem(&mut tape));
        let et = e_tri.unwrap_or_else(|| zero_mem(&mut tape));
        let mem = if flags.affine { Some(tape.concat_cols(&[ep, et])) } else { None };
        (fusion::assemble_edge_input(&mut tape, base, ep, et, layout), mem)
    };
    named.push((x_edge, "x_edge".into()));

    // --- gate ------------------------------------------------------------
    let (x_fused, gate_g) = if flags.gate {
        let out = fusion::apply_gate(
            &mut tape,
            x_edge,
            node_of(&param_nodes, "gate.wq"),
            node_of(&param_nodes, "gate.wk"),
            &cfg.gate,
        );
        named.push((out.gated, "gated_edge_input".into()));
        (out.gated, Some(out.g))
    } else {
        (x_edge, None)
    };

    // --- message passing -------------------------------------------------
    let init_w = node_of(&param_nodes, "node.init.w");
    let init_b = node_of(&param_nodes, "node.init.b");
    let init_wt = tape.transpose(init_w);
    let h0_pre = tape.matmul(atom_embed, init_wt);
    let init_b_wide = tape.broadcast_row(init_b, n_atoms);
    let mut h = tape.add(h0_pre, init_b_wide);
    named.push((h, "h0".into()));

    let mut affine_delta_g = Vec::new();
    for l in 0..cfg.host.layers {
        let we = node_of(&param_nodes, &format!("layer{l}.edge.w"));
        let we_t = tape.transpose(we);
        let mut e_l = tape.matmul(x_fused, we_t);

        if flags.affine {
            let mlp_l = if cfg.affine.shared { 0 } else { l };
            let nodes = AffineNodes {
                w1: node_of(&param_nodes, &format!("affine.layer{mlp_l}.w1")),
                b1: node_of(&param_nodes, &format!("affine.layer{mlp_l}.b1")),
                wg: node_of(&param_nodes, &format!("affine.layer{mlp_l}.wg")),
                wb: node_of(&param_nodes, &format!("affine.layer{mlp_l}.wb")),
            };
            let mem = mem_concat.expect("affine variants always retrieve memory");
            // keep the Δg head output visible for the gate-usage analysis
            let w1_t = tape.transpose(nodes.w1);
            let pre = tape.matmul(mem, w1_t);
            let b1_wide = tape.broadcast_row(nodes.b1, n_edges);
            let pre_b = tape.add(pre, b1_wide);
            let hidden = tape.silu(pre_b);
            let wg_t = tape.transpose(nodes.wg);
            let wb_t = tape.transpose(nodes.wb);
            let dg = tape.matmul(hidden, wg_t);
            let db = tape.matmul(hidden, wb_t);
            affine_delta_g.push(dg);
            let t = tape.tanh(dg);
            let scale_delta = tape.mul_scalar(t, cfg.affine.alpha_aff);
            let scale = tape.add_scalar(scale_delta, 1.0);
            let e_scaled = tape.mul(e_l, scale);
            let shift = tape.mul_scalar(db, cfg.affine.beta_aff);
            e_l = tape.add(e_scaled, shift);
        }
        named.push((e_l, format!("layer{l}.edge_state")));

        let h_tgt = tape.gather_rows(h, prep.tgt_ids.clone());
        let h_src = tape.gather_rows(h, prep.src_ids.clone());
        let msg_in = tape.concat_cols(&[h_tgt, h_src, e_l]);
        let w1 = node_of(&param_nodes, &format!("layer{l}.msg.w1"));
        let b1 = node_of(&param_nodes, &format!("layer{l}.msg.b1"));
        let w2 = node_of(&param_nodes, &format!("layer{l}.msg.w2"));
        let b2 = node_of(&param_nodes, &format!("layer{l}.msg.b2"));
        let w1_t = tape.transpose(w1);
        let pre1 = tape.matmul(msg_in, w1_t);
        let b1_wide = tape.broadcast_row(b1, n_edges);
        let pre1_b = tape.add(pre1, b1_wide);
        let act = tape.silu(pre1_b);
        let w2_t = tape.transpose(w2);
        let msg_pre = tape.matmul(act, w2_t);
        let b2_wide = tape.broadcast_row(b2, n_edges);
        let msg = tape.add(msg_pre, b2_wide);

        let agg = tape.scatter_add_rows(msg, prep.tgt_ids.clone(), n_atoms);
        let norm = tape.scale_rows(agg, prep.inv_sqrt_deg.clone());
        h = tape.add(h, norm);
        named.push((h, format!("h{}", l + 1)));
    }

    // --- readout ----------------------------------------------------------
    let w1 = node_of(&param_nodes, "readout.w1");
    let b1 = node_of(&param_nodes, "readout.b1");
    let w2 = node_of(&param_nodes, "readout.w2");
    let b2 = node_of(&param_nodes, "readout.b2");
    let w1_t = tape.transpose(w1);
    let pre1 = tape.matmul(h, w1_t);
    let b1_wide = tape.broadcast_row(b1, n_atoms);
    let pre1_b = tape.add(pre1, b1_wide);
    let act = tape.silu(pre1_b);
    let w2_t = tape.transpose(w2);
    let out_pre = tape.matmul(act, w2_t);
    let b2_wide = tape.broadcast_row(b2, n_atoms);
    let per_atom = tape.add(out_pre, b2_wide);
    let energy = tape.sum_all(per_atom);
    named.push((per_atom, "per_atom_energy".into()));
    named.push((energy, "total_energy".into()));

    if !tape.value(energy).item().is_finite() {
        let (id, kind) = tape
            .first_nonfinite()
            .expect("non-finite energy implies a non-finite node");
        let label = named
            .iter()
            .rev()
            .find(|(n, _)| *n <= id)
            .map(|(_, l)| l.as_str())
            .unwrap_or("inputs");
        return Err(Error::Numerical(format!(
            "non-finite value in forward pass at node {id} ({kind}), in or after '{label}'"
        )));
    }

    Ok(Forward { tape, energy, per_atom, r_leaf, gate_g, affine_delta_g, param_nodes, named })
}

/// H-mean lookup: one gather over the stacked (H·M)×d table with indices
/// h·M + bucket, then a segment mean back to one row per item.
fn lookup_mean(
    tape: &mut Tape,
    table: NodeId,
    buckets: &[usize],
    n_items: usize,
    h_hashes: usize,
    m: usize,
) -> NodeId {
    debug_assert_eq!(buckets.len(), n_items * h_hashes);
    let mut gather_idx = Vec::with_capacity(n_items * h_hashes);
    let mut seg = Vec::with_capacity(n_items * h_hashes);
    for h in 0..h_hashes {
        for item in 0..n_items {
            gather_idx.push(h * m + buckets[item * h_hashes + h]);
            seg.push(item);
        }
    }
    let rows = tape.gather_rows(table, Arc::new(gather_idx));
    let summed = tape.scatter_add_rows(rows, Arc::new(seg), n_items);
    tape.mul_scalar(summed, 1.0 / h_hashes as f64)
}

/// Append the force computation: F = −∂E/∂positions, assembled from
/// ∂E/∂r and the stored unit vectors. Returns the N×3 force node.
pub fn forces_node(fw: &mut Forward, prep: &Prepared) -> NodeId {
    let n_atoms = prep.n_atoms();
    let grads = fw.tape.backward(fw.energy, &[fw.r_leaf]);
    let de_dr = match grads[0] {
        Some(g) => g,
        // a model whose energy ignores geometry (e.g. zeroed weights)
        None => fw.tape.constant(Tensor::zeros(prep.n_edges(), 1)),
    };
    // ∂r/∂x_source = +u, ∂r/∂x_target = −u, so
    // F = scatter(∂E/∂r · u → target) − scatter(∂E/∂r · u → source)
    let wide = fw.tape.broadcast_col(de_dr, 3);
    let u = fw.tape.constant(prep.unit.clone());
    let gu = fw.tape.mul(wide, u);
    let on_tgt = fw.tape.scatter_add_rows(gu, prep.tgt_ids.clone(), n_atoms);
    let on_src = fw.tape.scatter_add_rows(gu, prep.src_ids.clone(), n_atoms);
    fw.tape.sub(on_tgt, on_src)
}

/// Abort-with-diagnostics check after loss construction: scans the whole
/// tape (backward nodes included) once.
pub fn check_finite(fw: &Forward, context: &str) -> Result<()> {
    if let Some((id, kind)) = fw.tape.first_nonfinite() {
        let label = fw
            .named
            .iter()
            .rev()
            .find(|(n, _)| *n <= id)
            .map(|(_, l)| l.as_str())
            .unwrap_or("inputs");
        return Err(Error::Numerical(format!(
            "non-finite value during {context} at node {id} ({kind}), in or after '{label}'"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Cell;
    use crate::variant::Variant;
    use rand::Rng as _;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn test_config(variant: Variant) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default().with_variant(variant);
        // small tables keep unit tests quick
        cfg.motif.m_pair = 64;
        cfg.motif.m_tri = 64;
        cfg
    }

    /// A rattled 8-atom fcc cell with a two-species palette.
    fn rattled_structure(seed: u64, amplitude: f64) -> Structure {
        let a = 4.05;
        let cell = Cell::new([[a, 0.0, 0.0], [0.0, a, 0.0], [0.0, 0.0, a]]).unwrap();
        let frac = [
            [0.0, 0.0, 0.0],
            [0.0, 0.5, 0.5],
            [0.5, 0.0, 0.5],
            [0.5, 0.5, 0.0],
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut positions = Vec::new();
        let mut species = Vec::new();
        for f in frac {
            let base = cell.to_cartesian(f);
            positions.push([
                base[0] + rng.gen_range(-amplitude..amplitude),
                base[1] + rng.gen_range(-amplitude..amplitude),
                base[2] + rng.gen_range(-amplitude..amplitude),
            ]);
            species.push(if rng.gen_bool(0.5) { 13 } else { 29 });
        }
        Structure::new(cell, species, positions, "test", "t0").unwrap()
    }

    fn energy_of(structure: &Structure, cfg: &ExperimentConfig, params: &ParamStore) -> f64 {
        let prep = prepare(structure, cfg).unwrap();
        let fw = forward_energy(params, &prep, cfg).unwrap();
        fw.tape.value(fw.energy).item()
    }

    #[test]
    fn radial_basis_envelope_and_peak_values() {
        let cutoff = 3.5;
        let n_rb = 8;
        let mut tape = Tape::new();
        let mu3 = 4.0 * cutoff / 8.0;
        let r = tape.leaf(Tensor::column(vec![cutoff, mu3]));
        let phi = radial_basis(&mut tape, r, n_rb, cutoff);
        // at the cutoff the envelope vanishes
        for c in 0..n_rb {
            assert!(tape.value(phi).at(0, c).abs() < 1e-15);
        }
        // at a center, that component equals the envelope value
        let f_cut = 0.5 * (1.0 + (std::f64::consts::PI * mu3 / cutoff).cos());
        assert!((tape.value(phi).at(1, 3) - f_cut).abs() < 1e-15);
        // all values within [0, 1]
        for &v in &tape.value(phi).data {
            assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn radial_basis_derivative_matches_finite_differences() {
        let cutoff = 3.5;
        let r0 = cutoff / 2.0;
        let eval = |r: f64| -> (Vec<f64>, Option<Vec<f64>>) {
            let mut tape = Tape::new();
            let rn = tape.leaf(Tensor::column(vec![r]));
            let phi = radial_basis(&mut tape, rn, 8, cutoff);
            let s = tape.sum_all(phi);
            let g = tape.backward(s, &[rn])[0];
            (
                tape.value(phi).data.clone(),
                g.map(|id| tape.value(id).data.clone()),
            )
        };
        let (_, grad) = eval(r0);
        let step = 1e-6;
        let (fp, _) = eval(r0 + step);
        let (fm, _) = eval(r0 - step);
        let fd: f64 = fp.iter().zip(&fm).map(|(p, m)| (p - m) / (2.0 * step)).sum();
        let an = grad.unwrap()[0];
        assert!((an - fd).abs() / an.abs().max(fd.abs()) < 1e-7, "{an} vs {fd}");
    }

    #[test]
    fn all_variants_initialize_and_run_forward() {
        let s = rattled_structure(1, 0.05);
        for v in Variant::ALL {
            let cfg = test_config(v);
            let params = ParamStore::init(&cfg).unwrap();
            let e = energy_of(&s, &cfg, &params);
            assert!(e.is_finite(), "{v}");
        }
    }

    #[test]
    fn shared_parameters_are_identical_across_variants() {
        let base = ParamStore::init(&test_config(Variant::Baseline)).unwrap();
        let gated = ParamStore::init(&test_config(Variant::PammGate)).unwrap();
        let affine = ParamStore::init(&test_config(Variant::PammAffine)).unwrap();
        for name in base.names() {
            assert_eq!(base.get(name).data, gated.get(name).data, "{name}");
            assert_eq!(base.get(name).data, affine.get(name).data, "{name}");
        }
        // gate projections also coincide between gated variants
        assert_eq!(gated.get("gate.wq").data, affine.get("gate.wq").data);
    }

    #[test]
    fn permutation_invariance() {
        let cfg = test_config(Variant::PammGate);
        let params = ParamStore::init(&cfg).unwrap();
        let s = rattled_structure(2, 0.08);
        let e1 = energy_of(&s, &cfg, &params);

        let perm = [2usize, 0, 3, 1];
        let species: Vec<u32> = perm.iter().map(|&i| s.species[i]).collect();
        let positions: Vec<[f64; 3]> = perm.iter().map(|&i| s.positions[i]).collect();
        let sp = Structure::new(s.cell.clone(), species, positions, "test", "t0").unwrap();
        let e2 = energy_of(&sp, &cfg, &params);
        assert!((e1 - e2).abs() / e1.abs().max(1e-12) < 1e-12, "{e1} vs {e2}");
    }

    #[test]
    fn translation_invariance() {
        let cfg = test_config(Variant::PammAffine);
        let params = ParamStore::init(&cfg).unwrap();
        let s = rattled_structure(3, 0.08);
        let e1 = energy_of(&s, &cfg, &params);
        let shift = [0.731, -1.21, 2.04];
        let positions: Vec<[f64; 3]> = s
            .positions
            .iter()
            .map(|p| [p[0] + shift[0], p[1] + shift[1], p[2] + shift[2]])
            .collect();
        let st =
            Structure::new(s.cell.clone(), s.species.clone(), positions, "test", "t0").unwrap();
        let e2 = energy_of(&st, &cfg, &params);
        assert!((e1 - e2).abs() / e1.abs().max(1e-12) < 1e-9, "{e1} vs {e2}");
    }

    #[test]
    fn rotation_invariance() {
        let cfg = test_config(Variant::PammGate);
        let params = ParamStore::init(&cfg).unwrap();
        let s = rattled_structure(4, 0.08);
        let e1 = energy_of(&s, &cfg, &params);

        // rotate cell vectors and positions by the same orthogonal matrix
        let (c, sn) = (0.6f64, 0.8f64);
        let rot = |v: [f64; 3]| [c * v[0] - sn * v[1], sn * v[0] + c * v[1], v[2]];
        let vectors = s.cell.vectors();
        let cell = Cell::new([rot(vectors[0]), rot(vectors[1]), rot(vectors[2])]).unwrap();
        let positions: Vec<[f64; 3]> = s.positions.iter().map(|&p| rot(p)).collect();
        let sr = Structure::new(cell, s.species.clone(), positions, "test", "t0").unwrap();
        let e2 = energy_of(&sr, &cfg, &params);
        assert!((e1 - e2).abs() / e1.abs().max(1e-12) < 1e-9, "{e1} vs {e2}");
    }

    #[test]
    fn supercell_doubling_doubles_the_energy() {
        let cfg = test_config(Variant::PammGate);
        let params = ParamStore::init(&cfg).unwrap();
        let s = rattled_structure(5, 0.08);
        let e1 = energy_of(&s, &cfg, &params);

        let vectors = s.cell.vectors();
        let doubled = Cell::new([
            [2.0 * vectors[0][0], 2.0 * vectors[0][1], 2.0 * vectors[0][2]],
            vectors[1],
            vectors[2],
        ])
        .unwrap();
        let mut species = s.species.clone();
        species.extend_from_slice(&s.species);
        let mut positions = s.positions.clone();
        positions.extend(s.positions.iter().map(|p| {
            [p[0] + vectors[0][0], p[1] + vectors[0][1], p[2] + vectors[0][2]]
        }));
        let s2 = Structure::new(doubled, species, positions, "test", "t0").unwrap();
        let e2 = energy_of(&s2, &cfg, &params);
        assert!((e2 - 2.0 * e1).abs() / (2.0 * e1).abs().max(1e-12) < 1e-9, "{e2} vs 2·{e1}");
    }

    #[test]
    fn net_force_is_zero() {
        for v in [Variant::Baseline, Variant::PammGate, Variant::PammAffine, Variant::MlpControl]
        {
            let cfg = test_config(v);
            let params = ParamStore::init(&cfg).unwrap();
            let s = rattled_structure(6, 0.1);
            let prep = prepare(&s, &cfg).unwrap();
            let mut fw = forward_energy(&params, &prep, &cfg).unwrap();
            let f = forces_node(&mut fw, &prep);
            let fv = fw.tape.value(f);
            for c in 0..3 {
                let net: f64 = (0..fv.rows).map(|r| fv.at(r, c)).sum();
                assert!(net.abs() < 1e-8, "{v}: net force component {c} = {net}");
            }
        }
    }

    /// Distance of every r to the nearest bin boundary / cutoff, and every
    /// θ to the nearest angle-bin boundary — structures too close to a
    /// discretization edge make finite differences invalid.
    fn boundary_margin(prep: &Prepared, cfg: &ExperimentConfig) -> f64 {
        let bin_w = cfg.motif.r_max / cfg.motif.b_r as f64;
        let th_w = std::f64::consts::PI / cfg.motif.b_theta as f64;
        let mut margin = f64::INFINITY;
        for e in &prep.graph.edges {
            let pos = e.r / bin_w;
            let frac = (pos - pos.floor()).min(pos.ceil() - pos).abs() * bin_w;
            margin = margin.min(frac);
            margin = margin.min((cfg.host.cutoff - e.r).abs());
        }
        for t in &prep.triplets.triplets {
            let pos = t.theta / th_w;
            let frac = (pos - pos.floor()).min(pos.ceil() - pos).abs() * th_w;
            margin = margin.min(frac);
        }
        margin
    }

    #[test]
    fn forces_match_finite_differences_for_every_variant() {
        let step = 1e-4;
        for v in Variant::ALL {
            let cfg = test_config(v);
            let params = ParamStore::init(&cfg).unwrap();
            // screen fixtures away from bin boundaries so the finite
            // difference never crosses a discretization edge
            let mut structure = None;
            for seed in 10..40 {
                let s = rattled_structure(seed, 0.09);
                let prep = prepare(&s, &cfg).unwrap();
                if boundary_margin(&prep, &cfg) > 2.5 * step {
                    structure = Some(s);
                    break;
                }
            }
            let s = structure.expect("a screened fixture exists");
            let prep = prepare(&s, &cfg).unwrap();
            let mut fw = forward_energy(&params, &prep, &cfg).unwrap();
            let f = forces_node(&mut fw, &prep);
            let fv = fw.tape.value(f).clone();

            for atom in 0..s.n_atoms() {
                for c in 0..3 {
                    let mut sp = s.clone();
                    sp.positions[atom][c] += step;
                    let mut sm = s.clone();
                    sm.positions[atom][c] -= step;
                    let ep = energy_of(&sp, &cfg, &params);
                    let em = energy_of(&sm, &cfg, &params);
                    let fd = -(ep - em) / (2.0 * step);
                    let an = fv.at(atom, c);
                    let denom = an.abs().max(fd.abs()).max(1e-8);
                    assert!(
                        (an - fd).abs() / denom < 1e-5,
                        "{v} atom {atom} comp {c}: analytic {an}, fd {fd}"
                    );
                }
            }
        }
    }

    #[test]
    fn no_gate_variant_equals_zero_strength_gate_bit_exactly() {
        let s = rattled_structure(7, 0.08);
        let cfg_ng = test_config(Variant::NoGate);
        let params_ng = ParamStore::init(&cfg_ng).unwrap();
        let e_ng = energy_of(&s, &cfg_ng, &params_ng);

        let mut cfg_g = test_config(Variant::PammGate);
        cfg_g.gate.lambda = 0.0;
        let params_g = ParamStore::init(&cfg_g).unwrap();
        let e_g = energy_of(&s, &cfg_g, &params_g);
        assert_eq!(e_ng, e_g);
    }

    #[test]
    fn baseline_equals_neutralized_memory_model_bit_exactly() {
        let s = rattled_structure(8, 0.08);
        let cfg_b = test_config(Variant::Baseline);
        let params_b = ParamStore::init(&cfg_b).unwrap();
        let e_b = energy_of(&s, &cfg_b, &params_b);

        let mut cfg_n = test_config(Variant::PammGate);
        cfg_n.gate.lambda = 0.0;
        let mut params_n = ParamStore::init(&cfg_n).unwrap();
        params_n.get_mut("memory.pair").data.fill(0.0);
        params_n.get_mut("memory.tri").data.fill(0.0);
        let e_n = energy_of(&s, &cfg_n, &params_n);
        assert_eq!(e_b, e_n);
    }

    #[test]
    fn affine_variant_equals_gate_variant_at_initialization_bit_exactly() {
        let s = rattled_structure(9, 0.08);
        let cfg_g = test_config(Variant::PammGate);
        let params_g = ParamStore::init(&cfg_g).unwrap();
        let cfg_a = test_config(Variant::PammAffine);
        let params_a = ParamStore::init(&cfg_a).unwrap();
        assert_eq!(
            energy_of(&s, &cfg_g, &params_g),
            energy_of(&s, &cfg_a, &params_a)
        );
    }

    #[test]
    fn census_matches_memory_param_count_and_reduced_group() {
        let cfg = test_config(Variant::PammGate);
        let params = ParamStore::init(&cfg).unwrap();
        let mem = motif::memory_param_count(&cfg.motif);
        let table_len = params.get("memory.pair").data.len() + params.get("memory.tri").data.len();
        assert_eq!(mem.total, table_len);
        let group: usize =
            reduced_lr_group(&cfg).iter().map(|n| params.get(n).data.len()).sum();
        let gate_len = params.get("gate.wq").data.len() + params.get("gate.wk").data.len();
        assert_eq!(group, mem.total + gate_len);

        // baseline has no reduced-LR parameters at all
        assert!(reduced_lr_group(&test_config(Variant::Baseline)).is_empty());
    }

    #[test]
    fn control_branch_parameter_count_matches_structured_budget() {
        let cfg = test_config(Variant::MlpControl);
        let params = ParamStore::init(&cfg).unwrap();
        let (_, count) = control_branch_shape(&cfg).unwrap();
        let actual: usize = ["mlpctl.w1", "mlpctl.b1", "mlpctl.w2", "mlpctl.b2"]
            .iter()
            .map(|n| params.get(n).data.len())
            .sum();
        assert_eq!(actual, count);
        let target = motif::structured_param_target(&cfg.motif);
        assert!(actual <= target);
        // the matched budget is based on dimensions, not enabled flags
        assert_eq!(target, cfg.motif.h * (cfg.motif.m_pair + cfg.motif.m_tri) * cfg.motif.d);
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = test_config(Variant::PammAffine);
        let params = ParamStore::init(&cfg).unwrap();
        let s = rattled_structure(11, 0.1);
        let e1 = energy_of(&s, &cfg, &params);
        let e2 = energy_of(&s, &cfg, &params);
        assert_eq!(e1, e2);
    }

    #[test]
    fn nonfinite_forward_aborts_with_a_named_diagnostic() {
        let cfg = test_config(Variant::PammGate);
        let mut params = ParamStore::init(&cfg).unwrap();
        params.get_mut("layer0.msg.w1").data.fill(f64::INFINITY);
        let s = rattled_structure(12, 0.05);
        let prep = prepare(&s, &cfg).unwrap();
        let err = match forward_energy(&params, &prep, &cfg) {
            Err(e) => e,
            Ok(_) => panic!("expected a numerical abort"),
        };
        let msg = err.to_string();
        assert!(matches!(err, Error::Numerical(_)), "{msg}");
        assert!(msg.contains("node"), "{msg}");
    }

    #[test]
    fn single_atom_cell_runs_on_self_image_edges() {
        let cell = Cell::new([[2.6, 0.0, 0.0], [0.0, 2.6, 0.0], [0.0, 0.0, 2.6]]).unwrap();
        let s = Structure::new(cell, vec![26], vec![[0.1, 0.0, 0.0]], "test", "t1").unwrap();
        let cfg = test_config(Variant::PammGate);
        let params = ParamStore::init(&cfg).unwrap();
        let prep = prepare(&s, &cfg).unwrap();
        assert!(prep.n_edges() > 0);
        let mut fw = forward_energy(&params, &prep, &cfg).unwrap();
        let f = forces_node(&mut fw, &prep);
        assert!(fw.tape.value(f).data.iter().all(|v| v.is_finite()));
    }
}
