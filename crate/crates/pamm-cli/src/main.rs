//! Command-line entry point: dataset generation, training runs, the
//! eight-variant control suite, bucket sweeps, per-family evaluation, and
//! mechanism analyses. Every artifact is a text file written atomically
//! (temp + rename) so reruns and concurrent suites never observe partial
//! output, and every table carries its config hash in a `#` header line.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use pamm_core::analysis::{self, gate_usage_csv_header, motif_freq_csv_header};
use pamm_core::config::ExperimentConfig;
use pamm_core::data::{
    self, generate_family, load_dataset, split_indices, split_of, DatasetSpec, LabeledStructure,
    OraclePotential,
};
use pamm_core::model::{control_branch_shape, ParamStore};
use pamm_core::motif::memory_param_count;
use pamm_core::train::{
    check_compatible, evaluate, load_checkpoint, metrics_csv_header, prepare_examples,
    save_checkpoint, train_loop, MetricsRow, TrainerState,
};
use pamm_core::util::{fmt_f64, fnv1a64};
use pamm_core::variant::Variant;
use pamm_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "pamm",
    version,
    about = "Periodic motif memory experiments: data generation, training, and analysis"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset: one file per family plus a split manifest.
    Gen {
        /// Spec overrides, key=value per line (seed, oracle_seed,
        /// family.<name>.{count,amplitude,lattice,palette,seed}).
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one variant; writes metrics.csv, checkpoints, and record.json.
    Train {
        /// Dataset file or directory of .data files.
        #[arg(long)]
        dataset: PathBuf,
        /// One of: baseline, pamm-gate, pamm-affine, pair-only, triplet-only,
        /// no-gate, random-bucket, mlp-control.
        #[arg(long)]
        variant: String,
        /// Training seed (overrides the config file).
        #[arg(long)]
        seed: Option<u64>,
        /// Optimizer step budget (overrides the config file).
        #[arg(long)]
        steps: Option<usize>,
        /// Config overrides, key=value per line in canonical key order.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Resume from a checkpoint written by an identical config.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Hold one family out entirely (goes to the test split).
        #[arg(long)]
        holdout: Option<String>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run all eight variants at a matched seed and budget; one CSV row each.
    Controls {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory (per-variant subdirectories plus controls.csv).
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one variant at several bucket counts (M_pair = M_tri = M).
    SweepBuckets {
        #[arg(long)]
        dataset: PathBuf,
        /// Variant to sweep (default pamm-gate).
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<usize>,
        /// Comma-separated bucket counts; all must be powers of two.
        #[arg(long, default_value = "64,128,256,512")]
        buckets: String,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory (per-M subdirectories plus sweep.csv).
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-family and overall MAE for a checkpoint; paired mode compares two.
    EvalFamilies {
        /// Checkpoint to evaluate (the model column in paired mode).
        #[arg(long)]
        checkpoint: PathBuf,
        /// Second checkpoint for side-by-side comparison columns.
        #[arg(long)]
        baseline_checkpoint: Option<PathBuf>,
        #[arg(long)]
        dataset: PathBuf,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Mechanism analyses: motif-freq, gate-usage, or motif-delta.
    Analyze {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Reference checkpoint; required for motif-delta.
        #[arg(long)]
        baseline_checkpoint: Option<PathBuf>,
        #[arg(long)]
        dataset: PathBuf,
        /// One of: motif-freq, gate-usage, motif-delta.
        #[arg(long)]
        mode: String,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli.command) {
        eprintln!("error: {e}");
        std::process::exit(exit_code(&e));
    }
}

/// 0 success; 2 usage/config, 3 data (including I/O), 4 numerical failure.
fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 2,
        Error::Data(_) | Error::Io(_) => 3,
        Error::Numerical(_) => 4,
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Gen { spec, out } => cmd_gen(spec.as_deref(), &out),
        Command::Train { dataset, variant, seed, steps, config, checkpoint, holdout, out } => {
            cmd_train(
                &dataset,
                &variant,
                seed,
                steps,
                config.as_deref(),
                checkpoint.as_deref(),
                holdout.as_deref(),
                &out,
            )
        }
        Command::Controls { dataset, seed, steps, config, out } => {
            cmd_controls(&dataset, seed, steps, config.as_deref(), &out)
        }
        Command::SweepBuckets { dataset, variant, seed, steps, buckets, config, out } => {
            cmd_sweep_buckets(
                &dataset,
                variant.as_deref(),
                seed,
                steps,
                &buckets,
                config.as_deref(),
                &out,
            )
        }
        Command::EvalFamilies { checkpoint, baseline_checkpoint, dataset, out } => {
            cmd_eval_families(&checkpoint, baseline_checkpoint.as_deref(), &dataset, &out)
        }
        Command::Analyze { checkpoint, baseline_checkpoint, dataset, mode, out } => {
            cmd_analyze(&checkpoint, baseline_checkpoint.as_deref(), &dataset, &mode, &out)
        }
    }
}

/// Write-temp-then-rename so readers never see a partial file.
fn atomic_write(path: &Path, contents: &str) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn write_csv(path: &Path, lines: &[String]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    atomic_write(path, &(lines.join("\n") + "\n"))
}

/// Default config, then file overrides, then explicit flags (strongest).
fn build_config(
    variant: Option<&str>,
    seed: Option<u64>,
    steps: Option<usize>,
    config_path: Option<&Path>,
) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    if let Some(p) = config_path {
        let text = fs::read_to_string(p)?;
        cfg.apply_text(&text)?;
    }
    if let Some(name) = variant {
        cfg = cfg.with_variant(Variant::from_name(name)?);
    }
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    if let Some(n) = steps {
        cfg.train.steps = n;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Parameters spent on the memory pathway: the lookup tables, or the
/// budget-matched branch for the mlp-control variant.
fn memory_pathway_params(cfg: &ExperimentConfig) -> Result<usize> {
    if cfg.variant.flags().mlp_control {
        let (_width, count) = control_branch_shape(cfg)?;
        Ok(count)
    } else {
        Ok(memory_param_count(&cfg.motif).total)
    }
}

// ---------------------------------------------------------------------------
// gen

fn spec_fingerprint(spec: &DatasetSpec) -> String {
    let mut text = format!("seed={} oracle_seed={}", spec.seed, spec.oracle_seed);
    for f in &spec.families {
        let palette: Vec<String> = f.palette.iter().map(|z| z.to_string()).collect();
        text.push_str(&format!(
            " {}:lattice={} palette={} amplitude={} count={} seed={:?}",
            f.name,
            f.lattice.name(),
            palette.join("+"),
            fmt_f64(f.amplitude),
            f.count,
            f.seed
        ));
    }
    format!("{:016x}", fnv1a64(text.as_bytes()))
}

fn cmd_gen(spec_path: Option<&Path>, out: &Path) -> Result<()> {
    let mut spec = DatasetSpec::default();
    if let Some(p) = spec_path {
        let text = fs::read_to_string(p)?;
        spec.apply_text(&text)?;
    }
    spec.validate()?;
    fs::create_dir_all(out)?;

    let pot = OraclePotential::new(spec.oracle_seed);
    let meta = format!("{} dataset_seed={}", pot.describe(), spec.seed);
    let mut manifest = vec![
        format!("# spec={} {}", spec_fingerprint(&spec), meta),
        "id,family,split".to_string(),
    ];
    let mut total = 0usize;
    for fam in &spec.families {
        let labeled = generate_family(fam, &pot, spec.seed)?;
        data::write_dataset(&out.join(format!("{}.data", fam.name)), &labeled, Some(&meta))?;
        for ls in &labeled {
            manifest.push(format!(
                "{},{},{}",
                ls.structure.id,
                ls.structure.family,
                split_of(&ls.structure.id).name()
            ));
        }
        total += labeled.len();
    }
    write_csv(&out.join("manifest.csv"), &manifest)?;
    println!("wrote {} structures in {} families to {}", total, spec.families.len(), out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// shared training runner

#[derive(Serialize, Deserialize)]
struct ExperimentRecord {
    experiment: String,
    variant: String,
    seed: u64,
    config_hash: String,
    metrics: String,
    checkpoints: Vec<String>,
    status: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    error: Option<String>,
}

struct RunOutcome {
    status: &'static str,
    error: Option<Error>,
    /// Metric rows from the last evaluation (final step when the run finished).
    final_rows: Vec<MetricsRow>,
}

impl RunOutcome {
    fn overall(&self, split: &str) -> Option<(f64, f64)> {
        self.final_rows
            .iter()
            .find(|r| r.split == split && r.family == "overall")
            .map(|r| (r.energy_mae_per_atom, r.force_mae))
    }
}

/// Run one training job into `dir`: metrics.csv (rewritten at every
/// evaluation), checkpoints, and record.json. Training failures are
/// captured in the record rather than returned; only artifact I/O errors
/// propagate.
fn run_one(
    cfg: &ExperimentConfig,
    dataset: &[LabeledStructure],
    holdout: Option<&str>,
    dir: &Path,
    keep_all_checkpoints: bool,
    resume: Option<&Path>,
    experiment: &str,
) -> Result<RunOutcome> {
    fs::create_dir_all(dir)?;
    let variant_name = cfg.variant.name().to_string();
    let seed = cfg.train.seed;
    let hash = cfg.hash();
    let metrics_path = dir.join("metrics.csv");

    let mut metrics_lines = vec![
        format!("# config={hash} experiment={experiment}"),
        metrics_csv_header().to_string(),
    ];
    let mut checkpoints: Vec<String> = Vec::new();
    let mut final_rows: Vec<MetricsRow> = Vec::new();

    let attempt: Result<()> = (|| {
        let (train_idx, val_idx, test_idx) = split_indices(dataset, holdout);
        let examples = prepare_examples(cfg, dataset)?;
        let mut state = match resume {
            Some(p) => {
                let (loaded_cfg, st) = load_checkpoint(p)?;
                check_compatible(cfg, &loaded_cfg)?;
                st
            }
            None => TrainerState::init(cfg)?,
        };
        let mut on_eval = |_step: usize, rows: &[MetricsRow]| -> Result<()> {
            for r in rows {
                metrics_lines.push(r.csv_line(&variant_name, seed));
            }
            final_rows = rows.to_vec();
            atomic_write(&metrics_path, &(metrics_lines.join("\n") + "\n"))
        };
        let mut on_checkpoint = |step: usize, st: &TrainerState| -> Result<()> {
            let path = if keep_all_checkpoints {
                dir.join(format!("checkpoint-{step:05}.txt"))
            } else {
                dir.join("checkpoint-last.txt")
            };
            save_checkpoint(&path, cfg, st)?;
            let name = path.file_name().unwrap().to_string_lossy().into_owned();
            if !checkpoints.contains(&name) {
                checkpoints.push(name);
            }
            Ok(())
        };
        train_loop(
            cfg,
            &mut state,
            &examples,
            &train_idx,
            &val_idx,
            &test_idx,
            &mut on_eval,
            &mut on_checkpoint,
        )?;
        Ok(())
    })();

    let (status, error): (&'static str, Option<Error>) = match attempt {
        Ok(()) => ("done", None),
        Err(e) => {
            eprintln!("run '{experiment}' failed: {e}");
            ("failed", Some(e))
        }
    };
    // Failure before the first evaluation still leaves a parseable CSV.
    atomic_write(&metrics_path, &(metrics_lines.join("\n") + "\n"))?;

    let record = ExperimentRecord {
        experiment: experiment.to_string(),
        variant: variant_name,
        seed,
        config_hash: hash,
        metrics: "metrics.csv".to_string(),
        checkpoints,
        status: status.to_string(),
        error: error.as_ref().map(|e| e.to_string()),
    };
    let json = serde_json::to_string_pretty(&record)
        .map_err(|e| Error::Config(format!("record serialization: {e}")))?;
    atomic_write(&dir.join("record.json"), &(json + "\n"))?;

    Ok(RunOutcome { status, error, final_rows })
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    dataset: &Path,
    variant: &str,
    seed: Option<u64>,
    steps: Option<usize>,
    config: Option<&Path>,
    checkpoint: Option<&Path>,
    holdout: Option<&str>,
    out: &Path,
) -> Result<()> {
    let cfg = build_config(Some(variant), seed, steps, config)?;
    let data = load_dataset(dataset)?;
    if let Some(h) = holdout {
        if !data.iter().any(|ls| ls.structure.family == h) {
            return Err(Error::Config(format!("holdout family '{h}' not present in the dataset")));
        }
    }
    let experiment = format!("train-{}-seed{}", cfg.variant.name(), cfg.train.seed);
    let outcome = run_one(&cfg, &data, holdout, out, true, checkpoint, &experiment)?;
    println!("{} {}: metrics at {}", experiment, outcome.status, out.join("metrics.csv").display());
    match outcome.error {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

// ---------------------------------------------------------------------------
// suites

fn suite_row(
    label: &str,
    outcome: &RunOutcome,
    extra: &[String],
    cfg_hash: &str,
) -> String {
    let fmt_pair = |p: Option<(f64, f64)>| match p {
        Some((e, f)) => (fmt_f64(e), fmt_f64(f)),
        None => (String::new(), String::new()),
    };
    let (val_e, val_f) = fmt_pair(outcome.overall("val"));
    let (test_e, test_f) = fmt_pair(outcome.overall("test"));
    let mut cells = vec![label.to_string(), outcome.status.to_string()];
    cells.extend_from_slice(extra);
    cells.extend([val_e, val_f, test_e, test_f, cfg_hash.to_string()]);
    cells.join(",")
}

fn cmd_controls(
    dataset: &Path,
    seed: Option<u64>,
    steps: Option<usize>,
    config: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let base = build_config(None, seed, steps, config)?;
    let data = load_dataset(dataset)?;
    fs::create_dir_all(out)?;

    let protocol_hash = base.clone().with_variant(Variant::Baseline).hash();
    let mut lines = vec![
        format!(
            "# base-config={protocol_hash} experiment=controls seed={} steps={}",
            base.train.seed, base.train.steps
        ),
        concat!(
            "variant,status,memory_params,",
            "val_energy_mae_per_atom,val_force_mae,test_energy_mae_per_atom,test_force_mae,",
            "config_hash"
        )
        .to_string(),
    ];
    for v in Variant::ALL {
        let cfg = base.clone().with_variant(v);
        let mem = memory_pathway_params(&cfg)?;
        let outcome = run_one(
            &cfg,
            &data,
            None,
            &out.join(v.name()),
            false,
            None,
            &format!("controls-{}", v.name()),
        )?;
        lines.push(suite_row(v.name(), &outcome, &[mem.to_string()], &cfg.hash()));
        println!("controls: {} {}", v.name(), outcome.status);
    }
    write_csv(&out.join("controls.csv"), &lines)?;
    println!("wrote {}", out.join("controls.csv").display());
    Ok(())
}

fn parse_buckets(list: &str) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for part in list.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        let m: usize = part
            .parse()
            .map_err(|_| Error::Config(format!("bad bucket count '{part}'")))?;
        if !m.is_power_of_two() {
            return Err(Error::Config(format!("bucket count {m} is not a power of two")));
        }
        out.push(m);
    }
    if out.is_empty() {
        return Err(Error::Config("bucket list is empty".into()));
    }
    Ok(out)
}

fn cmd_sweep_buckets(
    dataset: &Path,
    variant: Option<&str>,
    seed: Option<u64>,
    steps: Option<usize>,
    buckets: &str,
    config: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let bucket_list = parse_buckets(buckets)?;
    let base = build_config(variant, seed, steps, config)?;
    let data = load_dataset(dataset)?;
    fs::create_dir_all(out)?;

    let mut lines = vec![
        format!(
            "# base-config={} experiment=sweep-buckets variant={} seed={} steps={}",
            base.hash(),
            base.variant.name(),
            base.train.seed,
            base.train.steps
        ),
        concat!(
            "m_buckets,status,memory_params,bytes_f32,",
            "val_energy_mae_per_atom,val_force_mae,test_energy_mae_per_atom,test_force_mae,",
            "config_hash"
        )
        .to_string(),
    ];
    for &m in &bucket_list {
        let mut cfg = base.clone();
        cfg.motif.m_pair = m;
        cfg.motif.m_tri = m;
        cfg.validate()?;
        let footprint = memory_param_count(&cfg.motif);
        let outcome = run_one(
            &cfg,
            &data,
            None,
            &out.join(format!("m{m:05}")),
            false,
            None,
            &format!("sweep-m{m}"),
        )?;
        lines.push(suite_row(
            &m.to_string(),
            &outcome,
            &[footprint.total.to_string(), footprint.bytes_f32.to_string()],
            &cfg.hash(),
        ));
        println!("sweep-buckets: M={m} {}", outcome.status);
    }
    write_csv(&out.join("sweep.csv"), &lines)?;
    println!("wrote {}", out.join("sweep.csv").display());
    Ok(())
}

// ---------------------------------------------------------------------------
// eval-families

/// Per-family evaluation rows over the whole dataset, "overall" first.
fn eval_all(
    cfg: &ExperimentConfig,
    state: &TrainerState,
    data: &[LabeledStructure],
) -> Result<Vec<MetricsRow>> {
    let examples = prepare_examples(cfg, data)?;
    let all: Vec<usize> = (0..examples.len()).collect();
    evaluate(cfg, &state.params, &examples, &all, state.step, "eval")
}

/// Species whose embedding rows are bit-identical to a fresh init: the
/// optimizer never received a gradient for them, so the checkpoint has not
/// been trained on those species. Returns family -> untouched species.
fn untrained_species(
    cfg: &ExperimentConfig,
    params: &ParamStore,
    data: &[LabeledStructure],
) -> Result<BTreeMap<String, Vec<u32>>> {
    let fresh = ParamStore::init(cfg)?;
    let trained = params.get("species.embed");
    let init = fresh.get("species.embed");
    let mut flagged: BTreeMap<String, Vec<u32>> = BTreeMap::new();
    for ls in data {
        for &z in &ls.structure.species {
            let row = z as usize - 1;
            if trained.row_slice(row) == init.row_slice(row) {
                let entry = flagged.entry(ls.structure.family.clone()).or_default();
                if !entry.contains(&z) {
                    entry.push(z);
                }
            }
        }
    }
    for zs in flagged.values_mut() {
        zs.sort_unstable();
    }
    Ok(flagged)
}

fn warning_lines(flagged: &BTreeMap<String, Vec<u32>>) -> Vec<String> {
    flagged
        .iter()
        .map(|(family, zs)| {
            let list: Vec<String> = zs.iter().map(|z| z.to_string()).collect();
            let line =
                format!("# warning family={family} untrained-species={}", list.join("+"));
            eprintln!("{}", line.trim_start_matches("# "));
            line
        })
        .collect()
}

fn cmd_eval_families(
    checkpoint: &Path,
    baseline_checkpoint: Option<&Path>,
    dataset: &Path,
    out: &Path,
) -> Result<()> {
    let data = load_dataset(dataset)?;
    let (cfg, state) = load_checkpoint(checkpoint)?;
    let rows = eval_all(&cfg, &state, &data)?;
    let flagged = untrained_species(&cfg, &state.params, &data)?;

    let mut lines = Vec::new();
    match baseline_checkpoint {
        None => {
            lines.push(format!(
                "# config={} experiment=eval-families step={}",
                cfg.hash(),
                state.step
            ));
            lines.extend(warning_lines(&flagged));
            lines.push("family,energy_mae_per_atom,force_mae".to_string());
            for r in &rows {
                lines.push(format!(
                    "{},{},{}",
                    r.family,
                    fmt_f64(r.energy_mae_per_atom),
                    fmt_f64(r.force_mae)
                ));
            }
        }
        Some(base_path) => {
            let (base_cfg, base_state) = load_checkpoint(base_path)?;
            let base_rows = eval_all(&base_cfg, &base_state, &data)?;
            let base_by_family: BTreeMap<&str, &MetricsRow> =
                base_rows.iter().map(|r| (r.family.as_str(), r)).collect();
            let mut base_flagged = untrained_species(&base_cfg, &base_state.params, &data)?;
            for (family, zs) in flagged {
                let entry = base_flagged.entry(family).or_default();
                entry.extend(zs);
                entry.sort_unstable();
                entry.dedup();
            }
            lines.push(format!(
                "# config={} baseline-config={} experiment=eval-families steps={},{}",
                cfg.hash(),
                base_cfg.hash(),
                state.step,
                base_state.step
            ));
            lines.extend(warning_lines(&base_flagged));
            lines.push(
                "family,baseline_energy_mae_per_atom,baseline_force_mae,\
                 model_energy_mae_per_atom,model_force_mae"
                    .to_string(),
            );
            for r in &rows {
                let b = base_by_family.get(r.family.as_str()).ok_or_else(|| {
                    Error::Data(format!("family '{}' missing from baseline evaluation", r.family))
                })?;
                lines.push(format!(
                    "{},{},{},{},{}",
                    r.family,
                    fmt_f64(b.energy_mae_per_atom),
                    fmt_f64(b.force_mae),
                    fmt_f64(r.energy_mae_per_atom),
                    fmt_f64(r.force_mae)
                ));
            }
        }
    }
    write_csv(out, &lines)?;
    println!("wrote {}", out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// analyze

fn cmd_analyze(
    checkpoint: &Path,
    baseline_checkpoint: Option<&Path>,
    dataset: &Path,
    mode: &str,
    out: &Path,
) -> Result<()> {
    let data = load_dataset(dataset)?;
    let (cfg, state) = load_checkpoint(checkpoint)?;
    let provenance = |extra: &str| {
        format!("# config={} experiment=analyze-{mode}{extra}", cfg.hash())
    };
    let mut lines = Vec::new();
    match mode {
        "motif-freq" => {
            let rows = analysis::motif_frequency(&cfg, &data)?;
            lines.push(provenance(""));
            lines.push(motif_freq_csv_header().to_string());
            lines.extend(rows.iter().map(|r| r.csv_line()));
        }
        "gate-usage" => {
            let rows = analysis::gate_usage(&cfg, &state.params, &data)?;
            lines.push(provenance(""));
            lines.push(gate_usage_csv_header().to_string());
            lines.extend(rows.iter().map(|r| r.csv_line()));
        }
        "motif-delta" => {
            let base_path = baseline_checkpoint.ok_or_else(|| {
                Error::Config("motif-delta requires --baseline-checkpoint".into())
            })?;
            let (base_cfg, base_state) = load_checkpoint(base_path)?;
            let rows =
                analysis::motif_delta(&cfg, &state.params, &base_cfg, &base_state.params, &data)?;
            let total: usize = rows.iter().map(|r| r.count).sum();
            lines.push(provenance(&format!(" baseline-config={}", base_cfg.hash())));
            lines.push("z_source,z_target,bin,count,fraction,delta".to_string());
            for r in &rows {
                lines.push(format!(
                    "{},{},{},{},{},{}",
                    r.z_source,
                    r.z_target,
                    r.bin,
                    r.count,
                    fmt_f64(r.count as f64 / total as f64),
                    fmt_f64(r.delta)
                ));
            }
        }
        other => {
            return Err(Error::Config(format!(
                "unknown analysis mode '{other}' (expected motif-freq, gate-usage, or motif-delta)"
            )));
        }
    }
    write_csv(out, &lines)?;
    println!("wrote {}", out.display());
    Ok(())
}
