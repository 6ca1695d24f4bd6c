//! Synthetic labeled data: a smooth pair-potential oracle, family-organized
//! structure generators over perfect lattices, the line-delimited dataset
//! format, and train/val/test splitting.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng as _;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::graph::{build_neighbor_list, Cell, Structure};
use crate::util::{fmt_f64, fnv1a64, mix64, parse_f64};
use crate::{Error, Result};

/// Lennard-Jones with a C¹ polynomial switch to zero over the last
/// `switch_width` Å before the cutoff. Pair parameters (ε, σ) are derived
/// deterministically from the unordered species pair and the oracle seed,
/// so the labels' energy surface factors through pair identity — the
/// recurrence structure the memory is meant to pick up.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OraclePotential {
    pub r_cut: f64,
    pub switch_width: f64,
    pub seed: u64,
}

const EPS_RANGE: (f64, f64) = (0.08, 0.4);
// Coupled to the lattice constants below: every lattice puts its
// nearest-neighbor distance (≈ 2.70 Å) on the attractive flank just outside
// the deepest possible well minimum (1.122·σ ≤ 2.64 Å), so rattled
// structures sample curvature rather than the hard-core wall.
const SIGMA_RANGE: (f64, f64) = (2.05, 2.35);

impl OraclePotential {
    pub fn new(seed: u64) -> OraclePotential {
        OraclePotential { r_cut: 5.0, switch_width: 1.0, seed }
    }

    /// (ε eV, σ Å) for an unordered species pair; symmetric by
    /// construction on (min Z, max Z).
    pub fn pair_params(&self, z_a: u32, z_b: u32) -> (f64, f64) {
        let (lo, hi) = (z_a.min(z_b) as u64, z_a.max(z_b) as u64);
        let unit = |x: u64| (x >> 11) as f64 / (1u64 << 53) as f64;
        let eps_u = unit(mix64(self.seed, &[lo, hi, 0]));
        let sig_u = unit(mix64(self.seed, &[lo, hi, 1]));
        (
            EPS_RANGE.0 + eps_u * (EPS_RANGE.1 - EPS_RANGE.0),
            SIGMA_RANGE.0 + sig_u * (SIGMA_RANGE.1 - SIGMA_RANGE.0),
        )
    }

    /// Switch value and derivative: 1 below r_cut−w, 0 above r_cut,
    /// 1 − 3t² + 2t³ in between.
    fn switch(&self, r: f64) -> (f64, f64) {
        let start = self.r_cut - self.switch_width;
        if r <= start {
            (1.0, 0.0)
        } else if r >= self.r_cut {
            (0.0, 0.0)
        } else {
            let t = (r - start) / self.switch_width;
            (1.0 - 3.0 * t * t + 2.0 * t * t * t, (-6.0 * t + 6.0 * t * t) / self.switch_width)
        }
    }

    /// Total energy and analytic per-atom forces. Each unordered image
    /// pair is counted once (the directed edge sum is halved). A distance
    /// below 0.5σ is an unphysical overlap and rejects the structure.
    pub fn energy_forces(&self, s: &Structure) -> Result<(f64, Vec<[f64; 3]>)> {
        let graph = build_neighbor_list(s, self.r_cut)?;
        let mut energy = 0.0;
        let mut forces = vec![[0.0; 3]; s.n_atoms()];
        for e in &graph.edges {
            let (eps, sigma) = self.pair_params(s.species[e.source], s.species[e.target]);
            if e.r < 0.5 * sigma {
                return Err(Error::Data(format!(
                    "structure '{}': atoms {} and {} at r = {:.3} Å overlap (< 0.5σ = {:.3} Å)",
                    s.id,
                    e.target,
                    e.source,
                    e.r,
                    0.5 * sigma
                )));
            }
            let sr = sigma / e.r;
            let sr6 = sr.powi(6);
            let sr12 = sr6 * sr6;
            let (sw, dsw) = self.switch(e.r);
            let lj = 4.0 * eps * (sr12 - sr6);
            let dlj = 4.0 * eps * (-12.0 * sr12 + 6.0 * sr6) / e.r;
            energy += 0.5 * lj * sw;
            // dφ/dr over the directed edge; ∂r/∂x_source = +u
            let dphi = 0.5 * (dlj * sw + lj * dsw);
            for c in 0..3 {
                forces[e.source][c] -= dphi * e.u[c];
                forces[e.target][c] += dphi * e.u[c];
            }
        }
        Ok((energy, forces))
    }

    /// Provenance line echoed into dataset files.
    pub fn describe(&self) -> String {
        format!(
            "oracle=lj-switch seed={} r_cut={} switch_width={}",
            self.seed,
            fmt_f64(self.r_cut),
            fmt_f64(self.switch_width)
        )
    }
}

/// A structure together with its oracle labels.
#[derive(Clone, Debug)]
pub struct LabeledStructure {
    pub structure: Structure,
    pub energy: f64,
    pub forces: Vec<[f64; 3]>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LatticeKind {
    Fcc,
    Bcc,
    RockSalt,
}

impl LatticeKind {
    pub fn parse(s: &str) -> Result<LatticeKind> {
        match s {
            "fcc" => Ok(LatticeKind::Fcc),
            "bcc" => Ok(LatticeKind::Bcc),
            "rocksalt" => Ok(LatticeKind::RockSalt),
            _ => Err(Error::Config(format!("unknown lattice '{s}', expected fcc|bcc|rocksalt"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LatticeKind::Fcc => "fcc",
            LatticeKind::Bcc => "bcc",
            LatticeKind::RockSalt => "rocksalt",
        }
    }

    /// Conventional-cell lattice constant, Å. All three lattices share a
    /// nearest-neighbor distance of ≈ 2.70 Å so the oracle's σ range suits
    /// every family.
    pub fn lattice_constant(&self) -> f64 {
        match self {
            LatticeKind::Fcc => 3.82,
            LatticeKind::Bcc => 3.12,
            LatticeKind::RockSalt => 5.40,
        }
    }

    /// Supercell repeats: 8 atoms for the fcc/rock-salt families, 16 for
    /// the bcc one (the small conventional cell invites more replication).
    fn repeats(&self) -> [usize; 3] {
        match self {
            LatticeKind::Fcc => [2, 1, 1],
            LatticeKind::Bcc => [2, 2, 2],
            LatticeKind::RockSalt => [1, 1, 1],
        }
    }

    pub fn nearest_neighbor_distance(&self) -> f64 {
        let a = self.lattice_constant();
        match self {
            LatticeKind::Fcc => a / 2f64.sqrt(),
            LatticeKind::Bcc => a * 3f64.sqrt() / 2.0,
            LatticeKind::RockSalt => a / 2.0,
        }
    }

    /// Fractional basis sites of the conventional cell with a sublattice
    /// tag (rock-salt orders species by sublattice; the others ignore it).
    fn basis(&self) -> Vec<([f64; 3], usize)> {
        match self {
            LatticeKind::Fcc => vec![
                ([0.0, 0.0, 0.0], 0),
                ([0.0, 0.5, 0.5], 1),
                ([0.5, 0.0, 0.5], 1),
                ([0.5, 0.5, 0.0], 1),
            ],
            LatticeKind::Bcc => vec![([0.0, 0.0, 0.0], 0), ([0.5, 0.5, 0.5], 1)],
            LatticeKind::RockSalt => vec![
                ([0.0, 0.0, 0.0], 0),
                ([0.5, 0.5, 0.0], 0),
                ([0.5, 0.0, 0.5], 0),
                ([0.0, 0.5, 0.5], 0),
                ([0.5, 0.0, 0.0], 1),
                ([0.0, 0.5, 0.0], 1),
                ([0.0, 0.0, 0.5], 1),
                ([0.5, 0.5, 1.0 - 0.5], 1),
            ],
        }
    }

    /// Perfect supercell: cell, cartesian sites, sublattice tags.
    pub fn build(&self) -> (Cell, Vec<[f64; 3]>, Vec<usize>) {
        let a = self.lattice_constant();
        let [nx, ny, nz] = self.repeats();
        let cell = Cell::new([
            [a * nx as f64, 0.0, 0.0],
            [0.0, a * ny as f64, 0.0],
            [0.0, 0.0, a * nz as f64],
        ])
        .expect("lattice cells are well-formed");
        let mut sites = Vec::new();
        let mut subl = Vec::new();
        for ix in 0..nx {
            for iy in 0..ny {
                for iz in 0..nz {
                    for (f, tag) in self.basis() {
                        sites.push([
                            a * (ix as f64 + f[0]),
                            a * (iy as f64 + f[1]),
                            a * (iz as f64 + f[2]),
                        ]);
                        subl.push(tag);
                    }
                }
            }
        }
        (cell, sites, subl)
    }
}

pub const FAMILY_NAMES: [&str; 4] = ["rattled-small", "rattled-large", "strained", "mdlike"];

/// Extra displacement mode amplitude for the mdlike family (a shared
/// sinusoidal component on top of the i.i.d. rattle).
const MDLIKE_MODE_AMP: f64 = 0.02;
/// Fraction of sites whose species take part in a random pair swap
/// (antisite disorder) in the rattled families.
const ANTISITE_SWAP_FRACTION: f64 = 0.25;
/// Fraction of sites replaced by dopant species (palette entries past the
/// sublattice tags) in the rattled families.
const DOPANT_FRACTION: f64 = 0.25;
/// Isotropic strain range for the strained family.
const STRAIN_RANGE: (f64, f64) = (0.99, 1.01);

#[derive(Clone, Debug, PartialEq)]
pub struct FamilySpec {
    /// one of FAMILY_NAMES; fixes the perturbation recipe
    pub name: String,
    pub lattice: LatticeKind,
    pub palette: Vec<u32>,
    /// Gaussian rattle standard deviation, Å
    pub amplitude: f64,
    pub count: usize,
    /// explicit stream seed; derived from the dataset seed when absent
    pub seed: Option<u64>,
}

impl FamilySpec {
    pub fn validate(&self) -> Result<()> {
        if !FAMILY_NAMES.contains(&self.name.as_str()) {
            return Err(Error::Config(format!(
                "unknown family '{}', expected one of: {}",
                self.name,
                FAMILY_NAMES.join(", ")
            )));
        }
        if self.palette.is_empty() || self.palette.len() > 6 {
            return Err(Error::Config(format!(
                "family '{}': palette must hold 1–6 species",
                self.name
            )));
        }
        for &z in &self.palette {
            if !(1..=118).contains(&z) {
                return Err(Error::Config(format!("family '{}': species {z} out of range", self.name)));
            }
        }
        let quarter_nn = self.lattice.nearest_neighbor_distance() / 4.0;
        if !(self.amplitude >= 0.0 && self.amplitude < quarter_nn) {
            return Err(Error::Config(format!(
                "family '{}': amplitude {} must be below ¼ of the nearest-neighbor \
                 distance ({:.3} Å)",
                self.name, self.amplitude, quarter_nn
            )));
        }
        Ok(())
    }

    fn effective_seed(&self, dataset_seed: u64) -> u64 {
        self.seed.unwrap_or_else(|| mix64(dataset_seed, &[fnv1a64(self.name.as_bytes())]))
    }
}

/// The full generation request: the four default families under one seed
/// pair, adjustable through the spec text.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub seed: u64,
    pub oracle_seed: u64,
    pub families: Vec<FamilySpec>,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        let fam = |name: &str, lattice, palette: &[u32], amplitude| FamilySpec {
            name: name.into(),
            lattice,
            palette: palette.to_vec(),
            amplitude,
            count: 40,
            seed: None,
        };
        DatasetSpec {
            seed: 42,
            oracle_seed: 7,
            families: vec![
                fam("rattled-small", LatticeKind::Fcc, &[13, 29, 30, 12, 47], 0.012),
                fam("rattled-large", LatticeKind::Fcc, &[13, 29, 30, 12, 47], 0.09),
                fam("strained", LatticeKind::RockSalt, &[11, 17], 0.008),
                fam("mdlike", LatticeKind::Bcc, &[26, 24], 0.008),
            ],
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for f in &self.families {
            f.validate()?;
            if !seen.insert(f.name.clone()) {
                return Err(Error::Config(format!("family '{}' listed twice", f.name)));
            }
        }
        Ok(())
    }

    /// Apply `key=value` overrides: `seed`, `oracle_seed`, and
    /// `family.<name>.{count,amplitude,lattice,palette,seed}`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("spec line {}: expected key=value, got '{line}'", lineno + 1))
            })?;
            self.apply_one(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("spec line {}: {e}", lineno + 1)))?;
        }
        Ok(())
    }

    fn apply_one(&mut self, key: &str, value: &str) -> Result<()> {
        if key == "seed" {
            self.seed = value.parse().map_err(|_| Error::Config(format!("bad integer '{value}'")))?;
            return Ok(());
        }
        if key == "oracle_seed" {
            self.oracle_seed =
                value.parse().map_err(|_| Error::Config(format!("bad integer '{value}'")))?;
            return Ok(());
        }
        let rest = key.strip_prefix("family.").ok_or_else(|| {
            Error::Config(format!("unknown spec field '{key}'"))
        })?;
        let (name, field) = rest.rsplit_once('.').ok_or_else(|| {
            Error::Config(format!("unknown spec field '{key}'"))
        })?;
        let fam = self
            .families
            .iter_mut()
            .find(|f| f.name == name)
            .ok_or_else(|| Error::Config(format!("unknown family '{name}' in field '{key}'")))?;
        match field {
            "count" => {
                fam.count =
                    value.parse().map_err(|_| Error::Config(format!("bad integer '{value}'")))?
            }
            "amplitude" => {
                fam.amplitude =
                    parse_f64(value).ok_or_else(|| Error::Config(format!("bad float '{value}'")))?
            }
            "lattice" => fam.lattice = LatticeKind::parse(value)?,
            "palette" => {
                let zs: std::result::Result<Vec<u32>, _> =
                    value.split(',').map(|t| t.trim().parse()).collect();
                fam.palette =
                    zs.map_err(|_| Error::Config(format!("bad species list '{value}'")))?;
            }
            "seed" => {
                fam.seed = Some(
                    value.parse().map_err(|_| Error::Config(format!("bad integer '{value}'")))?,
                )
            }
            _ => return Err(Error::Config(format!("unknown spec field '{key}'"))),
        }
        Ok(())
    }
}

/// Generate and label one family. Deterministic: structure `i` draws from
/// a stream keyed by (family seed, i, attempt); overlap rejection
/// resamples up to 100 times before failing.
pub fn generate_family(
    spec: &FamilySpec,
    pot: &OraclePotential,
    dataset_seed: u64,
) -> Result<Vec<LabeledStructure>> {
    spec.validate()?;
    let fam_seed = spec.effective_seed(dataset_seed);
    let (cell0, sites0, subl) = spec.lattice.build();
    let mut out = Vec::with_capacity(spec.count);
    for index in 0..spec.count {
        let mut labeled = None;
        for attempt in 0..100u64 {
            let mut rng =
                ChaCha8Rng::seed_from_u64(mix64(fam_seed, &[index as u64, attempt]));
            let id = format!("{}-{index:03}", spec.name);
            let s = build_structure(spec, &cell0, &sites0, &subl, &mut rng, id)?;
            match pot.energy_forces(&s) {
                Ok((energy, forces)) => {
                    labeled = Some(LabeledStructure { structure: s, energy, forces });
                    break;
                }
                Err(Error::Data(_)) => continue,
                Err(e) => return Err(e),
            }
        }
        out.push(labeled.ok_or_else(|| {
            Error::Data(format!(
                "family '{}': structure {index} still overlaps after 100 resamples",
                spec.name
            ))
        })?);
    }
    Ok(out)
}

fn build_structure(
    spec: &FamilySpec,
    cell0: &Cell,
    sites0: &[[f64; 3]],
    subl: &[usize],
    rng: &mut ChaCha8Rng,
    id: String,
) -> Result<Structure> {
    // Species assigned by sublattice (L1₂-like fcc, CsCl-like bcc,
    // rock-salt): ordered compounds keep the pair-motif histogram
    // concentrated on a few recurring keys instead of splitting every
    // distance bin across random species combinations.
    let mut species: Vec<u32> =
        subl.iter().map(|&t| spec.palette[t.min(spec.palette.len() - 1)]).collect();

    // The rattled families carry antisite disorder: a fixed fraction of
    // unlike-species site pairs trade places. Which ε-wells occupy the
    // nearest-neighbor shell then varies structure to structure, giving the
    // family an energy spread far above what the small rattle provides,
    // while the pair keys stay in the same tight distance bins. The
    // ordered families (`strained`, `mdlike`) keep their sublattice
    // assignment so their variation stays purely geometric.
    if spec.name.starts_with("rattled") {
        let swaps = (ANTISITE_SWAP_FRACTION * species.len() as f64 / 2.0).round() as usize;
        for _ in 0..swaps {
            let a = rng.gen_range(0..species.len());
            let others: Vec<usize> =
                (0..species.len()).filter(|&j| species[j] != species[a]).collect();
            if others.is_empty() {
                break;
            }
            let b = others[rng.gen_range(0..others.len())];
            species.swap(a, b);
        }
    }

    // Sublattice tags only reach the first palette entries; any entries
    // beyond them are substitutional dopants sprinkled over a fixed
    // fraction of sites in the rattled families. Dopants multiply the
    // number of distinct species-pair wells the labels depend on while the
    // majority backbone keeps the motif histogram heavy-headed.
    let n_tags = subl.iter().map(|&t| t + 1).max().unwrap_or(1).min(spec.palette.len());
    let dopants = &spec.palette[n_tags..];
    if spec.name.starts_with("rattled") && !dopants.is_empty() {
        let doped = (DOPANT_FRACTION * species.len() as f64).round() as usize;
        let mut order: Vec<usize> = (0..species.len()).collect();
        for k in 0..doped.min(order.len()) {
            let j = rng.gen_range(k..order.len());
            order.swap(k, j);
            species[order[k]] = dopants[rng.gen_range(0..dopants.len())];
        }
    }

    let (cell, mut positions) = if spec.name == "strained" {
        let s = rng.gen_range(STRAIN_RANGE.0..STRAIN_RANGE.1);
        let v = cell0.vectors();
        let cell = Cell::new([
            [v[0][0] * s, v[0][1] * s, v[0][2] * s],
            [v[1][0] * s, v[1][1] * s, v[1][2] * s],
            [v[2][0] * s, v[2][1] * s, v[2][2] * s],
        ])?;
        (cell, sites0.iter().map(|p| [p[0] * s, p[1] * s, p[2] * s]).collect::<Vec<_>>())
    } else {
        (cell0.clone(), sites0.to_vec())
    };

    if spec.name == "mdlike" {
        // one low-frequency mode shared by all atoms of the structure
        let axis = rng.gen_range(0..3usize);
        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
        let dir = {
            let raw: [f64; 3] =
                [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            let norm = (raw[0] * raw[0] + raw[1] * raw[1] + raw[2] * raw[2]).sqrt().max(1e-9);
            [raw[0] / norm, raw[1] / norm, raw[2] / norm]
        };
        let length = cell.vectors()[axis][axis];
        let k = std::f64::consts::TAU / length;
        for p in positions.iter_mut() {
            let u = MDLIKE_MODE_AMP * (k * p[axis] + phase).sin();
            for c in 0..3 {
                p[c] += u * dir[c];
            }
        }
    }

    if spec.amplitude > 0.0 {
        let normal = Normal::new(0.0, spec.amplitude).expect("positive amplitude");
        for p in positions.iter_mut() {
            for c in p.iter_mut() {
                *c += normal.sample(rng);
            }
        }
    }

    Structure::new(cell, species, positions, spec.name.clone(), id)
}

// --- dataset file format ---------------------------------------------------

const DATASET_HEADER: &str = "pamm-dataset v1";

fn push_reals(out: &mut String, values: impl Iterator<Item = f64>) {
    let mut first = true;
    for v in values {
        if !first {
            out.push(',');
        }
        out.push_str(&fmt_f64(v));
        first = false;
    }
}

/// Serialize one structure per line under a versioned header. An optional
/// metadata string is echoed as a comment line for provenance. Reals are
/// written in exact round-trip form.
pub fn write_dataset(
    path: &Path,
    structures: &[LabeledStructure],
    metadata: Option<&str>,
) -> Result<()> {
    let mut out = String::new();
    out.push_str(DATASET_HEADER);
    out.push('\n');
    if let Some(meta) = metadata {
        out.push_str("# ");
        out.push_str(meta);
        out.push('\n');
    }
    for ls in structures {
        let s = &ls.structure;
        for (what, token) in [("id", &s.id), ("family", &s.family)] {
            if token.is_empty() || token.contains(|c: char| c.is_whitespace() || c == '=') {
                return Err(Error::Data(format!(
                    "structure {what} '{token}' cannot be serialized (whitespace or '=')"
                )));
            }
        }
        write!(out, "id={} family={} cell=", s.id, s.family).expect("string write");
        push_reals(&mut out, s.cell.vectors().iter().flatten().copied());
        out.push_str(" species=");
        let mut first = true;
        for &z in &s.species {
            if !first {
                out.push(',');
            }
            write!(out, "{z}").expect("string write");
            first = false;
        }
        out.push_str(" positions=");
        push_reals(&mut out, s.positions.iter().flatten().copied());
        write!(out, " energy={}", fmt_f64(ls.energy)).expect("string write");
        out.push_str(" forces=");
        push_reals(&mut out, ls.forces.iter().flatten().copied());
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn parse_reals(value: &str, what: &str, lineno: usize) -> Result<Vec<f64>> {
    if value.is_empty() {
        return Err(Error::Data(format!("line {lineno}: empty {what} list")));
    }
    value
        .split(',')
        .map(|t| {
            parse_f64(t)
                .ok_or_else(|| Error::Data(format!("line {lineno}: bad real '{t}' in {what}")))
        })
        .collect()
}

/// Strict reader for the format written by `write_dataset`: exact header,
/// every field present exactly once, nothing unknown, errors carry line
/// numbers.
pub fn read_dataset(path: &Path) -> Result<Vec<LabeledStructure>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, first)) if first == DATASET_HEADER => {}
        Some((_, first)) => {
            return Err(Error::Data(format!(
                "unsupported dataset header '{first}', expected '{DATASET_HEADER}'"
            )))
        }
        None => return Err(Error::Data("empty file, expected a dataset header".into())),
    }

    let mut out = Vec::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let mut id = None;
        let mut family = None;
        let mut cell = None;
        let mut species: Option<Vec<u32>> = None;
        let mut positions = None;
        let mut energy = None;
        let mut forces = None;
        for token in line.split_whitespace() {
            let (k, v) = token.split_once('=').ok_or_else(|| {
                Error::Data(format!("line {lineno}: expected field=value, got '{token}'"))
            })?;
            let dup = |k: &str| Error::Data(format!("line {lineno}: duplicate field '{k}'"));
            match k {
                "id" => {
                    if id.replace(v.to_string()).is_some() {
                        return Err(dup(k));
                    }
                }
                "family" => {
                    if family.replace(v.to_string()).is_some() {
                        return Err(dup(k));
                    }
                }
                "cell" => {
                    if cell.replace(parse_reals(v, "cell", lineno)?).is_some() {
                        return Err(dup(k));
                    }
                }
                "species" => {
                    let zs: std::result::Result<Vec<u32>, _> =
                        v.split(',').map(|t| t.parse()).collect();
                    let zs = zs.map_err(|_| {
                        Error::Data(format!("line {lineno}: bad species list '{v}'"))
                    })?;
                    if species.replace(zs).is_some() {
                        return Err(dup(k));
                    }
                }
                "positions" => {
                    if positions.replace(parse_reals(v, "positions", lineno)?).is_some() {
                        return Err(dup(k));
                    }
                }
                "energy" => {
                    let e = parse_f64(v).ok_or_else(|| {
                        Error::Data(format!("line {lineno}: bad real '{v}' in energy"))
                    })?;
                    if energy.replace(e).is_some() {
                        return Err(dup(k));
                    }
                }
                "forces" => {
                    if forces.replace(parse_reals(v, "forces", lineno)?).is_some() {
                        return Err(dup(k));
                    }
                }
                other => {
                    return Err(Error::Data(format!("line {lineno}: unknown field '{other}'")))
                }
            }
        }
        let missing = |what: &str| Error::Data(format!("line {lineno}: missing field '{what}'"));
        let id = id.ok_or_else(|| missing("id"))?;
        let family = family.ok_or_else(|| missing("family"))?;
        let cell = cell.ok_or_else(|| missing("cell"))?;
        let species = species.ok_or_else(|| missing("species"))?;
        let positions = positions.ok_or_else(|| missing("positions"))?;
        let energy = energy.ok_or_else(|| missing("energy"))?;
        let forces = forces.ok_or_else(|| missing("forces"))?;

        if cell.len() != 9 {
            return Err(Error::Data(format!(
                "line {lineno}: cell needs 9 reals, got {}",
                cell.len()
            )));
        }
        let n = species.len();
        if positions.len() != 3 * n || forces.len() != 3 * n {
            return Err(Error::Data(format!(
                "line {lineno}: expected {} position/force reals for {n} atoms, got {}/{}",
                3 * n,
                positions.len(),
                forces.len()
            )));
        }
        let cell = Cell::new([
            [cell[0], cell[1], cell[2]],
            [cell[3], cell[4], cell[5]],
            [cell[6], cell[7], cell[8]],
        ])
        .map_err(|e| Error::Data(format!("line {lineno}: {e}")))?;
        let triple =
            |v: &[f64]| (0..v.len() / 3).map(|i| [v[3 * i], v[3 * i + 1], v[3 * i + 2]]).collect();
        let structure = Structure::new(cell, species, triple(&positions), family, id)
            .map_err(|e| Error::Data(format!("line {lineno}: {e}")))?;
        out.push(LabeledStructure { structure, energy, forces: triple(&forces) });
    }
    Ok(out)
}

/// Load a dataset path: a single file, or a directory holding the
/// per-family `*.data` files (read in name order).
pub fn load_dataset(path: &Path) -> Result<Vec<LabeledStructure>> {
    if path.is_dir() {
        let mut files: Vec<_> = std::fs::read_dir(path)
            .map_err(|e| Error::Data(format!("cannot list {}: {e}", path.display())))?
            .filter_map(|entry| entry.ok().map(|e| e.path()))
            .filter(|p| p.extension().map(|e| e == "data").unwrap_or(false))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::Data(format!("no .data files under {}", path.display())));
        }
        let mut all = Vec::new();
        for f in files {
            all.extend(read_dataset(&f)?);
        }
        Ok(all)
    } else {
        read_dataset(path)
    }
}

// --- splits ------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Hash split on the structure id: 80% train, 10% val, 10% test.
pub fn split_of(id: &str) -> Split {
    match fnv1a64(id.as_bytes()) % 10 {
        8 => Split::Val,
        9 => Split::Test,
        _ => Split::Train,
    }
}

/// Leave-one-family-out: the held family is entirely test; the rest keep
/// a 90/10 train/val hash split.
pub fn holdout_split_of(id: &str, family: &str, holdout: &str) -> Split {
    if family == holdout {
        Split::Test
    } else if fnv1a64(id.as_bytes()) % 10 == 8 {
        Split::Val
    } else {
        Split::Train
    }
}

/// Partition indices of `structures` into (train, val, test), optionally
/// in leave-one-family-out mode.
pub fn split_indices(
    structures: &[LabeledStructure],
    holdout_family: Option<&str>,
) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut test = Vec::new();
    for (i, ls) in structures.iter().enumerate() {
        let split = match holdout_family {
            Some(h) => holdout_split_of(&ls.structure.id, &ls.structure.family, h),
            None => split_of(&ls.structure.id),
        };
        match split {
            Split::Train => train.push(i),
            Split::Val => val.push(i),
            Split::Test => test.push(i),
        }
    }
    (train, val, test)
}
