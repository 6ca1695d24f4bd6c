//! The eight model variants and their feature-flag mapping.

use crate::{Error, Result};

/// Which ingredients a variant enables. Flags are derived from the variant
/// name; they are never configured independently.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VariantFlags {
    pub pair: bool,
    pub triplet: bool,
    pub gate: bool,
    pub affine: bool,
    pub random_bucket: bool,
    pub mlp_control: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Baseline,
    PammGate,
    PammAffine,
    PairOnly,
    TripletOnly,
    NoGate,
    RandomBucket,
    MlpControl,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::Baseline,
        Variant::PammGate,
        Variant::PammAffine,
        Variant::PairOnly,
        Variant::TripletOnly,
        Variant::NoGate,
        Variant::RandomBucket,
        Variant::MlpControl,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::PammGate => "pamm-gate",
            Variant::PammAffine => "pamm-affine",
            Variant::PairOnly => "pair-only",
            Variant::TripletOnly => "triplet-only",
            Variant::NoGate => "no-gate",
            Variant::RandomBucket => "random-bucket",
            Variant::MlpControl => "mlp-control",
        }
    }

    pub fn from_name(s: &str) -> Result<Variant> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
                Error::Config(format!(
                    "unknown variant '{s}', expected one of: {}",
                    names.join(", ")
                ))
            })
    }

    pub fn flags(&self) -> VariantFlags {
        let off = VariantFlags {
            pair: false,
            triplet: false,
            gate: false,
            affine: false,
            random_bucket: false,
            mlp_control: false,
        };
        match self {
            Variant::Baseline => off,
            Variant::PammGate => VariantFlags { pair: true, triplet: true, gate: true, ..off },
            Variant::PammAffine => {
                VariantFlags { pair: true, triplet: true, gate: true, affine: true, ..off }
            }
            Variant::PairOnly => VariantFlags { pair: true, gate: true, ..off },
            Variant::TripletOnly => VariantFlags { triplet: true, gate: true, ..off },
            Variant::NoGate => VariantFlags { pair: true, triplet: true, ..off },
            Variant::RandomBucket => VariantFlags {
                pair: true,
                triplet: true,
                gate: true,
                random_bucket: true,
                ..off
            },
            Variant::MlpControl => VariantFlags { gate: true, mlp_control: true, ..off },
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}
