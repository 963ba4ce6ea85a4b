//! Slot assignment and basis sifting.

use serde::{Deserialize, Serialize};

use super::pulse::{IntensityClass, PulseLookup};
use super::{DetectionEvent, DetectorId};
use crate::finite_key::SiftedCounts;
use crate::optics::Basis;
use crate::sync::SyncSolution;

/// Where each detection ended up.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventCategories {
    pub key_kept: u64,
    pub public_kept: u64,
    pub basis_mismatch: u64,
    /// Slots with more than one distinct detector clicking.
    pub double_click: u64,
    /// Events mapping to a slot Alice never sent.
    pub unassigned: u64,
}

impl EventCategories {
    pub fn total(&self) -> u64 {
        self.key_kept + self.public_kept + self.basis_mismatch + self.double_click + self.unassigned
    }

    pub fn accumulate(&mut self, other: &EventCategories) {
        self.key_kept += other.key_kept;
        self.public_kept += other.public_kept;
        self.basis_mismatch += other.basis_mismatch;
        self.double_click += other.double_click;
        self.unassigned += other.unassigned;
    }
}

/// A basis-matched detection on a public slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PublicDetection {
    pub slot: u64,
    pub ticks: u64,
    pub basis: Basis,
    pub error: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PublicCounts {
    pub z_total: u64,
    pub z_errors: u64,
    pub x_total: u64,
    pub x_errors: u64,
}

impl PublicCounts {
    pub fn from_detections<'a>(detections: impl IntoIterator<Item = &'a PublicDetection>) -> Self {
        let mut out = Self::default();
        for d in detections {
            match d.basis {
                Basis::Z => {
                    out.z_total += 1;
                    out.z_errors += u64::from(d.error);
                }
                Basis::X => {
                    out.x_total += 1;
                    out.x_errors += u64::from(d.error);
                }
            }
        }
        out
    }

    pub fn qber_z(&self) -> Option<f64> {
        (self.z_total > 0).then(|| self.z_errors as f64 / self.z_total as f64)
    }

    pub fn qber_x(&self) -> Option<f64> {
        (self.x_total > 0).then(|| self.x_errors as f64 / self.x_total as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SiftOutcome {
    /// Key-slot counts; `t` is the supplied duration.
    pub counts: SiftedCounts,
    pub public: Vec<PublicDetection>,
    pub categories: EventCategories,
}

/// Assigns each event to Alice's slot through `solution`, drops basis
/// mismatches and routes public slots away from the key counts.
pub fn sift<P: PulseLookup + ?Sized>(
    train: &P,
    events: &[DetectionEvent],
    solution: &SyncSolution,
    duration: f64,
) -> SiftOutcome {
    let mut counts = SiftedCounts { t: duration, ..SiftedCounts::default() };
    let mut public = Vec::new();
    let mut cat = EventCategories::default();
    let mut i = 0;
    while i < events.len() {
        let slot = solution.slot_of(events[i].timestamp);
        let mut j = i + 1;
        while j < events.len() && solution.slot_of(events[j].timestamp) == slot {
            j += 1;
        }
        let group = &events[i..j];
        let size = group.len() as u64;
        let first: DetectorId = group[0].detector;
        let record = u64::try_from(slot).ok().and_then(|s| train.pulse(s));
        i = j;
        let Some(record) = record else {
            cat.unassigned += size;
            continue;
        };
        if group.iter().any(|e| e.detector != first) {
            cat.double_click += size;
            continue;
        }
        let bob_basis = first.basis();
        if bob_basis != record.symbol.basis {
            cat.basis_mismatch += size;
            continue;
        }
        let error = first.bit() != record.symbol.bit;
        if record.is_public() {
            cat.public_kept += size;
            public.push(PublicDetection { slot: record.index, ticks: group[0].timestamp, basis: bob_basis, error });
            continue;
        }
        cat.key_kept += size;
        let (n, m) = match (bob_basis, record.intensity) {
            (Basis::Z, IntensityClass::Signal) => (&mut counts.n_z_mu, &mut counts.m_z_mu),
            (Basis::Z, IntensityClass::Decoy) => (&mut counts.n_z_nu, &mut counts.m_z_nu),
            (Basis::X, IntensityClass::Signal) => (&mut counts.n_x_mu, &mut counts.m_x_mu),
            (Basis::X, IntensityClass::Decoy) => (&mut counts.n_x_nu, &mut counts.m_x_nu),
        };
        *n += 1;
        *m += u64::from(error);
    }
    SiftOutcome { counts, public, categories: cat }
}
