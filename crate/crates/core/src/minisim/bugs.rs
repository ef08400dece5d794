//! Injectable device-side defects.
//!
//! Every bug is a patch on the device backend only, guarded by its id and a
//! script feature, and lives at exactly one unit. A seed that avoids the
//! trigger features runs identically with every bug enabled.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::script::{parse_script, Script};

use super::units::Unit;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BugId(pub u8);

impl BugId {
    pub const COUNT: u8 = 20;

    pub fn all() -> BTreeSet<BugId> {
        (1..=Self::COUNT).map(BugId).collect()
    }
}

impl fmt::Display for BugId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

pub type BugSet = BTreeSet<BugId>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BugCategory {
    IncorrectSync,
    MissingSync,
    DeviceAccessFromHost,
    MissedCopy,
    IncorrectCopy,
    StaleData,
    ConcurrentModification,
}

impl BugCategory {
    pub const ALL: [BugCategory; 7] = [
        BugCategory::IncorrectSync,
        BugCategory::MissingSync,
        BugCategory::DeviceAccessFromHost,
        BugCategory::MissedCopy,
        BugCategory::IncorrectCopy,
        BugCategory::StaleData,
        BugCategory::ConcurrentModification,
    ];
}

#[derive(Debug, Clone, Serialize)]
pub struct BugEntry {
    pub id: BugId,
    pub category: BugCategory,
    pub site: Unit,
    pub description: &'static str,
    pub from_user_report: bool,
    pub reproducer: Script,
}

const BASE: &str = include_str!("../../assets/corpus/default/seed_0.script");

struct Row {
    id: u8,
    category: BugCategory,
    site: Unit,
    description: &'static str,
    // (line index, replacement text); the text may span several lines and an
    // index past the end appends.
    edits: &'static [(usize, &'static str)],
}

use BugCategory::*;

const ROWS: &[Row] = &[
    Row {
        id: 1,
        category: IncorrectSync,
        site: "k:berendsen",
        description: "rescaled velocities are flagged as host-modified instead of device-modified",
        edits: &[(15, "fix 1 all nve temp/berendsen 1.0 1.5 0.5")],
    },
    Row {
        id: 2,
        category: DeviceAccessFromHost,
        site: "create_atoms:random",
        description: "overlap check dereferences device positions from host code",
        edits: &[(7, "create_atoms 1 box random 8 7 box")],
    },
    Row {
        id: 3,
        category: ConcurrentModification,
        site: "k:force_gauss",
        description: "host clears the force array while the device kernel accumulates into it",
        edits: &[(10, "pair_style gauss 1.5")],
    },
    Row {
        id: 4,
        category: IncorrectSync,
        site: "velocity:zero",
        description: "syncs velocities toward the device before a host read",
        edits: &[
            (14, "thermo_style custom step temp pe press vol"),
            (17, "velocity all zero linear"),
            (18, "run 50"),
        ],
    },
    Row {
        id: 5,
        category: MissedCopy,
        site: "thermo:output",
        description: "short thermo intervals skip the device-to-host velocity copy",
        edits: &[(13, "thermo 2")],
    },
    Row {
        id: 6,
        category: IncorrectSync,
        site: "k:setforce",
        description: "overwritten forces are flagged on the wrong memory space",
        edits: &[(15, "fix 1 all nve setforce 0.1 0.0 0.0")],
    },
    Row {
        id: 7,
        category: MissingSync,
        site: "velocity:set",
        description: "device-side assignment ignores pending host velocity writes",
        edits: &[(9, "velocity all create 1.0 12345 set 0.1 0.0 0.0")],
    },
    Row {
        id: 8,
        category: MissingSync,
        site: "velocity:scale",
        description: "device-side rescale ignores pending host velocity writes",
        edits: &[(9, "velocity all create 1.0 12345 scale 2.0")],
    },
    Row {
        id: 9,
        category: StaleData,
        site: "k:virial",
        description: "virial reuses the value cached by the last energy evaluation",
        edits: &[(14, "thermo_style custom step temp press vol")],
    },
    Row {
        id: 10,
        category: MissingSync,
        site: "k:langevin",
        description: "ramped target temperature is updated on the host without a modify mark",
        edits: &[(15, "fix 1 all nve langevin 1.0 2.0 0.5 48279")],
    },
    Row {
        id: 11,
        category: IncorrectSync,
        site: "k:momentum",
        description: "momentum-corrected velocities are flagged as host-modified",
        edits: &[(15, "fix 1 all nve momentum 1")],
    },
    Row {
        id: 12,
        category: MissingSync,
        site: "cmd:mass",
        description: "single-type mass update writes the device table over pending host writes",
        edits: &[(8, "mass 2 2.0")],
    },
    Row {
        id: 13,
        category: MissingSync,
        site: "create_atoms:region",
        description: "new atom types are never marked modified on the host",
        edits: &[(7, "create_atoms 1 region box")],
    },
    Row {
        id: 14,
        category: StaleData,
        site: "k:temp_reduce",
        description: "temperature reduction reads a stale Boltzmann constant after a units change",
        edits: &[(0, "units metal")],
    },
    Row {
        id: 15,
        category: IncorrectSync,
        site: "k:enforce2d",
        description: "planar force projection is flagged on the wrong memory space",
        edits: &[(1, "dimension 2")],
    },
    Row {
        id: 16,
        category: IncorrectSync,
        site: "k:force_morse",
        description: "Morse forces are flagged as host-modified",
        edits: &[(10, "pair_style morse 1.5")],
    },
    Row {
        id: 17,
        category: MissingSync,
        site: "set:type",
        description: "device-side type assignment ignores pending host type writes",
        edits: &[
            (9, "velocity all create 1.0 12345\nset group all type 2"),
            (11, "pair_coeff 1 1 10.0 1.0"),
        ],
    },
    Row {
        id: 18,
        category: IncorrectSync,
        site: "k:reflect",
        description: "reflected positions are flagged as host-modified",
        edits: &[(2, "boundary f p p")],
    },
    Row {
        id: 19,
        category: IncorrectSync,
        site: "k:viscous",
        description: "damped forces are flagged on the wrong memory space",
        edits: &[(15, "fix 1 all nve viscous 0.1")],
    },
    Row {
        id: 20,
        category: IncorrectCopy,
        site: "k:bin_atoms",
        description: "host-to-device position copy is truncated at 64 atoms",
        edits: &[(5, "region box block 0 5 0 5 0 5")],
    },
];

fn reproducer(edits: &[(usize, &str)]) -> Script {
    let mut lines: Vec<String> = BASE.lines().map(str::to_string).collect();
    for &(idx, text) in edits {
        if idx < lines.len() {
            lines[idx] = text.to_string();
        } else {
            lines.push(text.to_string());
        }
    }
    parse_script(&lines.join("\n")).expect("reproducers are well-formed")
}

/// The twenty-bug benchmark in id order.
pub fn list_benchmark() -> Vec<BugEntry> {
    ROWS.iter()
        .map(|r| BugEntry {
            id: BugId(r.id),
            category: r.category,
            site: r.site,
            description: r.description,
            from_user_report: r.id <= 4,
            reproducer: reproducer(r.edits),
        })
        .collect()
}

pub fn site_of(id: BugId) -> Option<Unit> {
    ROWS.iter().find(|r| r.id == id.0).map(|r| r.site)
}

/// Bug whose injection site is `unit`, if any.
pub fn bug_at(unit: &str) -> Option<BugId> {
    ROWS.iter().find(|r| r.site == unit).map(|r| BugId(r.id))
}
