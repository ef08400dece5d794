//! The coverage-unit universe: every command handler, style handler and
//! kernel that MiniSim can enter.

pub type Unit = &'static str;

pub const THERMO_OUTPUT: Unit = "thermo:output";

pub const UNIVERSE: &[Unit] = &[
    // command handlers
    "cmd:units",
    "cmd:dimension",
    "cmd:boundary",
    "cmd:atom_style",
    "cmd:lattice",
    "cmd:region",
    "cmd:create_box",
    "cmd:create_atoms",
    "cmd:mass",
    "cmd:set",
    "cmd:velocity",
    "cmd:pair_style",
    "cmd:pair_coeff",
    "cmd:timestep",
    "cmd:thermo",
    "cmd:thermo_style",
    "cmd:fix",
    "cmd:run",
    // style handlers
    "lattice:sc",
    "lattice:bcc",
    "lattice:fcc",
    "region:block",
    "region:sphere",
    "create_atoms:box",
    "create_atoms:region",
    "create_atoms:random",
    "set:charge",
    "set:type",
    "velocity:create",
    "velocity:set",
    "velocity:scale",
    "velocity:zero",
    "pair:soft",
    "pair:harmonic",
    "pair:gauss",
    "pair:morse",
    "fix:nve",
    "fix:langevin",
    "fix:temp/berendsen",
    "fix:viscous",
    "fix:setforce",
    "fix:momentum",
    // kernels
    "k:bin_atoms",
    "k:pbc_wrap",
    "k:reflect",
    "k:force_clear",
    "k:force_soft",
    "k:force_harmonic",
    "k:force_gauss",
    "k:force_morse",
    "k:pe_soft",
    "k:pe_harmonic",
    "k:pe_gauss",
    "k:pe_morse",
    "k:virial",
    "k:temp_reduce",
    "k:enforce2d",
    "k:nve_initial",
    "k:nve_final",
    "k:langevin",
    "k:berendsen",
    "k:viscous",
    "k:setforce",
    "k:momentum",
    THERMO_OUTPUT,
];

/// Looks up the interned unit for `name`.
pub fn unit(name: &str) -> Option<Unit> {
    UNIVERSE.iter().copied().find(|u| *u == name)
}

pub fn is_kernel(unit: &str) -> bool {
    unit.starts_with("k:")
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    #[test]
    fn universe_is_unique() {
        let set: BTreeSet<_> = UNIVERSE.iter().collect();
        assert_eq!(set.len(), UNIVERSE.len());
        assert_eq!(unit("k:langevin"), Some("k:langevin"));
        assert_eq!(unit("k:nope"), None);
    }
}
