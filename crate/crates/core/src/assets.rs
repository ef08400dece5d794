//! Grammar, seed corpus and manifest shipped with the crate.

use crate::script::{parse_script, Script};

pub const DEFAULT_GRAMMAR: &str = include_str!("../assets/grammar/minisim.json");

pub const DEFAULT_SEEDS: [(&str, &str); 5] = [
    ("seed_0", include_str!("../assets/corpus/default/seed_0.script")),
    ("seed_1", include_str!("../assets/corpus/default/seed_1.script")),
    ("seed_2", include_str!("../assets/corpus/default/seed_2.script")),
    ("seed_3", include_str!("../assets/corpus/default/seed_3.script")),
    ("seed_4", include_str!("../assets/corpus/default/seed_4.script")),
];

pub fn default_seeds() -> Vec<(String, Script)> {
    DEFAULT_SEEDS
        .iter()
        .map(|(name, text)| (name.to_string(), parse_script(text).expect("shipped seeds parse")))
        .collect()
}

pub fn default_grammar() -> crate::grammar::Grammar {
    crate::grammar::load_grammar(DEFAULT_GRAMMAR).expect("shipped grammar loads")
}

/// Subsystem manifest traced from the default corpus on the device backend.
pub const DEFAULT_MANIFEST: &str = include_str!("../assets/manifest/default.json");

pub fn default_manifest() -> crate::extractor::Manifest {
    crate::extractor::Manifest::from_json(DEFAULT_MANIFEST).expect("shipped manifest loads")
}
