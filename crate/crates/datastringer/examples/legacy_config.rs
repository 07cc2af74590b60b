//! Loads a use-cases file in the original positional form and shows how
//! it expands into named use cases.
//!
//! ```bash
//! cargo run --example legacy_config
//! ```

use datastringer::config;

fn main() {
    let dir = tempfile::tempdir().expect("temp dir");
    let path = dir.path().join("use_cases.json");
    let legacy = r#"[{
  "stringer": "local-police-stringer.js",
  "parameters": ["metropolitan", "00AGGU"]
}, {
  "stringer": "crime-stringer.js",
  "parameters": ["51.52863195218981", "-0.12342453002929688", "6", "10"]
}]"#;
    std::fs::write(&path, legacy).expect("write config");

    println!("legacy file:\n{legacy}\n");
    let config = config::load_config(&path).expect("load");
    println!("expands to {} use cases:\n", config.use_cases.len());
    for uc in &config.use_cases {
        println!("  id:      {}", uc.id);
        println!("  kind:    {}", uc.stringer_kind);
        println!("  enabled: {}", uc.enabled);
        for (name, value) in &uc.parameters {
            println!("    {name} = {value}");
        }
        println!();
    }

    let diagnostics = config::validate(&config);
    println!("validation diagnostics: {}", diagnostics.len());

    // The expansion is stable: serialize and reload.
    let round_tripped = config::parse_config(&config.to_canonical_json()).expect("reparse");
    assert_eq!(round_tripped, config);
    println!("round-trip through the extended form preserves every value");
}
