use std::path::Path;

use kdml::experiment::ExperimentSpec;

#[test]
fn shipped_experiment_files_validate() {
    let dir = Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/../../experiments"));
    let mut seen = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            let spec = ExperimentSpec::from_file(&path).unwrap();
            spec.validate().unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            spec.dataset.split().unwrap();
            seen += 1;
        }
    }
    assert!(seen >= 3);
}
