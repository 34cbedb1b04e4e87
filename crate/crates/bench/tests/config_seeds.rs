use std::fs;
use std::path::PathBuf;

use spdhss_bench::{BenchError, ExperimentConfig};

#[test]
fn config_seeds_parse_as_expected() {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus/config_parse");
    let mut seen = 0;
    for entry in fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        let name = path.file_name().unwrap().to_string_lossy().to_string();
        if !name.starts_with("seed-") {
            continue;
        }
        seen += 1;
        let text = fs::read_to_string(&path).unwrap();
        let parsed = ExperimentConfig::parse(&text, &[]);
        if name == "seed-duplicate" {
            assert!(matches!(parsed, Err(BenchError::Config(_))), "{name}");
        } else {
            parsed.unwrap_or_else(|e| panic!("{name}: {e}"));
        }
    }
    assert!(seen >= 3);
}
