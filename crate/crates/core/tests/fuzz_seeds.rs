//! The checked-in fuzz corpus must keep decoding as the formats evolve.

use std::fs;
use std::path::PathBuf;

use nalgebra::{DMatrix, DVector};
use spdhss::h2::H2Matrix;
use spdhss::{PointSet, SpdHss};

fn seeds(target: &str) -> Vec<(String, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut out: Vec<(String, Vec<u8>)> = fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap().to_string_lossy().starts_with("seed-"))
        .map(|p| (p.display().to_string(), fs::read(&p).unwrap()))
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds for {target}");
    out
}

#[test]
fn point_seeds_parse() {
    for (name, bytes) in seeds("points_csv") {
        let p = PointSet::parse_csv(std::str::from_utf8(&bytes).unwrap()).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert!(!p.is_empty());
    }
}

#[test]
fn h2_seeds_decode_and_round_trip() {
    for (name, bytes) in seeds("h2_decode") {
        let h2 = H2Matrix::from_bytes(&bytes).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert_eq!(h2.to_bytes(), bytes, "{name}");
        h2.matmat(&DMatrix::from_element(h2.dim(), 1, 1.0)).unwrap();
    }
}

#[test]
fn spdhss_seeds_decode_and_round_trip() {
    for (name, bytes) in seeds("spdhss_decode") {
        let h = SpdHss::from_bytes(&bytes).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert_eq!(h.to_bytes(), bytes, "{name}");
        let x = DVector::from_element(h.dim(), 1.0);
        assert!(x.dot(&h.matvec(&x).unwrap()) > 0.0);
    }
}
