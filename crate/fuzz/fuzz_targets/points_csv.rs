#![no_main]

use libfuzzer_sys::fuzz_target;
use spdhss::PointSet;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(p) = PointSet::parse_csv(text) {
        let mut out = Vec::new();
        p.write_csv(&mut out).unwrap();
        let back = PointSet::parse_csv(std::str::from_utf8(&out).unwrap()).unwrap();
        assert_eq!(back, p);
    }
});
