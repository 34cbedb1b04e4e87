#![no_main]

use libfuzzer_sys::fuzz_target;
use nalgebra::DVector;
use spdhss::SpdHss;

fuzz_target!(|data: &[u8]| {
    if let Ok(h) = SpdHss::from_bytes(data) {
        h.matvec(&DVector::zeros(h.dim())).unwrap();
        assert_eq!(SpdHss::from_bytes(&h.to_bytes()).unwrap().to_bytes(), h.to_bytes());
    }
});
