#![no_main]

use libfuzzer_sys::fuzz_target;
use nalgebra::DMatrix;
use spdhss::h2::H2Matrix;

fuzz_target!(|data: &[u8]| {
    if let Ok(h2) = H2Matrix::from_bytes(data) {
        h2.matmat(&DMatrix::zeros(h2.dim(), 1)).unwrap();
        assert_eq!(H2Matrix::from_bytes(&h2.to_bytes()).unwrap().dim(), h2.dim());
    }
});
