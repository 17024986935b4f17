#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(ds) = fedbn_core::data::parse_csv(data, "fuzz") {
        let mut out = Vec::new();
        fedbn_core::data::write_csv(&ds, &mut out).unwrap();
        let again = fedbn_core::data::parse_csv(out.as_slice(), "fuzz").unwrap();
        assert!(again.features.bitwise_eq(&ds.features));
        assert_eq!(again.labels, ds.labels);
    }
});
