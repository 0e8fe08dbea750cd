#![no_main]
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(records) = minnet::data::parse_records(data) {
        assert_eq!(minnet::data::serialize_records(&records), data);
    }
});
