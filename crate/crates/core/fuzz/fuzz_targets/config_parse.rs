#![no_main]
use libfuzzer_sys::fuzz_target;
use minnet::config::{parse_kv, RunConfig};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let _ = parse_kv(text);
    if let Ok(cfg) = RunConfig::parse(text) {
        let echo = cfg.echo();
        assert_eq!(RunConfig::parse(&echo).unwrap().echo(), echo);
    }
});
