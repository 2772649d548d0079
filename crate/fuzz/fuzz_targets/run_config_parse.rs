#![no_main]
use libfuzzer_sys::fuzz_target;
use progtune::config::RunConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(cfg) = RunConfig::parse(text) else { return };
    if cfg.validate().is_ok() {
        let once = cfg.to_toml().unwrap();
        let twice = RunConfig::parse(&once).unwrap().to_toml().unwrap();
        assert_eq!(once, twice);
    }
});
