#![no_main]
use libfuzzer_sys::fuzz_target;
use progtune::config::ExportFormat;
use progtune::export::{render, RunRecord};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(record) = RunRecord::from_json(text) {
        let _ = render(&record, ExportFormat::Csv);
        let _ = render(&record, ExportFormat::Jsonl);
    }
});
