#![no_main]
use libfuzzer_sys::fuzz_target;
use progtune::tasks::tokenize_batch;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let lines: Vec<&str> = text.lines().collect();
    if let Ok(batch) = tokenize_batch(&lines, 8, 16) {
        assert_eq!(batch.ids.len(), lines.len() * 8);
        assert_eq!(batch.mask.len(), batch.ids.len());
        assert!(batch.ids.iter().all(|&id| id < 16));
    }
});
