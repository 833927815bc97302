#![no_main]

use kbrw::io::{parse_counts, parse_levels};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(levels) = parse_levels(text) {
        assert!(levels.iter().all(|l| l.is_finite()));
        assert!(levels.windows(2).all(|w| w[0] < w[1]));
        let joined = levels.iter().map(f64::to_string).collect::<Vec<_>>().join(",");
        assert_eq!(parse_levels(&joined).unwrap(), levels);
    }
    if let Ok(counts) = parse_counts(text) {
        assert!(!counts.is_empty() && counts[0] > 0);
        assert!(counts.windows(2).all(|w| w[0] < w[1]));
    }
});
