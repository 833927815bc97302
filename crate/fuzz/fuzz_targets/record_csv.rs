#![no_main]

use kbrw::io::{read_tree_rows, write_tree_rows};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(table) = read_tree_rows(data) else { return };
    assert!(table.rows.iter().all(|r| r.z >= 1 && r.h.len() == table.levels.len()));
    let mut out = Vec::new();
    write_tree_rows(&mut out, &table).unwrap();
    assert_eq!(read_tree_rows(out.as_slice()).unwrap(), table);
});
