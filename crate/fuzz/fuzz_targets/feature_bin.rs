#![no_main]

use libfuzzer_sys::fuzz_target;
use nwflow::tasks::{encode_binary_table, parse_binary_table};

fuzz_target!(|data: &[u8]| {
    if let Ok(table) = parse_binary_table(data, "fuzz") {
        assert_eq!(encode_binary_table(&table.rows).unwrap(), data);
    }
});
