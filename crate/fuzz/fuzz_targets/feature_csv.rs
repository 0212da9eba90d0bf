#![no_main]

use libfuzzer_sys::fuzz_target;
use nwflow::format::matrix_csv;
use nwflow::tasks::parse_csv_table;

fuzz_target!(|data: &[u8]| {
    let Ok(table) = parse_csv_table(data, "fuzz") else {
        return;
    };
    assert!(table.rows.as_slice().iter().all(|v| v.is_finite()));
    assert_eq!(table.columns.len(), table.rows.d());
    // canonical re-encoding parses back to the same values
    let text = matrix_csv(&table.columns, &table.rows).unwrap();
    let again = parse_csv_table(&text, "fuzz").unwrap();
    assert_eq!(again.rows, table.rows);
});
