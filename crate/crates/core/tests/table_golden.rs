use std::path::Path;

use kdml::experiment::tables;

fn fixtures() -> &'static Path {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures"))
}

#[test]
fn fixture_reports_render_the_golden_table() {
    let rendered = tables(&fixtures().join("reports")).unwrap();
    assert_eq!(rendered.len(), 1);
    let (table, csv) = &rendered[0];
    if std::env::var_os("KDML_BLESS").is_some() {
        std::fs::write(fixtures().join("table.txt"), table).unwrap();
        std::fs::write(fixtures().join("table.csv"), csv).unwrap();
    }
    assert_eq!(table, &std::fs::read_to_string(fixtures().join("table.txt")).unwrap());
    assert_eq!(csv, &std::fs::read_to_string(fixtures().join("table.csv")).unwrap());
}
