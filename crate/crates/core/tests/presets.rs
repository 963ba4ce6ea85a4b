use std::path::PathBuf;

use qkdlink::harness::{load_counts_file, RunConfig};

fn data() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data")
}

#[test]
fn presets_parse_and_round_trip() {
    let mut seen = 0;
    for entry in std::fs::read_dir(data().join("presets")).unwrap() {
        let path = entry.unwrap().path();
        let config = RunConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        let again = RunConfig::from_toml_str(&config.to_toml_string(), "again").unwrap();
        assert_eq!(config, again, "{}", path.display());
        seen += 1;
    }
    assert!(seen >= 6);
}

#[test]
fn distance_presets_match_their_names() {
    for (name, km) in [("0km", 0.0), ("50km", 50.0), ("100km", 100.0), ("150km", 150.0)] {
        let c = RunConfig::load(&data().join(format!("presets/{name}.toml"))).unwrap();
        assert_eq!(c.link.fiber_length_km, km);
        assert_eq!(c.link.intensities.p_z, 0.944);
    }
}

#[test]
fn golden_counts_are_consistent() {
    for name in ["table2_50km", "table2_100km", "table2_150km"] {
        let f = load_counts_file(&data().join(format!("{name}.toml"))).unwrap();
        let c = f.counts;
        assert!(c.m_z() * 50 < c.n_z(), "{name}: Z error rate should be around 1%");
        assert!(f.expected.is_some());
    }
}
