use qkdlink::harness::{replay, run_simulation, RunConfig};
use qkdlink::link::EventDump;

const CONFIG: &str = r#"
[run]
seed = 21
block_duration = 0.05
total_duration = 0.2

[link]
fiber_length_km = 25.0
intensities = { mu = 0.568, nu = 0.144, p_mu = 0.799, p_z = 0.944 }

[sync]
length = 4096
random_bits = 9

[feedback]
enabled = false
"#;

#[test]
fn dumped_stream_reproduces_the_key_rate() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["events.bin", "events.txt"] {
        let mut config = RunConfig::from_toml_str(CONFIG, "inline").unwrap();
        config.run.dump_events = Some(dir.path().join(name));
        let live = run_simulation(&config).unwrap();
        let dump = EventDump::new(&config.link, live.events.clone().unwrap());
        dump.save(&dir.path().join(name)).unwrap();
        let loaded = EventDump::load(&dir.path().join(name)).unwrap();
        assert_eq!(loaded.events.len(), dump.events.len());
        let replayed = replay(&config, &loaded.events).unwrap();
        assert_eq!(replayed.aggregate, live.summary.aggregate);
        assert_eq!(
            serde_json::to_string(&replayed.key_rate).unwrap(),
            serde_json::to_string(&live.summary.key_rate).unwrap()
        );
    }
}
