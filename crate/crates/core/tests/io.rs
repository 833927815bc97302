use kbrw::brw::TreeRow;
use kbrw::io::*;
use proptest::prelude::*;

#[test]
fn level_lists() {
    assert_eq!(parse_levels("").unwrap(), Vec::<f64>::new());
    assert_eq!(parse_levels(" -1, 0.5 ,3").unwrap(), vec![-1.0, 0.5, 3.0]);
    for bad in ["1,1", "2,1", "1,,2", "1,x", "inf", "1,NaN", ","] {
        assert!(parse_levels(bad).is_err(), "{bad}");
    }
}

#[test]
fn count_lists() {
    assert_eq!(parse_counts("1,10,100").unwrap(), vec![1, 10, 100]);
    for bad in ["", "0,1", "3,3", "-1", "1.5", "4,2"] {
        assert!(parse_counts(bad).is_err(), "{bad}");
    }
}

#[test]
fn record_table_rejects_malformed_input() {
    let cases = [
        "replica,z,leaves,truncated\n0,1,1,0\n",
        "replica,z,h_1,truncated\n",
        "replica,z,leaves,h_2,h_1,truncated\n",
        "replica,z,leaves,h_x,truncated\n",
        "replica,z,leaves,h_1,truncated\n0,0,0,0,0\n",
        "replica,z,leaves,h_1,truncated\n0,1,1,0,2\n",
        "replica,z,leaves,h_1,truncated\n0,1,1,0\n",
        "replica,z,leaves,h_1,truncated\n0,1,-1,0,0\n",
    ];
    // the first case has no level column, which is legal
    assert!(read_tree_rows(cases[0].as_bytes()).is_ok());
    for c in &cases[1..] {
        assert!(read_tree_rows(c.as_bytes()).is_err(), "{c}");
    }
    match read_tree_rows(cases[5].as_bytes()) {
        Err(IoError::Record { line, .. }) => assert_eq!(line, 2),
        other => panic!("{other:?}"),
    }
}

fn table() -> impl Strategy<Value = RecordTable> {
    (proptest::collection::btree_set(-50i32..50, 0..4)).prop_flat_map(|levels| {
        let k = levels.len();
        let levels: Vec<f64> = levels.into_iter().map(|l| l as f64 / 4.0).collect();
        let row = (1u64..1000, 0u64..1000, proptest::collection::vec(0u64..100, k), any::<bool>());
        proptest::collection::vec(row, 0..20).prop_map(move |rows| RecordTable {
            levels: levels.clone(),
            rows: rows
                .into_iter()
                .enumerate()
                .map(|(i, (z, leaves, h, truncated))| TreeRow { replica: i as u64, z, leaves, h, truncated })
                .collect(),
        })
    })
}

proptest! {
    #[test]
    fn record_table_round_trips(t in table()) {
        let mut buf = Vec::new();
        write_tree_rows(&mut buf, &t).unwrap();
        prop_assert_eq!(read_tree_rows(buf.as_slice()).unwrap(), t);
    }

    #[test]
    fn level_list_round_trips(v in proptest::collection::btree_set(-1000i64..1000, 0..8)) {
        let levels: Vec<f64> = v.into_iter().map(|x| x as f64 / 8.0).collect();
        let text = levels.iter().map(f64::to_string).collect::<Vec<_>>().join(",");
        prop_assert_eq!(parse_levels(&text).unwrap(), levels);
    }
}

const MODEL: &str = r#"{"kind":"iid","nu":{"type":"deterministic","value":2},"x":{"type":"two_point","up":1.0,"p_up":0.05,"down":-1.0}}"#;

fn config(command: &str) -> String {
    format!(r#"{{"model":{MODEL},"command":{command},"seed":3,"output_dir":"o"}}"#)
}

#[test]
fn config_defaults_and_hash() {
    let cfg = ExperimentConfig::from_json(&config(r#"{"name":"simulate","x":1,"replicas":10}"#)).unwrap();
    assert_eq!(cfg.workers, 1);
    match &cfg.command {
        Command::Simulate { levels, check_exploration, survival_curve, .. } => {
            assert!(levels.is_empty() && *check_exploration && survival_curve.is_none());
        }
        other => panic!("{other:?}"),
    }
    let again = ExperimentConfig::from_json(&cfg.to_json()).unwrap();
    assert_eq!(again.config_hash(), cfg.config_hash());
    let mut moved = again.clone();
    moved.workers = 8;
    moved.output_dir = "elsewhere".into();
    assert_eq!(moved.config_hash(), cfg.config_hash());
    moved.seed = 4;
    assert_ne!(moved.config_hash(), cfg.config_hash());
}

#[test]
fn config_errors_carry_paths() {
    let path = |text: &str| match ExperimentConfig::from_json(text) {
        Err(IoError::Schema { path, .. }) => path,
        other => panic!("{other:?}"),
    };
    let simulate = r#"{"name":"simulate","x":1,"replicas":10}"#;
    assert_eq!(path(&config(simulate).replace("0.05", "\"x\"")), "model.x.p_up");
    match ExperimentConfig::from_json(&config(simulate).replace("0.05", "2.0")) {
        Err(IoError::Schema { path, message }) => assert!(path == "model" && message.contains("p_up"), "{message}"),
        other => panic!("{other:?}"),
    }
    assert_eq!(path(&config(simulate).replace("\"seed\":3", "\"seed\":-3")), "seed");
    assert_eq!(path(&config(r#"{"name":"simulate","x":1,"replicas":10,"levels":[2,1]}"#)), "command.levels");
    assert_eq!(path(&config(r#"{"name":"simulate","x":1,"replicas":0}"#)), "command.replicas");
    assert_eq!(path(&config(r#"{"name":"estimate","records":"r.csv","range":[5,1]}"#)), "command.range");
    assert_eq!(path(&config(r#"{"name":"teleport"}"#)), "command.name");
    assert_eq!(path(&config(simulate).replace("\"seed\"", "\"extra\":1,\"seed\"")), "extra");
    let no_model = r#"{"command":{"name":"analyze-model"},"seed":1,"output_dir":"o"}"#;
    assert_eq!(path(no_model), "model");
    let report = r#"{"command":{"name":"report","run_dir":"runs"},"seed":1,"output_dir":"o"}"#;
    assert!(ExperimentConfig::from_json(report).is_ok());
}

#[test]
fn long_decimal_floats_round_trip() {
    let text = r#"{"kind":"iid","nu":{"type":"deterministic","value":2},"x":{"type":"gaussian","mean":-1984.60091572126816,"sd":1.5}}"#;
    let m = kbrw::model::ModelSpec::from_json(text).unwrap();
    assert_eq!(kbrw::model::ModelSpec::from_json(&m.to_json()).unwrap().kind(), m.kind());
}
