//! Configuration files, run directories and report tables.

use forge_core::harness::*;
use forge_core::train::EpochRecord;
use proptest::prelude::*;

fn record(epoch: usize, acc: f32, bdr: &[f32]) -> EpochRecord {
    EpochRecord { epoch, train_loss: 1.0, test_acc: acc, bdr: bdr.to_vec() }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn config_text_round_trips(
        width in 1usize..64,
        lr in 1e-4f64..1.0,
        seeds in prop::collection::vec(0u64..100, 1..5),
        block in prop::sample::select(vec!["plain", "ierb", "cerb"]),
    ) {
        let seeds: Vec<String> = seeds.iter().map(|s| s.to_string()).collect();
        let cfg = ExperimentConfig::default()
            .with("width", &width.to_string()).unwrap()
            .with("lr", &lr.to_string()).unwrap()
            .with("seeds", &seeds.join(",")).unwrap()
            .with("block", block).unwrap();
        let back = ExperimentConfig::parse(&cfg.to_text()).unwrap();
        prop_assert_eq!(back.to_text(), cfg.to_text());
        prop_assert_eq!(back.hash(), cfg.hash());
    }
}

#[test]
fn tables_aggregate_hand_written_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    let base = ExperimentConfig::default().with("out", out).unwrap();
    // (block, fraction, seed, final acc, final bdr)
    let runs = [
        ("plain", "0.02", 0, 0.50, 0.1),
        ("plain", "0.02", 1, 0.60, 0.3),
        ("cerb", "0.02", 0, 0.80, 0.4),
        ("cerb", "0.02", 1, 0.70, 0.2),
        ("cerb", "0.1", 0, 0.90, 0.5),
    ];
    for (block, fraction, seed, acc, bdr) in runs {
        let cfg = base.clone().with("block", block).unwrap().with("fraction", fraction).unwrap();
        let dir = RunDir::create(&cfg, "attack", seed).unwrap();
        dir.write_metrics(&[record(1, 0.1, &[0.0, 0.0]), record(2, acc, &[bdr, bdr])]).unwrap();
    }
    // non-attack families stay out of the comparison tables
    let own = RunDir::create(&base, "train-protected", 0).unwrap();
    own.write_metrics(&[record(1, 0.99, &[0.0])]).unwrap();

    let t2 = report(tmp.path(), Table::Table2).unwrap();
    assert_eq!(t2, "fraction,plain,cerb,ierb\n0.02,0.5500,0.7500,\n0.1,,0.9000,\n");

    let t1 = report(tmp.path(), Table::Table1).unwrap();
    let rows: Vec<&str> = t1.lines().collect();
    assert_eq!(rows[0], "block,fraction,seeds,acc,bdr");
    assert!(rows.contains(&"cerb,0.02,2,0.7500,0.3000"));
    assert!(rows.contains(&"plain,0.02,2,0.5500,0.2000"));
    assert_eq!(rows.len(), 4);

    let abl = report(tmp.path(), Table::Ablation).unwrap();
    assert!(abl.lines().any(|l| l == "cerb,all,2,leaky_relu,0.1,1,0.9000"), "{abl}");

    let all = report(tmp.path(), Table::Runs).unwrap();
    assert_eq!(all.lines().count(), 1 + runs.len() + 1);
}

#[test]
fn run_directories_group_seeds_into_one_family() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::default().with("out", tmp.path().to_str().unwrap()).unwrap();
    let a = RunDir::create(&cfg, "attack", 0).unwrap();
    let b = RunDir::create(&cfg, "attack", 1).unwrap();
    assert_eq!(a.name, b.name);
    assert_ne!(a.config_hash, b.config_hash);
    let text = std::fs::read_to_string(a.path.join("config.txt")).unwrap();
    assert_eq!(ExperimentConfig::parse(&text).unwrap().seeds().unwrap(), vec![0]);
    let other = RunDir::create(&cfg.clone().with("fraction", "0.04").unwrap(), "attack", 0).unwrap();
    assert_ne!(other.name, a.name);
}

#[test]
fn bad_tables_and_roots_are_errors() {
    assert!("table9".parse::<Table>().is_err());
    assert!(report(std::path::Path::new("/nonexistent/runs"), Table::Runs).is_err());
}
