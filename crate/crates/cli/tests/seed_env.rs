//! Kept in its own binary: it mutates the process environment.

use resd_cli::{parse_config, SEED_ENV};

#[test]
fn environment_seed_applies_only_when_unset_elsewhere() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.cfg");
    std::fs::write(
        &path,
        "dataset=synthetic\nmodel=mlp\nT=2\nepochs=1\nbatch_size=4\nlr=0.1\nhidden=4\n",
    )
    .unwrap();
    std::env::set_var(SEED_ENV, "17");
    assert_eq!(parse_config(&path, &[]).unwrap().seed, 17);
    assert_eq!(parse_config(&path, &["seed=5".into()]).unwrap().seed, 5);
    std::fs::write(
        &path,
        "dataset=synthetic\nmodel=mlp\nT=2\nepochs=1\nbatch_size=4\nlr=0.1\nhidden=4\nseed=2\n",
    )
    .unwrap();
    assert_eq!(parse_config(&path, &[]).unwrap().seed, 2);
    std::env::remove_var(SEED_ENV);
    assert_eq!(parse_config(&path, &[]).unwrap().seed, 2);
}
