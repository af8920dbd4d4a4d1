mod common;

use common::*;
use hmfn::dataset_io::{self, load_dataset, split_scenes, validate, write_dataset, DEFAULT_RATIOS};

#[test]
fn every_corruption_is_named_by_the_validator() {
    let dir = tempfile::tempdir().unwrap();
    let clean = desk_dataset(dir.path(), 3, 3, 21);
    assert!(validate(&clean).is_empty());
    for c in corruptions() {
        let mut t = clean.clone();
        let token = (c.apply)(&mut t);
        let v = validate(&t);
        assert!(
            v.iter().any(|x| x.token == token),
            "{}: violations {:?} do not name {}",
            c.name,
            v,
            token
        );
    }
}

#[test]
fn corrupted_tables_still_load() {
    let dir = tempfile::tempdir().unwrap();
    let mut t = desk_dataset(dir.path(), 2, 2, 4);
    let token = (corruptions()[0].apply)(&mut t);
    let out = dir.path().join("broken");
    write_dataset(&t, &out).unwrap();
    let back = load_dataset(&out).unwrap();
    assert!(validate(&back).iter().any(|v| v.token == token));
    assert!(dataset_io::ensure_valid(&back).is_err());
}

#[test]
fn empty_dataset_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let t = dataset_io::DatasetTables::default();
    write_dataset(&t, dir.path()).unwrap();
    let back = load_dataset(dir.path()).unwrap();
    assert!(back.is_empty());
    assert!(validate(&back).is_empty());
}

#[test]
fn single_scene_split_warns() {
    let dir = tempfile::tempdir().unwrap();
    let t = desk_dataset(dir.path(), 1, 1, 2);
    let s = split_scenes(&t, DEFAULT_RATIOS, 0, true).unwrap();
    assert_eq!((s.train.len(), s.val.len(), s.test.len()), (1, 0, 0));
    assert!(!s.warnings.is_empty());
}
