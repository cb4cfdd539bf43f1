use serde_json::json;
use voxdiff_cli::{load_config, parse_config, RunConfig};

#[test]
fn empty_object_gives_all_defaults() {
    assert_eq!(parse_config(json!({}), &[]).unwrap(), RunConfig::default());
    assert_eq!(load_config(None, &[]).unwrap(), RunConfig::default());
}

#[test]
fn unknown_key_is_named_with_its_path() {
    let err = parse_config(json!({"train": {"trian": 3}}), &[]).unwrap_err().to_string();
    assert!(err.contains("train.trian"), "{err}");
    let err = parse_config(json!({"trian": {}}), &[]).unwrap_err().to_string();
    assert!(err.contains("trian"), "{err}");
}

#[test]
fn override_supersedes_file_value() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.json");
    std::fs::write(&path, r#"{"train": {"lr": 0.5, "batch_size": 3}}"#).unwrap();
    let cfg = load_config(Some(&path), &["train.lr=0.001".into()]).unwrap();
    assert_eq!(cfg.train.lr, 0.001);
    assert_eq!(cfg.train.batch_size, 3);
}

#[test]
fn overrides_create_sections_and_accept_strings() {
    let cfg = parse_config(json!({}), &["guidance.mode=noisy".into(), "schedule.color.kind=linear".into()]).unwrap();
    assert_eq!(cfg.guidance.mode, voxdiff::diffusion::GuidanceMode::Noisy);
    assert_eq!(cfg.schedule.color.kind, voxdiff::diffusion::ScheduleKind::Linear);
}

#[test]
fn type_errors_and_violations_are_path_qualified() {
    let err = parse_config(json!({"fit": {"iterations": "many"}}), &[]).unwrap_err().to_string();
    assert!(err.contains("fit.iterations"), "{err}");
    let err = format!("{:#}", parse_config(json!({"train": {"lr": -1.0}}), &[]).unwrap_err());
    assert!(err.contains("train"), "{err}");
    let err = format!("{:#}", parse_config(json!({"unet": {"width": 7}}), &[]).unwrap_err());
    assert!(err.starts_with("unet"), "{err}");
}

#[test]
fn malformed_overrides_are_rejected() {
    assert!(parse_config(json!({}), &["train.lr".into()]).is_err());
    assert!(parse_config(json!({}), &["train..lr=1".into()]).is_err());
    assert!(parse_config(json!({"train": {"lr": 1.0}}), &["train.lr.x=1".into()]).is_err());
    assert!(parse_config(json!([]), &[]).is_err());
}

#[test]
fn defaults_round_trip_through_json() {
    let text = serde_json::to_string(&RunConfig::default()).unwrap();
    let back = parse_config(serde_json::from_str(&text).unwrap(), &[]).unwrap();
    assert_eq!(back, RunConfig::default());
}
