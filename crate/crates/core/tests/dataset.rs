use nalgebra::{DVector, Vector2};
use safe_sysid::dataset::{load_demonstrations, synthetic_snake, to_training_pairs, SnakeShape, TrajectoryDataset};
use safe_sysid::robot::{generate_robot_data, sample_initial_conditions, GenerationLimits, PidGains, TwoLinkParams};
use safe_sysid::constraints::{barrier_value, SafetySpec};
use safe_sysid::Error;

fn bits(data: &TrajectoryDataset) -> Vec<u64> {
    data.recorded_demonstrations().iter().flatten().flat_map(|x| x.iter().map(|v| v.to_bits())).collect()
}

#[test]
fn save_load_round_trip_is_lossless() {
    let data = synthetic_snake(&SnakeShape::default(), 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let manifest = data.save(dir.path()).unwrap();
    let back = load_demonstrations(&manifest, false).unwrap();
    assert_eq!(back.len(), 7);
    assert_eq!(bits(&back), bits(&data));
    assert_eq!(back.recorded_target(), data.recorded_target());
    assert_eq!(back.period(), data.period());
}

#[test]
fn translated_load_round_trips_exactly() {
    let data = synthetic_snake(&SnakeShape::default(), 4).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let manifest = data.save(dir.path()).unwrap();
    let translated = load_demonstrations(&manifest, true).unwrap();
    assert!(translated.target().iter().all(|v| *v == 0.0));
    let restored = translated.untranslate();
    assert_eq!(bits(&restored), bits(&data));
}

#[test]
fn empty_demonstration_file_is_a_parse_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("manifest.json"), r#"{"period":0.01,"dims":2,"files":["a.csv"]}"#).unwrap();
    std::fs::write(dir.path().join("a.csv"), "").unwrap();
    let err = load_demonstrations(&dir.path().join("manifest.json"), false).unwrap_err();
    assert!(matches!(err, Error::Parse { .. }), "{err:?}");
}

#[test]
fn missing_manifest_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let err = load_demonstrations(&dir.path().join("nope.json"), false).unwrap_err();
    assert!(matches!(err, Error::Io { .. }), "{err:?}");
}

#[test]
fn training_pairs_follow_the_demonstrations() {
    let data = synthetic_snake(&SnakeShape { samples: 50, ..SnakeShape::default() }, 1).unwrap().translate_to_origin();
    let (inputs, targets) = to_training_pairs(&data);
    assert_eq!(inputs.len(), 7 * 49);
    let demo = data.demonstration(0);
    assert_eq!(inputs[0].state(), demo[0]);
    assert_eq!(targets[0], demo[1]);
    assert_eq!(inputs[0].error(), &demo[0] - data.target());
}

#[test]
fn robot_trajectories_converge_inside_the_limits() {
    let params = TwoLinkParams::default();
    let gains = PidGains { kp: [60.0; 2], ki: [0.5; 2], kd: [20.0; 2] };
    let safety = SafetySpec::from_ellipse(
        1.1,
        0.5,
        -std::f64::consts::FRAC_PI_4,
        DVector::from_vec(vec![1.0, -1.0]),
        0.9,
        0.01,
    )
    .unwrap();
    let target = Vector2::new(std::f64::consts::FRAC_PI_2, -std::f64::consts::FRAC_PI_2);
    let ics = sample_initial_conditions(&params, &gains, &safety, &target, 5, 100, 0.1, 0.1, 7).unwrap();
    assert_eq!(ics.len(), 5);
    let limits = GenerationLimits { safe_set: Some(&safety) };
    let data = generate_robot_data(&params, &gains, &ics, &target, 100, 0.1, &limits).unwrap();
    assert_eq!(data.len(), 5);
    let t = DVector::from_column_slice(target.as_slice());
    for demo in data.recorded_demonstrations() {
        assert!((demo.last().unwrap() - &t).norm() <= 0.01);
        for q in demo {
            assert!(q.iter().all(|v| v.abs() <= 1.90));
            assert!(barrier_value(&safety, q) >= 0.0);
        }
    }
}
