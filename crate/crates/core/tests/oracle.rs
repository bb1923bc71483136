mod common;

use std::time::Duration;

use adapter_cluster::merge::linear_merge;
use adapter_cluster::oracle::{parse_loss_line, OracleError};
use adapter_cluster::{AdapterMeta, ExternalOracle, LoraAdapter, LossOracle};
use common::fleet;

fn member_loss(model: &adapter_cluster::SyntheticTaskModel, set: &adapter_cluster::AdapterSet, members: &[usize], task: usize) -> f64 {
    let flats: Vec<Vec<f32>> = members.iter().map(|&i| set.get(i).flatten()).collect();
    let refs: Vec<&[f32]> = flats.iter().map(Vec::as_slice).collect();
    let merged = linear_merge(&refs, &vec![1.0; refs.len()]).unwrap();
    model.distance_loss(&merged, set.get(task).task_id()).unwrap()
}

#[test]
fn synthetic_loss_at_the_target() {
    let (set, model) = fleet(4);
    let far = model.with_examples(1_000_000_000).unwrap();
    let schema = set.schema();
    let target = model.target("task_03").unwrap().to_vec();
    let exact = LoraAdapter::from_flat(AdapterMeta::new("m", 4, 16.0), &schema, &target).unwrap();
    let l = far.evaluate(&exact, "task_03").unwrap();
    assert!((0.0..1e-10).contains(&l), "{l}");

    let delta = 0.5f32;
    let mut shifted = target.clone();
    shifted[0] += delta;
    let a = LoraAdapter::from_flat(AdapterMeta::new("m", 4, 16.0), &schema, &shifted).unwrap();
    let expected = (delta * delta) as f64 / target.len() as f64;
    assert!((far.evaluate(&a, "task_03").unwrap() - expected).abs() < 1e-9);
}

#[test]
fn synthetic_loss_is_deterministic_and_bounded() {
    let (set, model) = fleet(4);
    for a in set.iter() {
        let l = model.evaluate(a, a.task_id()).unwrap();
        assert_eq!(l.to_bits(), model.evaluate(a, a.task_id()).unwrap().to_bits());
        let d = model.distance_loss(&a.flatten(), a.task_id()).unwrap();
        assert!(l >= d && l < d + model.noise_bound());
    }
    assert!(matches!(model.evaluate(set.get(0), "nope"), Err(OracleError::UnknownTask(_))));
}

#[test]
fn own_group_merge_beats_mixed_merge() {
    let mut wins = 0;
    for seed in 0..100 {
        let (set, model) = fleet(seed);
        // adapters t with t % 5 == 0 form group 0; t % 5 == 1 form group 1
        let own: Vec<usize> = (0..40).filter(|t| t % 5 == 0).collect();
        let mixed: Vec<usize> = own[..4].iter().copied().chain((0..40).filter(|t| t % 5 == 1).take(4)).collect();
        wins += (member_loss(&model, &set, &own, 0) < member_loss(&model, &set, &mixed, 0)) as usize;
    }
    assert!(wins >= 99, "{wins}");
}

fn sample() -> LoraAdapter {
    fleet(0).0.get(0).clone()
}

#[test]
fn echo_command_is_a_loss() {
    let o = ExternalOracle::from_command_line("sh -c 'echo 0.5'", 10).unwrap();
    assert_eq!(o.evaluate(&sample(), "task_00").unwrap(), 0.5);
}

#[test]
fn protocol_arguments_are_appended() {
    let script = r#"sh -c 'test "$1" = --adapter && test -s "$2" && test "$3" = --task && test "$4" = task_00 && test "$5" = --examples && echo "$6"' oracle"#;
    let o = ExternalOracle::from_command_line(script, 7).unwrap();
    assert_eq!(o.evaluate(&sample(), "task_00").unwrap(), 7.0);
}

#[test]
fn failing_command_reports_exit_code() {
    let o = ExternalOracle::from_command_line("sh -c 'echo boom >&2; exit 1'", 10).unwrap();
    let e = o.evaluate(&sample(), "task_00").unwrap_err();
    assert!(matches!(e, OracleError::Failed { code: 1, .. }));
    assert!(e.to_string().starts_with("oracle command failed (exit 1)"), "{e}");
    assert!(e.to_string().contains("boom"));
}

#[test]
fn slow_command_times_out() {
    let o = ExternalOracle::from_command_line("sh -c 'exec sleep 5'", 10)
        .unwrap()
        .with_timeout(Duration::from_millis(200));
    assert!(matches!(o.evaluate(&sample(), "task_00"), Err(OracleError::Timeout(_))));
}

#[test]
fn bad_output_and_commands_are_typed_errors() {
    let parse = ExternalOracle::from_command_line("sh -c 'echo hello'", 10).unwrap();
    assert!(matches!(parse.evaluate(&sample(), "t"), Err(OracleError::Parse(_))));
    let missing = ExternalOracle::from_command_line("/definitely/not/here", 10).unwrap();
    assert!(matches!(missing.evaluate(&sample(), "t"), Err(OracleError::CommandNotFound(_))));
    assert!(ExternalOracle::from_command_line("   ", 10).is_err());
    assert!(ExternalOracle::from_command_line("sh -c 'unterminated", 10).is_err());
}

#[test]
fn loss_line_grammar() {
    assert_eq!(parse_loss_line("1.25\n").unwrap(), 1.25);
    assert_eq!(parse_loss_line("-3e-2\nignored").unwrap(), -0.03);
    assert_eq!(parse_loss_line("7").unwrap(), 7.0);
    for bad in ["", "nan", "inf", "1.", ".5", "+1", "1,5", "0x10", " 1"] {
        assert!(parse_loss_line(bad).is_err(), "{bad:?}");
    }
    assert!(matches!(parse_loss_line("1e400"), Err(OracleError::NonFinite(_)) | Err(OracleError::Parse(_))));
}

#[test]
fn parallel_external_calls() {
    let o = ExternalOracle::from_command_line("sh -c 'echo 2.5'", 1).unwrap().with_parallelism(4);
    let a = sample();
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..8).map(|i| s.spawn({
            let (o, a) = (&o, &a);
            move || o.evaluate(a, &format!("t{i}")).unwrap()
        })).collect();
        for h in handles {
            assert_eq!(h.join().unwrap(), 2.5);
        }
    });
}
