use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use super::*;
use crate::registry::BackendProfile;

fn fabric_with(config: FabricConfig, max_instances: u32, max_parallel: u32) -> Fabric {
    let mut f = Fabric::new(FabricConfig { audit: true, ..config }, [ClusterSpec::new("c", 24)]);
    f.register_endpoint(EndpointSpec::new("ep", "c", max_instances, max_parallel)).unwrap();
    f.register_model(ModelSpec::generation("m8", 8.0, 1, BackendProfile::mock(1000.0)), &["ep"]).unwrap();
    f
}

fn fabric() -> Fabric {
    fabric_with(FabricConfig::default(), 4, 16)
}

fn run(f: &mut Fabric, secs: u64) -> Vec<Output> {
    f.advance_to(f.now() + SimDuration::from_secs(secs));
    f.drain_outputs()
}

fn completed(outputs: &[Output]) -> Vec<(TaskId, TaskReport)> {
    outputs
        .iter()
        .filter_map(|o| match o {
            Output::Completed { task, report, .. } => Some((*task, report.clone())),
            _ => None,
        })
        .collect()
}

fn failed(outputs: &[Output]) -> Vec<(TaskId, TaskError)> {
    outputs
        .iter()
        .filter_map(|o| match o {
            Output::Failed { task, error, .. } => Some((*task, error.clone())),
            _ => None,
        })
        .collect()
}

fn assert_clean(f: &Fabric) {
    assert_eq!(f.violations(), &[] as &[String]);
    assert_eq!(f.stats().illegal_transitions, 0);
    f.check_invariants().unwrap();
}

#[test]
fn cold_start_then_hot_path() {
    let mut f = fabric();
    let t = f.submit(TaskSpec::generation("m8", 10, 100), "ep").unwrap();
    let out = run(&mut f, 60);
    let (id, r) = &completed(&out)[0];
    assert_eq!(*id, t);
    // 16 GB at 2 GB/s plus 10 s base, after a 5 s launch.
    let cold = r.cold.unwrap();
    assert_eq!(cold.queue_wait, SimDuration::ZERO);
    assert_eq!(cold.allocation, SimDuration::from_secs(5));
    assert_eq!(cold.load, SimDuration::from_secs(18));
    assert_eq!(r.started_at, SimTime::from_secs(23));
    // 100 tokens at 1000/16 tok/s per slot.
    assert_eq!(r.service_time(), SimDuration::from_secs_f64(1.6));

    let hot = f.submit(TaskSpec::generation("m8", 10, 100), "ep").unwrap();
    let submitted = f.now();
    let out = run(&mut f, 10);
    let (id, r) = &completed(&out)[0];
    assert_eq!(*id, hot);
    assert_eq!(r.cold, None);
    assert_eq!(r.started_at, submitted);
    assert_eq!(r.latency(), r.service_time());
    assert_clean(&f);
}

#[test]
fn concurrent_ensure_creates_one_instance() {
    let mut f = fabric();
    let ids: Vec<InstanceId> = (0..100).map(|_| f.ensure_instance("m8", "ep").unwrap()).collect();
    assert!(ids.iter().all(|i| *i == ids[0]));
    assert_eq!(f.stats().allocation_jobs, 1);
    assert_eq!(f.instance(ids[0]).unwrap().state, InstanceState::Starting);
}

#[test]
fn first_request_for_cold_model_queues_an_instance() {
    let mut f = fabric();
    f.submit_background_job("c", SimTime::ZERO, 24 * 8, SimDuration::from_secs(100)).unwrap();
    f.advance_to(SimTime::ZERO);
    let id = f.ensure_instance("m8", "ep").unwrap();
    assert_eq!(f.instance(id).unwrap().state, InstanceState::Queued);
    assert_eq!(f.cluster_status("c").unwrap().queued_jobs, 1);
}

#[test]
fn never_more_than_max_parallel_in_flight() {
    let mut f = fabric_with(FabricConfig::default(), 1, 16);
    for _ in 0..100 {
        f.submit(TaskSpec::generation("m8", 1, 50), "ep").unwrap();
    }
    let out = run(&mut f, 600);
    assert_eq!(completed(&out).len(), 100);
    assert_eq!(f.stats().peak_in_flight, 16);
    assert_clean(&f);
}

#[test]
fn saturation_spawns_a_second_instance() {
    let mut f = fabric_with(FabricConfig::default(), 2, 1);
    f.submit(TaskSpec::generation("m8", 1, 100_000), "ep").unwrap();
    run(&mut f, 30);
    assert_eq!(f.instances().count(), 1);
    for _ in 0..5 {
        f.submit(TaskSpec::generation("m8", 1, 10), "ep").unwrap();
    }
    run(&mut f, 2);
    assert_eq!(f.instances().count(), 2);
}

#[test]
fn autoscale_respects_the_cap() {
    let mut f = fabric_with(FabricConfig { autoscale_interval: None, ..FabricConfig::default() }, 4, 1);
    for _ in 0..4 {
        f.submit(TaskSpec::generation("m8", 1, 100_000), "ep").unwrap();
        run(&mut f, 30);
    }
    assert_eq!(f.instances().count(), 4);
    f.submit(TaskSpec::generation("m8", 1, 10), "ep").unwrap();
    assert_eq!(f.autoscale_tick(), vec![]);
    assert_eq!(f.instances().count(), 4);
    assert_eq!(f.pending(), 1);
}

#[test]
fn idle_instance_with_empty_queue_is_left_alone() {
    let mut f = fabric_with(FabricConfig { autoscale_interval: None, ..FabricConfig::default() }, 4, 1);
    f.submit(TaskSpec::generation("m8", 1, 10), "ep").unwrap();
    run(&mut f, 60);
    assert_eq!(f.autoscale_tick(), vec![]);
}

#[test]
fn reaper_boundary() {
    let mut f = fabric();
    f.submit(TaskSpec::generation("m8", 1, 10), "ep").unwrap();
    let out = run(&mut f, 60);
    let done = completed(&out)[0].1.finished_at;
    let inst = f.instances().next().unwrap().id;
    let free_before = f.cluster_status("c").unwrap().free_nodes;

    f.advance_to(done + SimDuration::from_secs(7199));
    assert_eq!(f.idle_reaper_tick(), vec![]);
    assert_eq!(f.instance(inst).unwrap().state, InstanceState::Running);
    f.advance_to(done + SimDuration::from_secs(7200));
    assert_eq!(f.idle_reaper_tick(), vec![inst]);
    assert!(f.instance(inst).is_none());
    assert_eq!(f.cluster_status("c").unwrap().free_nodes, free_before + 1);
    assert_clean(&f);
}

#[test]
fn busy_instance_is_not_reaped() {
    let config = FabricConfig { idle_timeout: SimDuration::from_secs(10), ..FabricConfig::default() };
    let mut f = fabric_with(config, 1, 1);
    f.submit(TaskSpec::generation("m8", 1, 100_000), "ep").unwrap();
    run(&mut f, 60);
    assert_eq!(f.instances().next().unwrap().in_flight, 1);
    assert_eq!(f.idle_reaper_tick(), vec![]);
}

#[test]
fn crash_mid_task_is_retried_once() {
    let mut f = fabric();
    let t = f.submit(TaskSpec::generation("m8", 1, 2000), "ep").unwrap();
    let mut out = run(&mut f, 24);
    let inst = f.instances().next().unwrap().id;
    f.inject_failure(inst).unwrap();
    out.extend(run(&mut f, 200));
    let done = completed(&out);
    assert_eq!(done.len(), 1);
    assert_eq!(done[0].0, t);
    assert_eq!(done[0].1.attempts, 2);
    assert_eq!(f.instance(inst).unwrap().restarts, 1);
    assert_eq!(f.instance(inst).unwrap().state, InstanceState::Running);
    check_output_sequence(&out).unwrap();
    assert_clean(&f);
}

#[test]
fn three_crashes_exhaust_the_retry_cap() {
    let mut f = fabric();
    let t = f.submit(TaskSpec::generation("m8", 1, 100_000), "ep").unwrap();
    let mut all = Vec::new();
    for _ in 0..3 {
        all.extend(run(&mut f, 60));
        let inst = f.instances().next().unwrap().id;
        assert_eq!(f.instance(inst).unwrap().in_flight, 1);
        f.inject_failure(inst).unwrap();
    }
    all.extend(run(&mut f, 5));
    assert_eq!(failed(&all), vec![(t, TaskError::Failed { attempts: 3 })]);
    assert_eq!(f.open_tasks(), 0);
    assert_clean(&f);
}

#[test]
fn oversized_weights_fail_on_too_few_gpus() {
    let mut f = Fabric::new(FabricConfig { audit: true, ..FabricConfig::default() }, [ClusterSpec::new("c", 24)]);
    f.register_endpoint(EndpointSpec::new("ep", "c", 1, 4)).unwrap();
    let small = ModelSpec::generation("big-8", 405.0, 8, BackendProfile::mock(100.0));
    let enough = ModelSpec::generation("big-21", 405.0, 21, BackendProfile::mock(100.0));
    f.register_model(small, &["ep"]).unwrap();
    f.register_model(enough, &["ep"]).unwrap();

    // 20 GPUs reserve three whole nodes, but only 20 hold weights.
    f.register_model(ModelSpec::generation("big-20", 405.0, 20, BackendProfile::mock(100.0)), &["ep"]).unwrap();
    let t20 = f.submit(TaskSpec::generation("big-20", 1, 10), "ep").unwrap();
    let out = run(&mut f, 120);
    assert_eq!(failed(&out), vec![(t20, TaskError::InsufficientVram)]);

    let t = f.submit(TaskSpec::generation("big-8", 1, 10), "ep").unwrap();
    let out = run(&mut f, 30);
    assert_eq!(failed(&out), vec![(t, TaskError::InsufficientVram)]);
    assert_eq!(f.instances().count(), 0);
    assert_eq!(f.cluster_status("c").unwrap().free_nodes, 24);

    f.submit(TaskSpec::generation("big-21", 1, 10), "ep").unwrap();
    let out = run(&mut f, 600);
    assert_eq!(completed(&out).len(), 1);
    let inst = f.instances().next().unwrap();
    assert_eq!(inst.gpus.len(), 24);
    assert_eq!(inst.nodes(), vec![0, 1, 2]);
    assert_clean(&f);
}

#[test]
fn unregistered_function_is_refused() {
    let mut f = fabric();
    let mut spec = TaskSpec::generation("m8", 1, 10);
    spec.function = "rm_rf".into();
    assert!(matches!(f.submit(spec, "ep"), Err(FabricError::UnregisteredFunction { .. })));
    assert_eq!(f.stats().submitted, 0);
}

#[test]
fn capacity_exceeded_without_instance_queueing() {
    let config = FabricConfig { instance_queueing: false, ..FabricConfig::default() };
    let mut f = fabric_with(config, 1, 1);
    f.submit(TaskSpec::generation("m8", 1, 100_000), "ep").unwrap();
    run(&mut f, 60);
    let err = f.submit(TaskSpec::generation("m8", 1, 10), "ep").unwrap_err();
    assert!(matches!(err, FabricError::CapacityExceeded { .. }));
}

#[test]
fn streaming_emits_every_token_in_order() {
    let mut f = fabric();
    let t = f.submit(TaskSpec::generation("m8", 1, 20).streaming(), "ep").unwrap();
    let out = run(&mut f, 60);
    let idx: Vec<u32> = out
        .iter()
        .filter_map(|o| match o {
            Output::Token { task, index, .. } if *task == t => Some(*index),
            _ => None,
        })
        .collect();
    assert_eq!(idx, (0..20).collect::<Vec<_>>());
    let last_token = out.iter().rposition(|o| matches!(o, Output::Token { .. })).unwrap();
    let done = out.iter().position(|o| matches!(o, Output::Completed { .. })).unwrap();
    assert!(last_token < done);
    assert_eq!(f.stats().tokens_emitted, 20);
    assert_eq!(f.stats().tokens_delivered, 20);
}

#[test]
fn background_job_delays_allocation_in_fifo_order() {
    let mut f = fabric();
    f.submit_background_job("c", SimTime::ZERO, 24 * 8, SimDuration::from_secs(40)).unwrap();
    f.advance_to(SimTime::ZERO);
    f.submit(TaskSpec::generation("m8", 1, 10), "ep").unwrap();
    let out = run(&mut f, 120);
    let cold = completed(&out)[0].1.cold.unwrap();
    assert_eq!(cold.queue_wait, SimDuration::from_secs(40));
    assert_eq!(cold.total(), SimDuration::from_secs(63));
}

#[test]
fn strict_fifo_does_not_backfill() {
    let mut f = fabric();
    // Leaves 8 GPUs free; the 16-GPU job at the head must block the 1-GPU one.
    f.submit_background_job("c", SimTime::ZERO, 23 * 8, SimDuration::from_secs(100)).unwrap();
    f.submit_background_job("c", SimTime::ZERO, 16, SimDuration::from_secs(10)).unwrap();
    f.advance_to(SimTime::ZERO);
    let id = f.ensure_instance("m8", "ep").unwrap();
    assert_eq!(f.instance(id).unwrap().state, InstanceState::Queued);
    f.advance_to(SimTime::from_secs(100));
    assert_eq!(f.instance(id).unwrap().state, InstanceState::Starting);
}

#[test]
fn dedicated_instance_serves_only_its_tasks() {
    let mut f = fabric();
    let inst = f.create_dedicated("m8", "ep", 7).unwrap();
    let t = f.submit_dedicated(TaskSpec::generation("m8", 1, 10), inst).unwrap();
    f.submit(TaskSpec::generation("m8", 1, 10), "ep").unwrap();
    let out = run(&mut f, 60);
    let done = completed(&out);
    assert_eq!(done.len(), 2);
    assert!(done.iter().any(|(id, r)| *id == t && r.instance == inst));
    assert!(done.iter().any(|(id, r)| *id != t && r.instance != inst));
    assert_eq!(f.summaries().len(), 1);
    f.release_instance(inst).unwrap();
    assert!(f.instance(inst).is_none());
    assert_clean(&f);
}

#[test]
fn releasing_a_starting_dedicated_instance_waits_for_running() {
    let mut f = fabric();
    let inst = f.create_dedicated("m8", "ep", 1).unwrap();
    let t = f.submit_dedicated(TaskSpec::generation("m8", 1, 10), inst).unwrap();
    f.cancel(t).unwrap();
    f.release_instance(inst).unwrap();
    assert_eq!(f.instance(inst).unwrap().state, InstanceState::Starting);
    run(&mut f, 60);
    assert!(f.instance(inst).is_none());
    assert_clean(&f);
}

#[test]
fn passthrough_waits_for_external_completion() {
    let mut f = fabric();
    f.register_model(ModelSpec::generation("ext", 8.0, 1, BackendProfile::passthrough("http://x")), &["ep"]).unwrap();
    let t = f.submit(TaskSpec::generation("ext", 1, 10), "ep").unwrap();
    let out = run(&mut f, 60);
    let (task, attempt) = out
        .iter()
        .find_map(|o| match o {
            Output::ExecuteExternal { task, attempt, .. } => Some((*task, *attempt)),
            _ => None,
        })
        .unwrap();
    assert_eq!(task, t);
    assert_eq!(f.complete_external(t, attempt + 1, Ok(3)), Err(FabricError::StaleAttempt(t)));
    f.complete_external(t, attempt, Ok(7)).unwrap();
    let done = completed(&f.drain_outputs());
    assert_eq!(done[0].1.units, 7);
    assert_eq!(f.stats().tokens_delivered, 7);
}

#[test]
fn same_scenario_same_trace() {
    let go = || {
        let mut f = fabric_with(FabricConfig { trace: true, ..FabricConfig::default() }, 3, 2);
        for i in 0..40u32 {
            f.advance_to(SimTime::from_secs(u64::from(i)));
            f.submit(TaskSpec::generation("m8", 1, 100 + i * 13), "ep").unwrap();
        }
        f.schedule_fault(SimTime::from_secs(50), FaultTarget::NthRunning(1));
        f.advance_to(SimTime::from_secs(400));
        f.trace().to_vec()
    };
    let a = go();
    assert!(a.len() > 80);
    assert_eq!(a, go());
    check_output_sequence(&a).unwrap();
}
