"""Engine integration: barriers, pipeline modes, failures, overlay stages."""
import pytest
from funnelsim.campaign import (CampaignSpec, FixedDuration, HookSpec,
                                PipelineSpec, StageSpec, TaskDescriptor)
from funnelsim.engine import run_campaign
from funnelsim.errors import ConfigError
from funnelsim.overlay import MasterConfig
from funnelsim.pilot import PilotSpec
from funnelsim.workload import FunnelConfig, build_funnel_campaign


def task(tid, dur=1.0, **kw):
    kw.setdefault("cpus", 1)
    return TaskDescriptor(tid, duration_model=FixedDuration(dur), **kw)


def pilot(**kw):
    base = dict(nodes=4, cpus_per_node=2, gpus_per_node=0, walltime_s=1e9)
    base.update(kw)
    return PilotSpec(**base)


def stage_barrier_ok(events):
    """No task of stage i+1 may be scheduled before every stage-i task of
    its pipeline is terminal: checked by scanning the trace."""
    stage_order: dict[str, list[str]] = {}
    open_tasks: dict[tuple[str, str], set] = {}
    for ev in events:
        if ev.entity != "task" or ev.pipeline is None:
            continue
        key = (ev.pipeline, ev.stage)
        if ev.transition == "pending":
            order = stage_order.setdefault(ev.pipeline, [])
            if ev.stage not in order:
                order.append(ev.stage)
            open_tasks.setdefault(key, set()).add(ev.entity_id)
        elif ev.transition == "scheduled":
            order = stage_order[ev.pipeline]
            for earlier in order[:order.index(ev.stage)]:
                if open_tasks.get((ev.pipeline, earlier)):
                    return False
        elif ev.transition in ("done", "failed", "canceled"):
            open_tasks.get(key, set()).discard(ev.entity_id)
    return True


class TestBarrier:
    def test_trace_scan_on_funnel(self):
        funnel = FunnelConfig(library_size=1000, s1_fraction=0.02, cg_count=8,
                              top_binders=2, outliers_per_binder=2, seed=5)
        r = run_campaign(build_funnel_campaign(funnel))
        assert r.final_states["p0"]["status"] == "done"
        assert stage_barrier_ok(r.sink.events)

    def test_trace_scan_on_two_pipelines(self):
        pipes = []
        for p in ("pa", "pb"):
            pipes.append(PipelineSpec(p, [
                StageSpec("s0", [task(f"{p}.a{i}", dur=1.0 + 0.1 * i) for i in range(4)]),
                StageSpec("s1", [task(f"{p}.b{i}", dur=0.5) for i in range(4)]),
            ]))
        spec = CampaignSpec(pipes, pilot(), seed=0)
        r = run_campaign(spec)
        assert stage_barrier_ok(r.sink.events)
        assert all(s["status"] == "done" for s in r.final_states.values())


class TestPipelineModes:
    def two_pipelines(self, mode):
        pipes = [PipelineSpec(p, [StageSpec("s0", [task(f"{p}.t{i}", dur=2.0)
                                                   for i in range(2)])])
                 for p in ("pa", "pb")]
        spec = CampaignSpec(pipes, pilot(nodes=4, cpus_per_node=1), seed=0,
                            pipeline_mode=mode)
        return run_campaign(spec)

    def test_concurrent_pipelines_interleave(self):
        r = self.two_pipelines("concurrent")
        first_b = min(ev.t for ev in r.sink.events
                      if ev.entity == "task" and ev.pipeline == "pb"
                      and ev.transition == "running")
        assert first_b == 0.0   # pb starts before pa finishes

    def test_sequential_pipelines_serialize(self):
        r = self.two_pipelines("sequential")
        last_a = max(ev.t for ev in r.sink.events
                     if ev.entity == "task" and ev.pipeline == "pa"
                     and ev.transition == "done")
        first_b = min(ev.t for ev in r.sink.events
                      if ev.entity == "task" and ev.pipeline == "pb"
                      and ev.transition == "running")
        assert first_b >= last_a


class TestFailurePaths:
    def test_bad_stage_output_fails_pipeline_and_releases_slots(self):
        # First stage output is not parseable by the hook: the pipeline
        # fails and the other pipeline still completes.
        bad = PipelineSpec("bad", [
            StageSpec("s0", [task("bad.t0", dur=1.0)],
                      post_hook=HookSpec("select_top_k", {"k": 1})),
            StageSpec("s1", [task("bad.t1")]),
        ])
        # payload b"" parses to zero items -> select_top_k returns [] ->
        # next stage payload mismatch -> pipeline failed
        good = PipelineSpec("good", [StageSpec("s0", [task("good.t0", dur=3.0)])])
        spec = CampaignSpec([bad, good], pilot(), seed=0)
        r = run_campaign(spec)
        assert r.final_states["bad"]["status"] == "failed"
        assert r.final_states["good"]["status"] == "done"
        # stage 1 never became current, so its task was never born
        born = {ev.entity_id for ev in r.sink.events
                if ev.entity == "task" and ev.transition == "pending"}
        assert "bad.t1" not in born
        # every node went idle again: busy/idle transitions pair up
        per_node = {}
        for ev in r.sink.events:
            if ev.entity == "node":
                per_node[ev.entity_id] = ev.transition
        assert all(last == "idle" for last in per_node.values())

    def test_unsatisfiable_task_raises(self):
        spec = CampaignSpec([PipelineSpec("p", [StageSpec("s", [task("t", cpus=99)])])],
                            pilot(), seed=0)
        with pytest.raises(ConfigError):
            run_campaign(spec)   # caught by validation before the engine runs

    def test_walltime_cancels_funnel(self):
        funnel = FunnelConfig(library_size=1000, s1_fraction=0.02, cg_count=4,
                              top_binders=1, outliers_per_binder=1, seed=2)
        spec = build_funnel_campaign(funnel)
        spec.resource.walltime_s = 1e-5
        r = run_campaign(spec)
        assert r.walltime_hit
        assert r.final_states["p0"]["status"] == "canceled"
        assert r.sink.events[-1].transition == "released"


class TestOverlayStage:
    def test_funnel_with_overlay_s1(self):
        funnel = FunnelConfig(library_size=5000, cg_count=20, seed=3)
        spec = build_funnel_campaign(funnel, overlay_stage_kind="function")
        cfg = MasterConfig(n_masters=2, workers_per_master=12, bulk_size=16)
        r = run_campaign(spec, overlay=cfg)
        assert r.final_states["p0"]["status"] == "done"
        births = {}
        for ev in r.sink.events:
            if ev.entity == "task" and ev.transition == "pending" and ev.stage:
                births[ev.stage] = births.get(ev.stage, 0) + 1
        assert births["S1"] == 50
        assert births["S3FG"] == 600
        assert sum(w.completed for w in r.overlay_workers) == 50
        assert stage_barrier_ok(r.sink.events)

    def test_overlay_and_plain_pipelines_share_pilot(self):
        fn_tasks = [TaskDescriptor(f"fn.t{i}", kind="function", cpus=1,
                                   duration_model=FixedDuration(1.0))
                    for i in range(12)]
        plain = [task(f"pl.t{i}", dur=1.0) for i in range(4)]
        spec = CampaignSpec(
            [PipelineSpec("fn", [StageSpec("s", fn_tasks)]),
             PipelineSpec("pl", [StageSpec("s", plain)])],
            pilot(nodes=4, cpus_per_node=2), seed=0)
        r = run_campaign(spec, overlay=MasterConfig(n_masters=1, workers_per_master=3,
                                                    bulk_size=4))
        assert all(s["status"] == "done" for s in r.final_states.values())


class TestSummaryShapes:
    def test_completion_stream_time_ordered(self):
        funnel = FunnelConfig(library_size=800, s1_fraction=0.02, cg_count=5,
                              top_binders=2, outliers_per_binder=2, seed=8)
        r = run_campaign(build_funnel_campaign(funnel))
        times = [c.t for c in r.completions]
        assert times == sorted(times)

    def test_events_time_ordered_globally(self):
        funnel = FunnelConfig(library_size=500, s1_fraction=0.02, cg_count=3,
                              top_binders=1, outliers_per_binder=2, seed=9)
        r = run_campaign(build_funnel_campaign(funnel))
        times = [ev.t for ev in r.sink.events]
        assert times == sorted(times)
