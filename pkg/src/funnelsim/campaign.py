"""Campaign data model and the pipeline/stage/task state machine.

A campaign is a set of pipelines over one resource allocation.  Each
pipeline is an ordered list of stages; tasks inside a stage carry no
mutual ordering, and stage i+1 cannot start until every task of stage i
reached a terminal state.  Pipelines progress independently of each
other.

Stage outputs are opaque byte strings (JSON by convention).  A stage may
declare a post_hook, a named filter applied to the stage's outputs when
its last task terminates; the filtered items become the payloads of the
next stage's tasks, which are materialized on the spot when the next
stage declares a materializer.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import OrderingError, StateError
from .pilot import PilotSpec

TASK_KINDS = ("executable", "function", "simulated")
KNOWN_STAGE_TAGS = ("ML1", "S1", "S3CG", "S2", "S3FG")

PENDING = "pending"
SCHEDULED = "scheduled"
RUNNING = "running"
DONE = "done"
FAILED = "failed"
CANCELED = "canceled"
TERMINAL = (DONE, FAILED, CANCELED)


@dataclass(frozen=True)
class FixedDuration:
    """A literal duration in (simulated or wall) seconds."""
    seconds: float


@dataclass(frozen=True)
class SampledDuration:
    """Resolved stage-cost duration model.

    The sampled duration in seconds is
    ``node_seconds / nodes_per_task * time_scale * tail``, where the
    tail multiplier has median 1 (lognormal(sigma) or a Pareto mixture).
    """
    stage_tag: str
    node_seconds: float
    nodes_per_task: float = 1.0
    tail_kind: str = "lognormal"
    tail_params: tuple = (0.0,)

    def sample(self, rng: np.random.Generator, time_scale: float = 1.0) -> float:
        base = self.node_seconds / self.nodes_per_task * time_scale
        if self.tail_kind == "lognormal":
            sigma = float(self.tail_params[0])
            mult = math.exp(sigma * rng.standard_normal()) if sigma > 0 else 1.0
        elif self.tail_kind == "pareto_mix":
            alpha, mix = float(self.tail_params[0]), float(self.tail_params[1])
            mult = 1.0 + rng.pareto(alpha) if rng.random() < mix else 1.0
        else:
            raise ValueError(f"unknown tail kind {self.tail_kind!r}")
        return base * mult

    def sample_from_uniforms(self, u1: float, u2: float, time_scale: float = 1.0) -> float:
        """Draw from two (0,1) uniforms; used with hash-derived streams
        so a task's duration depends only on (seed, task_id)."""
        base = self.node_seconds / self.nodes_per_task * time_scale
        if self.tail_kind == "lognormal":
            sigma = float(self.tail_params[0])
            if sigma <= 0:
                return base
            z = math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)
            return base * math.exp(sigma * z)
        if self.tail_kind == "pareto_mix":
            alpha, mix = float(self.tail_params[0]), float(self.tail_params[1])
            if u1 >= mix:
                return base
            return base * (1.0 - u2) ** (-1.0 / alpha)
        raise ValueError(f"unknown tail kind {self.tail_kind!r}")


DurationModel = FixedDuration | SampledDuration


@dataclass
class TaskDescriptor:
    task_id: str
    kind: str = "simulated"
    stage_tag: str = "other"
    cpus: int = 1
    gpus: int = 0
    nodes: int = 1
    duration_model: DurationModel = FixedDuration(0.0)
    payload: bytes = b""


@dataclass(frozen=True)
class HookSpec:
    """Named inter-stage filter: one of select_top_fraction, select_top_k,
    lof_outliers, identity."""
    op: str
    params: dict = field(default_factory=dict)


@dataclass(frozen=True)
class MaterializeSpec:
    """How a stage's task list is built from the previous stage's
    filtered outputs (registry name + parameters)."""
    builder: str
    params: dict = field(default_factory=dict)


@dataclass
class StageSpec:
    stage_id: str
    tasks: list[TaskDescriptor] = field(default_factory=list)
    post_hook: Optional[HookSpec] = None
    materialize: Optional[MaterializeSpec] = None


@dataclass
class PipelineSpec:
    pipeline_id: str
    stages: list[StageSpec] = field(default_factory=list)


@dataclass
class CampaignSpec:
    pipelines: list[PipelineSpec]
    resource: PilotSpec
    seed: int = 0
    mode: str = "simulated"           # simulated | local, mirrors resource.backend
    time_scale: float = 1.0           # simulated seconds per modeled second
    pipeline_mode: str = "concurrent"  # concurrent | sequential


@dataclass(frozen=True)
class Violation:
    code: str
    subject: str
    message: str

    def __str__(self):
        return f"[{self.code}] {self.subject}: {self.message}"


def validate_campaign(spec: CampaignSpec) -> list[Violation]:
    """Check every campaign invariant; an empty report means valid."""
    out: list[Violation] = []
    for msg in spec.resource.validate():
        out.append(Violation("resource", "pilot", msg))
    if not (0 <= spec.seed < 2 ** 64):
        out.append(Violation("seed", str(spec.seed), "seed must fit in 64 unsigned bits"))
    if spec.time_scale <= 0:
        out.append(Violation("time_scale", str(spec.time_scale), "time_scale must be positive"))
    if spec.mode not in ("simulated", "local"):
        out.append(Violation("mode", spec.mode, "mode must be simulated or local"))
    if spec.pipeline_mode not in ("concurrent", "sequential"):
        out.append(Violation("pipeline_mode", spec.pipeline_mode,
                             "pipeline_mode must be concurrent or sequential"))

    seen: set[str] = set()
    pilot = spec.resource
    for pipe in spec.pipelines:
        for stage in pipe.stages:
            if not stage.tasks and stage.materialize is None:
                out.append(Violation("empty_stage", f"{pipe.pipeline_id}/{stage.stage_id}",
                                     "stage has no tasks and no materializer"))
            for task in stage.tasks:
                if task.task_id in seen:
                    out.append(Violation("duplicate_id", task.task_id,
                                         "task_id reused within the campaign"))
                seen.add(task.task_id)
                out.extend(_validate_task(task, pilot, pipe.pipeline_id))
    return out


def _validate_task(task: TaskDescriptor, pilot: PilotSpec, pipeline_id: str) -> list[Violation]:
    out = []
    if task.kind not in TASK_KINDS:
        out.append(Violation("kind", task.task_id, f"unknown kind {task.kind!r}"))
    if task.cpus < 0 or task.gpus < 0:
        out.append(Violation("resources", task.task_id, "negative resource counts"))
    if task.cpus + task.gpus <= 0:
        out.append(Violation("zero_resources", task.task_id, "cpus + gpus must be > 0"))
    if task.nodes < 1:
        out.append(Violation("nodes", task.task_id, "nodes must be >= 1"))
    if task.nodes > 1 and task.kind != "executable":
        out.append(Violation("multi_node_kind", task.task_id,
                             f"multi-node tasks must be kind=executable, got {task.kind}"))
    cpus_eff = pilot.effective_cpus(task.cpus, task.gpus)
    if task.nodes > pilot.nodes:
        out.append(Violation("capacity", task.task_id,
                             f"needs {task.nodes} nodes, pilot has {pilot.nodes}"))
    if cpus_eff > pilot.cpus_per_node:
        out.append(Violation("capacity", task.task_id,
                             f"needs {cpus_eff} cpus/node, pilot has {pilot.cpus_per_node}"))
    if task.gpus > pilot.gpus_per_node:
        out.append(Violation("capacity", task.task_id,
                             f"needs {task.gpus} gpus/node, pilot has {pilot.gpus_per_node}"))
    return out


# ---------------------------------------------------------------------------
# post hooks

def _parse_output(task_id: str, raw: bytes) -> list[dict]:
    """Outputs are JSON: either {"items": [...]} or a single record."""
    try:
        doc = json.loads(raw.decode("utf-8")) if raw else {"items": []}
    except (ValueError, UnicodeDecodeError) as exc:
        raise StateError(f"output of task {task_id} is not parseable: {exc}") from exc
    if isinstance(doc, dict) and "items" in doc:
        return list(doc["items"])
    if isinstance(doc, dict):
        return [doc]
    if isinstance(doc, list):
        return list(doc)
    raise StateError(f"output of task {task_id} has no items")


def _item_id(item: dict) -> str:
    return str(item.get("ligand_id", item.get("id", "")))


def _hook_identity(params: dict, items: list[dict]) -> list[dict]:
    return items


def _hook_select_top_fraction(params: dict, items: list[dict]) -> list[dict]:
    fraction = float(params["fraction"])
    if not 0 < fraction <= 1:
        raise StateError(f"fraction must be in (0,1], got {fraction}")
    by = params.get("by", "predicted_score")
    keep = math.ceil(fraction * len(items))
    ranked = sorted(items, key=lambda it: (float(it[by]), _item_id(it)))
    return ranked[:keep]


def _hook_select_top_k(params: dict, items: list[dict]) -> list[dict]:
    k = int(params["k"])
    by = params.get("by", "true_score")
    ranked = sorted(items, key=lambda it: (float(it[by]), _item_id(it)))
    return ranked[:k]


def _hook_lof_outliers(params: dict, items: list[dict]) -> list[dict]:
    """Rank ligands by mean energy, keep the best ``top_binders``, then per
    ligand select the ``outliers_per_binder`` most outlying conformations
    by local outlier factor over the conformation points."""
    from . import analysis

    top_binders = int(params.get("top_binders", 5))
    per_binder = int(params.get("outliers_per_binder", 5))
    k_neighbors = int(params.get("k_neighbors", 10))

    by_ligand: dict[str, list[dict]] = {}
    for item in items:
        by_ligand.setdefault(_item_id(item), []).append(item)
    ranked = sorted(by_ligand,
                    key=lambda lid: (float(np.mean([float(c["energy"]) for c in by_ligand[lid]])), lid))
    selected: list[dict] = []
    for lid in ranked[:top_binders]:
        confs = by_ligand[lid]
        if len(confs) <= per_binder:
            selected.extend(confs)
            continue
        pts = np.asarray([c["point"] for c in confs], dtype=float)
        k = min(k_neighbors, len(confs) - 1)
        scores = analysis.lof(pts, k)
        for idx in analysis.select_outliers(scores, per_binder):
            selected.append(confs[idx])
    return selected


HOOK_OPS: dict[str, Callable[[dict, list[dict]], list[dict]]] = {
    "identity": _hook_identity,
    "select_top_fraction": _hook_select_top_fraction,
    "select_top_k": _hook_select_top_k,
    "lof_outliers": _hook_lof_outliers,
}


def apply_post_hook(hook: Optional[HookSpec], outputs: list[tuple[str, bytes]]) -> list[dict]:
    """Apply a hook to stage outputs (sorted by task_id for determinism)."""
    items: list[dict] = []
    for task_id, raw in sorted(outputs, key=lambda p: p[0]):
        items.extend(_parse_output(task_id, raw))
    if hook is None:
        return items
    op = HOOK_OPS.get(hook.op)
    if op is None:
        raise StateError(f"unknown post_hook op {hook.op!r}")
    return op(hook.params, items)


# Materializer registry: stage task-list builders, keyed by name.  The
# workload module registers its builders on import.
MATERIALIZERS: dict[str, Callable[[dict, list[dict]], list[TaskDescriptor]]] = {}


def register_materializer(name: str, fn: Callable[[dict, list[dict]], list[TaskDescriptor]]) -> None:
    MATERIALIZERS[name] = fn


def materialize_tasks(spec: MaterializeSpec, items: list[dict]) -> list[TaskDescriptor]:
    if spec.builder not in MATERIALIZERS:
        # Builders ship with the workload module; importing it registers them.
        from . import workload  # noqa: F401
    builder = MATERIALIZERS.get(spec.builder)
    if builder is None:
        raise StateError(f"unknown materializer {spec.builder!r}")
    return builder(spec.params, items)


# ---------------------------------------------------------------------------
# state machine

@dataclass
class AdvanceResult:
    """What happened when a task completion was applied."""
    kind: str                       # none | stage_advanced | pipeline_done | pipeline_failed
    stage_index: int = -1
    selected: list[dict] = field(default_factory=list)
    new_tasks: list[TaskDescriptor] = field(default_factory=list)
    canceled: list[str] = field(default_factory=list)


class PipelineState:
    """Runtime state of one pipeline.

    Mutation is meant to be serialized through a single owner (the
    engine loop); snapshots via ``projection`` are safe to share.  Tasks
    enter ``task_states`` when their stage becomes current; tasks of
    stages not yet reached are implicitly pending.
    """

    def __init__(self, spec: PipelineSpec):
        self.spec = spec
        self.current_stage_index = 0
        self.status = RUNNING
        self.task_states: dict[str, str] = {}
        self.outputs: dict[str, bytes] = {}
        self._stage_of: dict[str, int] = {}
        self._open_in_stage = 0
        if not spec.stages:
            raise StateError(f"pipeline {spec.pipeline_id} has no stages")
        self._register_stage(0)

    @property
    def pipeline_id(self) -> str:
        return self.spec.pipeline_id

    def _register_stage(self, index: int) -> list[TaskDescriptor]:
        stage = self.spec.stages[index]
        for task in stage.tasks:
            if task.task_id in self.task_states:
                raise StateError(f"duplicate task_id {task.task_id}")
            self.task_states[task.task_id] = PENDING
            self._stage_of[task.task_id] = index
        self._open_in_stage = len(stage.tasks)
        return stage.tasks

    def current_stage(self) -> StageSpec:
        return self.spec.stages[self.current_stage_index]

    def next_ready_tasks(self) -> list[TaskDescriptor]:
        """Pending tasks of the current stage, in declaration order."""
        if self.status != RUNNING:
            return []
        return [t for t in self.current_stage().tasks
                if self.task_states.get(t.task_id) == PENDING]

    def _require_current(self, task_id: str) -> None:
        if task_id not in self.task_states:
            raise StateError(f"unknown task {task_id}")
        if self._stage_of[task_id] != self.current_stage_index:
            raise OrderingError(f"task {task_id} is not in the current stage")

    def mark_scheduled(self, task_id: str) -> None:
        self._require_current(task_id)
        if self.task_states[task_id] != PENDING:
            raise OrderingError(f"task {task_id} is {self.task_states[task_id]}, not pending")
        self.task_states[task_id] = SCHEDULED

    def mark_running(self, task_id: str) -> None:
        self._require_current(task_id)
        if self.task_states[task_id] != SCHEDULED:
            raise OrderingError(f"task {task_id} is {self.task_states[task_id]}, not scheduled")
        self.task_states[task_id] = RUNNING

    def on_task_complete(self, task_id: str, outcome: str, result: bytes = b"") -> AdvanceResult:
        """Record a terminal state; advance the stage barrier when the
        current stage fully completes, applying the post_hook and
        materializing the next stage's tasks."""
        if outcome not in (DONE, FAILED):
            raise ValueError(f"outcome must be done or failed, got {outcome!r}")
        if task_id not in self.task_states:
            raise StateError(f"unknown task {task_id}")
        state = self.task_states[task_id]
        if state in TERMINAL:
            raise OrderingError(f"task {task_id} already terminal ({state})")
        if state != RUNNING:
            raise OrderingError(f"task {task_id} is {state}, not running")
        self.task_states[task_id] = outcome
        self.outputs[task_id] = result
        self._open_in_stage -= 1

        if outcome == FAILED:
            return self._fail_pipeline()

        if self._open_in_stage > 0:
            return AdvanceResult("none", self.current_stage_index)
        return self._advance_stage()

    def _fail_pipeline(self) -> AdvanceResult:
        self.status = FAILED
        canceled = self._cancel_open()
        return AdvanceResult("pipeline_failed", self.current_stage_index, canceled=canceled)

    def _cancel_open(self) -> list[str]:
        canceled = []
        for tid, st in self.task_states.items():
            if st not in TERMINAL:
                self.task_states[tid] = CANCELED
                canceled.append(tid)
        return canceled

    def cancel(self) -> list[str]:
        """Cancel the whole pipeline (e.g. pilot walltime expired)."""
        if self.status == RUNNING:
            self.status = CANCELED
        return self._cancel_open()

    def _advance_stage(self) -> AdvanceResult:
        stage = self.current_stage()
        next_index = self.current_stage_index + 1
        next_stage = self.spec.stages[next_index] if next_index < len(self.spec.stages) else None
        # Outputs are only interpreted when a hook or a materializer
        # consumes them; results of plain terminal stages stay opaque.
        needs_items = stage.post_hook is not None or (
            next_stage is not None and next_stage.materialize is not None)
        selected: list[dict] = []
        if needs_items:
            outputs = [(t.task_id, self.outputs.get(t.task_id, b"")) for t in stage.tasks]
            try:
                selected = apply_post_hook(stage.post_hook, outputs)
            except StateError:
                self.status = FAILED
                canceled = self._cancel_open()
                return AdvanceResult("pipeline_failed", self.current_stage_index,
                                     canceled=canceled)
        if next_stage is None:
            self.status = DONE
            return AdvanceResult("pipeline_done", self.current_stage_index, selected=selected)

        if next_stage.materialize is not None:
            next_stage.tasks = materialize_tasks(next_stage.materialize, selected)
        elif stage.post_hook is not None:
            if len(selected) != len(next_stage.tasks):
                self.status = FAILED
                canceled = self._cancel_open()
                return AdvanceResult("pipeline_failed", self.current_stage_index, canceled=canceled)
            for task, item in zip(next_stage.tasks, selected):
                task.payload = json.dumps(item, separators=(",", ":")).encode()
        if not next_stage.tasks:
            # A funnel that filters everything away cannot continue.
            self.status = FAILED
            return AdvanceResult("pipeline_failed", self.current_stage_index)

        self.current_stage_index = next_index
        new_tasks = self._register_stage(next_index)
        return AdvanceResult("stage_advanced", next_index, selected=selected, new_tasks=new_tasks)

    def resize_stage(self, stage_index: int, new_tasks: list[TaskDescriptor]) -> None:
        """Replace a future stage's task list; current and past stages
        cannot be resized."""
        if not 0 <= stage_index < len(self.spec.stages):
            raise StateError(f"no stage {stage_index}")
        if stage_index <= self.current_stage_index:
            raise OrderingError(
                f"stage {stage_index} is not in the future (current {self.current_stage_index})")
        other_ids = {t.task_id
                     for i, st in enumerate(self.spec.stages) if i != stage_index
                     for t in st.tasks}
        ids = [t.task_id for t in new_tasks]
        dupes = sorted({i for i in ids if i in other_ids} | {i for i in ids if ids.count(i) > 1})
        if dupes:
            raise StateError(f"resize introduces duplicate task ids: {dupes}")
        self.spec.stages[stage_index].tasks = list(new_tasks)

    def projection(self) -> dict:
        """Comparable snapshot: used by the trace-replay check."""
        return {
            "task_states": dict(self.task_states),
            "stages_started": self.current_stage_index + 1,
            "status": self.status,
        }


# ---------------------------------------------------------------------------
# trace replay

def replay_trace(events) -> dict[str, dict]:
    """Re-derive final pipeline states purely from a task/pipeline/stage
    event log; the result matches PipelineState.projection() per pipeline."""
    task_states: dict[str, dict[str, str]] = {}
    stages_started: dict[str, int] = {}
    status: dict[str, str] = {}
    for ev in events:
        if ev.entity == "stage" and ev.transition == "started" and ev.pipeline:
            stages_started[ev.pipeline] = stages_started.get(ev.pipeline, 0) + 1
        elif ev.entity == "pipeline":
            if ev.transition == "started":
                status.setdefault(ev.entity_id, RUNNING)
                task_states.setdefault(ev.entity_id, {})
            else:
                status[ev.entity_id] = ev.transition
        elif ev.entity == "task" and ev.pipeline is not None:
            task_states.setdefault(ev.pipeline, {})[ev.entity_id] = ev.transition
    return {
        pid: {
            "task_states": task_states.get(pid, {}),
            "stages_started": stages_started.get(pid, 0),
            "status": status.get(pid, RUNNING),
        }
        for pid in status
    }
