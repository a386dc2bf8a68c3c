"""Synthetic screening workload: a ligand library with latent true
scores, noisy surrogate scores, per-stage duration models calibrated to
reference per-ligand costs, and the five-stage funnel wiring.

Stage cost defaults (node-hours per ligand): S1 1e-4, S3CG 0.5, S2 4,
S3FG 5.  Per-GPU throughput calibration: S1 14252/6000 ligands/s/GPU,
ML1 319674/1536 ligands/s/GPU.
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import campaign
from .campaign import (CampaignSpec, HookSpec, MaterializeSpec, PipelineSpec,
                       SampledDuration, StageSpec, TaskDescriptor)
from .errors import ConfigError
from .pilot import PilotSpec

# Surrogate noise calibrated (by bisection over seeds, see
# calibrate_noise_sigma) so that the predicted top u*1e-3 captures half
# of the true top u*1e-4 at u=1e5.
DEFAULT_NOISE_SIGMA = 0.7969

S1_LIGANDS_PER_S_PER_GPU = 14252.0 / 6000.0
ML1_LIGANDS_PER_S_PER_GPU = 319674.0 / 1536.0

CG_REPLICAS = 6
FG_REPLICAS = 24

# Internal stream labels for seed derivation; values are arbitrary but fixed.
_STREAM_LIBRARY = 1
_STREAM_NOISE = 2
_STREAM_CONF = 3
_STREAM_DURATION = 4


@dataclass
class LigandRecord:
    ligand_id: str
    smiles_like_token: str
    true_score: float                    # latent docking score, lower = better
    predicted_score: Optional[float] = None


@dataclass
class StageCost:
    median_node_hours: float
    tail_kind: str = "lognormal"         # lognormal | pareto_mix
    tail_params: tuple = (0.0,)
    nodes_per_task: float = 1.0
    throughput_per_gpu: Optional[float] = None   # ligands/s per GPU

    def validate(self) -> list[str]:
        out = []
        if self.median_node_hours <= 0:
            out.append("median_node_hours must be positive")
        if self.tail_kind not in ("lognormal", "pareto_mix"):
            out.append(f"unknown tail kind {self.tail_kind!r}")
        if self.nodes_per_task <= 0:
            out.append("nodes_per_task must be positive")
        if self.throughput_per_gpu is not None and self.throughput_per_gpu <= 0:
            out.append("throughput_per_gpu must be positive")
        return out


@dataclass
class CostModel:
    stages: dict[str, StageCost] = field(default_factory=dict)

    def stage(self, tag: str) -> StageCost:
        if tag not in self.stages:
            raise ConfigError(f"cost model has no stage {tag!r}")
        return self.stages[tag]


def default_cost_model() -> CostModel:
    return CostModel({
        # 1536 GPUs = 256 nodes at 6 GPUs each.
        "ML1": StageCost((1536.0 / 6.0) / 319674.0 / 3600.0,
                         tail_params=(0.0,), nodes_per_task=1.0),
        "S1": StageCost(1e-4, tail_params=(1.0,), nodes_per_task=1.0 / 6.0),
        "S3CG": StageCost(0.5, tail_params=(0.2,), nodes_per_task=1.0),
        "S2": StageCost(4.0, tail_params=(0.2,), nodes_per_task=2.0),
        "S3FG": StageCost(5.0, tail_params=(0.2,), nodes_per_task=4.0),
    })


@dataclass
class FunnelConfig:
    library_size: int = 100_000
    s1_fraction: float = 0.01
    cg_count: int = 100
    top_binders: int = 5
    outliers_per_binder: int = 5
    seed: int = 0
    noise_sigma: float = DEFAULT_NOISE_SIGMA
    frames_per_replica: int = 8

    def s1_count(self) -> int:
        return math.ceil(self.s1_fraction * self.library_size)

    def validate(self) -> list[str]:
        out = []
        if self.library_size < 1:
            out.append("library_size must be >= 1")
        if not 0 < self.s1_fraction <= 1:
            out.append("s1_fraction must be in (0, 1]")
        if self.cg_count < 1 or self.top_binders < 1 or self.outliers_per_binder < 1:
            out.append("funnel counts must be >= 1")
        if self.noise_sigma < 0:
            out.append("noise_sigma must be >= 0")
        if self.frames_per_replica < 1:
            out.append("frames_per_replica must be >= 1")
        # Funnel monotonicity: every stage consumes no more than it is fed.
        if self.cg_count > self.s1_count():
            out.append(f"cg_count {self.cg_count} exceeds S1 survivors {self.s1_count()}")
        if self.top_binders > self.cg_count:
            out.append("top_binders exceeds cg_count")
        if self.outliers_per_binder > CG_REPLICAS * self.frames_per_replica:
            out.append("outliers_per_binder exceeds conformations per ligand")
        return out


def _hash_key(text: str) -> int:
    return int.from_bytes(hashlib.blake2b(text.encode(), digest_size=8).digest(), "big")


def _rng(*entropy: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(list(entropy))))


_TOKEN_CHARS = np.array(list("CNOSPFclnos123()=#[]+-"))


def generate_library(n: int, seed: int) -> list[LigandRecord]:
    """Ligand ids, opaque structure tokens, and latent true scores drawn
    from a standard normal; deterministic under the seed."""
    if n < 0:
        raise ValueError("n must be >= 0")
    rng = _rng(seed, _STREAM_LIBRARY)
    scores = rng.standard_normal(n)
    lengths = rng.integers(8, 17, size=n)
    chars = rng.choice(_TOKEN_CHARS, size=int(lengths.sum())) if n else np.array([])
    records = []
    pos = 0
    for i in range(n):
        end = pos + int(lengths[i])
        records.append(LigandRecord(f"L{i:07d}", "".join(chars[pos:end]), float(scores[i])))
        pos = end
    return records


def surrogate_scores(library: list[LigandRecord], noise_sigma: float,
                     seed: int) -> list[LigandRecord]:
    """Predicted score = true score + gaussian noise, modeling an
    imperfect surrogate ranking model."""
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be >= 0")
    rng = _rng(seed, _STREAM_NOISE)
    noise = rng.standard_normal(len(library)) * noise_sigma
    return [replace(rec, predicted_score=rec.true_score + float(e))
            for rec, e in zip(library, noise)]


def select_top_fraction(records: list[LigandRecord], fraction: float,
                        by: str = "predicted_score") -> list[LigandRecord]:
    """The ceil(fraction*n) records with the best (lowest) scores; ties
    broken by ligand_id."""
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    keep = math.ceil(fraction * len(records))
    ranked = sorted(records, key=lambda r: (getattr(r, by), r.ligand_id))
    return ranked[:keep]


def resolve_duration(stage_tag: str, cost_model: CostModel,
                     ligands: float = 1.0) -> SampledDuration:
    """Resolve a stage's cost entry into a self-contained duration model
    for one task covering ``ligands`` ligands."""
    entry = cost_model.stage(stage_tag)
    if entry.throughput_per_gpu is not None:
        # Throughput-calibrated: deterministic wall seconds on one GPU.
        wall_s = ligands / entry.throughput_per_gpu
        return SampledDuration(stage_tag, wall_s * entry.nodes_per_task,
                               entry.nodes_per_task, "lognormal", (0.0,))
    node_seconds = entry.median_node_hours * 3600.0 * ligands
    return SampledDuration(stage_tag, node_seconds, entry.nodes_per_task,
                           entry.tail_kind, tuple(entry.tail_params))


def sample_duration(stage_tag: str, cost_model: CostModel,
                    rng: np.random.Generator, time_scale: float = 1.0,
                    ligands: float = 1.0) -> float:
    """Draw one task duration in simulated seconds: modeled node-seconds
    over the task's node span, scaled by time_scale, with the stage's
    tail applied (median of samples converges to the configured median)."""
    return resolve_duration(stage_tag, cost_model, ligands).sample(rng, time_scale)


def task_duration_rng(seed: int, task_id: str) -> np.random.Generator:
    """Duration stream for one task: a pure function of (seed, task_id),
    so sampling is independent of scheduling order."""
    return _rng(seed, _STREAM_DURATION, _hash_key(task_id))


def duration_uniforms(seed: int, task_id: str) -> tuple[float, float]:
    """Two (0,1) uniforms hashed from (seed, task_id): the cheap stream
    behind per-task duration draws (u1 never 0, so log(u1) is safe)."""
    digest = hashlib.blake2b(f"{seed}:{task_id}".encode(), digest_size=16).digest()
    a = int.from_bytes(digest[:8], "big")
    b = int.from_bytes(digest[8:], "big")
    u1 = ((a >> 11) + 1) / (2 ** 53 + 1)
    u2 = (b >> 11) / 2 ** 53
    return u1, u2


# ---------------------------------------------------------------------------
# conformation synthesis (the stand-in for ensemble simulation outputs)

def synth_conformations(seed: int, ligand_id: str, true_score: float,
                        replica: int, frames: int,
                        energy_sigma: float = 0.25) -> list[dict]:
    center_rng = _rng(seed, _STREAM_CONF, _hash_key(ligand_id))
    center = center_rng.standard_normal(3) * 4.0
    rng = _rng(seed, _STREAM_CONF, _hash_key(ligand_id), replica + 1)
    records = []
    for f in range(frames):
        point = center + rng.standard_normal(3)
        energy = true_score + float(rng.standard_normal()) * energy_sigma
        records.append({
            "ligand_id": ligand_id,
            "replica": replica,
            "frame": f,
            "energy": energy,
            "point": [float(x) for x in point],
        })
    return records


# ---------------------------------------------------------------------------
# stage materializers

def _dump(doc) -> bytes:
    return json.dumps(doc, separators=(",", ":")).encode()


def _duration_from(params: dict) -> SampledDuration:
    d = params["duration"]
    return SampledDuration(d["stage_tag"], d["node_seconds"], d["nodes_per_task"],
                           d["tail_kind"], tuple(d["tail_params"]))


def _duration_dict(dur: SampledDuration, ligands: float = 1.0) -> dict:
    return {"stage_tag": dur.stage_tag, "node_seconds": dur.node_seconds * ligands,
            "nodes_per_task": dur.nodes_per_task, "tail_kind": dur.tail_kind,
            "tail_params": list(dur.tail_params)}


def _build_ligand_tasks(params: dict, items: list[dict]) -> list[TaskDescriptor]:
    tasks = []
    for item in items:
        tasks.append(TaskDescriptor(
            task_id=f"{params['prefix']}.{item['ligand_id']}",
            kind=params.get("kind", "simulated"),
            stage_tag=params["stage_tag"],
            cpus=int(params.get("cpus", 0)),
            gpus=int(params.get("gpus", 1)),
            nodes=1,
            duration_model=_duration_from(params),
            payload=_dump(item)))
    return tasks


def _build_cg_replica_tasks(params: dict, items: list[dict]) -> list[TaskDescriptor]:
    tasks = []
    frames = int(params.get("frames", 8))
    for item in items:
        for r in range(int(params.get("replicas", CG_REPLICAS))):
            confs = synth_conformations(int(params["seed"]), item["ligand_id"],
                                        float(item["true_score"]), r, frames)
            tasks.append(TaskDescriptor(
                task_id=f"{params['prefix']}.{item['ligand_id']}.r{r:02d}",
                kind="simulated",
                stage_tag=params["stage_tag"],
                cpus=int(params.get("cpus", 0)), gpus=int(params.get("gpus", 1)),
                nodes=1,
                duration_model=_duration_from(params),
                payload=_dump({"kind": "conformations", "items": confs})))
    return tasks


def _build_gather_tasks(params: dict, items: list[dict]) -> list[TaskDescriptor]:
    n_ligands = len({it["ligand_id"] for it in items})
    train_dur = _duration_from(params)
    train_dur = SampledDuration(train_dur.stage_tag,
                                train_dur.node_seconds * max(1, n_ligands),
                                train_dur.nodes_per_task, train_dur.tail_kind,
                                train_dur.tail_params)
    agg = TaskDescriptor(
        task_id=f"{params['prefix']}.aggregate",
        kind="simulated", stage_tag=params["stage_tag"],
        cpus=int(params.get("agg_cpus", 4)), gpus=0, nodes=1,
        duration_model=SampledDuration(params["stage_tag"], 60.0, 1.0, "lognormal", (0.0,)),
        payload=_dump({"kind": "conformation_set", "items": items}))
    train = TaskDescriptor(
        task_id=f"{params['prefix']}.train_proxy",
        kind=params.get("train_kind", "executable"), stage_tag=params["stage_tag"],
        cpus=int(params.get("train_cpus", 0)), gpus=int(params.get("train_gpus", 6)),
        nodes=int(params.get("train_nodes", 2)),
        duration_model=train_dur,
        payload=_dump({"kind": "training_proxy", "items": []}))
    return [agg, train]


def _build_fg_replica_tasks(params: dict, items: list[dict]) -> list[TaskDescriptor]:
    tasks = []
    for ci, item in enumerate(items):
        for r in range(int(params.get("replicas", FG_REPLICAS))):
            tasks.append(TaskDescriptor(
                task_id=f"{params['prefix']}.c{ci:04d}.r{r:02d}",
                kind="simulated",
                stage_tag=params["stage_tag"],
                cpus=int(params.get("cpus", 0)), gpus=int(params.get("gpus", 1)),
                nodes=1,
                duration_model=_duration_from(params),
                payload=_dump({"kind": "fg_replica", "conformation": item, "replica": r})))
    return tasks


campaign.register_materializer("ligand_tasks", _build_ligand_tasks)
campaign.register_materializer("cg_replica_tasks", _build_cg_replica_tasks)
campaign.register_materializer("gather_tasks", _build_gather_tasks)
campaign.register_materializer("fg_replica_tasks", _build_fg_replica_tasks)


# ---------------------------------------------------------------------------
# funnel campaign assembly

def build_funnel_campaign(funnel: FunnelConfig,
                          cost_model: CostModel | None = None,
                          resource: PilotSpec | None = None,
                          time_scale: float = 1e-4,
                          pipeline_mode: str = "concurrent",
                          pipeline_id: str = "p0",
                          overlay_stage_kind: str = "simulated") -> CampaignSpec:
    """Wire the five-stage screening funnel:

    ML1 (one scoring task over the library)
      -> S1 docking on the top s1_fraction by predicted score
      -> S3CG ensembles (6 replica tasks per ligand) on the cg_count best
      -> S2 aggregation + training proxy, with outlier selection of
         top_binders * outliers_per_binder conformations
      -> S3FG (24 replica tasks per conformation).
    """
    problems = funnel.validate()
    if problems:
        raise ConfigError("; ".join(problems))
    cost_model = cost_model or default_cost_model()
    resource = resource or PilotSpec(nodes=8, cpus_per_node=42, gpus_per_node=6,
                                     walltime_s=1e9, backend="simulated")
    seed = funnel.seed

    library = generate_library(funnel.library_size, seed)
    scored = surrogate_scores(library, funnel.noise_sigma, seed)
    ml1_payload = _dump({
        "kind": "scored_library",
        "items": [{"ligand_id": r.ligand_id, "true_score": r.true_score,
                   "predicted_score": r.predicted_score} for r in scored],
    })
    ml1_task = TaskDescriptor(
        task_id=f"{pipeline_id}.ML1.000000", kind="simulated", stage_tag="ML1",
        cpus=0, gpus=min(1, resource.gpus_per_node) or 0,
        nodes=1,
        duration_model=resolve_duration("ML1", cost_model, ligands=funnel.library_size),
        payload=ml1_payload)
    if resource.gpus_per_node == 0:
        ml1_task.cpus, ml1_task.gpus = 1, 0

    gpus_ok = resource.gpus_per_node > 0
    one_gpu = {"cpus": 0, "gpus": 1} if gpus_ok else {"cpus": 1, "gpus": 0}
    # Multi-node tasks exist in simulated mode only; locally everything
    # shares one host.
    train_nodes = 1 if resource.backend == "local" else min(2, resource.nodes)
    train_gpus = min(6, resource.gpus_per_node)
    train_cpus = 0 if train_gpus else min(4, resource.cpus_per_node)

    stages = [
        StageSpec("ML1", [ml1_task],
                  post_hook=HookSpec("select_top_fraction",
                                     {"fraction": funnel.s1_fraction, "by": "predicted_score"})),
        StageSpec("S1", [],
                  post_hook=HookSpec("select_top_k",
                                     {"k": funnel.cg_count, "by": "true_score"}),
                  materialize=MaterializeSpec("ligand_tasks", {
                      "prefix": f"{pipeline_id}.S1", "stage_tag": "S1",
                      "kind": overlay_stage_kind, **one_gpu,
                      "duration": _duration_dict(resolve_duration("S1", cost_model))})),
        StageSpec("S3CG", [],
                  post_hook=HookSpec("identity"),
                  materialize=MaterializeSpec("cg_replica_tasks", {
                      "prefix": f"{pipeline_id}.S3CG", "stage_tag": "S3CG",
                      "replicas": CG_REPLICAS, "frames": funnel.frames_per_replica,
                      "seed": seed, **one_gpu,
                      "duration": _duration_dict(resolve_duration("S3CG", cost_model))})),
        StageSpec("S2", [],
                  post_hook=HookSpec("lof_outliers", {
                      "top_binders": funnel.top_binders,
                      "outliers_per_binder": funnel.outliers_per_binder,
                      "k_neighbors": 10}),
                  materialize=MaterializeSpec("gather_tasks", {
                      "prefix": f"{pipeline_id}.S2", "stage_tag": "S2",
                      "train_nodes": train_nodes, "train_gpus": train_gpus,
                      "train_cpus": train_cpus,
                      "train_kind": "simulated" if resource.backend == "local" else "executable",
                      "agg_cpus": max(1, min(4, resource.cpus_per_node)),
                      "duration": _duration_dict(resolve_duration("S2", cost_model))})),
        StageSpec("S3FG", [],
                  materialize=MaterializeSpec("fg_replica_tasks", {
                      "prefix": f"{pipeline_id}.S3FG", "stage_tag": "S3FG",
                      "replicas": FG_REPLICAS, **one_gpu,
                      "duration": _duration_dict(resolve_duration("S3FG", cost_model))})),
    ]
    pipeline = PipelineSpec(pipeline_id, stages)
    return CampaignSpec(pipelines=[pipeline], resource=resource, seed=seed,
                        mode=resource.backend, time_scale=time_scale,
                        pipeline_mode=pipeline_mode)


# ---------------------------------------------------------------------------
# noise calibration and CSV interfaces

def recall_at_operating_point(u: int, noise_sigma: float, seed: int,
                              k_frac: float = 1e-4, delta_frac: float = 1e-3) -> float:
    """Top-k recall at the (budget, top-fraction) operating point used to
    calibrate the surrogate noise."""
    from . import analysis

    library = generate_library(u, seed)
    scored = surrogate_scores(library, noise_sigma, seed)
    sset = analysis.ScoredSet([r.ligand_id for r in scored],
                              np.array([r.true_score for r in scored]),
                              np.array([r.predicted_score for r in scored]))
    return analysis.top_k_recall(sset, math.ceil(k_frac * u), math.ceil(delta_frac * u))


def calibrate_noise_sigma(u: int = 100_000, target: float = 0.5,
                          seeds: int = 12, tol: float = 5e-3,
                          lo: float = 0.0, hi: float = 3.0) -> float:
    """Bisection for the noise level whose mean operating-point recall
    hits the target (recall decreases monotonically in the noise)."""
    def mean_recall(sigma: float) -> float:
        return float(np.mean([recall_at_operating_point(u, sigma, s)
                              for s in range(seeds)]))

    for _ in range(40):
        mid = 0.5 * (lo + hi)
        r = mean_recall(mid)
        if abs(r - target) < tol:
            return mid
        if r > target:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-4:
            break
    return 0.5 * (lo + hi)


# ---------------------------------------------------------------------------
# local-mode function registry

def _fn_sleep_ms(ms: float = 1.0) -> float:
    import time
    time.sleep(ms / 1000.0)
    return ms


def _fn_echo(value=None):
    return value


def _fn_fail(message: str = "task failed"):
    raise RuntimeError(message)


def _fn_kill_worker():
    from .errors import WorkerKilled
    raise WorkerKilled("worker killed by task")


FUNCTIONS = {
    "sleep_ms": _fn_sleep_ms,
    "echo": _fn_echo,
    "fail": _fn_fail,
    "kill_worker": _fn_kill_worker,
}


def register_function(name: str, fn) -> None:
    FUNCTIONS[name] = fn


def save_scores_csv(records: list[LigandRecord], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["ligand_id", "true_score", "predicted_score"])
        for r in records:
            writer.writerow([r.ligand_id, f"{r.true_score:.10g}",
                             "" if r.predicted_score is None else f"{r.predicted_score:.10g}"])


def load_scores_csv(path) -> list[LigandRecord]:
    records = []
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if lineno == 1 and row and row[0].strip() == "ligand_id":
                continue
            if not row or all(not c.strip() for c in row):
                continue
            try:
                pred = float(row[2]) if len(row) > 2 and row[2].strip() else None
                records.append(LigandRecord(row[0].strip(), "", float(row[1]), pred))
            except (IndexError, ValueError) as exc:
                raise ConfigError(f"bad scores row at line {lineno}: {exc}") from exc
    return records
