"""The Embedding-Expert-Gate-Tower model family under one routing-mask formulation.

Every variant is described by the same structure: a set of embedding tables, a
list of expert groups (each group bound to the table(s) its experts read), a
per-tower forward/backward visibility mask over groups, and a gate kind.
Where forward is visible but backward is not, the expert output crosses a
stop-gradient edge before entering the tower's weighted combination, so the
tower can read the expert while its loss cannot update it.

Variant table (normative):

    variant        tables          groups               gate        forward      backward
    single_task    1               1 own group          uniform     own          own
    shared_bottom  1 shared        1 shared expert      fixed 1     shared       shared
    omoe           1 shared        1 shared group       shared      shared       shared
    mmoe           1 shared        1 shared group       per-task    all          all
    ple            1 shared        T task + shared      per-task    own+shared   own+shared
    me_mmoe        1 per expert    1 group of K2        per-task    all          all
    me_ple         T+1 per group   T task + shared      per-task    own+shared   own+shared
    stem           T+1 per group   T task + shared      per-task    all          own+shared
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import Dataset, FieldSchema
from .errors import ConfigError, ShapeError
from .ndcore import Node, ParamStore, Tape

VARIANTS = (
    "single_task",
    "shared_bottom",
    "omoe",
    "mmoe",
    "ple",
    "me_mmoe",
    "me_ple",
    "stem",
)

GATE_INPUT_MODES = ("task_only", "shared_only", "sum")


@dataclass
class ModelConfig:
    variant: str
    num_tasks: int
    task_index: int | None = None  # single_task only
    embedding_dim: int = 16
    num_task_experts: int = 1  # experts per task-specific group
    num_shared_experts: int = 1  # experts in the shared group
    expert_hidden: tuple[int, ...] = (64, 64)
    tower_hidden: tuple[int, ...] = (32, 16)
    gate_input_mode: str = "sum"  # stem only: task_only | shared_only | sum
    sg_enabled: bool = True
    field_task_specific_mask: tuple[bool, ...] | None = None

    def __post_init__(self):
        self.expert_hidden = tuple(self.expert_hidden)
        self.tower_hidden = tuple(self.tower_hidden)
        if self.field_task_specific_mask is not None:
            self.field_task_specific_mask = tuple(bool(b) for b in self.field_task_specific_mask)
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; pick one of {VARIANTS}")
        if self.num_tasks < 1:
            raise ConfigError("num_tasks must be >= 1")
        if self.variant == "single_task":
            if self.task_index is None or not 0 <= self.task_index < self.num_tasks:
                raise ConfigError("single_task requires task_index in [0, num_tasks)")
        if self.gate_input_mode not in GATE_INPUT_MODES:
            raise ConfigError(f"gate_input_mode must be one of {GATE_INPUT_MODES}")
        if self.embedding_dim < 1 or self.num_task_experts < 1 or self.num_shared_experts < 1:
            raise ConfigError("embedding_dim and expert counts must be >= 1")
        if not self.expert_hidden:
            raise ConfigError("experts need at least one hidden layer")
        if (
            self.field_task_specific_mask is not None
            and not all(self.field_task_specific_mask)
            and self.variant not in ("stem", "me_ple")
        ):
            raise ConfigError(
                "field_task_specific_mask applies only to variants with both shared "
                "and task-specific tables (stem, me_ple)"
            )

    @property
    def expert_output_dim(self) -> int:
        return self.expert_hidden[-1]


@dataclass(frozen=True)
class GroupSpec:
    name: str  # "task{t}" or "shared"
    owner: int | None  # owning task, None for the shared group
    num_experts: int
    expert_tables: tuple[str, ...]  # embedding table read by each expert


@dataclass(frozen=True)
class RoutingMask:
    """forward[t][g] / backward[t][g] bits per (tower index, group index)."""

    forward: np.ndarray
    backward: np.ndarray

    def __post_init__(self):
        if self.forward.shape != self.backward.shape:
            raise ShapeError("routing mask shapes differ")
        if np.any(self.backward & ~self.forward):
            raise ConfigError("backward=1 requires forward=1")


@dataclass(frozen=True)
class Routing:
    tables: tuple[str, ...]
    groups: tuple[GroupSpec, ...]
    tower_tasks: tuple[int, ...]
    mask: RoutingMask
    gate_kind: str  # "per_task" | "shared" | "fixed" | "uniform"
    gate_input: str  # "task_only" | "shared_only" | "sum" | "shared_table" | "own_table" | "expert_mean" | "none"


def routing_for(cfg: ModelConfig) -> Routing:
    """The variant's row of the normative table above."""
    t_count, k1, k2 = cfg.num_tasks, cfg.num_task_experts, cfg.num_shared_experts
    task_tables = tuple(f"emb.task{t}" for t in range(t_count))

    def masks(fwd, bwd):
        return RoutingMask(np.array(fwd, dtype=bool), np.array(bwd, dtype=bool))

    if cfg.variant == "single_task":
        t = cfg.task_index
        groups = (GroupSpec(f"task{t}", t, k1, ("emb.shared",) * k1),)
        ones = [[True]]
        return Routing(("emb.shared",), groups, (t,), masks(ones, ones), "uniform", "none")

    all_tasks = tuple(range(t_count))
    if cfg.variant == "shared_bottom":
        groups = (GroupSpec("shared", None, 1, ("emb.shared",)),)
        ones = [[True]] * t_count
        return Routing(("emb.shared",), groups, all_tasks, masks(ones, ones), "fixed", "none")

    if cfg.variant in ("omoe", "mmoe"):
        groups = (GroupSpec("shared", None, k2, ("emb.shared",) * k2),)
        ones = [[True]] * t_count
        kind = "shared" if cfg.variant == "omoe" else "per_task"
        return Routing(("emb.shared",), groups, all_tasks, masks(ones, ones), kind, "shared_table")

    if cfg.variant == "me_mmoe":
        tables = tuple(f"emb.expert{i}" for i in range(k2))
        groups = (GroupSpec("shared", None, k2, tables),)
        ones = [[True]] * t_count
        return Routing(tables, groups, all_tasks, masks(ones, ones), "per_task", "expert_mean")

    # Remaining variants share the task-groups-plus-shared-group skeleton.
    if cfg.variant == "ple":
        tables = ("emb.shared",)
        group_tables = ("emb.shared",) * t_count
    else:  # me_ple, stem
        tables = ("emb.shared",) + task_tables
        group_tables = task_tables
    groups = tuple(
        GroupSpec(f"task{t}", t, k1, (group_tables[t],) * k1) for t in range(t_count)
    ) + (GroupSpec("shared", None, k2, ("emb.shared",) * k2),)
    own_plus_shared = [
        [g == t or g == t_count for g in range(t_count + 1)] for t in range(t_count)
    ]
    all_groups = [[True] * (t_count + 1)] * t_count
    if cfg.variant == "ple":
        mask = masks(own_plus_shared, own_plus_shared)
        return Routing(tables, groups, all_tasks, mask, "per_task", "shared_table")
    if cfg.variant == "me_ple":
        mask = masks(own_plus_shared, own_plus_shared)
        return Routing(tables, groups, all_tasks, mask, "per_task", "own_table")
    mask = masks(all_groups, own_plus_shared)  # stem: all forward, own+shared backward
    return Routing(tables, groups, all_tasks, mask, "per_task", cfg.gate_input_mode)


def visible_groups(routing: Routing, tower_idx: int) -> list[int]:
    """Forward-visible groups in gate order: own, shared, other tasks ascending."""
    task = routing.tower_tasks[tower_idx]
    fwd = routing.mask.forward[tower_idx]
    own = [g for g, grp in enumerate(routing.groups) if grp.owner == task and fwd[g]]
    shared = [g for g, grp in enumerate(routing.groups) if grp.owner is None and fwd[g]]
    others = [
        g
        for g, grp in enumerate(routing.groups)
        if grp.owner is not None and grp.owner != task and fwd[g]
    ]
    return own + shared + others


# ------------------------------------------------------------- initialization

def _glorot(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in))


def init_params(cfg: ModelConfig, schema: FieldSchema, seed: int) -> ParamStore:
    """Seeded initialization with a fixed draw order: embedding tables in layout
    order, expert groups (their experts, their layers), gates, then towers.
    Embeddings are N(0, 0.01); weights Glorot-uniform; biases zero."""
    routing = routing_for(cfg)
    rng = np.random.default_rng(seed)
    params = ParamStore()
    n_rows = schema.total_features
    k = cfg.embedding_dim
    d_in = schema.num_fields * k

    for table in routing.tables:
        params.add(table, rng.normal(0.0, 0.01, size=(n_rows, k)))

    for grp in routing.groups:
        for ei in range(grp.num_experts):
            fan_in = d_in
            for li, width in enumerate(cfg.expert_hidden):
                params.add(f"expert.{grp.name}.{ei}.layer{li}.W", _glorot(rng, width, fan_in))
                params.add(f"expert.{grp.name}.{ei}.layer{li}.b", np.zeros(width))
                fan_in = width

    if routing.gate_kind in ("per_task", "shared"):
        n_experts_total = {
            ti: sum(routing.groups[g].num_experts for g in visible_groups(routing, ti))
            for ti in range(len(routing.tower_tasks))
        }
        if routing.gate_kind == "shared":
            params.add("gate.shared.W", _glorot(rng, n_experts_total[0], d_in))
        else:
            for ti, task in enumerate(routing.tower_tasks):
                params.add(f"gate.task{task}.W", _glorot(rng, n_experts_total[ti], d_in))

    d_e = cfg.expert_output_dim
    for task in routing.tower_tasks:
        fan_in = d_e
        for li, width in enumerate(cfg.tower_hidden):
            params.add(f"tower.task{task}.layer{li}.W", _glorot(rng, width, fan_in))
            params.add(f"tower.task{task}.layer{li}.b", np.zeros(width))
            fan_in = width
        out_li = len(cfg.tower_hidden)
        params.add(f"tower.task{task}.layer{out_li}.W", _glorot(rng, 1, fan_in))
        params.add(f"tower.task{task}.layer{out_li}.b", np.zeros(1))
    return params


# ------------------------------------------------------------------- forward

@dataclass
class ForwardPass:
    tape: Tape
    preds: dict[int, Node]  # task index -> (B, 1) probability node
    h0: dict[str, Node]  # table name -> concatenated embedding node
    gate_weights: dict[int, Node]  # task index -> (B, n_visible) node
    touched_rows: dict[str, np.ndarray]  # table name -> unique global row ids


class Model:
    """A built variant: config + schema + parameters + routing."""

    def __init__(self, cfg: ModelConfig, schema: FieldSchema, params: ParamStore):
        self.cfg = cfg
        self.schema = schema
        self.params = params
        self.routing = routing_for(cfg)
        mask = cfg.field_task_specific_mask
        if mask is not None and len(mask) != schema.num_fields:
            raise ConfigError(
                f"field_task_specific_mask has {len(mask)} entries for "
                f"{schema.num_fields} fields"
            )
        self._field_mask = mask if mask is not None else (True,) * schema.num_fields

    @classmethod
    def build(cls, cfg: ModelConfig, schema: FieldSchema, seed: int) -> "Model":
        return cls(cfg, schema, init_params(cfg, schema, seed))

    @property
    def embedding_tables(self) -> tuple[str, ...]:
        return self.routing.tables

    def _field_table(self, table: str, f: int) -> str:
        """Task tables read fields with mask=False from the shared table."""
        if table.startswith("emb.task") and not self._field_mask[f]:
            return "emb.shared"
        return table

    def _concat_embedding(self, tape: Tape, table: str, gids: np.ndarray, touched) -> Node:
        parts = []
        for f in range(self.schema.num_fields):
            src = self._field_table(table, f)
            parts.append(tape.lookup(self.params[src], gids[:, f]))
            touched.setdefault(src, []).append(gids[:, f])
        return tape.concat(parts)

    def forward(self, features: np.ndarray) -> ForwardPass:
        """Run embed -> experts -> gates -> combine -> towers for a batch of
        per-field feature ids of shape (B, M) or a single (M,) row."""
        feats = np.atleast_2d(np.asarray(features, dtype=np.int64))
        if feats.shape[1] != self.schema.num_fields:
            raise ShapeError(
                f"batch has {feats.shape[1]} fields, schema has {self.schema.num_fields}"
            )
        bad = (feats < 0) | (feats >= np.asarray(self.schema.vocab_sizes))
        if bad.any():
            r, f = np.argwhere(bad)[0]
            raise IndexError(
                f"feature id {feats[r, f]} out of bounds for field {f} "
                f"(vocabulary size {self.schema.vocab_sizes[f]})"
            )
        gids = self.schema.global_ids(feats)
        routing = self.routing
        tape = Tape()
        touched: dict[str, list[np.ndarray]] = {}

        h0 = {
            table: self._concat_embedding(tape, table, gids, touched)
            for table in routing.tables
        }

        expert_outs: dict[tuple[int, int], Node] = {}
        for gi, grp in enumerate(routing.groups):
            for ei in range(grp.num_experts):
                expert_outs[(gi, ei)] = self._expert(tape, h0[grp.expert_tables[ei]], grp.name, ei)

        preds: dict[int, Node] = {}
        gates: dict[int, Node] = {}
        batch = feats.shape[0]
        for ti, task in enumerate(routing.tower_tasks):
            vis = visible_groups(routing, ti)
            nodes = []
            for gi in vis:
                blocked = not routing.mask.backward[ti][gi]
                for ei in range(routing.groups[gi].num_experts):
                    node = expert_outs[(gi, ei)]
                    if blocked and self.cfg.sg_enabled:
                        node = tape.stop_gradient(node)
                    nodes.append(node)
            weights = self._gate(tape, h0, routing, ti, task, len(nodes), batch)
            combined = tape.weighted_sum(nodes, weights)
            preds[task] = self._tower(tape, combined, task)
            gates[task] = weights

        touched_rows = {t: np.unique(np.concatenate(cols)) for t, cols in touched.items()}
        return ForwardPass(tape, preds, h0, gates, touched_rows)

    def _expert(self, tape: Tape, x: Node, group: str, ei: int) -> Node:
        h = x
        for li in range(len(self.cfg.expert_hidden)):
            w = self.params[f"expert.{group}.{ei}.layer{li}.W"]
            b = self.params[f"expert.{group}.{ei}.layer{li}.b"]
            h = tape.relu(tape.affine(h, w, b))
        return h

    def _tower(self, tape: Tape, x: Node, task: int) -> Node:
        h = x
        for li in range(len(self.cfg.tower_hidden)):
            w = self.params[f"tower.task{task}.layer{li}.W"]
            b = self.params[f"tower.task{task}.layer{li}.b"]
            h = tape.relu(tape.affine(h, w, b))
        out_li = len(self.cfg.tower_hidden)
        logit = tape.affine(
            h, self.params[f"tower.task{task}.layer{out_li}.W"],
            self.params[f"tower.task{task}.layer{out_li}.b"],
        )
        return tape.sigmoid(logit)

    def _gate(
        self, tape: Tape, h0: dict[str, Node], routing: Routing,
        tower_idx: int, task: int, n_visible: int, batch: int,
    ) -> Node:
        kind = routing.gate_kind
        if kind == "uniform":
            return Node(np.full((batch, n_visible), 1.0 / n_visible))
        if kind == "fixed":
            return Node(np.ones((batch, n_visible)))
        u = self._gate_input(tape, h0, routing, task)
        w = self.params["gate.shared.W" if kind == "shared" else f"gate.task{task}.W"]
        return tape.softmax(tape.affine(u, w))

    def _gate_input(self, tape: Tape, h0: dict[str, Node], routing: Routing, task: int) -> Node:
        mode = routing.gate_input
        if mode == "shared_table" or mode == "shared_only":
            return h0["emb.shared"]
        if mode == "own_table" or mode == "task_only":
            return h0[f"emb.task{task}"]
        if mode == "sum":
            return tape.add(h0[f"emb.task{task}"], h0["emb.shared"])
        if mode == "expert_mean":
            total = tape.add_n([h0[t] for t in routing.tables])
            return tape.scale(total, 1.0 / len(routing.tables))
        raise ConfigError(f"unknown gate input mode {mode!r}")

    # ---------------------------------------------------------------- predict

    def predict(self, dataset_or_features, batch_size: int = 4096) -> dict[int, np.ndarray]:
        """Probabilities per task over all rows, batched, parameters frozen."""
        feats = (
            dataset_or_features.features
            if isinstance(dataset_or_features, Dataset)
            else np.asarray(dataset_or_features, dtype=np.int64)
        )
        n = feats.shape[0]
        out = {task: np.empty(n) for task in self.routing.tower_tasks}
        for start in range(0, n, batch_size):
            fp = self.forward(feats[start : start + batch_size])
            for task, node in fp.preds.items():
                out[task][start : start + node.value.shape[0]] = node.value[:, 0]
        return out


# ---------------------------------------------------------------- checkpoints

_META_KEY = "__meta__"


def _write_npz_deterministic(path: Path, arrays: dict[str, np.ndarray]) -> None:
    """npz with fixed entry timestamps so identical content is byte-identical."""
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        for name, arr in arrays.items():
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.asarray(arr))
            info = zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0))
            zf.writestr(info, buf.getvalue())


def save_checkpoint(model: Model, path: str | Path) -> None:
    path = Path(path)
    meta = {
        "model": asdict(model.cfg),
        "vocab_sizes": list(model.schema.vocab_sizes),
    }
    arrays: dict[str, np.ndarray] = {_META_KEY: np.array(json.dumps(meta, sort_keys=True))}
    for name, p in model.params.items():
        arrays[name] = p.value
    _write_npz_deterministic(path, arrays)


def load_checkpoint(path: str | Path) -> Model:
    with np.load(path) as archive:
        meta = json.loads(str(archive[_META_KEY]))
        values = {name: archive[name] for name in archive.files if name != _META_KEY}
    raw = dict(meta["model"])
    for key in ("expert_hidden", "tower_hidden"):
        raw[key] = tuple(raw[key])
    if raw.get("field_task_specific_mask") is not None:
        raw["field_task_specific_mask"] = tuple(raw["field_task_specific_mask"])
    cfg = ModelConfig(**raw)
    schema = FieldSchema(tuple(meta["vocab_sizes"]))
    model = Model.build(cfg, schema, seed=0)
    model.params.load_values(values)
    return model
