"""Simulated local-node / central-server runtime with an auditable log.

Nodes own their raw samples; everything that crosses the node boundary is
a typed message validated against per-kind payload schemas whose array
shapes are fixed by configuration constants (parameter dimension, fold
count, grid size). Nothing whose size scales with a task's sample count
can pass validation, which is the structural privacy guarantee.

The runtime adds orchestration only: its output must match the direct
library path (``pipeline.fit_direct``) exactly.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .data import ModelKind, TaskDataset
from .errors import ConfigurationError, FederationViolation
from .fusion import (
    FusionProblem,
    argmin_tie_to_larger,
    solve_fusion,
    task_weights,
)
from .moments import FoldSurrogate, QuadraticSurrogate, aggregate_surrogate
from .nuisance import (
    NuisanceGridFit,
    build_grid,
    compute_half_stats,
    fuse_nuisance,
    holdout_loss_table,
    select_pair,
)
from .pipeline import (
    FusedCATESource,
    FusedPLMSource,
    PipelineConfig,
    PipelineResult,
    build_fold_surrogates,
    estimate_from_free,
    fit_task_initial,
    fused_response_specs,
    make_fold_plan,
    resolve_lambda_grid,
    resolve_nuisance_grids,
    task_fold_seed,
    task_policy,
    validate_tasks,
)

NODE_TO_SERVER = "node->server"
SERVER_TO_NODE = "server->node"

_SCALAR = "scalar"
_STR = "str"


@dataclass(frozen=True)
class FederationContext:
    """Configuration-scale dimensions a run's payloads are validated against."""

    d: int
    J: int
    p: int
    n_lambda: int = 1
    grid_sizes: frozenset = frozenset()
    n_hbar: int = 0
    n_nuis_lambda: int = 0


def _payload_schemas(ctx: FederationContext):
    d, J, p = ctx.d, ctx.J, ctx.p
    stacked = {(2 * J, g) for g in ctx.grid_sizes}
    return {
        "config": {
            "count": {_SCALAR},
            "p": {_SCALAR},
            "pooled_sd": {_SCALAR},
            "kind": {_STR},
            "folds": {_SCALAR},
            "d": {_SCALAR},
            "weight": {_SCALAR},
            "seed": {_SCALAR},
            "nuisance": {_SCALAR},
            "lambda_grid": {(ctx.n_lambda,)},
            "hbar_grid": {(ctx.n_hbar,)},
            "nuis_lambda_grid": {(ctx.n_nuis_lambda,)},
            "budget": {_SCALAR},
            "grid_kind": {_STR},
            "lo": {(p,)},
            "hi": {(p,)},
        },
        "grid_stats": {
            "response": {_STR},
            "hbar": {_SCALAR},
            "grad0": stacked,
            "valid": stacked,
        },
        "nuisance_grids": {
            "response": {_STR},
            "hbar": {_SCALAR},
            "lam": {_SCALAR},
            "values": stacked,
            "valid": stacked,
        },
        "surrogate": {
            "grad0": {(d,)},
            "hess": {(d, d)},
            "weight": {_SCALAR},
        },
        "fold_surrogate": {
            "fold": {_SCALAR},
            "count": {_SCALAR},
            "grad0": {(d,)},
            "hess": {(d, d)},
        },
        "center_estimates": {
            "u0": {(d,)},
            "u": {(d,)},
            "lam": {_SCALAR},
            "fold": {_SCALAR},
        },
        "validation_loss": {
            "lam": {_SCALAR},
            "fold": {_SCALAR},
            "loss": {_SCALAR},
            "response": {_STR},
            "losses": {(ctx.n_hbar, ctx.n_nuis_lambda)},
            "hbar": {_SCALAR},
        },
    }


def _shape_of(value):
    if isinstance(value, str):
        return _STR
    if isinstance(value, (bool, int, float, np.bool_, np.integer, np.floating)):
        return _SCALAR
    if isinstance(value, np.ndarray):
        return tuple(value.shape)
    return None


@dataclass(frozen=True)
class FederationMessage:
    """One audited exchange between a node and the server."""

    seq: int
    direction: str
    round: int
    kind: str
    node: int
    payload: dict
    dims: dict
    nbytes: int


def _encode_payload(payload: dict) -> str:
    def default(v):
        if isinstance(v, np.ndarray):
            return v.tolist()
        if isinstance(v, (np.bool_,)):
            return bool(v)
        if isinstance(v, np.integer):
            return int(v)
        if isinstance(v, np.floating):
            return float(v)
        raise TypeError(f"unserializable payload value of type {type(v)}")

    return json.dumps(payload, sort_keys=True, default=default)


def validate_message(msg: FederationMessage, context: FederationContext) -> str | None:
    """Structural payload check; returns a violation description or None."""
    schemas = _payload_schemas(context)
    schema = schemas.get(msg.kind)
    if schema is None:
        return f"unknown payload kind {msg.kind!r}"
    for name, value in msg.payload.items():
        allowed = schema.get(name)
        if allowed is None:
            return f"field {name!r} is not allowed in {msg.kind!r} payloads"
        shape = _shape_of(value)
        if shape is None:
            return f"field {name!r} has unsupported type {type(value).__name__}"
        if shape not in allowed:
            return (
                f"field {name!r} has shape {shape}, expected one of {sorted(map(str, allowed))}"
            )
    return None


class AuditLog:
    """Append-only record of every message with dims and byte counts."""

    def __init__(self):
        self.entries: list[FederationMessage] = []

    def append(self, entry: FederationMessage) -> None:
        self.entries.append(entry)

    def __len__(self) -> int:
        return len(self.entries)

    def round_bytes(self, round_no: int, direction: str) -> int:
        return sum(
            e.nbytes for e in self.entries if e.round == round_no and e.direction == direction
        )

    def to_jsonl(self) -> str:
        lines = []
        for e in self.entries:
            lines.append(
                json.dumps(
                    {
                        "seq": e.seq,
                        "direction": e.direction,
                        "round": e.round,
                        "kind": e.kind,
                        "node": e.node,
                        "dims": {k: (list(v) if isinstance(v, tuple) else v) for k, v in e.dims.items()},
                        "bytes": e.nbytes,
                    },
                    sort_keys=True,
                )
            )
        return "\n".join(lines) + ("\n" if lines else "")


class MessageBus:
    """Validates, sizes, and logs every exchange; raises on violations."""

    def __init__(self, context: FederationContext, max_round_bytes: int):
        self.context = context
        self.max_round_bytes = max_round_bytes
        self.audit = AuditLog()
        self._round = 0
        self._seq = 0
        self._round_up_bytes: dict[int, int] = {}

    def set_context(self, context: FederationContext) -> None:
        self.context = context

    def next_round(self) -> int:
        self._round += 1
        return self._round

    def send(self, direction: str, kind: str, node: int, payload: dict, round_no: int) -> dict:
        dims = {k: _shape_of(v) for k, v in payload.items()}
        encoded = _encode_payload(payload)
        msg = FederationMessage(
            seq=self._seq,
            direction=direction,
            round=round_no,
            kind=kind,
            node=node,
            payload=payload,
            dims=dims,
            nbytes=len(encoded.encode("utf-8")),
        )
        problem = validate_message(msg, self.context)
        if problem is not None:
            raise FederationViolation(
                f"round {round_no}, node {node}, kind {kind!r}: {problem}", self.audit
            )
        if direction == NODE_TO_SERVER:
            total = self._round_up_bytes.get(round_no, 0) + msg.nbytes
            self._round_up_bytes[round_no] = total
            if total > self.max_round_bytes:
                raise FederationViolation(
                    f"round {round_no}: node->server traffic {total} exceeds ceiling "
                    f"{self.max_round_bytes}",
                    self.audit,
                )
        self._seq += 1
        self.audit.append(msg)
        return payload


class _Node:
    """One task's local state; raw data never leaves this object."""

    def __init__(self, index: int, data: TaskDataset, config: PipelineConfig):
        self.index = index
        self.data = data
        self.config = config
        self.plan = make_fold_plan(data.n, config.folds, task_fold_seed(config.seed, index))
        self.policy = task_policy(config.bandwidth, index)
        self.weight = 1.0
        self.grids = {}
        self.received_grids: dict = {}
        self.chosen_fits: dict[str, dict] = {}
        self.selections: dict[str, object] = {}
        self.init = None
        self.fold_surs = None
        self.final_free = None

    def enroll_payload(self) -> dict:
        return {
            "count": self.data.n,
            "p": self.data.p,
            "pooled_sd": float(np.mean(np.std(self.data.X, axis=0))),
        }

    def grid_stats_payload(self, response_name: str, resp, mask, grid, hbar: float) -> dict:
        stats = compute_half_stats(self.data.X, resp, self.plan, grid, hbar, mask)
        J = self.plan.J
        grad0 = np.stack([stats[(j, m)][0] for j in range(1, J + 1) for m in (1, 2)])
        valid = np.stack([stats[(j, m)][1] for j in range(1, J + 1) for m in (1, 2)])
        return {"response": response_name, "hbar": hbar, "grad0": grad0, "valid": valid}

    def store_fused(self, response_name, h_idx, l_idx, payload, grid) -> None:
        J = self.plan.J
        fits = {}
        for j in range(1, J + 1):
            for m in (1, 2):
                row = 2 * (j - 1) + (m - 1)
                fits[(j, m)] = NuisanceGridFit(
                    grid=grid,
                    values=payload["values"][row],
                    bandwidth=float(payload["hbar"]),
                    lam=float(payload["lam"]),
                    valid=payload["valid"][row],
                )
        self.received_grids[(response_name, h_idx, l_idx)] = fits

    def choose_nuisance(self, response_name, resp, mask, hbar_grid, lam_grid) -> dict:
        losses = holdout_loss_table(
            lambda h, l, j, m: self.received_grids[(response_name, h, l)][(j, m)],
            self.data.X,
            resp,
            self.plan,
            len(hbar_grid),
            len(lam_grid),
            mask,
        )
        sel = select_pair(losses, hbar_grid, lam_grid)
        self.selections[response_name] = sel
        h_idx = list(hbar_grid).index(sel.hbar)
        l_idx = list(lam_grid).index(sel.lam)
        self.chosen_fits[response_name] = self.received_grids[(response_name, h_idx, l_idx)]
        return {
            "response": response_name,
            "losses": sel.losses,
            "hbar": sel.hbar,
            "lam": sel.lam,
        }

    def run_initial(self) -> None:
        kind = self.config.kind
        source = None
        if self.chosen_fits:
            if kind is ModelKind.PLM:
                source = FusedPLMSource(self.chosen_fits)
            else:
                source = FusedCATESource(self.data, self.plan, self.policy, self.chosen_fits)
        self.init = fit_task_initial(
            self.data, self.plan, kind, self.policy, self.config.max_outer, source
        )
        self.fold_surs = build_fold_surrogates(self.data, self.init)

    def surrogate_payload(self) -> dict:
        agg = aggregate_surrogate(self.fold_surs, weight=self.weight)
        return {"grad0": agg.grad0, "hess": agg.hess, "weight": self.weight}

    def fold_surrogate_payloads(self) -> list[dict]:
        return [
            {"fold": f.fold, "count": f.count, "grad0": f.grad0, "hess": f.hess}
            for f in self.fold_surs
        ]

    def validation_loss(self, payload: dict) -> float:
        j = int(payload["fold"])
        hold = next(f for f in self.fold_surs if f.fold == j)
        u = payload["u"]
        return self.weight * float(hold.grad0 @ u + 0.5 * u @ hold.hess @ u)


def run_pipeline(datasets: list[TaskDataset], config: PipelineConfig) -> PipelineResult:
    """Full estimation through the simulated federation: every cross-node
    value flows through a validated, logged message."""
    kind = config.kind
    p = validate_tasks(datasets, kind)
    K = len(datasets)
    d = kind.param_dim(p)
    bus = MessageBus(
        FederationContext(d=d, J=config.folds, p=p), max_round_bytes=config.max_round_bytes
    )
    nodes = [_Node(k, ds, config) for k, ds in enumerate(datasets)]

    # Enrollment: scalar facts the server needs to weight and configure.
    r = bus.next_round()
    enrolls = [
        bus.send(NODE_TO_SERVER, "config", node.index, node.enroll_payload(), r)
        for node in nodes
    ]
    sizes = [int(e["count"]) for e in enrolls]
    if any(int(e["p"]) != p for e in enrolls):
        raise ConfigurationError("tasks disagree on the covariate dimension")
    weights = task_weights(sizes)
    n_bar = float(np.mean(sizes))
    pooled_sd = float(np.mean([float(e["pooled_sd"]) for e in enrolls]))

    lam_grid = resolve_lambda_grid(config, K, n_bar)
    nuis_on = config.nuisance_fusion and kind is not ModelKind.SIM
    if nuis_on:
        hbar_grid, nuis_lam_grid = resolve_nuisance_grids(config, K, n_bar, p, pooled_sd)
        budget = config.grid_budget or min(512, 8 * max(sizes))
        lo = np.full(p, config.domain_lo)
        hi = np.full(p, config.domain_hi)
        grids = [build_grid(lo, hi, h, kind=config.grid_kind, budget=budget) for h in hbar_grid]
        grid_sizes = frozenset(g.size for g in grids)
    else:
        hbar_grid, nuis_lam_grid, grids, grid_sizes = [], [], [], frozenset()
        budget = 0
        lo = np.full(p, config.domain_lo)
        hi = np.full(p, config.domain_hi)
    bus.set_context(
        FederationContext(
            d=d,
            J=config.folds,
            p=p,
            n_lambda=len(lam_grid),
            grid_sizes=grid_sizes,
            n_hbar=len(hbar_grid),
            n_nuis_lambda=len(nuis_lam_grid),
        )
    )

    r = bus.next_round()
    for k, node in enumerate(nodes):
        payload = {
            "kind": kind.value,
            "folds": config.folds,
            "d": d,
            "weight": float(weights[k]),
            "seed": config.seed,
            "nuisance": nuis_on,
            "lambda_grid": np.asarray(lam_grid),
            "hbar_grid": np.asarray(hbar_grid),
            "nuis_lambda_grid": np.asarray(nuis_lam_grid),
            "budget": budget,
            "grid_kind": config.grid_kind,
            "lo": lo,
            "hi": hi,
        }
        got = bus.send(SERVER_TO_NODE, "config", k, payload, r)
        node.weight = float(got["weight"])

    selections = None
    if nuis_on:
        selections = {}
        specs = [fused_response_specs(kind, node.data) for node in nodes]
        for r_i, (name, _, _) in enumerate(specs[0]):
            # Local grid statistics, one round per candidate bandwidth.
            stats_by_h = []
            for h_idx, hbar in enumerate(hbar_grid):
                rr = bus.next_round()
                msgs = []
                for k, node in enumerate(nodes):
                    resp, mask = specs[k][r_i][1], specs[k][r_i][2]
                    payload = node.grid_stats_payload(name, resp, mask, grids[h_idx], hbar)
                    msgs.append(bus.send(NODE_TO_SERVER, "grid_stats", k, payload, rr))
                stats_by_h.append(msgs)
            # Server-side fusion for every candidate pair, then fits back out.
            J = config.folds
            for h_idx, hbar in enumerate(hbar_grid):
                grid = grids[h_idx]
                fits_cache = {}
                for j in range(1, J + 1):
                    for m in (1, 2):
                        row = 2 * (j - 1) + (m - 1)
                        stats = [
                            (msg["grad0"][row], msg["valid"][row]) for msg in stats_by_h[h_idx]
                        ]
                        for l_idx, lam in enumerate(nuis_lam_grid):
                            fits_cache[(l_idx, j, m)] = fuse_nuisance(
                                stats, weights, lam, grid, hbar
                            )
                for l_idx, lam in enumerate(nuis_lam_grid):
                    rr = bus.next_round()
                    for k, node in enumerate(nodes):
                        values = np.stack(
                            [
                                fits_cache[(l_idx, j, m)][k].values
                                for j in range(1, J + 1)
                                for m in (1, 2)
                            ]
                        )
                        valid = np.stack(
                            [
                                fits_cache[(l_idx, j, m)][k].valid
                                for j in range(1, J + 1)
                                for m in (1, 2)
                            ]
                        )
                        payload = {
                            "response": name,
                            "hbar": hbar,
                            "lam": lam,
                            "values": values,
                            "valid": valid,
                        }
                        got = bus.send(SERVER_TO_NODE, "nuisance_grids", k, payload, rr)
                        node.store_fused(name, h_idx, l_idx, got, grid)
            # Task-specific selection, reported for the audit trail.
            rr = bus.next_round()
            sels = []
            for k, node in enumerate(nodes):
                resp, mask = specs[k][r_i][1], specs[k][r_i][2]
                payload = node.choose_nuisance(name, resp, mask, hbar_grid, nuis_lam_grid)
                bus.send(NODE_TO_SERVER, "validation_loss", k, payload, rr)
                sels.append(node.selections[name])
            selections[name] = sels

    # Individual task learning happens strictly on the nodes.
    for node in nodes:
        node.run_initial()

    r = bus.next_round()
    surrogate_msgs = [
        bus.send(NODE_TO_SERVER, "surrogate", k, node.surrogate_payload(), r)
        for k, node in enumerate(nodes)
    ]
    surrogates = tuple(
        QuadraticSurrogate(
            task_id=k,
            grad0=msg["grad0"],
            hess=msg["hess"],
            weight=float(msg["weight"]),
        )
        for k, msg in enumerate(surrogate_msgs)
    )

    if len(lam_grid) > 1:
        r = bus.next_round()
        server_folds: list[list[FoldSurrogate]] = []
        for k, node in enumerate(nodes):
            collected = []
            for payload in node.fold_surrogate_payloads():
                got = bus.send(NODE_TO_SERVER, "fold_surrogate", k, payload, r)
                collected.append(
                    FoldSurrogate(
                        task_id=k,
                        fold=int(got["fold"]),
                        grad0=got["grad0"],
                        hess=got["hess"],
                        count=int(got["count"]),
                    )
                )
            server_folds.append(collected)
        folds = sorted({f.fold for task in server_folds for f in task})
        mean_losses = []
        for lam in lam_grid:
            total = 0.0
            for j in folds:
                retained = tuple(
                    aggregate_surrogate(server_folds[k], weight=float(weights[k]), skip_fold=j)
                    for k in range(K)
                )
                sol = solve_fusion(FusionProblem(surrogates=retained, lam=lam))
                rr = bus.next_round()
                for k, node in enumerate(nodes):
                    sent = bus.send(
                        SERVER_TO_NODE,
                        "center_estimates",
                        k,
                        {"u0": sol.center, "u": sol.per_task[k], "lam": lam, "fold": j},
                        rr,
                    )
                    loss = node.validation_loss(sent)
                    got = bus.send(
                        NODE_TO_SERVER,
                        "validation_loss",
                        k,
                        {"lam": lam, "fold": j, "loss": loss},
                        rr,
                    )
                    total += float(got["loss"])
            mean_losses.append(total / len(folds))
        lam_star = argmin_tie_to_larger(lam_grid, mean_losses)
    else:
        lam_star = lam_grid[0]

    solution = solve_fusion(FusionProblem(surrogates=surrogates, lam=lam_star))
    r = bus.next_round()
    for k, node in enumerate(nodes):
        got = bus.send(
            SERVER_TO_NODE,
            "center_estimates",
            k,
            {"u0": solution.center, "u": solution.per_task[k], "lam": lam_star},
            r,
        )
        node.final_free = got["u"]

    estimates = [estimate_from_free(kind, node.final_free) for node in nodes]
    return PipelineResult(
        kind=kind,
        estimates=estimates,
        center=solution.center,
        lambda_selected=float(lam_star),
        fusion=solution,
        initial_pooled=[node.init.pooled_theta for node in nodes],
        initial_converged=[node.init.converged for node in nodes],
        nuisance_selections=selections,
        audit=bus.audit,
    )
