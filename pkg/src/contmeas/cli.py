"""Command-line entry point: config parsing, seeded ensembles, summaries.

One config document (JSON) describes the model, the initial state and the
run parameters; subcommands pick what to do with it:

* ``counting``   — jump trajectories, one event/snapshot row per line
* ``diffusive``  — diffusive trajectories, one output-increment row per line
* ``master``     — deterministic a-priori propagation
* ``charfun``    — characteristic functional, deterministic or Monte Carlo
* ``limit``      — counting→diffusion convergence report over an ε sweep
* ``oracle``     — closed-form two-level / Gaussian oscillator reference paths
* ``validate``   — structural and numerical consistency checks, no outputs

Determinism contract: one (config, seed, build) triple produces byte-identical
output files.  Trajectory ``i`` always consumes the counter-based stream keyed
by ``(seed, i)``, so results do not depend on scheduling or chunking, and no
wall-clock data is ever written.

Exit codes: 0 success, 2 malformed config or arguments, 3 violated numerical
contract at run time.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Iterable, Optional, Sequence

import numpy as np

from . import serialize
from .charfun import (
    CharacteristicResult,
    TestFunction,
    constant_test_function,
    monte_carlo_characteristic,
    propagate_characteristic,
)
from .counting import TrajectoryRecord, simulate_counting_trajectory
from .diffusive import OutputPath, simulate_diffusive_trajectory
from .errors import ConfigError, ContractViolationError
from .hilbert import DEFAULT_TOL, Tolerances, purity, trace_distance, trace_row
from .kernels import build_counting_plan
from .model import (
    MeasurementModel,
    TimeGrid,
    liouvillian_matrix,
    master_evolve,
    model_from_config,
    no_count_matrix,
)
from .oracles import (
    GaussianPosterior,
    OscillatorParams,
    TwoLevelFilterState,
    TwoLevelParams,
    riccati_posterior_evolve,
    twolevel_filter_evolve,
)
from .counting import CountRealization
from .scaling import DEFAULT_EPSILONS, limit_sweep

DIFFUSIVE_DEFAULT_STEPS = 10_000


def _package_version() -> str:
    try:
        from importlib.metadata import version

        return version("contmeas")
    except Exception:
        return "unknown"


# ---------------------------------------------------------------------------
# config document
# ---------------------------------------------------------------------------

@dataclass
class RunConfig:
    """A fully validated run request (config document + CLI overrides)."""

    mode: str
    model: MeasurementModel
    rho0: Optional[np.ndarray]
    trajectories: int
    seed: int
    snapshot_every: int
    fmt: str
    dt: Optional[float]
    tau: float
    clip_eigenvalues: bool
    method: str                      # charfun: deterministic | monte-carlo
    epsilons: tuple[float, ...]
    test_function_doc: Optional[dict]
    oracle_doc: Optional[dict]
    tol: Tolerances
    config_sha256: str


def _require_mapping(doc: Any, path: str) -> dict:
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: expected a mapping")
    return doc


def _get_number(doc: dict, key: str, path: str, default=None, *, minimum=None):
    if key not in doc:
        if default is None:
            raise ConfigError(f"{path}.{key}: required")
        return default
    v = doc[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"{path}.{key}: expected a number, got {v!r}")
    if minimum is not None and v < minimum:
        raise ConfigError(f"{path}.{key}: must be >= {minimum}, got {v}")
    return v


def state_from_config(doc: Any, dim: int, tol: Tolerances) -> np.ndarray:
    """Decode ``initial_state``: a vector of [re, im] pairs or a full matrix."""
    if isinstance(doc, (list, tuple)) and doc and serialize._looks_like_pair(doc[0]):
        psi = np.array(
            [serialize.pair_to_complex(v, field=f"initial_state[{i}]") for i, v in enumerate(doc)]
        )
        if len(psi) != dim:
            raise ConfigError(f"initial_state: vector length {len(psi)} does not match dim {dim}")
        nrm = float(np.linalg.norm(psi))
        if abs(nrm - 1.0) > 1e-6:
            raise ConfigError(f"initial_state: vector norm {nrm:.8f} is not 1")
        psi = psi / nrm
        return np.outer(psi, psi.conj())
    rho = serialize.matrix_from_json(doc, field="initial_state")
    if rho.shape != (dim, dim):
        raise ConfigError(f"initial_state: shape {rho.shape} does not match dim {dim}")
    from .hilbert import require_state

    try:
        require_state(rho, tol, what="initial_state")
    except ContractViolationError as exc:
        raise ConfigError(str(exc)) from exc
    return rho


def _tolerances_from_config(doc: Any) -> Tolerances:
    if doc is None:
        return DEFAULT_TOL
    doc = _require_mapping(doc, "tolerances")
    allowed = {"herm", "trace", "psd", "rate"}
    unknown = set(doc) - allowed
    if unknown:
        raise ConfigError(f"tolerances: unknown fields {sorted(unknown)}")
    vals = {k: _get_number(doc, k, "tolerances", getattr(DEFAULT_TOL, k), minimum=0.0) for k in doc}
    return replace(DEFAULT_TOL, **vals)


def load_config(path: str, mode: str, args: argparse.Namespace) -> RunConfig:
    """Read and validate the config document, applying CLI flag overrides."""
    try:
        raw_bytes = Path(path).read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        doc = json.loads(raw_bytes)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    doc = _require_mapping(doc, "config")

    tol = _tolerances_from_config(doc.get("tolerances"))
    oracle_doc = doc.get("oracle")
    if mode == "oracle":
        if oracle_doc is None:
            raise ConfigError("oracle: required mapping for the oracle subcommand")
        model = None
        rho0 = None
    else:
        model = model_from_config(_require_mapping(doc.get("model"), "model"))
        rho0 = None
        if "initial_state" in doc:
            rho0 = state_from_config(doc["initial_state"], model.dim, tol)
        elif mode != "validate":
            raise ConfigError("initial_state: required")

    trajectories = int(_get_number(doc, "trajectories", "config", 1, minimum=1))
    if args.trajectories is not None:
        if args.trajectories < 1:
            raise ConfigError(f"--trajectories: must be >= 1, got {args.trajectories}")
        trajectories = args.trajectories
    seed = int(_get_number(doc, "seed", "config", 0, minimum=0))
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError(f"--seed: must be >= 0, got {args.seed}")
        seed = args.seed
    snapshot_every = int(_get_number(doc, "snapshot_every", "config", 1, minimum=1))
    if args.snapshot_every is not None:
        if args.snapshot_every < 1:
            raise ConfigError(f"--snapshot-every: must be >= 1, got {args.snapshot_every}")
        snapshot_every = args.snapshot_every
    fmt = doc.get("format", "jsonl")
    if getattr(args, "format", None):
        fmt = args.format
    if fmt not in ("jsonl", "csv"):
        raise ConfigError(f"format: expected 'jsonl' or 'csv', got {fmt!r}")
    dt = doc.get("dt")
    if dt is not None:
        dt = float(_get_number(doc, "dt", "config", minimum=0.0))
        if dt <= 0:
            raise ConfigError(f"dt: must be positive, got {dt}")
    if args.dt is not None:
        if args.dt <= 0:
            raise ConfigError(f"--dt: must be positive, got {args.dt}")
        dt = args.dt
    tau = float(_get_number(doc, "tau", "config", 1.0))
    if tau <= 0:
        raise ConfigError(f"tau: must be positive, got {tau}")
    clip = doc.get("clip_eigenvalues", False)
    if not isinstance(clip, bool):
        raise ConfigError(f"clip_eigenvalues: expected true/false, got {clip!r}")
    method = doc.get("method", "deterministic")
    if method not in ("deterministic", "monte-carlo"):
        raise ConfigError(f"method: expected 'deterministic' or 'monte-carlo', got {method!r}")
    eps_doc = doc.get("epsilons", list(DEFAULT_EPSILONS))
    if not isinstance(eps_doc, (list, tuple)) or not eps_doc:
        raise ConfigError("epsilons: expected a nonempty list of positive numbers")
    epsilons = []
    for i, e in enumerate(eps_doc):
        if isinstance(e, bool) or not isinstance(e, (int, float)) or e <= 0:
            raise ConfigError(f"epsilons[{i}]: expected a positive number, got {e!r}")
        epsilons.append(float(e))

    return RunConfig(
        mode=mode,
        model=model,
        rho0=rho0,
        trajectories=trajectories,
        seed=seed,
        snapshot_every=snapshot_every,
        fmt=fmt,
        dt=dt,
        tau=tau,
        clip_eigenvalues=clip,
        method=method,
        epsilons=tuple(epsilons),
        test_function_doc=doc.get("test_function"),
        oracle_doc=oracle_doc,
        tol=tol,
        config_sha256=hashlib.sha256(raw_bytes).hexdigest(),
    )


def resolve_run_grid(cfg: RunConfig) -> TimeGrid:
    """Run grid for time-stepped modes; must subdivide the schedule grid.

    ``dt`` refines the model grid by an integer factor per cell.  Diffusive
    runs default to ~10⁴ steps (rounded up to a multiple of the schedule
    cells); other modes default to the schedule grid itself.  Counting is
    integrated exactly and always uses the schedule grid for its nodes.
    """
    grid = cfg.model.grid
    if cfg.mode == "counting" or cfg.dt is None:
        if cfg.mode == "diffusive":
            per_cell = -(-DIFFUSIVE_DEFAULT_STEPS // grid.steps)  # ceil
            return TimeGrid(grid.t0, grid.t1, per_cell * grid.steps)
        return grid
    ratio = grid.dt / cfg.dt
    per_cell = round(ratio)
    if per_cell < 1 or abs(ratio - per_cell) > 1e-9 * max(ratio, 1.0):
        raise ConfigError(
            f"dt={cfg.dt:g} must divide the schedule cell width {grid.dt:g} "
            f"an integral number of times"
        )
    return TimeGrid(grid.t0, grid.t1, per_cell * grid.steps)


def _traj_rng(seed: int, traj: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=[seed, traj]))


# ---------------------------------------------------------------------------
# ensemble summaries
# ---------------------------------------------------------------------------

@dataclass
class EnsembleSummary:
    """Time-indexed ensemble statistics at the snapshot nodes."""

    mode: str
    times: np.ndarray              # (n_snap,)
    n_traj: int
    mean_state: np.ndarray         # (n_snap, d, d) complex
    state_stderr: np.ndarray       # (n_snap, d, d) real
    purity_mean: np.ndarray        # (n_snap,)
    output_mean: np.ndarray        # (n_snap, n_ch): counts or Y
    output_cov: np.ndarray         # (n_snap, n_ch, n_ch)
    mart_mean: np.ndarray          # (n_snap, n_ch)
    mart_stderr: np.ndarray        # (n_snap, n_ch)
    dist_to_master: Optional[np.ndarray] = None   # (n_snap,)

    def to_document(self) -> dict:
        doc = {
            "mode": self.mode,
            "times": [float(t) for t in self.times],
            "n_traj": self.n_traj,
            "mean_state": [serialize.matrix_to_json(s) for s in self.mean_state],
            "state_stderr": [[[float(x) for x in row] for row in s] for s in self.state_stderr],
            "purity_mean": [float(p) for p in self.purity_mean],
            "output_mean": [[float(x) for x in row] for row in self.output_mean],
            "output_cov": [[[float(x) for x in r] for r in c] for c in self.output_cov],
            "martingale_mean": [[float(x) for x in row] for row in self.mart_mean],
            "martingale_stderr": [[float(x) for x in row] for row in self.mart_stderr],
        }
        if self.dist_to_master is not None:
            doc["trace_distance_to_master"] = [float(x) for x in self.dist_to_master]
        return doc


def _snapshot_nodes(record: TrajectoryRecord) -> np.ndarray:
    n_snaps = 0 if record.snapshots is None else len(record.snapshots)
    return np.arange(n_snaps) * record.snapshot_stride


def _moments(stack: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean and standard error over axis 0 (complex-aware, ddof=1)."""
    n = stack.shape[0]
    mean = stack.mean(axis=0)
    if n == 1:
        return mean, np.zeros(mean.shape)
    if np.iscomplexobj(stack):
        var = stack.real.var(axis=0, ddof=1) + stack.imag.var(axis=0, ddof=1)
    else:
        var = stack.var(axis=0, ddof=1)
    return mean, np.sqrt(var / n)


def summarize_ensemble(
    records: Sequence,
    *,
    model: MeasurementModel | None = None,
    rho0: np.ndarray | None = None,
    times: np.ndarray | None = None,
    tol: Tolerances = DEFAULT_TOL,
) -> EnsembleSummary:
    """Ensemble means with standard errors from homogeneous trajectory records.

    Accepts counting records, (record, output-path) pairs from the diffusive
    engine, or a single master node-state array (whose node ``times`` may be
    passed explicitly).  With ``model`` and ``rho0`` the per-node trace
    distance of the ensemble mean to the master evolution is included.
    """
    if len(records) == 0:
        raise ConfigError("summarize_ensemble needs at least one record")

    first = records[0]
    if isinstance(first, np.ndarray):
        if len(records) != 1:
            raise ConfigError("master summaries take exactly one node-state array")
        states = first
        if times is None:
            times = model.grid.times if model is not None else np.arange(len(states), dtype=float)
        if len(times) != len(states):
            raise ConfigError(
                f"master summary got {len(states)} states but {len(times)} node times"
            )
        summary = EnsembleSummary(
            mode="master",
            times=np.asarray(times, dtype=float),
            n_traj=1,
            mean_state=states,
            state_stderr=np.zeros(states.shape),
            purity_mean=np.array([purity(s) for s in states]),
            output_mean=np.zeros((len(states), 0)),
            output_cov=np.zeros((len(states), 0, 0)),
            mart_mean=np.zeros((len(states), 0)),
            mart_stderr=np.zeros((len(states), 0)),
            dist_to_master=np.zeros(len(states)),
        )
        _check_mean_normalized(summary)
        return summary

    if isinstance(first, TrajectoryRecord):
        mode = "counting"
        recs = list(records)
        paths = None
    elif isinstance(first, tuple) and len(first) == 2 and isinstance(first[0], TrajectoryRecord):
        mode = "diffusive"
        recs = [r for r, _ in records]
        paths = [p for _, p in records]
    else:
        raise ConfigError(f"unrecognized record type {type(first)!r}")

    ref = recs[0]
    for r in recs[1:]:
        if r.mode != ref.mode or len(r.grid) != len(ref.grid) or r.snapshot_stride != ref.snapshot_stride:
            raise ConfigError("mixed-mode or mixed-grid records cannot be summarized together")
        if r.snapshots is None or len(r.snapshots) != len(ref.snapshots):
            raise ConfigError("records must carry snapshots on a common stride")
    if ref.snapshots is None:
        raise ConfigError("records must carry snapshots to be summarized")
    if mode == "counting" and ref.mode != "counting":
        raise ConfigError("mixed-mode records cannot be summarized together")

    nodes = _snapshot_nodes(ref)
    times = ref.grid[nodes]
    snaps = np.stack([r.snapshots for r in recs])          # (n, s, d, d)
    mean_state, state_stderr = _moments(snaps)
    purity_mean = np.array([[purity(s) for s in r.snapshots] for r in recs]).mean(axis=0)

    if mode == "counting":
        outputs = np.stack([r.counts[nodes].astype(float) for r in recs])
        mart = np.stack([r.martingale()[nodes] for r in recs])
    else:
        outputs = np.stack([p.cumulative()[nodes] for p in paths])
        mart = np.stack([p.martingale()[nodes] for p in paths])
    output_mean = outputs.mean(axis=0)
    centered = outputs - output_mean
    denom = max(len(recs) - 1, 1)
    output_cov = np.einsum("rsi,rsj->sij", centered, centered) / denom
    mart_mean, mart_stderr = _moments(mart)

    dist = None
    if model is not None and rho0 is not None:
        run_grid = TimeGrid(float(ref.grid[0]), float(ref.grid[-1]), len(ref.grid) - 1)
        master = master_evolve(model, rho0, run_grid)[nodes]
        dist = np.array([trace_distance(a, b) for a, b in zip(mean_state, master)])

    summary = EnsembleSummary(
        mode=mode,
        times=times,
        n_traj=len(recs),
        mean_state=mean_state,
        state_stderr=state_stderr,
        purity_mean=purity_mean,
        output_mean=output_mean,
        output_cov=output_cov,
        mart_mean=mart_mean,
        mart_stderr=mart_stderr,
        dist_to_master=dist,
    )
    _check_mean_normalized(summary)
    return summary


def _check_mean_normalized(summary: EnsembleSummary) -> None:
    traces = np.trace(summary.mean_state, axis1=1, axis2=2)
    defect = float(np.abs(traces - 1.0).max())
    if defect > 1e-10:
        raise ContractViolationError(
            f"ensemble mean state is not normalized (max |Tr−1| = {defect:.3e})"
        )


def run_ensemble(cfg: RunConfig) -> tuple[list, EnsembleSummary]:
    """Execute the configured ensemble; trajectory ``i`` uses stream (seed, i)."""
    m = cfg.model
    grid = resolve_run_grid(cfg)
    if cfg.mode == "counting":
        plan = build_counting_plan(m, grid, tau=cfg.tau, tol=cfg.tol)
        records: list = []
        for i in range(cfg.trajectories):
            try:
                records.append(
                    simulate_counting_trajectory(
                        m,
                        cfg.rho0,
                        grid,
                        _traj_rng(cfg.seed, i),
                        tau=cfg.tau,
                        snapshot_stride=cfg.snapshot_every,
                        tol=cfg.tol,
                        plan=plan,
                        seed_label=(cfg.seed, i),
                    )
                )
            except ContractViolationError as exc:
                raise ContractViolationError(f"trajectory {i}: {exc}") from exc
    elif cfg.mode == "diffusive":
        records = []
        for i in range(cfg.trajectories):
            try:
                records.append(
                    simulate_diffusive_trajectory(
                        m,
                        cfg.rho0,
                        grid,
                        _traj_rng(cfg.seed, i),
                        snapshot_stride=cfg.snapshot_every,
                        clip_eigenvalues=cfg.clip_eigenvalues,
                        tol=cfg.tol,
                        seed_label=(cfg.seed, i),
                    )
                )
            except ContractViolationError as exc:
                raise ContractViolationError(f"trajectory {i}: {exc}") from exc
    elif cfg.mode == "master":
        records = [master_evolve(m, cfg.rho0, grid, tol=cfg.tol)]
        return records, summarize_ensemble(records, times=grid.times, tol=cfg.tol)
    else:
        raise ConfigError(f"run_ensemble does not handle mode {cfg.mode!r}")
    return records, summarize_ensemble(records, model=m, rho0=cfg.rho0, tol=cfg.tol)


# ---------------------------------------------------------------------------
# row generators
# ---------------------------------------------------------------------------

def counting_rows(records: Sequence[TrajectoryRecord]) -> Iterable[dict]:
    """One row per jump event plus one per snapshot, in time order.

    Jump rows report ``c`` at the last grid node at or before the event (the
    linear-filter normalization is tracked nodewise).
    """
    for i, rec in enumerate(records):
        c_nodes = rec.c_values
        nodes = _snapshot_nodes(rec)
        events = list(rec.realization.events) if rec.realization is not None else []
        ei = 0
        for si, node in enumerate(nodes):
            t_node = float(rec.grid[node])
            while ei < len(events) and events[ei][0] <= t_node:
                t_ev, j_ev = events[ei]
                node_before = int(np.searchsorted(rec.grid, t_ev, side="right") - 1)
                yield {
                    "traj": i,
                    "t": float(t_ev),
                    "kind": "jump",
                    "channel": int(j_ev),
                    "c": float(c_nodes[min(node_before, len(c_nodes) - 1)]),
                }
                ei += 1
            yield {
                "traj": i,
                "t": t_node,
                "kind": "snap",
                "state": rec.snapshots[si],
                "c": float(c_nodes[node]),
            }
        for t_ev, j_ev in events[ei:]:
            node_before = int(np.searchsorted(rec.grid, t_ev, side="right") - 1)
            yield {
                "traj": i,
                "t": float(t_ev),
                "kind": "jump",
                "channel": int(j_ev),
                "c": float(c_nodes[min(node_before, len(c_nodes) - 1)]),
            }


def diffusive_rows(paths: Sequence[OutputPath]) -> Iterable[dict]:
    """One row per step per channel; ``t`` is the left node of the increment."""
    for i, path in enumerate(paths):
        times = path.grid
        for s in range(path.dY.shape[0]):
            for j in range(path.dY.shape[1]):
                yield {
                    "traj": i,
                    "t": float(times[s]),
                    "channel": j,
                    "dY_re": float(path.dY[s, j]),
                }


def master_rows(states: np.ndarray, times: np.ndarray) -> Iterable[dict]:
    for t, s in zip(times, states):
        yield {"t": float(t), "state": s}


def charfun_rows(result: CharacteristicResult) -> Iterable[dict]:
    stderr = result.stderr if result.stderr is not None else np.zeros(len(result.times))
    for t, phi, se in zip(result.times, result.phi_path, stderr):
        yield {
            "t": float(t),
            "phi_re": float(phi.real),
            "phi_im": float(phi.imag),
            "stderr": float(se),
        }


def _write_rows(out_dir: Path, stem: str, fmt: str, rows: Iterable[dict]) -> Path:
    path = out_dir / f"{stem}.{fmt}"
    if fmt == "jsonl":
        serialize.write_jsonl(path, rows)
    else:
        serialize.write_csv(path, list(rows))
    return path


def _write_metadata(out_dir: Path, cfg: RunConfig, grid: TimeGrid | None, extra: dict | None = None) -> None:
    doc = {
        "mode": cfg.mode,
        "format": cfg.fmt,
        "seed": cfg.seed,
        "trajectories": cfg.trajectories,
        "snapshot_every": cfg.snapshot_every,
        "dt": grid.dt if grid is not None else None,
        "tau": cfg.tau,
        "clip_eigenvalues": cfg.clip_eigenvalues,
        "package_version": _package_version(),
        "config_sha256": cfg.config_sha256,
    }
    if extra:
        doc.update(extra)
    (out_dir / "metadata.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _write_summary(out_dir: Path, summary: EnsembleSummary) -> None:
    (out_dir / "summary.json").write_text(
        json.dumps(summary.to_document(), separators=(",", ":")) + "\n"
    )


def _out_dir(args: argparse.Namespace) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# test functions from config
# ---------------------------------------------------------------------------

def test_function_from_config(
    doc: Any, m: MeasurementModel, steps: int, default_mode: str
) -> TestFunction:
    """Decode {mode?, channels: [{channel, samples}]} into a TestFunction.

    ``samples`` holds one value per run-grid cell (a single value is held
    constant); counting/diffusive samples are real, complexified samples are
    [re, im] pairs indexed by quadrature pair.  Unlisted channels get 0.
    """
    if doc is None:
        raise ConfigError("test_function: required for this subcommand")
    doc = _require_mapping(doc, "test_function")
    mode = doc.get("mode", default_mode)
    if mode not in ("counting", "diffusive", "complexified"):
        raise ConfigError(f"test_function.mode: got {mode!r}")
    if mode == "counting":
        n_ch = len(m.counting)
    elif mode == "diffusive":
        n_ch = len(m.diffusive)
    else:
        if len(m.diffusive) % 2:
            raise ConfigError("test_function: complexified mode needs quadrature channel pairs")
        n_ch = len(m.diffusive) // 2
    if n_ch == 0:
        raise ConfigError(f"test_function: the model has no {mode} channels")

    entries = doc.get("channels")
    if not isinstance(entries, (list, tuple)) or not entries:
        raise ConfigError("test_function.channels: expected a nonempty list")
    values = np.zeros((n_ch, steps), dtype=complex if mode == "complexified" else float)
    seen = set()
    for idx, entry in enumerate(entries):
        entry = _require_mapping(entry, f"test_function.channels[{idx}]")
        try:
            ch = int(entry["channel"])
        except (KeyError, TypeError, ValueError):
            raise ConfigError(f"test_function.channels[{idx}].channel: required integer") from None
        if not 0 <= ch < n_ch:
            raise ConfigError(
                f"test_function.channels[{idx}].channel: {ch} out of range for {n_ch} channels"
            )
        if ch in seen:
            raise ConfigError(f"test_function.channels[{idx}]: duplicate channel {ch}")
        seen.add(ch)
        samples = entry.get("samples")
        if not isinstance(samples, (list, tuple)) or not samples:
            raise ConfigError(f"test_function.channels[{idx}].samples: expected a nonempty list")
        field = f"test_function.channels[{idx}].samples"
        if mode == "complexified":
            vals = [serialize.pair_to_complex(v, field=f"{field}[{k}]") for k, v in enumerate(samples)]
        else:
            for k, v in enumerate(samples):
                if isinstance(v, bool) or not isinstance(v, (int, float)):
                    raise ConfigError(f"{field}[{k}]: expected a real number, got {v!r}")
            vals = [float(v) for v in samples]
        if len(vals) == 1:
            values[ch, :] = vals[0]
        elif len(vals) == steps:
            values[ch, :] = vals
        else:
            raise ConfigError(
                f"{field}: expected 1 or {steps} samples (run-grid cells), got {len(vals)}"
            )
    return TestFunction(values=values, mode=mode)


# ---------------------------------------------------------------------------
# subcommand handlers
# ---------------------------------------------------------------------------

def _cmd_counting(args: argparse.Namespace) -> int:
    cfg = load_config(args.config, "counting", args)
    cfg.model.require_mode("counting")
    records, summary = run_ensemble(cfg)
    out = _out_dir(args)
    rows_path = _write_rows(out, "events", cfg.fmt, counting_rows(records))
    _write_summary(out, summary)
    _write_metadata(out, cfg, resolve_run_grid(cfg))
    total = sum(len(r.realization.events) for r in records)
    print(f"counting: {cfg.trajectories} trajectories, {total} events -> {rows_path}")
    return 0


def _cmd_diffusive(args: argparse.Namespace) -> int:
    cfg = load_config(args.config, "diffusive", args)
    cfg.model.require_mode("diffusive")
    records, summary = run_ensemble(cfg)
    out = _out_dir(args)
    rows_path = _write_rows(out, "output", cfg.fmt, diffusive_rows([p for _, p in records]))
    _write_summary(out, summary)
    grid = resolve_run_grid(cfg)
    _write_metadata(out, cfg, grid)
    print(
        f"diffusive: {cfg.trajectories} trajectories x {grid.steps} steps "
        f"(dt={grid.dt:g}) -> {rows_path}"
    )
    return 0


def _cmd_master(args: argparse.Namespace) -> int:
    cfg = load_config(args.config, "master", args)
    records, summary = run_ensemble(cfg)
    grid = resolve_run_grid(cfg)
    out = _out_dir(args)
    rows_path = _write_rows(out, "states", cfg.fmt, master_rows(records[0], grid.times))
    _write_summary(out, summary)
    _write_metadata(out, cfg, grid)
    print(f"master: {grid.steps + 1} node states -> {rows_path}")
    return 0


def _cmd_charfun(args: argparse.Namespace) -> int:
    cfg = load_config(args.config, "charfun", args)
    m = cfg.model
    grid = resolve_run_grid(cfg)
    default_mode = "counting" if m.counting else "diffusive"
    k = test_function_from_config(cfg.test_function_doc, m, grid.steps, default_mode)
    if cfg.method == "deterministic":
        result = propagate_characteristic(m, k, cfg.rho0, grid, tol=cfg.tol)
    else:
        if k.mode == "counting":
            plan = build_counting_plan(m, grid, tau=cfg.tau, tol=cfg.tol)
            records = [
                simulate_counting_trajectory(
                    m, cfg.rho0, grid, _traj_rng(cfg.seed, i),
                    tau=cfg.tau, snapshot_stride=0, tol=cfg.tol, plan=plan,
                )
                for i in range(cfg.trajectories)
            ]
            result = monte_carlo_characteristic(records, k, grid)
        else:
            paths = [
                simulate_diffusive_trajectory(
                    m, cfg.rho0, grid, _traj_rng(cfg.seed, i),
                    snapshot_stride=0, clip_eigenvalues=cfg.clip_eigenvalues, tol=cfg.tol,
                )[1]
                for i in range(cfg.trajectories)
            ]
            result = monte_carlo_characteristic(paths, k, grid)
    out = _out_dir(args)
    rows_path = _write_rows(out, "phi", cfg.fmt, charfun_rows(result))
    _write_metadata(out, cfg, grid, extra={"method": cfg.method, "k_mode": k.mode})
    print(f"charfun ({cfg.method}, {k.mode}): phi(T) = {result.phi:.6g} -> {rows_path}")
    return 0


def _cmd_limit(args: argparse.Namespace) -> int:
    cfg = load_config(args.config, "limit", args)
    m = cfg.model
    m.require_mode("diffusive")
    if cfg.test_function_doc is not None:
        k = test_function_from_config(cfg.test_function_doc, m, m.grid.steps, "diffusive")
        if k.mode != "diffusive":
            raise ConfigError("test_function.mode: the limit report needs a diffusive test function")
    else:
        k = constant_test_function([1.0] * len(m.diffusive), m.grid.steps, "diffusive")
    rows = limit_sweep(
        m, cfg.rho0, k,
        epsilons=cfg.epsilons, n_traj=cfg.trajectories, master_seed=cfg.seed,
    )
    out = _out_dir(args)
    docs = [
        {
            "epsilon": r.epsilon,
            "gap": r.gap,
            "mean_err": r.mean_err,
            "var_err": r.var_err,
            "n_traj": r.n_traj,
        }
        for r in rows
    ]
    rows_path = _write_rows(out, "report", cfg.fmt, docs)
    _write_metadata(out, cfg, None, extra={"epsilons": list(cfg.epsilons)})
    for r in rows:
        print(
            f"epsilon={r.epsilon:g}: gap={r.gap:.6g} mean_err={r.mean_err:.4g} "
            f"var_err={r.var_err:.4g} (n={r.n_traj})"
        )
    print(f"limit report -> {rows_path}")
    return 0


def _cmd_oracle(args: argparse.Namespace) -> int:
    cfg = load_config(args.config, "oracle", args)
    doc = _require_mapping(cfg.oracle_doc, "oracle")
    kind = doc.get("kind")
    gdoc = _require_mapping(doc.get("grid"), "oracle.grid")
    try:
        grid = TimeGrid(float(gdoc["t0"]), float(gdoc["t1"]), int(gdoc["steps"]))
    except (KeyError, TypeError, ValueError):
        raise ConfigError("oracle.grid: required fields t0, t1, steps") from None

    if kind == "two-level":
        p = TwoLevelParams(
            omega=_get_number(doc, "omega", "oracle", 0.0),
            lam_plus=_get_number(doc, "lam_plus", "oracle", 0.0, minimum=0.0),
            lam_minus=_get_number(doc, "lam_minus", "oracle", 0.0, minimum=0.0),
            lam_one=_get_number(doc, "lam_one", "oracle", minimum=0.0),
        )
        sdoc = _require_mapping(doc.get("state"), "oracle.state")
        zeta = sdoc.get("zeta", [0.0, 0.0])
        s0 = TwoLevelFilterState(
            pi0=_get_number(sdoc, "pi0", "oracle.state", minimum=0.0),
            pi1=_get_number(sdoc, "pi1", "oracle.state", minimum=0.0),
            zeta=serialize.pair_to_complex(zeta, field="oracle.state.zeta"),
        )
        jumps = doc.get("jumps", [])
        if not isinstance(jumps, (list, tuple)):
            raise ConfigError("oracle.jumps: expected a list of times")
        realization = CountRealization(
            events=tuple((float(t), 0) for t in jumps), horizon=grid.t1
        )
        states = twolevel_filter_evolve(p, s0, realization, grid)
        rows = [
            {"t": float(t), "pi0": st.pi0, "pi1": st.pi1, "zeta": complex(st.zeta)}
            for t, st in zip(grid.times, states)
        ]
    elif kind == "oscillator":
        eta = doc.get("eta", [1.0, 0.0])
        g = doc.get("g", [0.0, 0.0])
        p = OscillatorParams(
            omega=_get_number(doc, "omega", "oracle", 0.0),
            lam_down=_get_number(doc, "lam_down", "oracle", 0.0, minimum=0.0),
            lam_up=_get_number(doc, "lam_up", "oracle", 0.0, minimum=0.0),
            eta=serialize.pair_to_complex(eta, field="oracle.eta"),
            g=serialize.pair_to_complex(g, field="oracle.g"),
        )
        pdoc = _require_mapping(doc.get("posterior"), "oracle.posterior")
        g0 = GaussianPosterior(
            mean=serialize.pair_to_complex(pdoc.get("mean", [0.0, 0.0]), field="oracle.posterior.mean"),
            mu=serialize.pair_to_complex(pdoc.get("mu", [0.0, 0.0]), field="oracle.posterior.mu"),
            nu=_get_number(pdoc, "nu", "oracle.posterior", 0.0, minimum=0.0),
        )
        states = riccati_posterior_evolve(p, g0, None, grid)
        rows = [
            {
                "t": float(t),
                "mean_re": float(st.mean.real),
                "mean_im": float(st.mean.imag),
                "mu_re": float(st.mu.real),
                "mu_im": float(st.mu.imag),
                "nu": float(st.nu),
            }
            for t, st in zip(grid.times, states)
        ]
    else:
        raise ConfigError(f"oracle.kind: expected 'two-level' or 'oscillator', got {kind!r}")

    out = _out_dir(args)
    rows_path = _write_rows(out, "oracle", cfg.fmt, rows)
    _write_metadata(out, cfg, grid, extra={"kind": kind})
    print(f"oracle ({kind}): {len(rows)} rows -> {rows_path}")
    return 0


def _cmd_validate(args: argparse.Namespace) -> int:
    cfg = load_config(args.config, "validate", args)
    m = cfg.model
    checks: list[tuple[str, bool, str]] = []

    checks.append(("config-parse", True, f"dim={m.dim}, grid steps={m.grid.steps}"))

    slots = [0] if m.is_static else list(range(m.grid.steps))
    defect = 0.0
    for cell in slots:
        lmat = liouvillian_matrix(m, cell)
        defect = max(defect, float(np.abs(trace_row(m.dim) @ lmat).max()))
    scale = 1.0 + float(np.abs(lmat).max())
    ok = defect <= 1e-10 * scale
    checks.append(("trace-preservation", ok, f"max |Tr∘L| = {defect:.3e}"))

    if m.counting:
        split = 0.0
        for cell in slots:
            total = no_count_matrix(m, cell).astype(complex)
            for ch in m.counting:
                total = total + ch.superop()
            split = max(split, float(np.abs(total - liouvillian_matrix(m, cell)).max()))
        ok = split <= 1e-12 * scale
        checks.append(("generator-split", ok, f"max |A + ΣJ − L| = {split:.3e}"))

    if cfg.rho0 is not None:
        try:
            states = master_evolve(m, cfg.rho0, m.grid, tol=cfg.tol)
            floor = min(float(np.linalg.eigvalsh(s)[0]) for s in states)
            ok = floor >= -cfg.tol.psd
            checks.append(("master-propagation", ok, f"min eigenvalue {floor:.3e}"))
        except ContractViolationError as exc:
            checks.append(("master-propagation", False, str(exc)))
    else:
        checks.append(("master-propagation", True, "skipped (no initial_state)"))

    failures = 0
    for name, ok, detail in checks:
        print(f"{'ok  ' if ok else 'FAIL'} {name}: {detail}")
        failures += 0 if ok else 1
    if args.out:
        out = _out_dir(args)
        rows = [{"check": n, "status": "ok" if ok else "fail", "detail": d} for n, ok, d in checks]
        _write_rows(out, "validate", cfg.fmt, rows)
    if failures:
        raise ContractViolationError(f"{failures} validation check(s) failed")
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="contmeas",
        description="Simulators and oracles for measurements continuous in time.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    handlers = {
        "counting": (_cmd_counting, "simulate counting trajectories (exact jump times)"),
        "diffusive": (_cmd_diffusive, "simulate diffusive trajectories (Euler–Maruyama)"),
        "master": (_cmd_master, "propagate the deterministic a-priori state"),
        "charfun": (_cmd_charfun, "characteristic functional (deterministic or Monte Carlo)"),
        "limit": (_cmd_limit, "counting→diffusion convergence report over an ε sweep"),
        "oracle": (_cmd_oracle, "closed-form reference paths (two-level / oscillator)"),
        "validate": (_cmd_validate, "run consistency checks on a config document"),
    }
    for name, (fn, help_text) in handlers.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="path to the JSON config document")
        if name != "validate":
            p.add_argument("--out", required=True, help="output directory (created if missing)")
        else:
            p.add_argument("--out", default=None, help="optional directory for check rows")
        p.add_argument("--seed", type=int, default=None, help="master seed (overrides config)")
        p.add_argument(
            "--trajectories", type=int, default=None, help="ensemble size (overrides config)"
        )
        p.add_argument(
            "--dt",
            type=float,
            default=None,
            help="time step for stepped modes; must divide the schedule cell width "
            "(ignored by the exact counting sampler)",
        )
        p.add_argument(
            "--snapshot-every",
            dest="snapshot_every",
            type=int,
            default=None,
            help="record a state snapshot every N grid nodes",
        )
        p.add_argument("--format", choices=("jsonl", "csv"), default=None, help="row format")
        p.set_defaults(func=fn)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except ContractViolationError as exc:
        print(f"numerical contract violated: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
