"""OPC environment, reward, modulated decisions and two-phase policy-gradient training."""

from __future__ import annotations

import time
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from .encode import FEATURE_SIZE, encode_all
from .errors import ConfigError, NumericError, OpcError, SelfIntersectionError
from .graph import DISTANCE_THRESHOLD_NM, SegmentGraph, build_graph
from .layout import OFFSET_BOUND, Layout, MaskState, fragment, materialize_polygon, nearest_measure_index
from .litho import LithoConfig, LithoResult, simulate
from .modulator import MOVES, modulate_all
from .policy import PolicyParams, forward, forward_with_cache, logprob_grad_from_cache

# argmax tie-break: smaller |move| first, then inward
TIE_ORDER = np.array([2, 1, 3, 0, 4])


@dataclass(frozen=True)
class RlConfig:
    layer_kind: str = "via"
    max_steps: int = 10
    early_exit: float = 4.0  # nm per via (via) or per measure point (metal)
    init_offset: int = 3
    epsilon: float = 0.1
    beta: float = 1.0
    alpha: float = 3e-4
    gamma: float = 1.0
    phase1_epochs: int = 500
    phase1_steps: int = 5
    phase2_epochs: int = 20
    offset_bound: int = OFFSET_BOUND
    graph_threshold_nm: float = DISTANCE_THRESHOLD_NM
    modulator_k: float = 0.02
    modulator_n: int = 4
    modulator_b: float = 1.0
    rng_seed: int = 0

    def __post_init__(self):
        if self.layer_kind not in FEATURE_SIZE:
            raise ConfigError(f"unknown layer kind {self.layer_kind!r}")
        for f in ("max_steps", "early_exit", "epsilon", "beta", "alpha", "gamma",
                  "phase1_steps", "offset_bound", "graph_threshold_nm"):
            if getattr(self, f) <= 0:
                raise ConfigError(f"{f} must be positive")
        if self.phase1_epochs < 0 or self.phase2_epochs < 0:
            raise ConfigError("epoch counts must be non-negative")
        if self.modulator_n % 2 or self.modulator_k <= 0 or self.modulator_b <= 0:
            raise ConfigError("modulator needs an even power and positive k, b")

    @classmethod
    def for_layer(cls, layer_kind: str, **overrides) -> "RlConfig":
        if layer_kind == "via":
            base = dict(max_steps=10, early_exit=4.0)
        elif layer_kind == "metal":
            base = dict(max_steps=15, early_exit=1.0)
        else:
            raise ConfigError(f"unknown layer kind {layer_kind!r}")
        base.update(overrides)
        return cls(layer_kind=layer_kind, **base)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, data: dict) -> "RlConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        return cls(**data)

    @property
    def modulator_kw(self) -> dict:
        return dict(k=self.modulator_k, n=self.modulator_n, b=self.modulator_b)


@dataclass(frozen=True)
class Transition:
    step: int
    actions: np.ndarray  # 0-based indices into MOVES
    reward: float
    epe_before: float
    epe_after: float
    pvb_before: float
    pvb_after: float


@dataclass
class Episode:
    mask: MaskState
    transitions: list[Transition]
    result: LithoResult
    initial_epe: float
    initial_pvb: float
    exited_early: bool

    @property
    def epe_trajectory(self) -> list[float]:
        return [self.initial_epe] + [t.epe_after for t in self.transitions]

    def discounted_return(self, gamma: float = 1.0) -> float:
        return float(sum(gamma**i * t.reward for i, t in enumerate(self.transitions)))


@dataclass
class TrainReport:
    params: PolicyParams
    rows: list[dict] = field(default_factory=list)  # one per environment step
    returns: list[float] = field(default_factory=list)  # one per episode
    checkpoints: list[Path] = field(default_factory=list)
    transcript: list[tuple[int, int, str, Transition]] = field(default_factory=list)  # (phase, epoch, case, step)


# ---------------------------------------------------------------------------
# scalar pieces
# ---------------------------------------------------------------------------

def reward(epe_t: float, epe_next: float, pvb_t: float, pvb_next: float, cfg: RlConfig) -> float:
    """EPE improvement relative to the current EPE plus weighted relative PV-band improvement."""
    if pvb_t <= 0:
        raise ConfigError("PV band of the previous mask is zero; the reward is undefined "
                          "(check the dose corners and the initial offset)")
    return (epe_t - epe_next) / (epe_t + cfg.epsilon) + cfg.beta * (pvb_t - pvb_next) / pvb_t


def decide(dist: np.ndarray, epes, mode: str = "argmax", rng: np.random.Generator | None = None,
           use_modulator: bool = True, modulator_kw: dict | None = None) -> np.ndarray:
    """Per-segment movement indices from the policy output and the segment EPEs.

    The policy rows are multiplied element-wise by the EPE preference. ``argmax``
    takes the best entry (ties go to the smaller move, then inward); ``sample``
    draws from the renormalised product.
    """
    dist = np.asarray(dist, dtype=float)
    q = dist * modulate_all(epes, **(modulator_kw or {})) if use_modulator else dist.copy()
    if mode == "argmax":
        ordered = q[:, TIE_ORDER]
        return TIE_ORDER[np.argmax(ordered, axis=1)]
    if mode == "sample":
        if rng is None:
            raise ConfigError("sample mode needs an rng")
        q = q / q.sum(axis=1, keepdims=True)
        u = rng.random(len(q))
        idx = (np.cumsum(q, axis=1) < u[:, None]).sum(axis=1)
        return np.minimum(idx, len(MOVES) - 1)
    raise ConfigError(f"unknown decision mode {mode!r}")


def greedy_teacher(epes) -> np.ndarray:
    """Move each segment against its EPE: clamp(round(-epe), -2, 2), as action indices."""
    moves = np.clip(np.rint(-np.asarray(epes, dtype=float)), -2, 2).astype(np.int64)
    return moves + 2


# ---------------------------------------------------------------------------
# environment
# ---------------------------------------------------------------------------

Simulator = Callable[[MaskState], LithoResult]


class OpcEnv:
    """One clip under correction: fixed segments and graph, mutable offsets.

    The layout is put in canonical polygon order first, so the result does
    not depend on the order of polygons in the input file.
    """

    def __init__(self, layout: Layout, cfg: RlConfig, litho: LithoConfig | None = None,
                 simulator: Simulator | None = None, feature_size: int | None = None):
        self.layout = layout.canonical()
        self.cfg = cfg
        self.litho = litho or LithoConfig()
        self.simulator = simulator or (lambda m: simulate(m, self.litho))
        self.feature_size = feature_size or FEATURE_SIZE[self.layout.layer_kind]
        self.segments = tuple(fragment(self.layout))
        self.graph: SegmentGraph = build_graph(list(self.segments), cfg.graph_threshold_nm)
        self.measure_index = nearest_measure_index(self.segments)
        self.n_measure = sum(s.measure_point is not None for s in self.segments)
        self._poly_index = [np.array([i for i, s in enumerate(self.segments) if s.polygon_id == p],
                                     dtype=np.int64) for p in range(self.layout.n_targets)]
        self.mask: MaskState | None = None
        self.result: LithoResult | None = None
        self.t = 0

    @property
    def n_segments(self) -> int:
        return len(self.segments)

    def reset(self, offset: int | None = None) -> None:
        off = self.cfg.init_offset if offset is None else offset
        self.mask = MaskState(self.layout, self.segments, np.full(self.n_segments, off, dtype=np.int64))
        self.result = self.simulator(self.mask)
        self.t = 0

    def features(self) -> np.ndarray:
        return encode_all(self.mask, self.feature_size)

    def segment_epes(self) -> np.ndarray:
        epe = np.asarray(self.result.epe, dtype=float)
        out = np.zeros(self.n_segments)
        ok = self.measure_index >= 0
        out[ok] = epe[self.measure_index[ok]]
        return out

    def teacher_actions(self) -> np.ndarray:
        return greedy_teacher(self.segment_epes())

    def done(self) -> bool:
        """Early-exit test on the current mask."""
        total = self.result.epe_total
        if self.layout.layer_kind == "via":
            count = self.layout.n_targets
        else:
            count = self.n_measure
        if count == 0:
            return True
        return total / count < self.cfg.early_exit

    def _propose(self, actions) -> np.ndarray:
        new = self.mask.offsets + MOVES[np.asarray(actions, dtype=np.int64)]
        new = np.clip(new, -self.cfg.offset_bound, self.cfg.offset_bound)
        # a move that would break a polygon is dropped for that whole polygon
        trial = self.mask.with_offsets(new)
        for pid, idx in enumerate(self._poly_index):
            try:
                materialize_polygon(trial, pid)
            except SelfIntersectionError:
                new[idx] = self.mask.offsets[idx]
        return new

    def step(self, actions) -> Transition:
        actions = np.asarray(actions, dtype=np.int64)
        before = self.result
        self.mask = self.mask.with_offsets(self._propose(actions))
        self.result = self.simulator(self.mask)
        self.t += 1
        r = reward(before.epe_total, self.result.epe_total, before.pvb, self.result.pvb, self.cfg)
        return Transition(self.t, actions.copy(), r, before.epe_total, self.result.epe_total,
                          before.pvb, self.result.pvb)


def _as_env(layout_or_env, cfg, litho, simulator, feature_size=None) -> OpcEnv:
    if isinstance(layout_or_env, Layout):
        return OpcEnv(layout_or_env, cfg, litho, simulator, feature_size)
    return layout_or_env


def run_episode(layout, params: PolicyParams | None, cfg: RlConfig, mode: str = "argmax",
                litho: LithoConfig | None = None, simulator: Simulator | None = None,
                rng: np.random.Generator | None = None, use_modulator: bool = True,
                policy: str = "network", on_step=None) -> Episode:
    """Correct one clip from the +init_offset mask until early exit or max_steps.

    ``policy="greedy"`` replaces the network by the greedy teacher (the
    reference engine). ``on_step(env, features, probs, cache, transition)`` is
    called after each step; training uses it to update parameters. If a step
    fails, the raised error carries the episode so far as ``partial``.
    """
    env = _as_env(layout, cfg, litho, simulator, params.input_size if params else None)
    env.reset()
    epe0, pvb0 = env.result.epe_total, env.result.pvb
    transitions: list[Transition] = []
    exited = env.done()
    while not exited and env.t < cfg.max_steps:
        if policy == "greedy":
            actions = env.teacher_actions()
            feats = probs = cache = None
        else:
            feats = env.features()
            probs, cache = forward_with_cache(feats, env.graph, params)
            actions = decide(probs, env.segment_epes(), mode, rng, use_modulator, cfg.modulator_kw)
        try:
            tr = env.step(actions)
        except OpcError as exc:
            # keep what was done so far for the caller's transcript
            exc.partial = Episode(env.mask, transitions, env.result, epe0, pvb0, False)
            raise
        transitions.append(tr)
        if on_step is not None:
            on_step(env, feats, probs, cache, tr)
        exited = env.done()
    return Episode(env.mask, transitions, env.result, epe0, pvb0, exited)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def _row(phase, epoch, case, tr: Transition, t0, record_time) -> dict:
    return {"phase": phase, "epoch": epoch, "case": case, "step": tr.step,
            "epe_total": tr.epe_after, "pvb": tr.pvb_after, "reward": tr.reward,
            "wall_time": (time.perf_counter() - t0) if record_time else 0.0}


def _guard(params: PolicyParams, last_good: PolicyParams, checkpoint_dir) -> None:
    if params.all_finite():
        return
    if checkpoint_dir is not None:
        path = Path(checkpoint_dir) / "diverged_last_good.npz"
        path.parent.mkdir(parents=True, exist_ok=True)
        last_good.save(path)
    raise NumericError("policy parameters became non-finite during training")


@dataclass
class TeacherTrace:
    """Phase-1 data of one clip: states, teacher actions and the rewards they earned."""

    case: str
    graph: SegmentGraph
    features: list[np.ndarray]
    actions: list[np.ndarray]
    transitions: list[Transition]


def teacher_trace(env: OpcEnv, steps: int, case: str = "", stop_at_exit: bool = True) -> TeacherTrace:
    """Run the greedy engine for up to ``steps`` steps from the initial mask.

    Like any OPC engine it stops once the early-exit criterion holds; steps
    after that would repeat the converged state with zero reward.
    """
    env.reset()
    feats, acts, trs = [], [], []
    for _ in range(steps):
        if stop_at_exit and env.done():
            break
        feats.append(env.features())
        a = env.teacher_actions()
        acts.append(a)
        trs.append(env.step(a))
    return TeacherTrace(case, env.graph, feats, acts, trs)


def train_phase1(layouts, params: PolicyParams, cfg: RlConfig, litho: LithoConfig | None = None,
                 simulator: Simulator | None = None, names=None, checkpoint_dir=None,
                 record_time: bool = True, start_epoch: int = 0, progress=None) -> TrainReport:
    """Imitation phase: replay the greedy teacher and ascend r_t * grad log pi(a_t | s_t).

    The teacher's trajectory does not depend on the policy, so each clip is
    simulated once and its states, actions and rewards are replayed every
    epoch; this gives the same updates as re-simulating each time.
    """
    envs = [_as_env(l, cfg, litho, simulator, params.input_size) for l in layouts]
    names = names or [f"case{i}" for i in range(len(envs))]
    traces = [teacher_trace(env, cfg.phase1_steps, n) for env, n in zip(envs, names)]
    if not any(tr.transitions for tr in traces):
        raise ConfigError("every phase-1 clip already meets the early-exit criterion")
    report = TrainReport(params)
    t0 = time.perf_counter()
    for epoch in range(start_epoch, start_epoch + cfg.phase1_epochs):
        for tr in traces:
            for feats, acts, step in zip(tr.features, tr.actions, tr.transitions):
                # a zero reward gives an exactly zero gradient
                if step.reward != 0.0:
                    last_good = params.copy() if checkpoint_dir is not None else params
                    _, cache = forward_with_cache(feats, tr.graph, params)
                    params.step(logprob_grad_from_cache(cache, params, acts, step.reward), cfg.alpha)
                    _guard(params, last_good, checkpoint_dir)
                report.rows.append(_row(1, epoch, tr.case, step, t0, record_time))
                report.transcript.append((1, epoch, tr.case, step))
            report.returns.append(sum(cfg.gamma**i * s.reward for i, s in enumerate(tr.transitions)))
        if progress:
            progress(1, epoch, report)
    return report


def train_phase2(layouts, params: PolicyParams, cfg: RlConfig, litho: LithoConfig | None = None,
                 simulator: Simulator | None = None, names=None, checkpoint_dir=None,
                 record_time: bool = True, start_epoch: int = 0, progress=None,
                 use_modulator: bool = True, rng: np.random.Generator | None = None) -> TrainReport:
    """Modulated sampling phase: act on p_hat * pi, update with the unmodulated log pi.

    ``rng`` defaults to a fresh generator seeded with ``cfg.rng_seed``; pass the
    saved generator to continue an interrupted run on the same random stream.
    """
    envs = [_as_env(l, cfg, litho, simulator, params.input_size) for l in layouts]
    names = names or [f"case{i}" for i in range(len(envs))]
    rng = rng if rng is not None else np.random.default_rng(cfg.rng_seed)
    report = TrainReport(params)
    t0 = time.perf_counter()

    for epoch in range(start_epoch, start_epoch + cfg.phase2_epochs):
        for env, name in zip(envs, names):
            def update(env_, feats, probs, cache, tr, _name=name):
                if tr.reward != 0.0:
                    last_good = params.copy() if checkpoint_dir is not None else params
                    params.step(logprob_grad_from_cache(cache, params, tr.actions, tr.reward), cfg.alpha)
                    _guard(params, last_good, checkpoint_dir)
                report.rows.append(_row(2, epoch, _name, tr, t0, record_time))
                report.transcript.append((2, epoch, _name, tr))

            ep = run_episode(env, params, cfg, "sample", rng=rng, use_modulator=use_modulator,
                             on_step=update)
            report.returns.append(ep.discounted_return(cfg.gamma))
        if progress:
            progress(2, epoch, report)
    return report


def teacher_agreement(params: PolicyParams, traces: list[TeacherTrace]) -> float:
    """Fraction of (state, segment) pairs where argmax pi equals the teacher action."""
    hit = total = 0
    for tr in traces:
        for feats, acts in zip(tr.features, tr.actions):
            probs = forward(feats, tr.graph, params)
            pred = TIE_ORDER[np.argmax(probs[:, TIE_ORDER], axis=1)]
            hit += int(np.sum(pred == acts))
            total += len(acts)
    return hit / total if total else 1.0
