"""Command-line entry points: gen, train, opc, render and replay.

Numeric libraries are imported inside the commands so that the thread limit
from OPCRL_THREADS is in place before any BLAS pool starts.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import subprocess
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .errors import ConfigError, OpcError

THREAD_ENV = "OPCRL_THREADS"
USAGE_EXIT = 64
METRIC_COLUMNS = ("phase", "epoch", "case", "step", "epe_total", "pvb", "reward", "wall_time")
OPC_COLUMNS = ("case", "n_targets", "steps", "initial_epe", "epe_total", "pvb", "runtime_s")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(USAGE_EXIT, f"{self.prog}: error: {message}\n")


def _limit_threads() -> None:
    raw = os.environ.get(THREAD_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        n = 0
    if n < 1:
        raise ConfigError(f"{THREAD_ENV} must be a positive integer, got {raw!r}")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)


# ---------------------------------------------------------------------------
# configuration and manifests
# ---------------------------------------------------------------------------

def load_config(path, layer: str | None, args) -> tuple:
    """Build (RlConfig, LithoConfig) from an optional JSON file plus flag overrides."""
    from .litho import LithoConfig
    from .rl import RlConfig

    doc = {}
    if path:
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        if not isinstance(doc, dict) or set(doc) - {"rl", "litho"}:
            raise ConfigError(f"config {path} may only contain the sections 'rl' and 'litho'")
    rl = dict(doc.get("rl", {}))
    litho = dict(doc.get("litho", {}))
    layer = layer or rl.get("layer_kind") or "via"
    rl.pop("layer_kind", None)
    if getattr(args, "seed", None) is not None:
        rl["rng_seed"] = args.seed
    if getattr(args, "max_steps", None) is not None:
        rl["max_steps"] = args.max_steps
    for flag in ("phase1_epochs", "phase2_epochs"):
        if getattr(args, flag, None) is not None:
            rl[flag] = getattr(args, flag)
    if getattr(args, "kernel_file", None):
        litho["kernel"] = "socs"
        litho["kernel_file"] = str(args.kernel_file)
    if "dose_corners" in litho:
        litho["dose_corners"] = tuple(litho["dose_corners"])
    try:
        return RlConfig.for_layer(layer, **rl), LithoConfig(**litho)
    except TypeError as exc:
        raise ConfigError(f"bad config field: {exc}") from None


def _litho_dict(litho) -> dict:
    from dataclasses import asdict
    d = asdict(litho)
    d["dose_corners"] = list(d["dose_corners"])
    return d


def version_string() -> str:
    here = Path(__file__).resolve().parent
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], cwd=here,
                             capture_output=True, text=True, timeout=5)
        desc = out.stdout.strip() if out.returncode == 0 else ""
    except (OSError, subprocess.SubprocessError):
        desc = ""
    return f"{__version__}+g{desc}" if desc else __version__


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def write_manifest(path, command, argv, config, seed, inputs, outputs, started) -> None:
    doc = {
        "command": command,
        "argv": list(argv),
        "version": version_string(),
        "seed": seed,
        "config": config,
        "inputs": [{"path": str(p), "sha256": _sha256(p)} for p in inputs],
        "outputs": sorted(str(p) for p in outputs),
        "started": started,
        "finished": _now(),
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def _is_manifest(path: Path) -> bool:
    return path.name == "manifest.json" or path.name.endswith(".manifest.json")


def _layout_files(paths) -> list[Path]:
    out = []
    for p in map(Path, paths):
        if p.is_dir():
            out.extend(f for f in sorted(p.glob("*.json")) if not _is_manifest(f))
        else:
            out.append(p)
    if not out:
        raise ConfigError("no layout files given")
    return out


def _single_layer(layouts, flag: str | None) -> str:
    kinds = {l.layer_kind for l in layouts}
    if len(kinds) > 1:
        raise ConfigError(f"layouts mix layer kinds {sorted(kinds)}")
    kind = kinds.pop()
    if flag and flag != kind:
        raise ConfigError(f"--layer {flag} does not match the layouts' layer {kind}")
    return kind


# ---------------------------------------------------------------------------
# gen
# ---------------------------------------------------------------------------

def cmd_gen(args, argv) -> int:
    from .datagen import generate
    from .layout import write_layout

    started = _now()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for i, layout in enumerate(generate(args.count, args.layer, args.seed)):
        path = out / f"{args.layer}_{i:04d}.json"
        write_layout(layout, path)
        files.append(path)
    write_manifest(out / "manifest.json", "gen", argv,
                   {"count": args.count, "layer": args.layer}, args.seed, [], files, started)
    print(f"wrote {len(files)} {args.layer} clips to {out}")
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def _append_rows(path, rows) -> None:
    with open(path, "a", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS, lineterminator="\n")
        for row in rows:
            w.writerow(row)


def _append_transcripts(tdir, entries) -> None:
    from .modulator import MOVES

    by_case: dict[str, list[str]] = {}
    for phase, epoch, case, tr in entries:
        rec = {"phase": phase, "epoch": epoch, "step": tr.step,
               "actions": tr.actions.tolist(), "moves_nm": MOVES[tr.actions].tolist(),
               "reward": tr.reward, "epe_before": tr.epe_before, "epe_after": tr.epe_after,
               "pvb_before": tr.pvb_before, "pvb_after": tr.pvb_after}
        by_case.setdefault(case, []).append(json.dumps(rec))
    for case, lines in by_case.items():
        with open(tdir / f"{case}.jsonl", "a") as fh:
            fh.write("\n".join(lines) + "\n")


def _truncate_after(run: Path, phase: int, epoch: int) -> None:
    """Drop metrics and transcript records written after the checkpoint being resumed."""
    def keep(p, e):
        return (p, e) <= (phase, epoch)

    metrics = run / "metrics.csv"
    with open(metrics, newline="") as fh:
        rows = [r for r in csv.DictReader(fh) if keep(int(r["phase"]), int(r["epoch"]))]
    with open(metrics, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    for path in sorted((run / "transcripts").glob("*.jsonl")):
        lines = [l for l in path.read_text().splitlines()
                 if l and keep(json.loads(l)["phase"], json.loads(l)["epoch"])]
        path.write_text("".join(l + "\n" for l in lines))


def cmd_train(args, argv) -> int:
    import numpy as np

    from .layout import read_layout
    from .policy import PolicyParams, init_params
    from .encode import FEATURE_SIZE
    from .rl import RlConfig, train_phase1, train_phase2
    from dataclasses import replace

    started = _now()
    files = _layout_files([args.data])
    layouts = [read_layout(f) for f in files]
    names = [f.stem for f in files]
    run = Path(args.out)
    ckdir, tdir = run / "checkpoints", run / "transcripts"
    state_path = ckdir / "latest.json"
    metrics = run / "metrics.csv"

    if args.resume:
        if not state_path.exists():
            raise ConfigError(f"nothing to resume: {state_path} does not exist")
        state = json.loads(state_path.read_text())
        cfg = RlConfig.from_dict(state["config"]["rl"])
        extend = {f: getattr(args, f) for f in ("phase1_epochs", "phase2_epochs")
                  if getattr(args, f) is not None}
        cfg = replace(cfg, **extend)
        from .litho import LithoConfig
        ld = dict(state["config"]["litho"])
        ld["dose_corners"] = tuple(ld["dose_corners"])
        litho = LithoConfig(**ld)
        params = PolicyParams.load(ckdir / state["checkpoint"])
        done_phase, done_epoch = state["phase"], state["epoch"]
        _truncate_after(run, done_phase, done_epoch)
    else:
        kind = _single_layer(layouts, args.layer)
        cfg, litho = load_config(args.config, kind, args)
        if metrics.exists():
            raise ConfigError(f"{run} already holds a run; use --resume or a new --out")
        params = init_params(cfg.rng_seed, FEATURE_SIZE[cfg.layer_kind])
        done_phase, done_epoch = 1, -1
        ckdir.mkdir(parents=True, exist_ok=True)
        tdir.mkdir(parents=True, exist_ok=True)
        with open(metrics, "w", newline="") as fh:
            csv.DictWriter(fh, fieldnames=METRIC_COLUMNS, lineterminator="\n").writeheader()
        state = {}
    _single_layer(layouts, cfg.layer_kind)
    config_snapshot = {"rl": cfg.to_dict(), "litho": _litho_dict(litho)}

    rng = np.random.default_rng(cfg.rng_seed)
    if state.get("rng_state"):
        rng.bit_generator.state = state["rng_state"]
    flushed = {"rows": 0}
    written = []

    def checkpoint(phase, epoch, report, last_epoch):
        if (epoch + 1) % args.checkpoint_every and epoch != last_epoch:
            return
        _append_rows(metrics, report.rows[flushed["rows"]:])
        _append_transcripts(tdir, report.transcript[flushed["rows"]:])
        flushed["rows"] = len(report.rows)
        name = f"phase{phase}_epoch{epoch:04d}.npz"
        report.params.save(ckdir / name)
        written.append(ckdir / name)
        doc = {"phase": phase, "epoch": epoch, "checkpoint": name, "config": config_snapshot,
               "rng_state": rng.bit_generator.state if phase == 2 else None}
        state_path.write_text(json.dumps(doc, indent=2) + "\n")

    common = dict(litho=litho, names=names, checkpoint_dir=ckdir, record_time=not args.no_wall_time)
    if done_phase == 1 and done_epoch + 1 < cfg.phase1_epochs:
        start = done_epoch + 1
        last = cfg.phase1_epochs - 1
        flushed["rows"] = 0
        train_phase1(layouts, params, replace(cfg, phase1_epochs=cfg.phase1_epochs - start),
                     start_epoch=start, progress=lambda p, e, r: checkpoint(p, e, r, last), **common)
        done_phase, done_epoch = 1, last
    if done_phase == 1:
        done_phase, done_epoch = 2, -1
    if done_epoch + 1 < cfg.phase2_epochs:
        start = done_epoch + 1
        last = cfg.phase2_epochs - 1
        flushed["rows"] = 0
        train_phase2(layouts, params, replace(cfg, phase2_epochs=cfg.phase2_epochs - start),
                     start_epoch=start, rng=rng,
                     progress=lambda p, e, r: checkpoint(p, e, r, last), **common)
    params.save(run / "final.npz")
    written.append(run / "final.npz")
    write_manifest(run / "manifest.json", "train", argv, config_snapshot, cfg.rng_seed, files,
                   written + [metrics], started)
    print(f"training finished; final policy in {run / 'final.npz'}")
    return 0


# ---------------------------------------------------------------------------
# opc
# ---------------------------------------------------------------------------

def _fmt(v) -> str:
    return f"{v:.4f}" if isinstance(v, float) else str(v)


def write_table(rows, columns, csv_path, txt_path) -> None:
    """Per-case table as CSV and as aligned plain text, with a closing average row."""
    if rows:
        avg = {c: (sum(r[c] for r in rows) / len(rows) if c != "case" else "average") for c in columns}
        rows = rows + [avg]
    with open(csv_path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    cells = [list(columns)] + [[_fmt(r[c]) for c in columns] for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(columns))]
    lines = ["  ".join(cell.rjust(wd) if i else cell.ljust(wd) for i, (cell, wd) in enumerate(zip(row, widths)))
             for row in cells]
    Path(txt_path).write_text("\n".join(lines) + "\n")


def cmd_opc(args, argv) -> int:
    from .layout import mask_layout, read_layout, write_layout
    from .policy import PolicyParams
    from .rl import run_episode

    started = _now()
    files = _layout_files(args.layouts)
    layouts = [read_layout(f) for f in files]
    kind = _single_layer(layouts, args.layer)
    cfg, litho = load_config(args.config, kind, args)
    if args.greedy:
        params = None
    elif not args.checkpoint:
        raise ConfigError("opc needs --checkpoint (or --greedy for the reference engine)")
    else:
        params = PolicyParams.load(args.checkpoint)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows, written = [], []
    inputs = list(files) + ([Path(args.checkpoint)] if params is not None else [])
    for f, layout in zip(files, layouts):
        t0 = time.perf_counter()
        try:
            ep = run_episode(layout, params, cfg, "argmax", litho=litho,
                             use_modulator=not args.no_modulator,
                             policy="greedy" if args.greedy else "network")
        except OpcError as exc:
            partial = getattr(exc, "partial", None)
            if partial is not None:
                _write_episode_transcript(out / f"{f.stem}_transcript.csv", partial)
            raise
        runtime = 0.0 if args.no_wall_time else time.perf_counter() - t0
        mask_path = out / f"{f.stem}_mask.json"
        write_layout(mask_layout(ep.mask), mask_path)
        tpath = out / f"{f.stem}_transcript.csv"
        _write_episode_transcript(tpath, ep)
        written += [mask_path, tpath]
        rows.append({"case": f.stem, "n_targets": layout.n_targets, "steps": len(ep.transitions),
                     "initial_epe": ep.initial_epe, "epe_total": ep.result.epe_total,
                     "pvb": ep.result.pvb, "runtime_s": runtime})
        if args.render:
            from .render import render
            png = out / f"{f.stem}.png"
            render(layout, png, litho, mask=ep.mask)
            written.append(png)
        print(f"{f.stem}: epe {ep.initial_epe:.2f} -> {ep.result.epe_total:.2f} nm, "
              f"pvb {ep.result.pvb:.0f} nm^2, {len(ep.transitions)} steps")
    write_table(rows, OPC_COLUMNS, out / "metrics.csv", out / "metrics.txt")
    written += [out / "metrics.csv", out / "metrics.txt"]
    config_snapshot = {"rl": cfg.to_dict(), "litho": _litho_dict(litho),
                       "use_modulator": not args.no_modulator, "greedy": args.greedy}
    write_manifest(out / "manifest.json", "opc", argv, config_snapshot, cfg.rng_seed, inputs,
                   written, started)
    return 0


def _write_episode_transcript(path, ep) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "epe_total", "pvb", "reward", "n_moved"])
        w.writerow([0, ep.initial_epe, ep.initial_pvb, "", 0])
        for tr in ep.transitions:
            w.writerow([tr.step, tr.epe_after, tr.pvb_after, tr.reward, int((tr.actions != 2).sum())])


# ---------------------------------------------------------------------------
# render and replay
# ---------------------------------------------------------------------------

def cmd_render(args, argv) -> int:
    from .layout import read_layout
    from .render import render

    started = _now()
    layout = read_layout(args.layout)
    _, litho = load_config(args.config, layout.layer_kind, args)
    mask = read_layout(args.mask) if args.mask else None
    out = Path(args.out)
    result = render(layout, out, litho, mask=mask)
    inputs = [Path(args.layout)] + ([Path(args.mask)] if args.mask else [])
    write_manifest(out.with_suffix(".manifest.json"), "render", argv,
                   {"litho": _litho_dict(litho)}, None, inputs, [out], started)
    print(f"epe_total {result.epe_total:.4f} nm, pvb {result.pvb:.0f} nm^2 -> {out}")
    return 0


def cmd_replay(args, argv) -> int:
    try:
        doc = json.loads(Path(args.manifest).read_text())
        old = list(doc["argv"])
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        raise ConfigError(f"cannot read manifest {args.manifest}: {exc}") from None
    if args.out:
        if "--out" not in old:
            raise ConfigError("manifest command has no --out to replace")
        old[old.index("--out") + 1] = args.out
    return main(old)


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="opcrl", description="Reinforcement-learning mask correction.")
    p.add_argument("--version", action="version", version=f"opcrl {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, seed=True):
        sp.add_argument("--config", help="JSON config with optional 'rl' and 'litho' sections")
        sp.add_argument("--kernel-file", help="SOCS kernel file; switches the model to socs")
        if seed:
            sp.add_argument("--seed", type=int, help="overrides rl.rng_seed")

    g = sub.add_parser("gen", help="write synthetic clips")
    g.add_argument("--layer", choices=("via", "metal"), default="via")
    g.add_argument("--count", type=int, default=8)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)

    t = sub.add_parser("train", help="phase-1 imitation then phase-2 modulated training")
    common(t)
    t.add_argument("--data", required=True, help="directory of layout files")
    t.add_argument("--out", required=True, help="run directory")
    t.add_argument("--layer", choices=("via", "metal"))
    t.add_argument("--max-steps", type=int)
    t.add_argument("--phase1-epochs", type=int)
    t.add_argument("--phase2-epochs", type=int)
    t.add_argument("--checkpoint-every", type=int, default=50)
    t.add_argument("--resume", action="store_true", help="continue the run in --out")
    t.add_argument("--no-wall-time", action="store_true", help="write 0 in the wall_time column")

    o = sub.add_parser("opc", help="correct layouts with a trained policy")
    common(o)
    o.add_argument("layouts", nargs="+", help="layout files or directories")
    o.add_argument("--checkpoint")
    o.add_argument("--out", required=True)
    o.add_argument("--layer", choices=("via", "metal"))
    o.add_argument("--max-steps", type=int)
    o.add_argument("--greedy", action="store_true", help="use the greedy reference engine")
    o.add_argument("--no-modulator", action="store_true")
    o.add_argument("--no-wall-time", action="store_true", help="report 0 runtime")
    o.add_argument("--render", action="store_true", help="also write a PNG per case")

    r = sub.add_parser("render", help="four-panel PNG of target, mask, contour and PV band")
    common(r, seed=False)
    r.add_argument("--layout", required=True)
    r.add_argument("--mask", help="mask layout file written by opc")
    r.add_argument("--out", required=True)

    rp = sub.add_parser("replay", help="re-run the command recorded in a manifest")
    rp.add_argument("manifest")
    rp.add_argument("--out", help="write to this location instead")
    return p


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "opc": cmd_opc, "render": cmd_render,
            "replay": cmd_replay}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    try:
        _limit_threads()
        if args.command == "train" and args.checkpoint_every < 1:
            raise ConfigError("--checkpoint-every must be at least 1")
        return COMMANDS[args.command](args, argv)
    except OpcError as exc:
        print(f"opcrl {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
