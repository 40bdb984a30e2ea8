import csv
import json

import numpy as np
import pytest

import opcrl.datagen
import opcrl.rl
from opcrl.cli import USAGE_EXIT, main
from opcrl.errors import GenerationError
from opcrl.layout import MaskState, fragment, read_layout
from opcrl.litho import LithoConfig, LithoResult, measure_geometry, simulate_polygons


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture
def data(tmp_path):
    assert main(["gen", "--layer", "via", "--count", "2", "--seed", "1", "--out", str(tmp_path / "data")]) == 0
    return tmp_path / "data"


def test_gen_is_deterministic(tmp_path, data):
    main(["gen", "--layer", "via", "--count", "2", "--seed", "1", "--out", str(tmp_path / "again")])
    for f in sorted(data.glob("via_*.json")):
        assert f.read_bytes() == (tmp_path / "again" / f.name).read_bytes()
    manifest = json.loads((data / "manifest.json").read_text())
    assert manifest["command"] == "gen" and manifest["seed"] == 1 and len(manifest["outputs"]) == 2


def test_train_smoke_and_bookkeeping(tmp_path, data):
    run = tmp_path / "run"
    code = main(["train", "--data", str(data), "--out", str(run), "--phase1-epochs", "1",
                 "--phase2-epochs", "1", "--max-steps", "3"])
    assert code == 0
    assert list((run / "checkpoints").glob("*.npz")) and (run / "final.npz").exists()
    metrics = rows(run / "metrics.csv")
    assert list(metrics[0]) == ["phase", "epoch", "case", "step", "epe_total", "pvb", "reward", "wall_time"]
    steps = sum(sum(1 for _ in open(f)) for f in (run / "transcripts").glob("*.jsonl"))
    assert len(metrics) == steps
    # every episode contributes steps 1..k exactly once
    for phase in ("1", "2"):
        for case in ("via_0000", "via_0001"):
            got = [int(r["step"]) for r in metrics if r["phase"] == phase and r["case"] == case]
            assert got == list(range(1, len(got) + 1))
    manifest = json.loads((run / "manifest.json").read_text())
    assert manifest["config"]["rl"]["max_steps"] == 3 and len(manifest["inputs"]) == 2


def test_train_resume_continues_numbering(tmp_path, data):
    common = ["--data", str(data), "--phase1-epochs", "2", "--max-steps", "2", "--no-wall-time"]
    main(["train", "--out", str(tmp_path / "a"), "--phase2-epochs", "2", *common])
    main(["train", "--out", str(tmp_path / "b"), "--phase2-epochs", "1", *common])
    assert main(["train", "--out", str(tmp_path / "b"), "--data", str(data), "--resume",
                 "--phase2-epochs", "2", "--no-wall-time"]) == 0
    epochs = sorted({int(r["epoch"]) for r in rows(tmp_path / "b" / "metrics.csv") if r["phase"] == "2"})
    assert epochs == [0, 1]
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()


def test_train_refuses_to_overwrite(tmp_path, data):
    args = ["train", "--data", str(data), "--out", str(tmp_path / "r"), "--phase1-epochs", "1",
            "--phase2-epochs", "0"]
    assert main(args) == 0
    assert main(args) == 4


def test_opc_with_zero_epe_stub_keeps_initial_mask(tmp_path, data, monkeypatch):
    def zero(mask, config):
        pts, _ = measure_geometry(mask)
        return LithoResult({}, None, np.zeros(len(pts)), np.zeros(len(pts), bool), 10.0)
    monkeypatch.setattr(opcrl.rl, "simulate", zero)
    out = tmp_path / "o"
    assert main(["opc", str(data), "--greedy", "--out", str(out)]) == 0
    for f in sorted(data.glob("via_*.json")):
        mask = read_layout(out / f"{f.stem}_mask.json")
        target = read_layout(f)
        assert all(p.area == 76 * 76 for p in mask.targets)
        assert [p.bbox for p in mask.targets] == [
            (x0 - 3, y0 - 3, x1 + 3, y1 + 3) for x0, y0, x1, y1 in (p.bbox for p in target.canonical().targets)]


def test_opc_metrics_match_independent_simulation(tmp_path, data):
    train = tmp_path / "run"
    main(["train", "--data", str(data), "--out", str(train), "--phase1-epochs", "1", "--phase2-epochs", "0"])
    out = tmp_path / "o"
    assert main(["opc", str(data), "--checkpoint", str(train / "final.npz"), "--out", str(out), "--render"]) == 0
    table = {r["case"]: r for r in rows(out / "metrics.csv")}
    assert "average" in table
    for f in sorted(data.glob("via_*.json")):
        target = read_layout(f).canonical()
        mask = read_layout(out / f"{f.stem}_mask.json")
        pts, nrm = measure_geometry(MaskState.initial(target))
        again = simulate_polygons(list(mask.targets) + list(mask.srafs), target.width, target.height,
                                  pts, nrm, LithoConfig())
        assert float(table[f.stem]["epe_total"]) == pytest.approx(again.epe_total, abs=1e-9)
        assert float(table[f.stem]["pvb"]) == again.pvb
        assert (out / f"{f.stem}.png").exists()
    text = (out / "metrics.txt").read_text().splitlines()
    assert text[0].split() == ["case", "n_targets", "steps", "initial_epe", "epe_total", "pvb", "runtime_s"]
    assert len({len(line) for line in text}) == 1


def test_replay_reproduces_opc(tmp_path, data):
    out = tmp_path / "o"
    main(["opc", str(data), "--greedy", "--out", str(out), "--no-wall-time"])
    assert main(["replay", str(out / "manifest.json"), "--out", str(tmp_path / "o2")]) == 0
    for f in out.iterdir():
        if f.name != "manifest.json":
            assert f.read_bytes() == (tmp_path / "o2" / f.name).read_bytes(), f.name


def test_render_command(tmp_path, data):
    png = tmp_path / "v.png"
    assert main(["render", "--layout", str(data / "via_0000.json"), "--out", str(png)]) == 0
    assert png.exists() and png.with_suffix(".manifest.json").exists()


def test_exit_codes(tmp_path, data, monkeypatch):
    bad = tmp_path / "bad.json"
    bad.write_text("{")
    assert main(["render", "--layout", str(bad), "--out", str(tmp_path / "x.png")]) == 2
    cfg = tmp_path / "cfg.json"
    cfg.write_text('{"rl": {"alpha": -1}}')
    assert main(["opc", str(data), "--greedy", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 4
    assert main(["opc", str(data), "--greedy", "--layer", "metal", "--out", str(tmp_path / "o")]) == 4
    monkeypatch.setenv("OPCRL_THREADS", "zero")
    assert main(["gen", "--out", str(tmp_path / "g")]) == 4
    monkeypatch.delenv("OPCRL_THREADS")

    def fail(*a, **k):
        raise GenerationError("no room")
    monkeypatch.setattr(opcrl.datagen, "generate", fail)
    assert main(["gen", "--out", str(tmp_path / "g")]) == 7
    with pytest.raises(SystemExit) as info:
        main(["frobnicate"])
    assert info.value.code == USAGE_EXIT


def test_divergence_exit_code(tmp_path, data):
    cfg = tmp_path / "cfg.json"
    cfg.write_text('{"rl": {"alpha": 1e308}}')
    code = main(["train", "--data", str(data), "--out", str(tmp_path / "r"), "--config", str(cfg),
                 "--phase1-epochs", "3", "--phase2-epochs", "0"])
    assert code == 6
    assert (tmp_path / "r" / "checkpoints" / "diverged_last_good.npz").exists()


def test_config_file_and_socs_flag(tmp_path, data):
    from opcrl.litho import write_socs
    kern = tmp_path / "k.json"
    g = np.exp(-0.5 * (np.arange(-7, 8) / 3.0) ** 2)
    write_socs(kern, [1.0], [np.outer(g, g) / np.outer(g, g).sum()])
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"rl": {"max_steps": 2}, "litho": {"epe_search_range_nm": 30}}))
    out = tmp_path / "o"
    assert main(["opc", str(data), "--greedy", "--config", str(cfg), "--kernel-file", str(kern),
                 "--out", str(out)]) == 0
    snap = json.loads((out / "manifest.json").read_text())["config"]
    assert snap["litho"]["kernel"] == "socs" and snap["litho"]["epe_search_range_nm"] == 30
    assert snap["rl"]["max_steps"] == 2
