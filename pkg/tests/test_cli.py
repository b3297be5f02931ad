import json

import pytest

from splatfit.cli import main
from splatfit.config import RUN_ROOT_ENV, ConfigError, RunConfig
from splatfit.train import read_metrics_csv

FAST = ["--train.iterations", "60", "--train.eval_interval", "30", "--init.count", "20"]


@pytest.fixture(scope="module")
def scene_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "scene"
    assert main(["synth", "--out", str(out), "--n-gaussians", "8", "--n-cameras", "9", "--resolution", "32"]) == 0
    return out


def _tree(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


# -- synth ----------------------------------------------------------------


def test_synth_defaults(tmp_path, capsys):
    assert main(["synth", "--out", str(tmp_path / "s")]) == 0
    out = capsys.readouterr().out
    assert "gaussians\t50" in out and "cameras\t24" in out
    assert len(list((tmp_path / "s" / "images").glob("*.ppm"))) == 24


def test_synth_seed_reproducible(tmp_path):
    for name in ("a", "b"):
        assert main(["synth", "--out", str(tmp_path / name), "--seed", "7", "--n-gaussians", "5", "--resolution", "16"]) == 0
    assert _tree(tmp_path / "a") == _tree(tmp_path / "b")


def test_synth_one_camera_is_usage_error(tmp_path, capsys):
    assert main(["synth", "--out", str(tmp_path / "s"), "--n-cameras", "1"]) == 2
    captured = capsys.readouterr()
    assert captured.out == "" and "camera" in captured.err


def test_synth_honours_run_root(tmp_path, monkeypatch):
    monkeypatch.setenv(RUN_ROOT_ENV, str(tmp_path))
    assert main(["synth", "--out", "rel", "--n-gaussians", "3", "--resolution", "16"]) == 0
    assert (tmp_path / "rel" / "manifest.txt").exists()


# -- train ----------------------------------------------------------------


def test_train_baseline_mode(scene_dir, tmp_path):
    run = tmp_path / "run"
    assert main(["train", "--scene", str(scene_dir), "--run", str(run), "--mode", "baseline", *FAST]) == 0
    rows = read_metrics_csv((run / "metrics.csv").read_text())
    assert [r["iter"] for r in rows] == [30, 60]
    assert all(r["f"] == 0 and r["L_geo"] == 0 and r["L_app"] == 0 and r["L"] == r["L1"] for r in rows)
    cfg = json.loads((run / "config.json").read_text())
    assert cfg["mode"] == "baseline" and cfg["train.iterations"] == 60
    assert (run / "VERSION").read_text().startswith("splatfit ")
    assert (run / "checkpoints" / "final.ckpt").exists()
    assert sorted(p.name for p in (run / "renders").iterdir()) == ["cam_0000.ppm", "cam_0008.ppm"]


def test_train_full_mode_logs_attention_terms(scene_dir, tmp_path):
    run = tmp_path / "run"
    assert main(["train", "--scene", str(scene_dir), "--run", str(run), "--mode", "full", *FAST]) == 0
    rows = read_metrics_csv((run / "metrics.csv").read_text())
    assert all(r["L_geo"] > 0 and r["L_app"] > 0 for r in rows)


def test_train_dssim_flag(scene_dir, tmp_path):
    run = tmp_path / "run"
    assert main(["train", "--scene", str(scene_dir), "--run", str(run), "--mode", "baseline", "--loss.dssim", "0.2", *FAST]) == 0
    rows = read_metrics_csv((run / "metrics.csv").read_text())
    assert all(r["L_dssim"] > 0 for r in rows)


def test_train_same_seed_same_csv(scene_dir, tmp_path):
    for name in ("a", "b"):
        assert main(["train", "--scene", str(scene_dir), "--run", str(tmp_path / name), *FAST]) == 0
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()


def test_train_resume_matches(scene_dir, tmp_path):
    args = ["train", "--scene", str(scene_dir), *FAST, "--train.checkpoint_iters", "30"]
    assert main([*args, "--run", str(tmp_path / "a")]) == 0
    ckpt = tmp_path / "a" / "checkpoints" / "iter_000030"
    assert main([*args, "--run", str(tmp_path / "b"), "--resume", str(ckpt)]) == 0
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()
    a = (tmp_path / "a" / "checkpoints" / "final.ckpt").read_bytes()
    assert a == (tmp_path / "b" / "checkpoints" / "final.ckpt").read_bytes()


def test_train_config_file_and_flag_precedence(scene_dir, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"mode": "geo", "train": {"iterations": 40, "eval_interval": 20}, "schedule.m": 0.5}))
    run = tmp_path / "run"
    assert main(["train", "--scene", str(scene_dir), "--run", str(run), "--config", str(cfg), "--train.iterations", "20"]) == 0
    eff = json.loads((run / "config.json").read_text())
    assert eff["mode"] == "geo" and eff["schedule.m"] == 0.5 and eff["train.iterations"] == 20


@pytest.mark.parametrize(
    "extra",
    [
        ["--densify.bogus", "1"],
        ["--mode", "turbo"],
        ["--schedule.m", "1.5"],
        ["--train.iterations", "zero"],
    ],
)
def test_train_bad_flags_are_usage_errors(scene_dir, tmp_path, extra, capsys):
    assert main(["train", "--scene", str(scene_dir), "--run", str(tmp_path / "r"), *extra]) == 2
    assert capsys.readouterr().out == ""


def test_train_unknown_config_key(scene_dir, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"densify": {"modee": "baseline"}}))
    assert main(["train", "--scene", str(scene_dir), "--run", str(tmp_path / "r"), "--config", str(cfg)]) == 2


def test_train_missing_scene_is_runtime_error(tmp_path, capsys):
    assert main(["train", "--scene", str(tmp_path / "nope"), "--run", str(tmp_path / "r"), *FAST]) == 1
    assert "manifest" in capsys.readouterr().err


def test_train_debug_dumps(scene_dir, tmp_path):
    run = tmp_path / "run"
    assert main(["train", "--scene", str(scene_dir), "--run", str(run), "--dump-every", "30", *FAST]) == 0
    dumps = sorted((run / "debug").iterdir())
    assert len(dumps) == 2
    names = {p.name for p in dumps[0].iterdir()}
    assert {"t_final.pgm", "edges_gt.pgm", "edges_render.pgm", "w_geo.pgm", "w_app.pgm"} <= names


# -- render / eval --------------------------------------------------------


def test_render_test_views_and_bytes_stable(scene_dir, tmp_path, capsys):
    ref = scene_dir / "reference.ckpt"
    for name in ("a", "b"):
        assert main(["render", "--checkpoint", str(ref), "--scene", str(scene_dir), "--out", str(tmp_path / name)]) == 0
    assert sorted(p.name for p in (tmp_path / "a").iterdir()) == ["cam_0000.ppm", "cam_0008.ppm"]
    assert _tree(tmp_path / "a") == _tree(tmp_path / "b")


def test_render_selectors(scene_dir, tmp_path):
    ref = str(scene_dir / "reference.ckpt")
    base = ["render", "--checkpoint", ref, "--scene", str(scene_dir)]
    assert main([*base, "--out", str(tmp_path / "a"), "--cameras", "all"]) == 0
    assert len(list((tmp_path / "a").iterdir())) == 9
    assert main([*base, "--out", str(tmp_path / "b"), "--cameras", "2,cam_0005"]) == 0
    assert sorted(p.name for p in (tmp_path / "b").iterdir()) == ["cam_0002.ppm", "cam_0005.ppm"]
    assert main([*base, "--out", str(tmp_path / "c"), "--cameras", "42"]) == 2
    assert main([*base, "--out", str(tmp_path / "c"), "--cameras", "cam_9999"]) == 2


def test_eval_reference_is_capped(scene_dir, tmp_path, capsys):
    csv = tmp_path / "r.csv"
    assert main(["eval", "--scene", str(scene_dir), "--checkpoint", str(scene_dir / "reference.ckpt"), "--csv", str(csv)]) == 0
    out = capsys.readouterr().out
    assert "100.000" in out
    lines = csv.read_text().splitlines()
    assert len(lines) == 1 + 2 + 1  # header, two test views, mean


def test_eval_missing_checkpoint(scene_dir, tmp_path, capsys):
    assert main(["eval", "--scene", str(scene_dir), "--checkpoint", str(tmp_path / "none.ckpt")]) == 1
    assert "none.ckpt" in capsys.readouterr().err


def test_eval_run_dir(scene_dir, tmp_path, capsys):
    run = tmp_path / "run"
    assert main(["train", "--scene", str(scene_dir), "--run", str(run), *FAST]) == 0
    capsys.readouterr()
    assert main(["eval", "--scene", str(scene_dir), "--run", str(run)]) == 0
    table = capsys.readouterr().out.strip().splitlines()
    assert len(table) == 1 + 2 + 1


# -- ablate ---------------------------------------------------------------


def test_ablate_table_and_shared_init(scene_dir, tmp_path, capsys):
    out = tmp_path / "abl"
    assert main(["ablate", "--scene", str(scene_dir), "--out", str(out), *FAST]) == 0
    table = capsys.readouterr().out.strip().splitlines()
    assert table[0].split() == ["mode", "PSNR", "SSIM"]
    assert [ln.split()[0] for ln in table[1:]] == ["baseline", "geo", "geo+opacity", "full"]
    digests = {(out / m / "initial.sha256").read_text() for m in ("baseline", "geo", "geo+opacity", "full")}
    assert len(digests) == 1
    assert len((out / "ablation.csv").read_text().splitlines()) == 5


# -- config ---------------------------------------------------------------


def test_mode_mapping():
    cases = {
        "baseline": (False, False, "baseline"),
        "geo": (True, False, "baseline"),
        "geo+opacity": (True, False, "opacity_weighted"),
        "full": (True, True, "opacity_weighted"),
    }
    for mode, (g, a, d) in cases.items():
        tc = RunConfig.load(overrides={"mode": mode}).to_train_config()
        assert (tc.use_geometric, tc.use_appearance, tc.densify.mode) == (g, a, d)
    tc = RunConfig.load(overrides={"mode": "full", "densify.mode": "baseline"}).to_train_config()
    assert tc.densify.mode == "baseline"


def test_densify_stop_defaults_to_half_run():
    assert RunConfig.load(overrides={"train.iterations": "7000"}).to_train_config().densify.stop_iter == 3500
    assert RunConfig.load(overrides={"densify.stop_iter": "900"}).to_train_config().densify.stop_iter == 900


def test_config_rejects_unknown_key():
    with pytest.raises(ConfigError):
        RunConfig.load(overrides={"schedule.q": 1})
