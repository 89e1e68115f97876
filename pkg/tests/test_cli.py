"""CLI commands, config parsing, and checkpoint format."""

import numpy as np
import pytest

import mvdit.tensor as T
from mvdit import checkpoint as ckpt_mod
from mvdit import cli, config as config_mod, model as model_mod, sceneio

MODEL_INI = """\
[model]
n_blocks = 1
dim = 16
heads = 2
patch = 2
patch_t = 1
factor = 2
views = 2
frames = 4
height = 16
width = 16
control_depth = 1
"""


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("data") / "scenes"
    sceneio.make_dataset(20, 0, out, frame_buckets=(4,), height=16, width=16,
                         n_views=2)
    return out


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory, dataset):
    base = tmp_path_factory.mktemp("run")
    cfg = base / "config.ini"
    cfg.write_text(MODEL_INI + f"""
[train]
dataset = {dataset}
total_steps = 2
batch_size = 1
log_every = 1
checkpoint_every = 1
seed = 0
buckets = 16x16xT4
""")
    out = base / "out"
    assert cli.main(["train", "--config", str(cfg), "--out", str(out)]) == 0
    return base, cfg, out


# ---------------------------------------------------------------------------
# config


def test_config_collects_every_violation():
    bad = """
[model]
dim = 10
heads = 4
[train]
batch_size = 0
total_steps = -1
buckets =
[sampler]
steps = 0
"""
    with pytest.raises(config_mod.ConfigError) as e:
        config_mod.parse_config(bad)
    msg = str(e.value)
    for fragment in ("dim", "batch_size", "total_steps", "buckets", "steps"):
        assert fragment in msg, fragment
    assert len(e.value.violations) >= 4


def test_config_unknown_key_and_bad_type():
    with pytest.raises(config_mod.ConfigError) as e:
        config_mod.parse_config("[train]\nlr = fast\nwarp_drive = on\n")
    assert len(e.value.violations) == 2


def test_config_text_round_trip():
    run = config_mod.parse_config(MODEL_INI)
    again = config_mod.parse_config(config_mod.config_text(run))
    assert again.model == run.model
    assert again.buckets == run.buckets
    assert config_mod.model_section_matches(config_mod.config_text(run),
                                            config_mod.config_text(again))


def test_config_defaults():
    run = config_mod.parse_config("")
    assert run.lr == 1e-3 and (run.beta1, run.beta2) == (0.9, 0.999)
    assert run.sampler.steps == 30
    assert (run.sampler.lambda_t, run.sampler.lambda_l,
            run.sampler.lambda_r) == (7.0, 2.0, 2.0)


# ---------------------------------------------------------------------------
# train


def test_train_checkpoint_step_counter(run_dir):
    _, _, out = run_dir
    snapshot, step, arrays = ckpt_mod.load_checkpoint(out / "ckpt_final.mvdt")
    assert step == 2
    assert (out / "ckpt_000001.mvdt").exists()
    assert (out / "ckpt_000002.mvdt").exists()
    run, params, step2 = cli.load_model(out / "ckpt_final.mvdt")
    assert step2 == 2 and run.model.dim == 16


def test_train_metrics_log_schema(run_dir):
    _, _, out = run_dir
    lines = (out / "metrics.log").read_text().splitlines()
    assert len(lines) == 2
    for line in lines:
        keys = dict(kv.split("=") for kv in line.split())
        assert set(keys) == {"step", "loss", "wall_ms"}
        assert np.isfinite(float(keys["loss"]))


def test_train_bitwise_deterministic(run_dir, tmp_path):
    _, cfg, out = run_dir
    out2 = tmp_path / "again"
    assert cli.main(["train", "--config", str(cfg), "--out", str(out2)]) == 0
    a = (out / "ckpt_final.mvdt").read_bytes()
    b = (out2 / "ckpt_final.mvdt").read_bytes()
    assert a == b


def test_train_invalid_config_no_side_effects(tmp_path, capsys):
    cfg = tmp_path / "bad.ini"
    cfg.write_text("[model]\ndim = 10\nheads = 4\n")
    out = tmp_path / "never"
    assert cli.main(["train", "--config", str(cfg), "--out", str(out)]) == 2
    assert not out.exists()
    assert "dim" in capsys.readouterr().err


def test_train_missing_dataset(tmp_path, capsys):
    cfg = tmp_path / "c.ini"
    cfg.write_text(MODEL_INI + "[train]\ndataset = /nonexistent/path\n")
    assert cli.main(["train", "--config", str(cfg),
                     "--out", str(tmp_path / "o")]) == 2
    assert "does not exist" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# sample


def _scene_path(dataset, i=0):
    return sceneio.read_manifest(dataset / "manifest.tsv")[i][0]


def test_sample_writes_scene_and_png(run_dir, dataset, tmp_path):
    _, _, out = run_dir
    clip = tmp_path / "clip.toyw"
    assert cli.main(["sample", "--checkpoint", str(out / "ckpt_final.mvdt"),
                     "--scene", str(_scene_path(dataset)),
                     "--out", str(clip), "--steps", "2"]) == 0
    rec = sceneio.read_scene(clip)
    assert rec.video.shape == (2, 4, 3, 16, 16)
    assert clip.with_suffix(".png").exists()


def test_sample_seed_determinism(run_dir, dataset, tmp_path):
    _, _, out = run_dir
    args = ["sample", "--checkpoint", str(out / "ckpt_final.mvdt"),
            "--scene", str(_scene_path(dataset)), "--steps", "2"]
    paths = [tmp_path / n for n in ("a.toyw", "b.toyw", "c.toyw")]
    assert cli.main(args + ["--out", str(paths[0]), "--seed", "1"]) == 0
    assert cli.main(args + ["--out", str(paths[1]), "--seed", "1"]) == 0
    assert cli.main(args + ["--out", str(paths[2]), "--seed", "2"]) == 0
    assert paths[0].read_bytes() == paths[1].read_bytes()
    assert paths[0].read_bytes() != paths[2].read_bytes()


def test_sampler_defaults_and_night_rule():
    run = config_mod.parse_config("")
    import argparse
    ns = argparse.Namespace(steps=None, lambda_t=None, lambda_l=None,
                            lambda_r=None, seed=0)
    day = cli._resolve_sampler(run, ns, "day clear light traffic")
    assert (day.steps, day.lambda_t, day.lambda_l, day.lambda_r) == \
        (30, 7.0, 2.0, 2.0)
    night = cli._resolve_sampler(run, ns, "night heavy traffic")
    assert night.lambda_t == 1.0
    ns.lambda_t = 4.0  # explicit flag overrides the night rule
    assert cli._resolve_sampler(run, ns, "night heavy traffic").lambda_t == 4.0


def test_sample_k_requires_enough_frames(run_dir, dataset, tmp_path, capsys):
    _, _, out = run_dir
    assert cli.main(["sample", "--checkpoint", str(out / "ckpt_final.mvdt"),
                     "--scene", str(_scene_path(dataset)),
                     "--out", str(tmp_path / "x.toyw"),
                     "--steps", "2", "--k", "9"]) == 2


# ---------------------------------------------------------------------------
# rollout


def test_rollout_single_clip_matches_sample(run_dir, dataset, tmp_path):
    _, _, out = run_dir
    scene = str(_scene_path(dataset))
    ckpt = str(out / "ckpt_final.mvdt")
    a = tmp_path / "sample.toyw"
    b = tmp_path / "rollout.toyw"
    assert cli.main(["sample", "--checkpoint", ckpt, "--scene", scene,
                     "--out", str(a), "--steps", "2"]) == 0
    assert cli.main(["rollout", "--checkpoint", ckpt, "--scenes", scene,
                     "--clips", "1", "--k", "1", "--out", str(b),
                     "--steps", "2"]) == 0
    assert a.read_bytes() == b.read_bytes()


def test_rollout_length_formula(run_dir, dataset, tmp_path):
    _, _, out = run_dir
    clip = tmp_path / "long.toyw"
    assert cli.main(["rollout", "--checkpoint", str(out / "ckpt_final.mvdt"),
                     "--scenes", str(_scene_path(dataset)),
                     "--clips", "3", "--k", "1", "--out", str(clip),
                     "--steps", "2"]) == 0
    rec = sceneio.read_scene(clip)
    assert rec.video.shape[1] == 4 + 2 * (4 - 1)


def test_rollout_rejects_k_ge_t(run_dir, dataset, tmp_path, capsys):
    _, _, out = run_dir
    assert cli.main(["rollout", "--checkpoint", str(out / "ckpt_final.mvdt"),
                     "--scenes", str(_scene_path(dataset)),
                     "--clips", "2", "--k", "4",
                     "--out", str(tmp_path / "x.toyw"), "--steps", "2"]) == 2


# ---------------------------------------------------------------------------
# eval


def test_eval_report_schema(run_dir, dataset, tmp_path, capsys):
    _, _, out = run_dir
    report_path = tmp_path / "report.txt"
    assert cli.main(["eval", "--checkpoint", str(out / "ckpt_final.mvdt"),
                     "--dataset", str(dataset), "--bucket", "16x16xT4",
                     "--n", "16", "--steps", "1",
                     "--out", str(report_path)]) == 0
    text = report_path.read_text()
    keys = dict(line.split("=", 1) for line in text.splitlines())
    assert set(keys) == {"feat_dist", "layout_adherence", "temp_consistency",
                         "n", "seed"}
    assert float(keys["feat_dist"]) >= 0.0
    assert keys["n"] == "16"


def test_eval_insufficient_scenes(run_dir, dataset, capsys):
    _, _, out = run_dir
    assert cli.main(["eval", "--checkpoint", str(out / "ckpt_final.mvdt"),
                     "--dataset", str(dataset), "--bucket", "16x16xT4",
                     "--n", "999"]) == 2


# ---------------------------------------------------------------------------
# gradcheck


def test_gradcheck_passes(capsys):
    assert cli.main(["gradcheck", "--coords", "2", "--top", "2"]) == 0
    out = capsys.readouterr().out
    assert "verdict=PASS" in out
    assert "param=" in out  # per-parameter-group worst errors


def test_gradcheck_corrupt_fails(capsys):
    assert cli.main(["gradcheck", "--coords", "2", "--corrupt"]) == 1
    assert "verdict=FAIL" in capsys.readouterr().out


# ---------------------------------------------------------------------------
# checkpoint format


def _tiny_params():
    cfg = model_mod.ModelConfig(n_blocks=1, dim=16, heads=2, views=1,
                                frames=2, height=8, width=8, control_depth=0)
    return cfg, model_mod.init_params(cfg, np.random.default_rng(0))


def test_checkpoint_round_trip_bitwise(tmp_path):
    cfg, params = _tiny_params()
    path = tmp_path / "c.mvdt"
    ckpt_mod.save_checkpoint(path, "snapshot", 7, params,
                             {"opt.step": np.array([3.0], dtype=np.float32)})
    snapshot, step, arrays = ckpt_mod.load_checkpoint(path)
    assert (snapshot, step) == ("snapshot", 7)
    for name, p in params.items():
        assert np.array_equal(arrays[name], p.data)
    assert arrays["opt.step"][0] == 3.0


def test_checkpoint_checksum_verified(tmp_path):
    cfg, params = _tiny_params()
    path = tmp_path / "c.mvdt"
    ckpt_mod.save_checkpoint(path, "s", 0, params)
    blob = bytearray(path.read_bytes())
    blob[-3] ^= 0xFF  # flip a bit in the data section
    path.write_bytes(bytes(blob))
    with pytest.raises(ValueError, match="checksum"):
        ckpt_mod.load_checkpoint(path)


def test_checkpoint_bad_magic(tmp_path):
    p = tmp_path / "x.mvdt"
    p.write_bytes(b"JUNK" + b"\x00" * 16)
    with pytest.raises(ValueError, match="magic"):
        ckpt_mod.load_checkpoint(p)


def test_restore_rejects_mismatched_model(tmp_path):
    cfg, params = _tiny_params()
    path = tmp_path / "c.mvdt"
    ckpt_mod.save_checkpoint(path, "s", 0, params)
    _, _, arrays = ckpt_mod.load_checkpoint(path)
    other_cfg = model_mod.ModelConfig(n_blocks=1, dim=8, heads=2, views=1,
                                      frames=2, height=8, width=8,
                                      control_depth=0)
    other = model_mod.init_params(other_cfg, np.random.default_rng(0))
    before = {k: p.data.copy() for k, p in other.items()}
    with pytest.raises(ValueError):
        ckpt_mod.restore_params(other, arrays)
    # failed before any weight was touched
    assert all(np.array_equal(before[k], other[k].data) for k in other)


def test_restore_missing_parameter(tmp_path):
    cfg, params = _tiny_params()
    path = tmp_path / "c.mvdt"
    ckpt_mod.save_checkpoint(path, "s", 0, params)
    _, _, arrays = ckpt_mod.load_checkpoint(path)
    del arrays["final.w"]
    with pytest.raises(ValueError, match="missing"):
        ckpt_mod.restore_params(params, arrays)
