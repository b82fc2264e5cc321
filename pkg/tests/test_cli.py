import json
from pathlib import Path

import numpy as np
import pytest

from epic import io, synth
from epic.cli import main
from epic.fusion import LatentGrid
from epic.geometry import Trajectory

from conftest import random_pose, small_intrinsics


def _tree(d: Path) -> dict:
    """File contents keyed by relative path; the output path is dropped from meta.json."""
    out = {p.relative_to(d).as_posix(): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}
    if "meta.json" in out:
        meta = json.loads(out["meta.json"])
        meta.get("config", {}).pop("out", None)
        out["meta.json"] = meta
    return out


@pytest.fixture(scope="module")
def small_scene(tmp_path_factory):
    root = tmp_path_factory.mktemp("scene")
    spec = synth.canned_spec("two-plane-occlusion", n_frames=6, resolution=(30, 45))
    (root / "spec.json").write_text(json.dumps(synth.spec_to_dict(spec)))
    assert main(["synth", "--spec", str(root / "spec.json"), "--out", str(root / "bundle")]) == 0
    return root / "bundle"


def test_synth_layout(small_scene):
    names = {p.name for p in small_scene.iterdir()}
    assert {"frames", "depth", "flow", "visibility", "trajectory.json", "scene.json", "meta.json"} <= names
    assert len(list((small_scene / "frames").glob("*.png"))) == 6
    assert len(list((small_scene / "flow").glob("*.flo"))) == 10
    meta = json.loads((small_scene / "meta.json").read_text())
    assert meta["command"] == "synth" and meta["frames"] == 6


def test_synth_with_target(tmp_path):
    spec = synth.canned_spec("moving-box", n_frames=3, resolution=(12, 18))
    (tmp_path / "s.json").write_text(json.dumps(synth.spec_to_dict(spec)))
    assert main(["synth", "--spec", str(tmp_path / "s.json"), "--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "b" / "target_trajectory.json").exists()
    assert len(list((tmp_path / "b" / "target_frames").glob("*.png"))) == 3


def _build(scene, out, *extra):
    return main(["build-anchor", "--frames", str(scene / "frames"), "--flows", str(scene / "flow"),
                 "--out", str(out), *extra])


def test_build_anchor_matches_visibility(small_scene, tmp_path):
    assert _build(small_scene, tmp_path / "a") == 0
    a = io.read_anchor(tmp_path / "a")
    vis = np.stack(io.read_masks(small_scene / "visibility"))
    assert (a.mask_array == vis).mean() > 0.98
    assert a.metadata["kind"] == "masked"


def test_build_anchor_deterministic(small_scene, tmp_path):
    args = ("--inject", "--seed", "4")
    _build(small_scene, tmp_path / "a", *args)
    _build(small_scene, tmp_path / "b", *args)
    assert _tree(tmp_path / "a") == _tree(tmp_path / "b")
    _build(small_scene, tmp_path / "c", "--inject", "--seed", "5")
    assert _tree(tmp_path / "a") != _tree(tmp_path / "c")


def test_build_anchor_seed_ignored_without_inject(small_scene, tmp_path):
    _build(small_scene, tmp_path / "a", "--seed", "1")
    _build(small_scene, tmp_path / "b", "--seed", "2")
    a, b = _tree(tmp_path / "a"), _tree(tmp_path / "b")
    assert a == b
    assert a["meta.json"]["config"]["seed"] is None


def test_meta_reused_as_config(small_scene, tmp_path):
    _build(small_scene, tmp_path / "a", "--inject", "--seed", "9", "--ray-count", "5")
    assert main(["build-anchor", "--config", str(tmp_path / "a" / "meta.json"), "--out", str(tmp_path / "b")]) == 0
    a, b = _tree(tmp_path / "a"), _tree(tmp_path / "b")
    a.pop("meta.json"), b.pop("meta.json")
    assert a == b


def test_missing_flow_is_input_error(small_scene, tmp_path, capsys):
    flows = tmp_path / "flows"
    flows.mkdir()
    for p in (small_scene / "flow").glob("*.flo"):
        if p.name != "flow_00003_00000.flo":
            (flows / p.name).write_bytes(p.read_bytes())
    code = main(["build-anchor", "--frames", str(small_scene / "frames"), "--flows", str(flows),
                 "--out", str(tmp_path / "a")])
    assert code == 3
    assert "flow_00003_00000.flo" in capsys.readouterr().err


def test_corrupt_flow_is_input_error(small_scene, tmp_path):
    flows = tmp_path / "flows"
    flows.mkdir()
    for p in (small_scene / "flow").glob("*.flo"):
        (flows / p.name).write_bytes(p.read_bytes())
    (flows / "flow_00000_00002.flo").write_bytes(b"garbage")
    assert main(["build-anchor", "--frames", str(small_scene / "frames"), "--flows", str(flows),
                 "--out", str(tmp_path / "a")]) == 3


def test_render_anchor_variants(small_scene, tmp_path):
    base = ["render-anchor", "--image", str(small_scene / "frames" / "frame_00000.png"),
            "--depth", str(small_scene / "depth" / "depth_00000.pfm"),
            "--trajectory", str(small_scene / "trajectory.json")]
    assert main(base + ["--out", str(tmp_path / "plain")]) == 0
    plain = io.read_anchor(tmp_path / "plain")
    frame0 = io.read_image(small_scene / "frames" / "frame_00000.png")
    np.testing.assert_array_equal(plain.frames[0], frame0)

    seg = np.zeros((30, 45), bool)
    seg[10:20, 10:20] = True
    io.write_mask(tmp_path / "seg.png", seg)
    assert main(base + ["--seg", str(tmp_path / "seg.png"), "--dilation", "2", "--out", str(tmp_path / "m")]) == 0
    assert not io.read_anchor(tmp_path / "m").mask_array[0][seg].any()

    (tmp_path / "motion.json").write_text(json.dumps({"translations": [[0, 0, 0.1 * i] for i in range(6)]}))
    assert main(base + ["--object-mask", str(tmp_path / "seg.png"), "--object-motion",
                        str(tmp_path / "motion.json"), "--out", str(tmp_path / "o")]) == 0
    assert io.read_anchor(tmp_path / "o").metadata["kind"] == "object_motion"

    assert main(base + ["--seg", str(tmp_path / "seg.png"), "--object-mask", str(tmp_path / "seg.png"),
                        "--object-motion", str(tmp_path / "motion.json"), "--out", str(tmp_path / "x")]) == 2
    assert main(base + ["--object-mask", str(tmp_path / "seg.png"), "--out", str(tmp_path / "x")]) == 2


def test_render_anchor_empty_trajectory(small_scene, tmp_path, capsys):
    (tmp_path / "t.json").write_text("")
    code = main(["render-anchor", "--image", str(small_scene / "frames" / "frame_00000.png"),
                 "--depth", str(small_scene / "depth" / "depth_00000.pfm"),
                 "--trajectory", str(tmp_path / "t.json"), "--out", str(tmp_path / "a")])
    assert code == 3
    assert "line 1" in capsys.readouterr().err


def test_render_everything_excluded_is_pipeline_error(small_scene, tmp_path):
    io.write_mask(tmp_path / "seg.png", np.ones((30, 45), bool))
    code = main(["render-anchor", "--image", str(small_scene / "frames" / "frame_00000.png"),
                 "--depth", str(small_scene / "depth" / "depth_00000.pfm"),
                 "--trajectory", str(small_scene / "trajectory.json"), "--seg", str(tmp_path / "seg.png"),
                 "--out", str(tmp_path / "a")])
    assert code == 4


def test_render_v2v_identity(small_scene, tmp_path):
    t = str(small_scene / "trajectory.json")
    assert main(["render-v2v", "--frames", str(small_scene / "frames"), "--depths", str(small_scene / "depth"),
                 "--source-traj", t, "--target-traj", t, "--out", str(tmp_path / "v")]) == 0
    a = io.read_anchor(tmp_path / "v")
    np.testing.assert_array_equal(a.frames, io.read_frames(small_scene / "frames"))


def _write_trajs(d: Path, name: str, traj):
    d.mkdir(parents=True, exist_ok=True)
    io.write_trajectory(d / f"{name}.json", traj)


def test_eval_single_and_multi_seed(tmp_path, rng, capsys):
    K = small_intrinsics()
    gt = Trajectory(K, tuple(random_pose(rng) for _ in range(5)))
    _write_trajs(tmp_path / "gt", "a", gt)
    _write_trajs(tmp_path / "gt", "b", gt)
    _write_trajs(tmp_path / "pred", "a", gt)
    _write_trajs(tmp_path / "pred", "b", gt)
    assert main(["eval", "--pred", str(tmp_path / "pred"), "--gt", str(tmp_path / "gt"),
                 "--out", str(tmp_path / "r.json")]) == 0
    r = json.loads((tmp_path / "r.json").read_text())
    assert r["aggregate"]["mean"] == {"rot_err": 0.0, "trans_err": 0.0, "cammc": 0.0}
    assert "rot_err: 0.000000" in capsys.readouterr().out

    for j in range(3):
        other = Trajectory(K, tuple(random_pose(rng) for _ in range(5)))
        _write_trajs(tmp_path / "multi" / f"seed_{j}", "a", other)
        _write_trajs(tmp_path / "multi" / f"seed_{j}", "b", other if j else gt)
    assert main(["eval", "--pred", str(tmp_path / "multi"), "--gt", str(tmp_path / "gt"), "--seeds", "3",
                 "--out", str(tmp_path / "m.json")]) == 0
    m = json.loads((tmp_path / "m.json").read_text())
    assert len(m["instances"]["a"]["per_seed"]) == 3
    agg = np.mean([m["instances"][n]["std"]["rot_err"] for n in "ab"])
    assert m["aggregate"]["std"]["rot_err"] == pytest.approx(agg)

    assert main(["eval", "--pred", str(tmp_path / "multi"), "--gt", str(tmp_path / "gt"), "--seeds", "4",
                 "--out", str(tmp_path / "x.json")]) == 3


def test_eval_length_mismatch(tmp_path, rng):
    K = small_intrinsics()
    io.write_trajectory(tmp_path / "g.json", Trajectory(K, tuple(random_pose(rng) for _ in range(5))))
    io.write_trajectory(tmp_path / "p.json", Trajectory(K, tuple(random_pose(rng) for _ in range(4))))
    assert main(["eval", "--pred", str(tmp_path / "p.json"), "--gt", str(tmp_path / "g.json"),
                 "--out", str(tmp_path / "r.json")]) == 3


def test_fuse_demo(tmp_path, rng):
    io.write_latent(tmp_path / "z.eplg", LatentGrid(rng.standard_normal((2, 4, 4, 6))))
    (tmp_path / "masks").mkdir()
    for i in range(5):
        io.write_mask(tmp_path / "masks" / f"mask_{i:05d}.png", rng.random((16, 24)) < 0.3)
    for scale in ("0", "0.5"):
        out = tmp_path / f"out{scale}"
        assert main(["fuse-demo", "--z-anchor", str(tmp_path / "z.eplg"), "--masks", str(tmp_path / "masks"),
                     "--out", str(out), "--steps", "10", "--projection-scale", scale]) == 0
        audit = json.loads((out / "audit.json").read_text())
        assert audit["invisible_region_untouched"]
        assert len(list((out / "trace").glob("*.eplg"))) == 10
    again = tmp_path / "again"
    main(["fuse-demo", "--z-anchor", str(tmp_path / "z.eplg"), "--masks", str(tmp_path / "masks"),
          "--out", str(again), "--steps", "10", "--projection-scale", "0.5"])
    assert _tree(tmp_path / "out0.5") == _tree(again)


def test_rank_motion(tmp_path, capsys):
    from epic.visibility import FlowField
    for name, step in (("slow", 0.5), ("fast", 3.0)):
        d = tmp_path / name
        d.mkdir()
        io.write_flow(d, FlowField.uniform((8, 8), step, 0.0, 0, 1))
    assert main(["rank-motion", str(tmp_path / "slow"), str(tmp_path / "fast"), "--out", str(tmp_path / "r.json")]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0].endswith("fast") and lines[1].endswith("slow")
    assert main(["rank-motion", str(tmp_path / "nothing")]) == 3


def test_usage_errors():
    assert main([]) == 2
    assert main(["build-anchor"]) == 2
    assert main(["--version"]) == 0
