import json
from pathlib import Path

import numpy as np
import pytest
from click.testing import CliRunner

from layerscene.cli import main
from layerscene.serialize import load_png, load_raw_grid, save_png

SCENE = {
    "shape": [3, 16, 16],
    "seed": 7,
    "layers": [
        {
            "mask": {"kind": "box", "params": {"x0": 4, "y0": 4, "w": 6, "h": 6}},
            "prompt": "ball",
            "movement": [3, 3],
            "template": {"kind": "constant", "value": 0.8},
        },
        {
            "mask": {"kind": "full", "params": {}},
            "prompt": "sky",
            "template": {"kind": "constant", "value": -0.5},
        },
    ],
}

RUN = {"T": 30, "N": 2, "tau": 0, "guidance": 1.0,
       "denoiser": {"kind": "pointmass", "guidance": 1.0}}


@pytest.fixture
def runner():
    return CliRunner()


@pytest.fixture
def workdir(tmp_path):
    (tmp_path / "scene.json").write_text(json.dumps(SCENE))
    (tmp_path / "run.json").write_text(json.dumps(RUN))
    return tmp_path


def run_cli(runner, args):
    result = runner.invoke(main, args, catch_exceptions=False)
    assert result.exit_code == 0, result.output
    return result


def optimize(runner, workdir, out="cp.json", seed=None):
    args = [
        "optimize", "--scene", str(workdir / "scene.json"),
        "--config", str(workdir / "run.json"), "--out", str(workdir / out),
    ]
    if seed is not None:
        args += ["--seed", str(seed)]
    return run_cli(runner, args)


class TestOptimize:
    def test_writes_checkpoint_and_manifest(self, runner, workdir):
        optimize(runner, workdir)
        assert (workdir / "cp.json").exists()
        manifest = json.loads((workdir / "cp.json.manifest.json").read_text())
        assert manifest["run_config"]["T"] == 30
        assert "seconds" in manifest

    def test_same_seed_byte_identical(self, runner, workdir):
        optimize(runner, workdir, out="a.json", seed=7)
        optimize(runner, workdir, out="b.json", seed=7)
        assert (workdir / "a.json").read_bytes() == (workdir / "b.json").read_bytes()

    def test_different_seed_differs(self, runner, workdir):
        optimize(runner, workdir, out="a.json", seed=7)
        optimize(runner, workdir, out="c.json", seed=8)
        assert (workdir / "a.json").read_bytes() != (workdir / "c.json").read_bytes()

    def test_missing_scene_file_fails(self, runner, workdir):
        result = runner.invoke(
            main,
            ["optimize", "--scene", str(workdir / "nope.json"),
             "--out", str(workdir / "x.json")],
        )
        assert result.exit_code != 0
        assert "no such file" in result.output


class TestRender:
    def test_render_png_and_raw(self, runner, workdir):
        optimize(runner, workdir)
        run_cli(runner, [
            "render", "--checkpoint", str(workdir / "cp.json"),
            "--layout", "2,-1;0,0",
            "--out", str(workdir / "img.png"),
            "--raw", str(workdir / "img.f32"),
        ])
        img = load_png(workdir / "img.png")
        assert img.shape == (3, 16, 16)
        raw = load_raw_grid(workdir / "img.f32", (3, 16, 16))
        # moved box region carries the bright template
        assert abs(float(raw[:, 3:9, 6:12].mean()) - 0.8) < 0.02
        manifest = json.loads((workdir / "img.png.manifest.json").read_text())
        assert manifest["tonemap"] == {"scale": 127.5, "offset": 127.5}

    def test_bad_layout_fails(self, runner, workdir):
        optimize(runner, workdir)
        result = runner.invoke(main, [
            "render", "--checkpoint", str(workdir / "cp.json"),
            "--layout", "9,9;0,0", "--out", str(workdir / "img.png"),
        ])
        assert result.exit_code != 0


class TestSweep:
    def test_emits_count_and_manifest(self, runner, workdir):
        optimize(runner, workdir)
        run_cli(runner, [
            "sweep", "--checkpoint", str(workdir / "cp.json"),
            "--count", "9", "--outdir", str(workdir / "sweep"),
        ])
        images = sorted((workdir / "sweep").glob("view_*.png"))
        assert len(images) == 9
        manifest = json.loads((workdir / "sweep" / "manifest.json").read_text())
        assert len(manifest["images"]) == 9
        layouts = [tuple(map(tuple, e["layout"])) for e in manifest["images"]]
        assert len(set(layouts)) == 9


class TestEval:
    def test_translated_pair_fixture(self, runner, tmp_path):
        base = np.full((3, 16, 16), 0.1)
        mask_a = np.zeros((16, 16))
        mask_a[4:8, 4:8] = 1.0
        img_a = base.copy()
        img_a[:, mask_a == 1] = 0.9
        mask_b = np.roll(mask_a, (3, 2), axis=(0, 1))
        img_b = base.copy()
        img_b[:, mask_b == 1] = 0.9
        save_png(img_a, tmp_path / "a.png")
        save_png(img_b, tmp_path / "b.png")
        # mask files are plain black/white images
        from PIL import Image

        Image.fromarray((mask_a * 255).astype(np.uint8), "L").save(tmp_path / "ma.png")
        Image.fromarray((mask_b * 255).astype(np.uint8), "L").save(tmp_path / "mb.png")
        pairs = [{"name": "pair0", "image_a": "a.png", "mask_a": "ma.png",
                  "image_b": "b.png", "mask_b": "mb.png"}]
        (tmp_path / "pairs.json").write_text(json.dumps(pairs))

        runner = CliRunner()
        result = run_cli(runner, [
            "eval", "--pairs", str(tmp_path / "pairs.json"),
            "--out", str(tmp_path / "report.json"),
        ])
        report = json.loads((tmp_path / "report.json").read_text())
        rec = report["records"][0]
        assert rec["consistency"] == 1.0
        assert rec["visual_consistency"] == 0.0
        assert "consistency: mean=1.0000" in result.output


class TestEditScript:
    def test_edit_script_applies(self, runner, workdir):
        optimize(runner, workdir)
        script = [
            {"op": "move", "layer": 0, "offset": [2, 1]},
            {"op": "clone", "layer": 0, "offset": [-1, 0]},
        ]
        (workdir / "edits.json").write_text(json.dumps(script))
        run_cli(runner, [
            "edit", "--checkpoint", str(workdir / "cp.json"),
            "--script", str(workdir / "edits.json"),
            "--out", str(workdir / "cp2.json"),
        ])
        from layerscene.serialize import load_checkpoint

        cp = load_checkpoint(workdir / "cp2.json")
        assert cp.scene.K == 3
        assert cp.scene.layers[0].offset == (-1, 0)
        assert cp.scene.layers[1].offset == (2, 1)
